fn main() {
    std::process::exit(colsem_core::cli::run());
}

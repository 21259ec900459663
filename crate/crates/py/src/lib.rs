use pyo3::prelude::*;

#[pymodule]
fn colsem(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}

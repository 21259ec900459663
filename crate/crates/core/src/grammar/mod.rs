//! GBNF grammar support for constrained decoding: parsing, compilation
//! from an ontology, incremental recognition, token masking, and the
//! constrained decode loop itself.
//!
//! The supported notation is the subset the class grammars need: one rule
//! per line (`name ::= alt | alt`), double-quoted terminals, bare
//! nonterminal identifiers (hyphens allowed), `#` comments. No repetition
//! operators, character classes, ranges, or recursive rules.

mod decode;
mod mask;
mod recognizer;

pub use decode::{decode_constrained, DecodeConfig, DecodeError, DecodeStrategy};
pub use mask::TokenMasker;
pub use recognizer::RecognizerState;

use indexmap::IndexMap;
use thiserror::Error;

use crate::model::Ontology;

pub const START_RULE: &str = "root";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GrammarError {
    #[error("syntax error at line {line}, column {col}: {message}")]
    Syntax {
        line: usize,
        col: usize,
        message: String,
    },
    #[error("undefined nonterminal {name:?} referenced at line {line}")]
    UndefinedNonterminal { name: String, line: usize },
    #[error("rule {name:?} defined more than once (line {line})")]
    DuplicateRule { name: String, line: usize },
    #[error("grammar has no {START_RULE:?} rule")]
    MissingRoot,
    #[error("rule {name:?} is recursive; recursion is outside the supported subset")]
    RecursiveRules { name: String },
    #[error("ontology shape not supported: {0}")]
    DepthUnsupported(String),
}

/// A grammar symbol: a literal byte string or a reference to another rule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Symbol {
    Terminal(String),
    NonTerminal(String),
}

pub type Alternative = Vec<Symbol>;

/// A parsed, validated GBNF grammar. Rules keep their definition order;
/// the start rule is always `root`.
#[derive(Debug, Clone)]
pub struct Grammar {
    rules: IndexMap<String, Vec<Alternative>>,
    compiled: Compiled,
}

/// Index-based view of the rules used by the recognizer hot path.
#[derive(Debug, Clone)]
pub(crate) struct Compiled {
    pub(crate) rules: Vec<Vec<Vec<CompiledSymbol>>>,
    pub(crate) start: usize,
}

#[derive(Debug, Clone)]
pub(crate) enum CompiledSymbol {
    Terminal(Vec<u8>),
    NonTerminal(usize),
}

impl Grammar {
    fn build(rules: IndexMap<String, Vec<Alternative>>) -> Result<Self, GrammarError> {
        let start = rules
            .get_index_of(START_RULE)
            .ok_or(GrammarError::MissingRoot)?;
        detect_recursion(&rules)?;
        let compiled = Compiled {
            start,
            rules: rules
                .values()
                .map(|alts| {
                    alts.iter()
                        .map(|alt| {
                            alt.iter()
                                .map(|sym| match sym {
                                    Symbol::Terminal(t) => {
                                        CompiledSymbol::Terminal(t.as_bytes().to_vec())
                                    }
                                    Symbol::NonTerminal(n) => CompiledSymbol::NonTerminal(
                                        rules.get_index_of(n).expect("validated reference"),
                                    ),
                                })
                                .collect()
                        })
                        .collect()
                })
                .collect(),
        };
        Ok(Self { rules, compiled })
    }

    pub fn start(&self) -> &str {
        START_RULE
    }

    pub fn rule_count(&self) -> usize {
        self.rules.len()
    }

    pub fn rule_names(&self) -> impl Iterator<Item = &str> {
        self.rules.keys().map(|s| s.as_str())
    }

    pub fn rule(&self, name: &str) -> Option<&[Alternative]> {
        self.rules.get(name).map(|alts| alts.as_slice())
    }

    pub fn rules(&self) -> impl Iterator<Item = (&str, &[Alternative])> {
        self.rules.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    /// Canonical text form: one rule per line, single spaces around `::=`
    /// and `|`. Parsing the output reproduces the grammar.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (name, alts) in &self.rules {
            out.push_str(name);
            out.push_str(" ::= ");
            for (i, alt) in alts.iter().enumerate() {
                if i > 0 {
                    out.push_str(" | ");
                }
                for (j, sym) in alt.iter().enumerate() {
                    if j > 0 {
                        out.push(' ');
                    }
                    match sym {
                        Symbol::Terminal(t) => {
                            out.push('"');
                            out.push_str(&escape_terminal(t));
                            out.push('"');
                        }
                        Symbol::NonTerminal(n) => out.push_str(n),
                    }
                }
            }
            out.push('\n');
        }
        out
    }

    pub(crate) fn compiled(&self) -> &Compiled {
        &self.compiled
    }

    /// Recognizer state before any bytes are consumed.
    pub fn start_state(&self) -> RecognizerState {
        RecognizerState::initial(&self.compiled)
    }

    /// Consume `bytes` from `state`. Returns the successor state, or `None`
    /// when no parse position survives (the input left the language's
    /// prefix set).
    pub fn advance(&self, state: &RecognizerState, bytes: &[u8]) -> Option<RecognizerState> {
        state.advance(&self.compiled, bytes)
    }

    /// Whole-string membership test.
    pub fn accepts(&self, text: &str) -> bool {
        self.advance(&self.start_state(), text.as_bytes())
            .map(|s| s.is_accepting())
            .unwrap_or(false)
    }
}

fn escape_terminal(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    for ch in raw.chars() {
        match ch {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            other => out.push(other),
        }
    }
    out
}

fn detect_recursion(rules: &IndexMap<String, Vec<Alternative>>) -> Result<(), GrammarError> {
    #[derive(Clone, Copy, PartialEq)]
    enum Color {
        White,
        Gray,
        Black,
    }
    fn visit(
        name: &str,
        rules: &IndexMap<String, Vec<Alternative>>,
        colors: &mut IndexMap<String, Color>,
    ) -> Result<(), GrammarError> {
        colors.insert(name.to_string(), Color::Gray);
        for alt in &rules[name] {
            for sym in alt {
                if let Symbol::NonTerminal(n) = sym {
                    match colors.get(n).copied().unwrap_or(Color::White) {
                        Color::Gray => {
                            return Err(GrammarError::RecursiveRules { name: n.clone() })
                        }
                        Color::White => visit(n, rules, colors)?,
                        Color::Black => {}
                    }
                }
            }
        }
        colors.insert(name.to_string(), Color::Black);
        Ok(())
    }
    let mut colors = IndexMap::new();
    for name in rules.keys() {
        if colors.get(name).copied().unwrap_or(Color::White) == Color::White {
            visit(name, rules, &mut colors)?;
        }
    }
    Ok(())
}

#[derive(Debug, PartialEq)]
enum Token {
    Ident(String),
    Define,
    Pipe,
    Literal(String),
}

fn lex_line(line: &str, line_no: usize) -> Result<Vec<(Token, usize)>, GrammarError> {
    let chars: Vec<char> = line.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let col = i + 1;
        let c = chars[i];
        if c == ' ' || c == '\t' {
            i += 1;
        } else if c == '#' {
            break;
        } else if c == '"' {
            let mut lit = String::new();
            i += 1;
            loop {
                if i >= chars.len() {
                    return Err(GrammarError::Syntax {
                        line: line_no,
                        col,
                        message: "unterminated string literal".into(),
                    });
                }
                match chars[i] {
                    '"' => {
                        i += 1;
                        break;
                    }
                    '\\' => {
                        i += 1;
                        let esc = chars.get(i).copied().ok_or(GrammarError::Syntax {
                            line: line_no,
                            col,
                            message: "unterminated escape".into(),
                        })?;
                        lit.push(match esc {
                            '"' => '"',
                            '\\' => '\\',
                            'n' => '\n',
                            't' => '\t',
                            other => {
                                return Err(GrammarError::Syntax {
                                    line: line_no,
                                    col: i + 1,
                                    message: format!("unsupported escape \\{other}"),
                                })
                            }
                        });
                        i += 1;
                    }
                    other => {
                        lit.push(other);
                        i += 1;
                    }
                }
            }
            out.push((Token::Literal(lit), col));
        } else if c == ':' {
            if chars.get(i..i + 3) == Some(&[':', ':', '=']) {
                out.push((Token::Define, col));
                i += 3;
            } else {
                return Err(GrammarError::Syntax {
                    line: line_no,
                    col,
                    message: "expected ::=".into(),
                });
            }
        } else if c == '|' {
            out.push((Token::Pipe, col));
            i += 1;
        } else if c.is_ascii_alphabetic() {
            let start = i;
            while i < chars.len()
                && (chars[i].is_ascii_alphanumeric() || chars[i] == '_' || chars[i] == '-')
            {
                i += 1;
            }
            out.push((Token::Ident(chars[start..i].iter().collect()), col));
        } else {
            return Err(GrammarError::Syntax {
                line: line_no,
                col,
                message: format!("unexpected character {c:?}"),
            });
        }
    }
    Ok(out)
}

/// Parse GBNF text into a validated [`Grammar`].
pub fn parse_gbnf(text: &str) -> Result<Grammar, GrammarError> {
    let mut rules: IndexMap<String, Vec<Alternative>> = IndexMap::new();
    let mut ref_lines: Vec<(String, usize)> = Vec::new();
    for (idx, raw_line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let tokens = lex_line(raw_line, line_no)?;
        if tokens.is_empty() {
            continue;
        }
        let mut it = tokens.into_iter();
        let name = match it.next() {
            Some((Token::Ident(name), _)) => name,
            Some((_, col)) => {
                return Err(GrammarError::Syntax {
                    line: line_no,
                    col,
                    message: "expected rule name".into(),
                })
            }
            None => unreachable!(),
        };
        match it.next() {
            Some((Token::Define, _)) => {}
            other => {
                return Err(GrammarError::Syntax {
                    line: line_no,
                    col: other.map(|(_, c)| c).unwrap_or(1),
                    message: "expected ::= after rule name".into(),
                })
            }
        }
        let mut alternatives: Vec<Alternative> = Vec::new();
        let mut current: Alternative = Vec::new();
        let mut last_col = 1;
        for (tok, col) in it {
            last_col = col;
            match tok {
                Token::Pipe => {
                    if current.is_empty() {
                        return Err(GrammarError::Syntax {
                            line: line_no,
                            col,
                            message: "empty alternative (use \"\" for the empty string)".into(),
                        });
                    }
                    alternatives.push(std::mem::take(&mut current));
                }
                Token::Ident(n) => {
                    ref_lines.push((n.clone(), line_no));
                    current.push(Symbol::NonTerminal(n));
                }
                Token::Literal(lit) => current.push(Symbol::Terminal(lit)),
                Token::Define => {
                    return Err(GrammarError::Syntax {
                        line: line_no,
                        col,
                        message: "unexpected ::=".into(),
                    })
                }
            }
        }
        if current.is_empty() {
            return Err(GrammarError::Syntax {
                line: line_no,
                col: last_col,
                message: "empty alternative (use \"\" for the empty string)".into(),
            });
        }
        alternatives.push(current);
        if rules.contains_key(&name) {
            return Err(GrammarError::DuplicateRule {
                name,
                line: line_no,
            });
        }
        rules.insert(name, alternatives);
    }
    for (name, line) in &ref_lines {
        if !rules.contains_key(name) {
            return Err(GrammarError::UndefinedNonterminal {
                name: name.clone(),
                line: *line,
            });
        }
    }
    Grammar::build(rules)
}

/// Compile an ontology into GBNF text whose language is exactly the set of
/// uppercase leaf paths prefixed with `Semantic-type::`.
///
/// The shape mirrors the class-grammar layout: a choice rule named after
/// the root lists the superclasses, each superclass rule emits its own
/// uppercase segment and defers to a `sub-` rule holding the leaf
/// alternatives. Output is bit-stable for a given ontology.
pub fn emit_gbnf(ontology: &Ontology) -> Result<String, GrammarError> {
    let root = ontology
        .node(ontology.root())
        .expect("ontology always has a root");
    if root.children().is_empty() {
        return Err(GrammarError::DepthUnsupported(
            "ontology has no classes below the root".into(),
        ));
    }
    if ontology.depth() > 3 {
        return Err(GrammarError::DepthUnsupported(format!(
            "ontology depth {} exceeds the two-level class grammar",
            ontology.depth()
        )));
    }

    let mut used: std::collections::BTreeSet<String> =
        [START_RULE.to_string(), "answer".to_string()].into();
    let choice_rule = unique_ident(root.name(), &mut used);

    let mut supers = Vec::new();
    let mut choice_alts = Vec::new();
    for child_id in root.children() {
        let child = ontology.node(*child_id).expect("child exists");
        if child.is_leaf() {
            choice_alts.push(format!("\"{}\"", escape_terminal(&upper(child.name()))));
        } else {
            let nt = unique_ident(child.name(), &mut used);
            choice_alts.push(nt.clone());
            supers.push((nt, child));
        }
    }

    let mut out = String::new();
    out.push_str(&format!("{START_RULE} ::= answer\n"));
    out.push_str(&format!(
        "answer ::= \"Semantic-type::{}::\" {}\n",
        escape_terminal(&upper(root.name())),
        choice_rule
    ));
    out.push_str(&format!("{} ::= {}\n", choice_rule, choice_alts.join(" | ")));
    for (nt, node) in supers {
        out.push_str(&format!(
            "{} ::= \"{}::\" sub-{}\n",
            nt,
            escape_terminal(&upper(node.name())),
            nt
        ));
        let leaves: Vec<String> = node
            .children()
            .iter()
            .map(|c| {
                let leaf = ontology.node(*c).expect("leaf exists");
                format!("\"{}\"", escape_terminal(&upper(leaf.name())))
            })
            .collect();
        out.push_str(&format!("sub-{} ::= {}\n", nt, leaves.join(" | ")));
    }
    Ok(out)
}

fn upper(canonical: &str) -> String {
    canonical.to_uppercase()
}

/// Turn a canonical class name into a valid, unused rule identifier.
fn unique_ident(canonical: &str, used: &mut std::collections::BTreeSet<String>) -> String {
    let mut base: String = canonical
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect();
    if !base.chars().next().map(|c| c.is_ascii_alphabetic()).unwrap_or(false) {
        base.insert(0, 'n');
    }
    let mut candidate = base.clone();
    let mut suffix = 2;
    while used.contains(&candidate) {
        candidate = format!("{base}-{suffix}");
        suffix += 1;
    }
    used.insert(candidate.clone());
    candidate
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Ontology;

    /// The two-level class grammar with elided alternatives completed.
    pub(crate) const LISTING_GRAMMAR: &str = r#"
root ::= answer
answer ::= "Semantic-type::" property
property ::= event | location | contact | meta
event ::= "EVENT::" sub-event
sub-event ::= "TITLE" | "STARTDATE" | "DURATION"
location ::= "LOCATION::" sublocation
sublocation ::= "LAT" | "LONG" | "ZIP" | "CITY" | "STATE"
contact ::= "CONTACT::" sub-contact
sub-contact ::= "WEBSITE" | "URL" | "PHONE" | "EMAIL"
meta ::= "META::" sub-meta
sub-meta ::= "RATING" | "TOTAL_NUMBER_OF_RATINGS"
"#;

    #[test]
    fn parse_single_rule() {
        let g = parse_gbnf(r#"root ::= "A" | "B""#).unwrap();
        assert_eq!(g.rule_count(), 1);
        assert_eq!(g.rule("root").unwrap().len(), 2);
    }

    #[test]
    fn parse_listing_grammar_rule_names() {
        let g = parse_gbnf(LISTING_GRAMMAR).unwrap();
        let names: Vec<&str> = g.rule_names().collect();
        assert_eq!(
            names,
            vec![
                "root",
                "answer",
                "property",
                "event",
                "sub-event",
                "location",
                "sublocation",
                "contact",
                "sub-contact",
                "meta",
                "sub-meta",
            ]
        );
    }

    #[test]
    fn undefined_nonterminal_rejected() {
        let err = parse_gbnf("root ::= foo").unwrap_err();
        assert_eq!(
            err,
            GrammarError::UndefinedNonterminal {
                name: "foo".into(),
                line: 1
            }
        );
    }

    #[test]
    fn missing_root_rejected() {
        assert_eq!(
            parse_gbnf(r#"answer ::= "A""#).unwrap_err(),
            GrammarError::MissingRoot
        );
    }

    #[test]
    fn duplicate_rule_rejected() {
        let err = parse_gbnf("root ::= \"A\"\nroot ::= \"B\"").unwrap_err();
        assert!(matches!(err, GrammarError::DuplicateRule { line: 2, .. }));
    }

    #[test]
    fn empty_alternative_rejected() {
        assert!(matches!(
            parse_gbnf(r#"root ::= "A" | | "B""#).unwrap_err(),
            GrammarError::Syntax { .. }
        ));
        // The empty string is spelled explicitly.
        let g = parse_gbnf(r#"root ::= "A" | """#).unwrap();
        assert!(g.accepts(""));
        assert!(g.accepts("A"));
    }

    #[test]
    fn recursion_rejected() {
        let err = parse_gbnf("root ::= \"x\" root").unwrap_err();
        assert!(matches!(err, GrammarError::RecursiveRules { .. }));
        let err = parse_gbnf("root ::= a\na ::= b\nb ::= a \"x\"").unwrap_err();
        assert!(matches!(err, GrammarError::RecursiveRules { .. }));
    }

    #[test]
    fn syntax_error_carries_position() {
        match parse_gbnf("root ::= $").unwrap_err() {
            GrammarError::Syntax { line, col, .. } => {
                assert_eq!(line, 1);
                assert_eq!(col, 10);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let g = parse_gbnf("# header\n\nroot ::= \"A\" # trailing\n").unwrap();
        assert_eq!(g.rule_count(), 1);
        assert!(g.accepts("A"));
    }

    #[test]
    fn render_round_trips() {
        let g = parse_gbnf(LISTING_GRAMMAR).unwrap();
        let rendered = g.render();
        let reparsed = parse_gbnf(&rendered).unwrap();
        assert_eq!(reparsed.render(), rendered);
    }

    fn two_leaf_ontology() -> Ontology {
        let mut o = Ontology::new("property").unwrap();
        let loc = o.add_child(o.root(), "location").unwrap();
        o.add_child(loc, "a").unwrap();
        o.add_child(loc, "b").unwrap();
        o
    }

    #[test]
    fn emit_two_leaf_grammar() {
        let text = emit_gbnf(&two_leaf_ontology()).unwrap();
        let g = parse_gbnf(&text).unwrap();
        assert!(g.accepts("Semantic-type::PROPERTY::LOCATION::A"));
        assert!(g.accepts("Semantic-type::PROPERTY::LOCATION::B"));
        assert!(!g.accepts("Semantic-type::PROPERTY::LOCATION::C"));
        assert!(!g.accepts("Semantic-type::PROPERTY::LOCATION::"));
    }

    #[test]
    fn emit_rejects_root_only_and_deep_trees() {
        let o = Ontology::new("property").unwrap();
        assert!(matches!(
            emit_gbnf(&o).unwrap_err(),
            GrammarError::DepthUnsupported(_)
        ));
        let mut o = Ontology::new("property").unwrap();
        let a = o.add_child(o.root(), "a").unwrap();
        let b = o.add_child(a, "b").unwrap();
        o.add_child(b, "c").unwrap();
        assert!(matches!(
            emit_gbnf(&o).unwrap_err(),
            GrammarError::DepthUnsupported(_)
        ));
    }

    #[test]
    fn emit_is_bit_stable() {
        let a = emit_gbnf(&two_leaf_ontology()).unwrap();
        let b = emit_gbnf(&two_leaf_ontology()).unwrap();
        assert_eq!(a, b);
        assert!(a.contains("answer ::= \"Semantic-type::PROPERTY::\" property"));
        assert!(a.contains("sub-location ::= \"A\" | \"B\""));
    }

    #[test]
    fn emit_fixture_has_leaf_alternatives() {
        let mut o = Ontology::new("property").unwrap();
        let loc = o.add_child(o.root(), "location").unwrap();
        for leaf in ["lat", "long", "zip"] {
            o.add_child(loc, leaf).unwrap();
        }
        let text = emit_gbnf(&o).unwrap();
        assert!(text.contains("\"LAT\" | \"LONG\" | \"ZIP\""));
    }

    #[test]
    fn emit_handles_direct_leaves_under_root() {
        let mut o = Ontology::new("property").unwrap();
        let loc = o.add_child(o.root(), "location").unwrap();
        o.add_child(loc, "zip").unwrap();
        o.add_child(o.root(), "misc").unwrap();
        let g = parse_gbnf(&emit_gbnf(&o).unwrap()).unwrap();
        assert!(g.accepts("Semantic-type::PROPERTY::LOCATION::ZIP"));
        assert!(g.accepts("Semantic-type::PROPERTY::MISC"));
    }
}

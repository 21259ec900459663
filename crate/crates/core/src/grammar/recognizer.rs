//! Frontier-set incremental recognizer.
//!
//! A state holds every viable parse position at once, so masking can ask
//! "is there any continuation" rather than committing to one parse.
//! Positions carry a continuation stack of (rule, alternative, symbol)
//! frames plus a byte offset inside the current terminal: subword tokens
//! may end mid-terminal. Grammars are non-recursive, which bounds stack
//! depth by the rule count.

use std::collections::BTreeSet;

use super::{Compiled, CompiledSymbol};

/// (rule, alternative, symbol index), bottom of the stack first.
type Frame = (u32, u32, u32);

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub(crate) struct Position {
    /// Empty stack marks a position that has fully consumed the start rule.
    stack: Vec<Frame>,
    /// Byte offset inside the current terminal symbol.
    offset: u32,
}

/// The set of parse positions reachable after the consumed bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecognizerState {
    positions: BTreeSet<Position>,
    accepting: bool,
    consumed: usize,
}

impl RecognizerState {
    pub(crate) fn initial(compiled: &Compiled) -> Self {
        let seeds: Vec<Position> = (0..compiled.rules[compiled.start].len())
            .map(|alt| Position {
                stack: vec![(compiled.start as u32, alt as u32, 0)],
                offset: 0,
            })
            .collect();
        let (positions, accepting) = closure(compiled, seeds);
        Self {
            positions,
            accepting,
            consumed: 0,
        }
    }

    /// True when some frontier position has fully consumed the start rule.
    pub fn is_accepting(&self) -> bool {
        self.accepting
    }

    /// Bytes consumed from the start state to reach this state.
    pub fn consumed(&self) -> usize {
        self.consumed
    }

    /// Number of live parse positions.
    pub fn frontier_size(&self) -> usize {
        self.positions.len()
    }

    pub(crate) fn positions(&self) -> &BTreeSet<Position> {
        &self.positions
    }

    pub(crate) fn advance(&self, compiled: &Compiled, bytes: &[u8]) -> Option<Self> {
        let mut positions = self.positions.clone();
        let mut accepting = self.accepting;
        for b in bytes {
            let (next, acc) = step_byte(compiled, &positions, *b);
            if next.is_empty() {
                return None;
            }
            positions = next;
            accepting = acc;
        }
        Some(Self {
            positions,
            accepting,
            consumed: self.consumed + bytes.len(),
        })
    }

}

/// Expand a set of raw positions to normal form: every surviving position
/// either sits inside a nonempty terminal or is an empty-stack accept
/// marker. Returns the normalized set and whether any position accepts.
pub(crate) fn closure(
    compiled: &Compiled,
    seeds: Vec<Position>,
) -> (BTreeSet<Position>, bool) {
    let mut out = BTreeSet::new();
    let mut accepting = false;
    let mut seen = BTreeSet::new();
    let mut work = seeds;
    while let Some(pos) = work.pop() {
        if !seen.insert(pos.clone()) {
            continue;
        }
        let Some(&(rule, alt, sym)) = pos.stack.last() else {
            accepting = true;
            out.insert(pos);
            continue;
        };
        let alternative = &compiled.rules[rule as usize][alt as usize];
        if sym as usize == alternative.len() {
            // End of this alternative: pop and move the parent past the
            // nonterminal it was expanding.
            let mut stack = pos.stack.clone();
            stack.pop();
            if let Some(parent) = stack.last_mut() {
                parent.2 += 1;
            }
            work.push(Position { stack, offset: 0 });
            continue;
        }
        match &alternative[sym as usize] {
            CompiledSymbol::Terminal(bytes) => {
                if (pos.offset as usize) < bytes.len() {
                    out.insert(pos);
                } else {
                    // Empty terminal (or fully consumed): skip over it.
                    let mut stack = pos.stack.clone();
                    stack.last_mut().expect("nonempty").2 += 1;
                    work.push(Position { stack, offset: 0 });
                }
            }
            CompiledSymbol::NonTerminal(target) => {
                for next_alt in 0..compiled.rules[*target].len() {
                    let mut stack = pos.stack.clone();
                    stack.push((*target as u32, next_alt as u32, 0));
                    work.push(Position { stack, offset: 0 });
                }
            }
        }
    }
    (out, accepting)
}

/// All positions reachable from `positions` by consuming one byte.
pub(crate) fn step_byte(
    compiled: &Compiled,
    positions: &BTreeSet<Position>,
    byte: u8,
) -> (BTreeSet<Position>, bool) {
    let mut successors = Vec::new();
    for pos in positions {
        let Some(&(rule, alt, sym)) = pos.stack.last() else {
            // Accept markers cannot consume further input.
            continue;
        };
        let CompiledSymbol::Terminal(bytes) =
            &compiled.rules[rule as usize][alt as usize][sym as usize]
        else {
            unreachable!("closure leaves positions only inside terminals");
        };
        if bytes[pos.offset as usize] != byte {
            continue;
        }
        let next_offset = pos.offset + 1;
        if (next_offset as usize) == bytes.len() {
            let mut stack = pos.stack.clone();
            stack.last_mut().expect("nonempty").2 += 1;
            successors.push(Position { stack, offset: 0 });
        } else {
            successors.push(Position {
                stack: pos.stack.clone(),
                offset: next_offset,
            });
        }
    }
    closure(compiled, successors)
}

#[cfg(test)]
mod tests {
    use crate::grammar::parse_gbnf;

    #[test]
    fn advance_through_terminal() {
        let g = parse_gbnf(r#"root ::= "AB""#).unwrap();
        let s0 = g.start_state();
        assert!(!s0.is_accepting());
        let s1 = g.advance(&s0, b"A").unwrap();
        assert!(!s1.is_accepting());
        assert_eq!(s1.consumed(), 1);
        let s2 = g.advance(&s1, b"B").unwrap();
        assert!(s2.is_accepting());
        assert!(g.advance(&s0, b"X").is_none());
    }

    #[test]
    fn rejected_when_frontier_empties() {
        let g = parse_gbnf(r#"root ::= "AB" | "AC""#).unwrap();
        let s1 = g.advance(&g.start_state(), b"A").unwrap();
        assert_eq!(s1.frontier_size(), 2);
        assert!(g.advance(&s1, b"B").is_some());
        assert!(g.advance(&s1, b"D").is_none());
    }

    #[test]
    fn accepting_state_rejects_further_bytes_when_language_is_exhausted() {
        let g = parse_gbnf(r#"root ::= "A""#).unwrap();
        let s = g.advance(&g.start_state(), b"A").unwrap();
        assert!(s.is_accepting());
        assert!(g.advance(&s, b"A").is_none());
    }

    #[test]
    fn prefix_of_longer_alternative_stays_alive_while_accepting() {
        let g = parse_gbnf(r#"root ::= "A" | "AB""#).unwrap();
        let s = g.advance(&g.start_state(), b"A").unwrap();
        assert!(s.is_accepting());
        let s2 = g.advance(&s, b"B").unwrap();
        assert!(s2.is_accepting());
    }

    #[test]
    fn empty_string_terminal_accepts_immediately() {
        let g = parse_gbnf(r#"root ::= "" | "A""#).unwrap();
        assert!(g.start_state().is_accepting());
    }

    #[test]
    fn nested_rules_recognized() {
        let g = parse_gbnf(
            r#"
root ::= "x" mid "y"
mid ::= "1" | "22" | ""
"#,
        )
        .unwrap();
        for s in ["x1y", "x22y", "xy"] {
            assert!(g.accepts(s), "{s} should be accepted");
        }
        for s in ["x", "xz", "x1", "x221y", "x1yy", ""] {
            assert!(!g.accepts(s), "{s} should be rejected");
        }
    }
}

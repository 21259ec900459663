//! Token-mask computation.
//!
//! Walks a byte trie of the vocabulary and the recognizer frontier
//! together, so shared token prefixes are stepped once instead of once per
//! token. A token is valid iff consuming its full text leaves the
//! recognizer alive; the end-of-sequence token is valid iff the state is
//! accepting.

use crate::gateway::{TokenId, Vocabulary};

use super::recognizer::{step_byte, RecognizerState};
use super::Grammar;

#[derive(Debug)]
struct TrieNode {
    children: Vec<(u8, u32)>,
    /// Tokens whose full text ends at this node.
    tokens: Vec<TokenId>,
}

/// Byte trie over a vocabulary, reusable across decode steps.
#[derive(Debug)]
pub struct TokenMasker {
    nodes: Vec<TrieNode>,
    vocab_len: usize,
    eos: TokenId,
    /// Non-EOS tokens with empty text consume nothing and are always valid.
    empty_tokens: Vec<TokenId>,
}

impl TokenMasker {
    pub fn new(vocab: &Vocabulary) -> Self {
        let mut nodes = vec![TrieNode {
            children: Vec::new(),
            tokens: Vec::new(),
        }];
        let mut empty_tokens = Vec::new();
        for id in 0..vocab.len() as TokenId {
            if id == vocab.eos_id() {
                continue;
            }
            let bytes = vocab.token_bytes(id).expect("dense ids");
            if bytes.is_empty() {
                empty_tokens.push(id);
                continue;
            }
            let mut cur = 0usize;
            for b in bytes {
                cur = match nodes[cur].children.iter().find(|(cb, _)| cb == b) {
                    Some((_, idx)) => *idx as usize,
                    None => {
                        let idx = nodes.len() as u32;
                        nodes.push(TrieNode {
                            children: Vec::new(),
                            tokens: Vec::new(),
                        });
                        nodes[cur].children.push((*b, idx));
                        idx as usize
                    }
                };
            }
            nodes[cur].tokens.push(id);
        }
        Self {
            nodes,
            vocab_len: vocab.len(),
            eos: vocab.eos_id(),
            empty_tokens,
        }
    }

    /// Boolean vector over token ids: `mask[t]` is true iff advancing the
    /// state by the token's text keeps some parse position alive.
    pub fn valid_mask(&self, grammar: &Grammar, state: &RecognizerState) -> Vec<bool> {
        let mut mask = vec![false; self.vocab_len];
        mask[self.eos as usize] = state.is_accepting();
        for id in &self.empty_tokens {
            mask[*id as usize] = true;
        }
        let compiled = grammar.compiled();
        let mut stack = vec![(0usize, state.positions().clone())];
        while let Some((node_idx, positions)) = stack.pop() {
            let node = &self.nodes[node_idx];
            for tok in &node.tokens {
                mask[*tok as usize] = true;
            }
            for (byte, child) in &node.children {
                let (next, _) = step_byte(compiled, &positions, *byte);
                if !next.is_empty() {
                    stack.push((*child as usize, next));
                }
            }
        }
        mask
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::Vocabulary;
    use crate::grammar::parse_gbnf;
    use crate::grammar::tests::LISTING_GRAMMAR;

    #[test]
    fn fresh_state_single_terminal() {
        let g = parse_gbnf(r#"root ::= "A""#).unwrap();
        let vocab = Vocabulary::byte_level();
        let masker = TokenMasker::new(&vocab);
        let mask = masker.valid_mask(&g, &g.start_state());
        let allowed: Vec<usize> = mask
            .iter()
            .enumerate()
            .filter(|(_, m)| **m)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(allowed, vec![b'A' as usize]);
    }

    #[test]
    fn eos_only_when_accepting() {
        let g = parse_gbnf(r#"root ::= "A""#).unwrap();
        let vocab = Vocabulary::byte_level();
        let masker = TokenMasker::new(&vocab);
        let s = g.advance(&g.start_state(), b"A").unwrap();
        let mask = masker.valid_mask(&g, &s);
        assert!(mask[vocab.eos_id() as usize]);
        assert!(mask.iter().filter(|m| **m).count() == 1);
    }

    #[test]
    fn listing_state_allows_location_leaves_not_apple() {
        let g = parse_gbnf(LISTING_GRAMMAR).unwrap();
        // A vocabulary with whole-word tokens so masking exercises
        // multi-byte trie paths.
        let words = [
            "Semantic-type::",
            "LOCATION::",
            "EVENT::",
            "LAT",
            "LONG",
            "ZIP",
            "CITY",
            "STATE",
            "TITLE",
            "apple",
            "bees",
        ];
        let mut tokens: Vec<Vec<u8>> = words.iter().map(|w| w.as_bytes().to_vec()).collect();
        tokens.push(Vec::new());
        let vocab = Vocabulary::new(tokens, words.len() as u32).unwrap();
        let masker = TokenMasker::new(&vocab);
        let state = g
            .advance(&g.start_state(), b"Semantic-type::LOCATION::")
            .unwrap();
        let mask = masker.valid_mask(&g, &state);
        let name_of = |i: usize| words.get(i).copied().unwrap_or("<eos>");
        let allowed: Vec<&str> = mask
            .iter()
            .enumerate()
            .filter(|(_, m)| **m)
            .map(|(i, _)| name_of(i))
            .collect();
        assert_eq!(allowed, vec!["LAT", "LONG", "ZIP", "CITY", "STATE"]);
    }

    /// Oracle: per-token advance over the whole vocabulary.
    fn brute_force_mask(
        g: &crate::grammar::Grammar,
        state: &RecognizerState,
        vocab: &Vocabulary,
    ) -> Vec<bool> {
        (0..vocab.len() as u32)
            .map(|t| {
                if t == vocab.eos_id() {
                    state.is_accepting()
                } else {
                    g.advance(state, vocab.token_bytes(t).unwrap()).is_some()
                }
            })
            .collect()
    }

    #[test]
    fn mask_matches_per_token_oracle_along_a_decode_path() {
        let g = parse_gbnf(LISTING_GRAMMAR).unwrap();
        let vocab = Vocabulary::byte_level();
        let masker = TokenMasker::new(&vocab);
        let mut state = g.start_state();
        for b in "Semantic-type::LOCATION::LAT".bytes() {
            assert_eq!(
                masker.valid_mask(&g, &state),
                brute_force_mask(&g, &state, &vocab)
            );
            state = g.advance(&state, &[b]).unwrap();
        }
        assert_eq!(
            masker.valid_mask(&g, &state),
            brute_force_mask(&g, &state, &vocab)
        );
    }
}

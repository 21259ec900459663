//! Grammar-constrained decoding over a next-token-distribution backend.

use thiserror::Error;

use crate::gateway::{Gateway, GatewayError, TokenId, Vocabulary};

use super::{Grammar, RecognizerState, TokenMasker};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeStrategy {
    /// Argmax over masked logits each step.
    Greedy,
    /// Keep the k highest cumulative log-probability alive hypotheses.
    Beam(usize),
}

#[derive(Debug, Clone)]
pub struct DecodeConfig {
    pub strategy: DecodeStrategy,
    pub max_tokens: usize,
    pub temperature: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            strategy: DecodeStrategy::Beam(4),
            max_tokens: 128,
            temperature: 0.0,
        }
    }
}

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("no valid continuation: the token mask emptied before acceptance")]
    NoValidContinuation,
    #[error("no accepted string within {max_tokens} tokens")]
    MaxTokensExceeded { max_tokens: usize },
    #[error("invalid decode configuration: {0}")]
    InvalidConfig(String),
}

/// Decode a string from the grammar's language, steering every step with
/// the token mask. The backend must expose next-token distributions.
pub fn decode_constrained(
    gateway: &Gateway,
    prompt: &str,
    grammar: &Grammar,
    config: &DecodeConfig,
) -> Result<String, DecodeError> {
    if !gateway.supports_distribution() {
        return Err(GatewayError::CapabilityUnsupported {
            capability: "next_token_distribution",
        }
        .into());
    }
    let vocab = gateway
        .vocabulary()
        .ok_or(GatewayError::CapabilityUnsupported {
            capability: "vocabulary",
        })?
        .clone();
    if let DecodeStrategy::Beam(0) = config.strategy {
        return Err(DecodeError::InvalidConfig("beam width must be at least 1".into()));
    }
    if config.max_tokens == 0 {
        return Err(DecodeError::InvalidConfig("max_tokens must be at least 1".into()));
    }
    let masker = TokenMasker::new(&vocab);
    let prompt_ids = vocab.tokenize(prompt)?;
    match config.strategy {
        DecodeStrategy::Greedy => greedy(gateway, grammar, &masker, &vocab, prompt_ids, config),
        DecodeStrategy::Beam(width) => {
            beam(gateway, grammar, &masker, &vocab, prompt_ids, config, width)
        }
    }
}

fn greedy(
    gateway: &Gateway,
    grammar: &Grammar,
    masker: &TokenMasker,
    vocab: &Vocabulary,
    prompt_ids: Vec<TokenId>,
    config: &DecodeConfig,
) -> Result<String, DecodeError> {
    let eos = vocab.eos_id();
    let mut state = grammar.start_state();
    let mut ctx = prompt_ids;
    let mut out: Vec<TokenId> = Vec::new();
    for _ in 0..config.max_tokens {
        let dist = gateway.next_token_distribution(&ctx)?;
        let mask = masker.valid_mask(grammar, &state);
        let mut best: Option<TokenId> = None;
        for (t, allowed) in mask.iter().enumerate() {
            let t = t as TokenId;
            if !allowed || (t != eos && vocab.token_bytes(t).is_none_or(|b| b.is_empty())) {
                continue;
            }
            if best.is_none_or(|b| dist.logits[t as usize] > dist.logits[b as usize]) {
                best = Some(t);
            }
        }
        let Some(token) = best else {
            return Err(DecodeError::NoValidContinuation);
        };
        if token == eos {
            return Ok(vocab.detokenize(&out)?);
        }
        state = grammar
            .advance(&state, vocab.token_bytes(token).expect("masked token exists"))
            .expect("mask guarantees a viable continuation");
        ctx.push(token);
        out.push(token);
    }
    Err(DecodeError::MaxTokensExceeded {
        max_tokens: config.max_tokens,
    })
}

struct Hypothesis {
    ctx: Vec<TokenId>,
    out: Vec<TokenId>,
    state: RecognizerState,
    score: f64,
}

fn beam(
    gateway: &Gateway,
    grammar: &Grammar,
    masker: &TokenMasker,
    vocab: &Vocabulary,
    prompt_ids: Vec<TokenId>,
    config: &DecodeConfig,
    width: usize,
) -> Result<String, DecodeError> {
    let eos = vocab.eos_id();
    let mut alive = vec![Hypothesis {
        ctx: prompt_ids,
        out: Vec::new(),
        state: grammar.start_state(),
        score: 0.0,
    }];
    let mut finished: Vec<(Vec<TokenId>, f64)> = Vec::new();
    let mut steps_exhausted = true;

    for _ in 0..config.max_tokens {
        if alive.is_empty() {
            steps_exhausted = false;
            break;
        }
        // Scores only decrease as hypotheses grow, so once the best
        // finished string beats every alive hypothesis we can stop.
        if let Some(best_finished) = finished.iter().map(|(_, s)| *s).reduce(f64::max) {
            let best_alive = alive.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
            if best_alive <= best_finished {
                steps_exhausted = false;
                break;
            }
        }
        // (source hypothesis, token, new score)
        let mut candidates: Vec<(usize, TokenId, f64)> = Vec::new();
        for (idx, hyp) in alive.iter().enumerate() {
            let dist = gateway.next_token_distribution(&hyp.ctx)?;
            let logp = log_softmax(&dist.logits, config.temperature);
            let mask = masker.valid_mask(grammar, &hyp.state);
            for (t, allowed) in mask.iter().enumerate() {
                if !allowed {
                    continue;
                }
                let t = t as TokenId;
                let score = hyp.score + logp[t as usize];
                if t == eos {
                    finished.push((hyp.out.clone(), score));
                } else if vocab.token_bytes(t).is_some_and(|b| !b.is_empty()) {
                    candidates.push((idx, t, score));
                }
            }
        }
        if candidates.is_empty() {
            steps_exhausted = false;
            break;
        }
        candidates.sort_by(|a, b| {
            b.2.partial_cmp(&a.2)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.0.cmp(&b.0))
        });
        candidates.truncate(width);
        alive = candidates
            .into_iter()
            .map(|(idx, token, score)| {
                let src = &alive[idx];
                let bytes = vocab.token_bytes(token).expect("masked token exists");
                let mut ctx = src.ctx.clone();
                let mut out = src.out.clone();
                ctx.push(token);
                out.push(token);
                Hypothesis {
                    state: grammar
                        .advance(&src.state, bytes)
                        .expect("mask guarantees a viable continuation"),
                    ctx,
                    out,
                    score,
                }
            })
            .collect();
    }

    if let Some((tokens, _)) = finished.into_iter().reduce(|best, cand| {
        if cand.1 > best.1 || (cand.1 == best.1 && cand.0 < best.0) {
            cand
        } else {
            best
        }
    }) {
        return Ok(vocab.detokenize(&tokens)?);
    }
    if steps_exhausted {
        Err(DecodeError::MaxTokensExceeded {
            max_tokens: config.max_tokens,
        })
    } else {
        Err(DecodeError::NoValidContinuation)
    }
}

/// Log-softmax in f64. Temperature 0 is treated as 1 (selection is already
/// deterministic; scores stay finite).
fn log_softmax(logits: &[f32], temperature: f64) -> Vec<f64> {
    let t = if temperature > 0.0 { temperature } else { 1.0 };
    let scaled: Vec<f64> = logits.iter().map(|l| *l as f64 / t).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scaled.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    scaled.iter().map(|x| x - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{Backend, MockBackend, MockScript, ToyModel};
    use crate::grammar::parse_gbnf;
    use crate::grammar::tests::LISTING_GRAMMAR;

    fn toy_gateway(seed: u64) -> Gateway {
        Gateway::new(Box::new(ToyModel::new(seed)))
    }

    #[test]
    fn single_string_language_is_forced() {
        let g = parse_gbnf(r#"root ::= "Semantic-type::A::B""#).unwrap();
        for seed in [0, 1, 99] {
            let gw = toy_gateway(seed);
            for strategy in [DecodeStrategy::Greedy, DecodeStrategy::Beam(4)] {
                let config = DecodeConfig {
                    strategy,
                    ..DecodeConfig::default()
                };
                let out = decode_constrained(&gw, "ignored", &g, &config).unwrap();
                assert_eq!(out, "Semantic-type::A::B");
            }
        }
    }

    #[test]
    fn biased_model_still_emits_members() {
        let g = parse_gbnf(LISTING_GRAMMAR).unwrap();
        let gw = Gateway::new(Box::new(ToyModel::new(5).with_bias("apple", 50.0)));
        for strategy in [DecodeStrategy::Greedy, DecodeStrategy::Beam(2)] {
            let config = DecodeConfig {
                strategy,
                ..DecodeConfig::default()
            };
            let out = decode_constrained(&gw, "SEMANTIC-TYPE:", &g, &config).unwrap();
            assert!(g.accepts(&out), "{out:?} not in the language");
        }
    }

    #[test]
    fn beam_matches_exhaustive_scoring_on_two_string_language() {
        let g = parse_gbnf(r#"root ::= "ab" | "ba""#).unwrap();
        for seed in 0..10u64 {
            let toy = ToyModel::new(seed);
            let vocab = toy.vocabulary().unwrap().clone();
            let prompt = "p";
            // Oracle: teacher-force both strings and compare cumulative
            // log-probabilities, including the final EOS step.
            let mut scored: Vec<(String, f64)> = Vec::new();
            for s in ["ab", "ba"] {
                let mut ctx = vocab.tokenize(prompt).unwrap();
                let mut total = 0.0f64;
                for tok in vocab.tokenize(s).unwrap() {
                    let dist = toy.next_token_distribution(&ctx).unwrap();
                    total += log_softmax(&dist.logits, 0.0)[tok as usize];
                    ctx.push(tok);
                }
                let dist = toy.next_token_distribution(&ctx).unwrap();
                total += log_softmax(&dist.logits, 0.0)[vocab.eos_id() as usize];
                scored.push((s.to_string(), total));
            }
            scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
            let expected = scored[0].0.clone();

            let gw = Gateway::new(Box::new(ToyModel::new(seed)));
            let config = DecodeConfig {
                strategy: DecodeStrategy::Beam(2),
                ..DecodeConfig::default()
            };
            let got = decode_constrained(&gw, prompt, &g, &config).unwrap();
            assert_eq!(got, expected, "seed {seed}");
        }
    }

    #[test]
    fn greedy_is_deterministic() {
        let g = parse_gbnf(LISTING_GRAMMAR).unwrap();
        let config = DecodeConfig {
            strategy: DecodeStrategy::Greedy,
            ..DecodeConfig::default()
        };
        let a = decode_constrained(&toy_gateway(11), "x", &g, &config).unwrap();
        let b = decode_constrained(&toy_gateway(11), "x", &g, &config).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn completion_only_backend_is_refused() {
        let g = parse_gbnf(r#"root ::= "A""#).unwrap();
        let gw = Gateway::new(Box::new(crate::gateway::RemoteBackend::new(
            "http://127.0.0.1:1",
            "m",
        )));
        assert!(matches!(
            decode_constrained(&gw, "p", &g, &DecodeConfig::default()),
            Err(DecodeError::Gateway(GatewayError::CapabilityUnsupported { .. }))
        ));
    }

    #[test]
    fn max_tokens_exhaustion_reported() {
        let g = parse_gbnf(r#"root ::= "abcdef""#).unwrap();
        let gw = toy_gateway(0);
        let config = DecodeConfig {
            strategy: DecodeStrategy::Greedy,
            max_tokens: 3,
            temperature: 0.0,
        };
        assert!(matches!(
            decode_constrained(&gw, "p", &g, &config),
            Err(DecodeError::MaxTokensExceeded { max_tokens: 3 })
        ));
    }

    #[test]
    fn mock_backend_distribution_layer_supports_decoding() {
        let g = parse_gbnf(r#"root ::= "X" | "Y""#).unwrap();
        let backend = MockBackend::new(MockScript::new().with_default("unused"), ToyModel::new(4));
        let gw = Gateway::new(Box::new(backend));
        let out = decode_constrained(&gw, "p", &g, &DecodeConfig::default()).unwrap();
        assert!(g.accepts(&out));
    }
}

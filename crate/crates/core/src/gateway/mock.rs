//! Hermetic test backends.
//!
//! The mock has two layers: a scripted prompt-to-completion map driving the
//! pipeline stages, and a tiny deterministic character-level model exposing
//! full next-token distributions for constrained-decoding tests.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use super::{
    fingerprint, Backend, CompletionRequest, GatewayError, TokenDistribution, TokenId, Vocabulary,
};

/// One scripted response rule. Rules are tried in order; the first match
/// wins.
#[derive(Debug, Clone)]
pub struct MockRule {
    matcher: Matcher,
    response: String,
}

#[derive(Debug, Clone)]
enum Matcher {
    /// Exact prompt fingerprint (see [`fingerprint`]).
    Fingerprint(String),
    /// All substrings must occur in the prompt.
    ContainsAll(Vec<String>),
    /// Matches any prompt.
    Default,
}

/// An ordered list of response rules.
#[derive(Debug, Clone, Default)]
pub struct MockScript {
    rules: Vec<MockRule>,
}

#[derive(Debug, Deserialize)]
struct RuleSpec {
    #[serde(default)]
    fingerprint: Option<String>,
    #[serde(default)]
    contains: Option<Vec<String>>,
    #[serde(default)]
    default: bool,
    response: String,
}

#[derive(Debug, Deserialize)]
struct ScriptSpec {
    #[serde(default)]
    rules: Vec<RuleSpec>,
}

impl MockScript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fingerprint(mut self, fp: &str, response: &str) -> Self {
        self.rules.push(MockRule {
            matcher: Matcher::Fingerprint(fp.to_string()),
            response: response.to_string(),
        });
        self
    }

    pub fn with_contains(mut self, needles: &[&str], response: &str) -> Self {
        self.rules.push(MockRule {
            matcher: Matcher::ContainsAll(needles.iter().map(|s| s.to_string()).collect()),
            response: response.to_string(),
        });
        self
    }

    pub fn with_default(mut self, response: &str) -> Self {
        self.rules.push(MockRule {
            matcher: Matcher::Default,
            response: response.to_string(),
        });
        self
    }

    pub fn from_toml_str(text: &str) -> Result<Self, String> {
        let spec: ScriptSpec = toml::from_str(text).map_err(|e| e.to_string())?;
        let mut script = MockScript::new();
        for rule in spec.rules {
            let matcher = if let Some(fp) = rule.fingerprint {
                Matcher::Fingerprint(fp)
            } else if let Some(contains) = rule.contains {
                Matcher::ContainsAll(contains)
            } else if rule.default {
                Matcher::Default
            } else {
                return Err(format!(
                    "rule with response {:?} has no fingerprint, contains, or default marker",
                    rule.response
                ));
            };
            script.rules.push(MockRule {
                matcher,
                response: rule.response,
            });
        }
        Ok(script)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read script {}: {e}", path.display()))?;
        Self::from_toml_str(&text)
    }

    pub fn respond(&self, prompt: &str) -> Option<&str> {
        let fp = fingerprint(prompt);
        for rule in &self.rules {
            let hit = match &rule.matcher {
                Matcher::Fingerprint(want) => *want == fp,
                Matcher::ContainsAll(needles) => needles.iter().all(|n| prompt.contains(n)),
                Matcher::Default => true,
            };
            if hit {
                return Some(&rule.response);
            }
        }
        None
    }
}

/// A fixed-weight character-level model over the byte-level vocabulary.
///
/// Logits for the next token depend only on the previous byte (or a start
/// row for an empty context), drawn once from a seeded generator, so every
/// distribution is a pure function of (seed, context).
pub struct ToyModel {
    vocab: Vocabulary,
    /// (256 prev bytes + start) x (256 next bytes + eos), row-major.
    weights: Vec<f32>,
    bias: Vec<f32>,
}

const TOY_ROWS: usize = 257;
const TOY_COLS: usize = 257;

impl ToyModel {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = (0..TOY_ROWS * TOY_COLS)
            .map(|_| rng.random_range(-2.0f32..2.0f32))
            .collect();
        Self {
            vocab: Vocabulary::byte_level(),
            weights,
            bias: vec![0.0; TOY_COLS],
        }
    }

    /// Add a fixed logit boost to every byte of `text`, biasing greedy
    /// decoding toward spelling it.
    pub fn with_bias(mut self, text: &str, boost: f32) -> Self {
        for b in text.as_bytes() {
            self.bias[*b as usize] += boost;
        }
        self
    }

    fn row(&self, prev: Option<u8>) -> &[f32] {
        let idx = match prev {
            Some(b) => b as usize,
            None => 256,
        };
        &self.weights[idx * TOY_COLS..(idx + 1) * TOY_COLS]
    }

    fn logits_after(&self, context: &[TokenId]) -> Vec<f32> {
        let prev = context
            .iter()
            .rev()
            .find_map(|id| self.vocab.token_bytes(*id).and_then(|t| t.last().copied()));
        self.row(prev)
            .iter()
            .zip(self.bias.iter())
            .map(|(w, b)| w + b)
            .collect()
    }
}

impl Backend for ToyModel {
    fn name(&self) -> &'static str {
        "toy"
    }

    /// Greedy unconstrained decoding: argmax next byte until EOS or the
    /// token limit.
    fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        request.validate()?;
        let mut ctx = self.vocab.tokenize(&request.prompt)?;
        let mut out = Vec::new();
        for _ in 0..request.max_tokens {
            let logits = self.logits_after(&ctx);
            let best = argmax(&logits);
            if best == self.vocab.eos_id() {
                break;
            }
            ctx.push(best);
            out.push(best);
            let text = self.vocab.detokenize(&out)?;
            if request.stop.iter().any(|s| !s.is_empty() && text.ends_with(s)) {
                break;
            }
        }
        self.vocab.detokenize(&out)
    }

    fn supports_distribution(&self) -> bool {
        true
    }

    fn next_token_distribution(
        &self,
        context: &[TokenId],
    ) -> Result<TokenDistribution, GatewayError> {
        Ok(TokenDistribution {
            context: context.to_vec(),
            logits: self.logits_after(context),
        })
    }

    fn vocabulary(&self) -> Option<&Vocabulary> {
        Some(&self.vocab)
    }
}

fn argmax(logits: &[f32]) -> TokenId {
    let mut best = 0usize;
    for (i, l) in logits.iter().enumerate() {
        if *l > logits[best] {
            best = i;
        }
    }
    best as TokenId
}

/// Scripted completions plus a toy-model distribution layer.
pub struct MockBackend {
    script: MockScript,
    toy: ToyModel,
}

impl MockBackend {
    pub fn new(script: MockScript, toy: ToyModel) -> Self {
        Self { script, toy }
    }

    /// Script-only construction with the default toy-model seed.
    pub fn scripted(script: MockScript) -> Self {
        Self {
            script,
            toy: ToyModel::new(0),
        }
    }
}

impl Backend for MockBackend {
    fn name(&self) -> &'static str {
        "mock"
    }

    fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        request.validate()?;
        match self.script.respond(&request.prompt) {
            Some(text) => Ok(text.to_string()),
            None => Err(GatewayError::ScriptMiss {
                fingerprint: fingerprint(&request.prompt),
            }),
        }
    }

    fn supports_distribution(&self) -> bool {
        true
    }

    fn next_token_distribution(
        &self,
        context: &[TokenId],
    ) -> Result<TokenDistribution, GatewayError> {
        self.toy.next_token_distribution(context)
    }

    fn vocabulary(&self) -> Option<&Vocabulary> {
        self.toy.vocabulary()
    }
}

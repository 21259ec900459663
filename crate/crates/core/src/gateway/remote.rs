//! HTTP chat-completion backend.
//!
//! Speaks the common chat-completions JSON shape: the request carries the
//! model name, a single user message, and sampling parameters; the reply is
//! read from `choices[0].message.content` (or `choices[0].text`). The
//! bearer credential is taken from the `COLSEM_API_KEY` environment
//! variable. Raw token probabilities are not available over this protocol,
//! so the distribution capability is unsupported.

use std::time::Duration;

use serde_json::{json, Value};

use super::{Backend, CompletionRequest, GatewayError};

/// Environment variable holding the bearer credential for remote backends.
pub const API_KEY_ENV: &str = "COLSEM_API_KEY";

pub struct RemoteBackend {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl RemoteBackend {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(60)))
            .http_status_as_error(false)
            .build();
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key: std::env::var(API_KEY_ENV).ok(),
            agent: config.into(),
        }
    }
}

impl Backend for RemoteBackend {
    fn name(&self) -> &'static str {
        "remote"
    }

    fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        request.validate()?;
        let body = json!({
            "model": self.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "max_tokens": request.max_tokens,
            "temperature": request.temperature,
            "stop": request.stop,
        });
        let mut call = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            call = call.header("Authorization", format!("Bearer {key}"));
        }
        let mut response = call.send_json(&body).map_err(|e| GatewayError::Transport {
            attempts: 1,
            message: e.to_string(),
        })?;
        let status = response.status().as_u16();
        if status == 401 || status == 403 {
            return Err(GatewayError::AuthFailure(format!(
                "endpoint returned status {status}"
            )));
        }
        if !(200..300).contains(&status) {
            return Err(GatewayError::Transport {
                attempts: 1,
                message: format!("endpoint returned status {status}"),
            });
        }
        let parsed: Value =
            response
                .body_mut()
                .read_json()
                .map_err(|e| GatewayError::Transport {
                    attempts: 1,
                    message: format!("unparsable response body: {e}"),
                })?;
        let content = parsed["choices"][0]["message"]["content"]
            .as_str()
            .or_else(|| parsed["choices"][0]["text"].as_str());
        match content {
            Some(text) => Ok(text.to_string()),
            None => Err(GatewayError::Transport {
                attempts: 1,
                message: "response body has no completion text".into(),
            }),
        }
    }
}

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{non_empty, prompt_hash, Backend, Completion, GatewayError, DEFAULT_MAX_TOKENS};

pub const URL_ENV: &str = "EVIDENT_LLM_URL";

#[derive(Serialize)]
struct CompleteRequest<'a> {
    prompt: &'a str,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct CompleteResponse {
    text: String,
    #[serde(default)]
    token_logprobs: Option<Vec<f64>>,
}

/// Client for `POST {base}/complete` returning `{text, token_logprobs?}`.
pub struct RemoteBackend {
    id: String,
    endpoint: String,
    max_tokens: u32,
    agent: ureq::Agent,
}

impl RemoteBackend {
    pub fn new(base_url: &str, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        let base = base_url.trim_end_matches('/');
        RemoteBackend {
            id: format!("remote:{base}"),
            endpoint: format!("{base}/complete"),
            max_tokens: DEFAULT_MAX_TOKENS,
            agent,
        }
    }

    /// Reads the endpoint from `EVIDENT_LLM_URL`.
    pub fn from_env(timeout: Duration) -> Result<Self, GatewayError> {
        let url = std::env::var(URL_ENV).map_err(|_| GatewayError::Transport {
            prompt_hash: "-".into(),
            message: format!("{URL_ENV} is not set"),
        })?;
        Ok(RemoteBackend::new(&url, timeout))
    }

    pub fn with_max_tokens(mut self, max_tokens: u32) -> Self {
        self.max_tokens = max_tokens;
        self
    }
}

impl Backend for RemoteBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, prompt: &str) -> Result<Completion, GatewayError> {
        let transport = |message: String| GatewayError::Transport {
            prompt_hash: prompt_hash(prompt),
            message,
        };
        let body = CompleteRequest {
            prompt,
            max_tokens: self.max_tokens,
        };
        let mut response = self
            .agent
            .post(&self.endpoint)
            .send_json(&body)
            .map_err(|e| transport(e.to_string()))?;
        let parsed: CompleteResponse = response
            .body_mut()
            .read_json()
            .map_err(|e| transport(format!("malformed response: {e}")))?;
        non_empty(
            Completion {
                text: parsed.text,
                token_logprobs: parsed.token_logprobs.unwrap_or_default(),
                backend_id: self.id.clone(),
            },
            prompt,
        )
    }
}

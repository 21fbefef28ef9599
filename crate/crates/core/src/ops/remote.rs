use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{CompletionBackend, CompletionParams, OpError};

/// Completion service reached over HTTP.
///
/// Request body: `{"prompt", "seed", "max_tokens", "temperature"}`.
/// Response body: `{"text"}`. Anything else is `BackendUnavailable`.
#[derive(Debug, Clone)]
pub struct RemoteBackend {
    url: String,
    client: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct CompletionRequest<'a> {
    prompt: &'a str,
    seed: u64,
    max_tokens: u32,
    temperature: f64,
}

#[derive(Deserialize)]
struct CompletionReply {
    text: String,
}

impl RemoteBackend {
    pub fn new(url: impl Into<String>) -> Result<Self, OpError> {
        Self::with_timeout(url, Duration::from_secs(120))
    }

    pub fn with_timeout(url: impl Into<String>, timeout: Duration) -> Result<Self, OpError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| OpError::BackendUnavailable(e.to_string()))?;
        Ok(RemoteBackend {
            url: url.into(),
            client,
        })
    }

    pub fn url(&self) -> &str {
        &self.url
    }
}

impl CompletionBackend for RemoteBackend {
    fn complete(
        &self,
        prompt: &str,
        seed: u64,
        params: &CompletionParams,
    ) -> Result<String, OpError> {
        let body = CompletionRequest {
            prompt,
            seed,
            max_tokens: params.max_length,
            temperature: params.temperature,
        };
        let unavailable = |e: reqwest::Error| OpError::BackendUnavailable(e.to_string());
        let resp = self
            .client
            .post(&self.url)
            .json(&body)
            .send()
            .map_err(unavailable)?;
        let status = resp.status();
        if !status.is_success() {
            return Err(OpError::BackendUnavailable(format!("HTTP {status}")));
        }
        let reply: CompletionReply = resp.json().map_err(unavailable)?;
        Ok(reply.text)
    }
}

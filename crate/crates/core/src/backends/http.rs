//! Blocking HTTP client for OpenAI-compatible chat-completion endpoints.

use std::time::Duration;

use serde_json::Value;

use super::chat::{ChatBackend, ChatRequest, ChatResponse, TokenLogprob};
use super::BackendError;

pub struct HttpChatBackend {
    url: String,
    model: String,
    api_key: Option<String>,
    logprobs: bool,
    agent: ureq::Agent,
}

impl HttpChatBackend {
    pub fn new(url: impl Into<String>, model: impl Into<String>, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            url: url.into(),
            model: model.into(),
            api_key: None,
            logprobs: false,
            agent,
        }
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.api_key = key;
        self
    }

    /// Mark the endpoint as white-box (returns token log-probabilities).
    pub fn with_logprobs(mut self, logprobs: bool) -> Self {
        self.logprobs = logprobs;
        self
    }
}

fn message_text(content: &Value) -> Option<String> {
    match content {
        Value::String(s) => Some(s.clone()),
        Value::Array(parts) => Some(
            parts
                .iter()
                .filter_map(|p| p.get("text").and_then(Value::as_str))
                .collect::<Vec<_>>()
                .join(""),
        ),
        _ => None,
    }
}

/// Extract generated text and optional token log-probabilities from a
/// chat-completion response body.
pub fn decode_response(body: &Value) -> Result<ChatResponse, BackendError> {
    let choice = body
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| BackendError::Protocol("response has no choices".into()))?;
    let text = choice
        .get("message")
        .and_then(|m| m.get("content"))
        .and_then(message_text)
        .ok_or_else(|| BackendError::Protocol("response has no message content".into()))?;
    let tokens = match choice.get("logprobs").and_then(|l| l.get("content")) {
        Some(Value::Array(_)) => {
            let raw = choice["logprobs"]["content"].clone();
            Some(
                serde_json::from_value::<Vec<TokenLogprob>>(raw)
                    .map_err(|e| BackendError::Protocol(format!("bad logprobs: {e}")))?,
            )
        }
        _ => None,
    };
    Ok(ChatResponse { text, tokens })
}

impl ChatBackend for HttpChatBackend {
    fn backend_id(&self) -> String {
        format!("{}@{}", self.model, self.url)
    }

    fn exposes_logprobs(&self) -> bool {
        self.logprobs
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let mut call = self.agent.post(&self.url);
        if let Some(key) = &self.api_key {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = call
            .send_json(request)
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let body: Value = response
            .body_mut()
            .read_json()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        decode_response(&body)
    }
}

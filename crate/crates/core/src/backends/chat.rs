//! Chat-completion protocol types shared by every model backend.

use serde::{Deserialize, Serialize};

use super::parse::parse_yes_no;
use super::BackendError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ContentPart {
    Text { text: String },
    ImageUrl { image_url: ImageUrl },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageUrl {
    pub url: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: Vec<ContentPart>,
}

impl ChatMessage {
    pub fn user(content: Vec<ContentPart>) -> Self {
        Self {
            role: "user".into(),
            content,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub top_p: f64,
    pub temperature: f64,
    pub top_k: u32,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub logprobs: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_logprobs: Option<u32>,
}

impl ChatRequest {
    /// Concatenated text of every text part, used by offline backends.
    pub fn prompt_text(&self) -> String {
        self.messages
            .iter()
            .flat_map(|m| m.content.iter())
            .filter_map(|part| match part {
                ContentPart::Text { text } => Some(text.as_str()),
                ContentPart::ImageUrl { .. } => None,
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopLogprob {
    pub token: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
    #[serde(default)]
    pub top_logprobs: Vec<TopLogprob>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ChatResponse {
    pub text: String,
    /// Per generated token, when the backend exposes log-probabilities.
    pub tokens: Option<Vec<TokenLogprob>>,
}

/// A model reachable through the chat-completion protocol.
pub trait ChatBackend: Send + Sync {
    fn backend_id(&self) -> String;

    /// Whether responses carry token log-probabilities.
    fn exposes_logprobs(&self) -> bool;

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError>;
}

/// `exp(-mean log p)` over the given token log-probabilities.
pub fn perplexity(logprobs: &[f64]) -> Option<f64> {
    if logprobs.is_empty() {
        return None;
    }
    let mean = logprobs.iter().sum::<f64>() / logprobs.len() as f64;
    Some((-mean).exp())
}

/// Probability mass on "yes" and "no" at the decision token.
///
/// The decision token is the last generated token that reads as yes/no. Mass
/// is summed over case and whitespace variants among its top alternatives;
/// the sampled token itself counts when it is missing from that list.
pub fn yes_no_mass(tokens: &[TokenLogprob]) -> Option<(f64, f64)> {
    let position = tokens.iter().rposition(|t| parse_yes_no(&t.token).is_some())?;
    let decision = &tokens[position];
    let mut p_yes = 0.0;
    let mut p_no = 0.0;
    let mut saw_sampled = false;
    for alt in &decision.top_logprobs {
        if alt.token == decision.token {
            saw_sampled = true;
        }
        match parse_yes_no(&alt.token) {
            Some(true) => p_yes += alt.logprob.exp(),
            Some(false) => p_no += alt.logprob.exp(),
            None => {}
        }
    }
    if !saw_sampled {
        match parse_yes_no(&decision.token) {
            Some(true) => p_yes += decision.logprob.exp(),
            Some(false) => p_no += decision.logprob.exp(),
            None => {}
        }
    }
    Some((p_yes, p_no))
}

/// Log-probabilities of tokens overlapping the byte span `[start, end)` of
/// the concatenated token text.
pub fn span_logprobs(tokens: &[TokenLogprob], start: usize, end: usize) -> Vec<f64> {
    let mut offset = 0;
    let mut out = Vec::new();
    for t in tokens {
        let (s, e) = (offset, offset + t.token.len());
        offset = e;
        if s < end && e > start {
            out.push(t.logprob);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok(token: &str, logprob: f64, top: &[(&str, f64)]) -> TokenLogprob {
        TokenLogprob {
            token: token.into(),
            logprob,
            top_logprobs: top
                .iter()
                .map(|(t, l)| TopLogprob {
                    token: (*t).into(),
                    logprob: *l,
                })
                .collect(),
        }
    }

    #[test]
    fn perplexity_of_uniform_logprobs() {
        let ppl = perplexity(&[-2.0; 6]).unwrap();
        assert!((ppl - 2f64.exp()).abs() < 1e-12);
        assert!(perplexity(&[]).is_none());
    }

    #[test]
    fn yes_no_mass_sums_variants() {
        let tokens = vec![
            tok("[", -0.1, &[]),
            tok("Yes", 0.6f64.ln(), &[("Yes", 0.6f64.ln()), (" yes", 0.1f64.ln()), ("No", 0.2f64.ln())]),
            tok("]", -0.01, &[]),
        ];
        let (y, n) = yes_no_mass(&tokens).unwrap();
        assert!((y - 0.7).abs() < 1e-12);
        assert!((n - 0.2).abs() < 1e-12);
    }

    #[test]
    fn span_selects_overlapping_tokens() {
        let tokens = vec![tok("[ab", -1.0, &[]), tok("c]", -2.0, &[]), tok("[No]", -3.0, &[])];
        // "[abc][No]": reasoning content is bytes 1..4
        assert_eq!(span_logprobs(&tokens, 1, 4), vec![-1.0, -2.0]);
    }
}

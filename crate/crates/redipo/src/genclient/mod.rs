//! Clients for the external model roles: base/instruct samplers, rewriter,
//! embedder, reward scorer, and safety judge.
//!
//! Production traffic is JSON over HTTP in the common chat-completions /
//! embeddings shape; the deterministic mocks in [`mock`] implement the same
//! traits in-process so every stage runs identically in tests.

pub mod cache;
pub mod http;
pub mod mock;

use serde::{Deserialize, Serialize};
use std::fmt;
use std::sync::Arc;
use thiserror::Error;

use crate::types::{content_hash, SafetyLabel};
use cache::EmbeddingCache;

/// Rewrite instruction sent verbatim with `{prompt}` and `{response}` substituted.
pub const REWRITE_PROMPT_TEMPLATE: &str = include_str!("../../data/rewrite_prompt.txt");
/// Safety-classifier instruction with few-shot examples, `{prompt}`/`{response}` substituted.
pub const SAFETY_PROMPT_TEMPLATE: &str = include_str!("../../data/safety_prompt.txt");
/// Diversity-eliciting system prompts shipped as data for prompting baselines.
pub const DIVERSITY_SYSTEM_PROMPTS: [&str; 3] = [
    include_str!("../../data/sys1.txt"),
    include_str!("../../data/sys2.txt"),
    include_str!("../../data/sys3.txt"),
];

/// The five external model roles (two sampler variants share one trait).
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    GenerateBase,
    GenerateInstruct,
    Rewrite,
    Embed,
    Reward,
    Safety,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::GenerateBase => "generate_base",
            Role::GenerateInstruct => "generate_instruct",
            Role::Rewrite => "rewrite",
            Role::Embed => "embed",
            Role::Reward => "reward",
            Role::Safety => "safety",
        }
    }

    pub fn all() -> [Role; 6] {
        [
            Role::GenerateBase,
            Role::GenerateInstruct,
            Role::Rewrite,
            Role::Embed,
            Role::Reward,
            Role::Safety,
        ]
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Address and limits for one model-serving endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointSpec {
    pub base_url: String,
    pub model_name: String,
    /// Request timeout in seconds; must be positive.
    pub timeout_secs: u64,
    pub max_retries: u32,
    /// Maximum concurrent in-flight requests; at least 1.
    pub max_in_flight: usize,
    /// Env var holding the bearer token for this endpoint, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
}

impl EndpointSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.timeout_secs == 0 {
            return Err("timeout_secs must be positive".into());
        }
        if self.max_in_flight == 0 {
            return Err("max_in_flight must be at least 1".into());
        }
        Ok(())
    }
}

impl Default for EndpointSpec {
    fn default() -> Self {
        EndpointSpec {
            base_url: "http://127.0.0.1:8000/v1".into(),
            model_name: "unset".into(),
            timeout_secs: 60,
            max_retries: 2,
            max_in_flight: 8,
            api_key_env: None,
        }
    }
}

/// Sampling parameters for generation requests.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decoding {
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: usize,
}

impl Default for Decoding {
    fn default() -> Self {
        // Training-data sampling parameters; configurable.
        Decoding {
            temperature: 1.0,
            top_p: 1.0,
            max_tokens: 512,
        }
    }
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("transport failure for {role} after {attempts} attempts: {message}")]
    Transport {
        role: Role,
        attempts: u32,
        message: String,
    },
    #[error("bad payload from {role}: {message}")]
    Payload { role: Role, message: String },
    #[error("requested {requested} completions, server returned {returned}")]
    CountMismatch { requested: usize, returned: usize },
    #[error("embedding dimension mismatch within batch: {first} vs {other}")]
    DimensionMismatch { first: usize, other: usize },
    #[error("embedding is a zero vector; cannot normalize")]
    ZeroVector,
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty text at batch position {0}")]
    EmptyText(usize),
    #[error("empty draft; nothing to rewrite")]
    EmptyDraft,
    #[error("endpoint for role {0} not configured")]
    NotConfigured(Role),
}

pub trait Sampler: Send + Sync {
    fn sample(&self, prompt: &str, n: usize, decoding: &Decoding)
        -> Result<Vec<String>, ClientError>;
}

pub trait Rewriter: Send + Sync {
    fn rewrite(&self, prompt: &str, draft: &str) -> Result<String, ClientError>;
}

pub trait Embedder: Send + Sync {
    /// Returns one raw (not necessarily normalized) vector per input text.
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ClientError>;
    fn model_name(&self) -> &str;
}

pub trait RewardScorer: Send + Sync {
    fn score(&self, prompt: &str, response: &str) -> Result<f64, ClientError>;
}

pub trait SafetyJudge: Send + Sync {
    fn judge(&self, prompt: &str, response: &str) -> Result<SafetyLabel, ClientError>;
}

/// Samples `n` completions and applies truncation cleanup to each.
/// Exactly `n` texts come back, in server return order.
pub fn sample_responses(
    sampler: &dyn Sampler,
    prompt: &str,
    n: usize,
    decoding: &Decoding,
) -> Result<Vec<String>, ClientError> {
    assert!(n >= 1, "sample_responses requires n >= 1");
    let raw = sampler.sample(prompt, n, decoding)?;
    if raw.len() != n {
        return Err(ClientError::CountMismatch {
            requested: n,
            returned: raw.len(),
        });
    }
    Ok(raw.iter().map(|t| cleanup_truncation(t)).collect())
}

/// Rewrites a draft in the instruct model's style. The draft must be nonempty;
/// the caller decides whether to skip or abort on [`ClientError::EmptyDraft`].
pub fn rewrite_response(
    rewriter: &dyn Rewriter,
    prompt: &str,
    draft: &str,
) -> Result<String, ClientError> {
    if draft.trim().is_empty() {
        return Err(ClientError::EmptyDraft);
    }
    Ok(rewriter.rewrite(prompt, draft)?.trim().to_string())
}

const TERMINATORS: [char; 3] = ['.', '!', '?'];
const CLOSERS: [char; 8] = ['"', '\'', ')', ']', '}', '\u{201d}', '\u{2019}', '\u{00bb}'];

/// Removes a trailing incomplete sentence left behind by a max-token cutoff.
///
/// A text already ending at a sentence terminator (optionally followed by
/// closing quotes/brackets) is returned unchanged, as is a text containing no
/// terminator at all since there is nothing safe to cut.
pub fn cleanup_truncation(text: &str) -> String {
    let trimmed = text.trim_end();
    if trimmed.is_empty() {
        return text.to_string();
    }
    let mut chars: Vec<(usize, char)> = trimmed.char_indices().collect();
    while let Some(&(_, c)) = chars.last() {
        if CLOSERS.contains(&c) {
            chars.pop();
        } else {
            break;
        }
    }
    match chars.last() {
        Some(&(_, c)) if TERMINATORS.contains(&c) => return text.to_string(),
        _ => {}
    }
    // Find the last terminator, then keep any closers that immediately follow it.
    let mut cut_end = None;
    for (i, c) in trimmed.char_indices().rev() {
        if TERMINATORS.contains(&c) {
            let mut end = i + c.len_utf8();
            for (j, c2) in trimmed[end..].char_indices() {
                if CLOSERS.contains(&c2) {
                    end = end + j + c2.len_utf8();
                } else {
                    break;
                }
            }
            cut_end = Some(end);
            break;
        }
    }
    match cut_end {
        Some(end) => trimmed[..end].to_string(),
        None => text.to_string(),
    }
}

/// Embedder front end: content-hash caching plus client-side unit
/// normalization, so downstream cosine math never sees a non-unit vector.
pub struct EmbeddingClient {
    backend: Arc<dyn Embedder>,
    cache: EmbeddingCache,
}

impl EmbeddingClient {
    pub fn new(backend: Arc<dyn Embedder>) -> Self {
        EmbeddingClient {
            backend,
            cache: EmbeddingCache::new(),
        }
    }

    pub fn with_cache(backend: Arc<dyn Embedder>, cache: EmbeddingCache) -> Self {
        EmbeddingClient { backend, cache }
    }

    pub fn cache(&self) -> &EmbeddingCache {
        &self.cache
    }

    pub fn cache_key(&self, text: &str) -> String {
        format!("{}:{}", self.backend.model_name(), content_hash(text))
    }

    /// Embeds a batch, deduplicating against the cache. Output vectors are
    /// unit-norm and aligned with the input order.
    pub fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ClientError> {
        if texts.is_empty() {
            return Err(ClientError::EmptyBatch);
        }
        for (i, t) in texts.iter().enumerate() {
            if t.is_empty() {
                return Err(ClientError::EmptyText(i));
            }
        }
        let keys: Vec<String> = texts.iter().map(|t| self.cache_key(t)).collect();

        let mut missing: Vec<(usize, &String)> = Vec::new();
        let mut seen_keys = std::collections::HashSet::new();
        for (i, key) in keys.iter().enumerate() {
            if self.cache.get(key).is_none() && seen_keys.insert(key.clone()) {
                missing.push((i, &texts[i]));
            }
        }

        if !missing.is_empty() {
            let batch: Vec<String> = missing.iter().map(|(_, t)| (*t).clone()).collect();
            let raw = self.backend.embed(&batch)?;
            if raw.len() != batch.len() {
                return Err(ClientError::CountMismatch {
                    requested: batch.len(),
                    returned: raw.len(),
                });
            }
            let dim = raw[0].len();
            for v in &raw {
                if v.len() != dim {
                    return Err(ClientError::DimensionMismatch {
                        first: dim,
                        other: v.len(),
                    });
                }
            }
            for ((idx, _), vector) in missing.iter().zip(raw) {
                let unit = normalize(&vector)?;
                self.cache.insert(keys[*idx].clone(), unit);
            }
        }

        let mut out = Vec::with_capacity(texts.len());
        for key in &keys {
            let v = self
                .cache
                .get(key)
                .expect("vector cached above or on a previous call");
            // Cached vectors may predate this process; re-check the dimension.
            if let Some(first) = out.first() {
                let first: &Vec<f64> = first;
                if v.len() != first.len() {
                    return Err(ClientError::DimensionMismatch {
                        first: first.len(),
                        other: v.len(),
                    });
                }
            }
            out.push(v);
        }
        Ok(out)
    }
}

fn normalize(v: &[f64]) -> Result<Vec<f64>, ClientError> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(ClientError::ZeroVector);
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// One bundle of clients for every role the pipeline needs.
#[derive(Clone)]
pub struct Endpoints {
    pub base_sampler: Arc<dyn Sampler>,
    pub instruct_sampler: Arc<dyn Sampler>,
    pub rewriter: Arc<dyn Rewriter>,
    pub embedder: Arc<EmbeddingClient>,
    pub reward: Arc<dyn RewardScorer>,
    pub safety: Arc<dyn SafetyJudge>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use mock::{MockEmbedder, MockSampler};

    #[test]
    fn cleanup_removes_trailing_fragment() {
        assert_eq!(
            cleanup_truncation("A full sentence. And then it was cut of"),
            "A full sentence."
        );
    }

    #[test]
    fn cleanup_identity_when_terminated() {
        assert_eq!(cleanup_truncation("A full sentence."), "A full sentence.");
        assert_eq!(cleanup_truncation("Really? Yes!"), "Really? Yes!");
    }

    #[test]
    fn cleanup_no_terminator_is_unchanged() {
        assert_eq!(
            cleanup_truncation("no terminator anywhere"),
            "no terminator anywhere"
        );
        assert_eq!(cleanup_truncation(""), "");
    }

    #[test]
    fn cleanup_keeps_closing_quote_after_terminator() {
        assert_eq!(
            cleanup_truncation("He said \"done.\" and then some trailing junk"),
            "He said \"done.\""
        );
        assert_eq!(cleanup_truncation("(All good.)"), "(All good.)");
    }

    #[test]
    fn sample_responses_returns_exactly_n_cleaned() {
        let sampler = MockSampler::base(7);
        let texts = sample_responses(&sampler, "tell me a story", 3, &Decoding::default()).unwrap();
        assert_eq!(texts.len(), 3);
        assert_eq!(
            texts,
            sample_responses(&sampler, "tell me a story", 3, &Decoding::default()).unwrap()
        );
        // Distinct samples from the same prompt.
        assert_ne!(texts[0], texts[1]);
        assert_ne!(texts[1], texts[2]);
    }

    #[test]
    fn embed_is_unit_norm_and_caches() {
        let backend = Arc::new(MockEmbedder::new(11, 16));
        let client = EmbeddingClient::new(backend.clone());
        let texts = vec!["same text".to_string(), "same text".to_string()];
        let vs = client.embed(&texts).unwrap();
        assert_eq!(vs.len(), 2);
        assert_eq!(vs[0], vs[1]);
        let norm: f64 = vs[0].iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
        // Duplicate text in one batch costs a single backend request.
        assert_eq!(backend.texts_embedded(), 1);
        client.embed(&texts).unwrap();
        assert_eq!(backend.texts_embedded(), 1);
    }

    #[test]
    fn embed_rejects_empty_inputs() {
        let client = EmbeddingClient::new(Arc::new(MockEmbedder::new(1, 8)));
        assert!(matches!(
            client.embed(&[]).unwrap_err(),
            ClientError::EmptyBatch
        ));
        assert!(matches!(
            client.embed(&[String::new()]).unwrap_err(),
            ClientError::EmptyText(0)
        ));
    }

    #[test]
    fn rewrite_rejects_empty_draft() {
        let rewriter = mock::MockRewriter::identity();
        assert!(matches!(
            rewrite_response(&rewriter, "p", "   "),
            Err(ClientError::EmptyDraft)
        ));
    }
}

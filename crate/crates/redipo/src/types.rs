//! Domain types shared by every pipeline stage.
//!
//! All types are immutable value objects: stages consume owned or borrowed
//! values and produce new ones, so they are safe to share across workers.
//! Serialized field order is the struct declaration order and never changes;
//! this keeps JSONL output byte-stable across runs.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;

/// Provenance of a sampled response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    /// Raw draft sampled from the base model.
    BaseRaw,
    /// Base-model draft rewritten by the instruct model.
    BaseRewritten,
    /// Sampled directly from the instruct model.
    Instruct,
}

impl Origin {
    pub fn is_base(self) -> bool {
        matches!(self, Origin::BaseRaw | Origin::BaseRewritten)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Origin::BaseRaw => "base_raw",
            Origin::BaseRewritten => "base_rewritten",
            Origin::Instruct => "instruct",
        }
    }
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Binary verdict from the safety judge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SafetyLabel {
    Safe,
    Unsafe,
}

/// Prompt category from the source dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    OpenQa,
    Brainstorming,
    CreativeWriting,
    Other,
}

/// Pair-construction strategy that produced a preference pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Redipo,
    VanillaDpo,
    Divpo,
    /// Ablation mode: uniform pairs from the feasible set, coin-flip labels.
    Random,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Redipo => "redipo",
            Strategy::VanillaDpo => "vanilla_dpo",
            Strategy::Divpo => "divpo",
            Strategy::Random => "random",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "redipo" => Ok(Strategy::Redipo),
            "vanilla-dpo" | "vanilla_dpo" => Ok(Strategy::VanillaDpo),
            "divpo" => Ok(Strategy::Divpo),
            "random" => Ok(Strategy::Random),
            other => Err(format!("unknown strategy: {other}")),
        }
    }
}

/// One sampled generation with provenance, scores, and filter status.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub response_id: String,
    pub prompt_id: String,
    pub text: String,
    pub origin: Origin,
    /// For `base_rewritten` records, the `base_raw` draft this was rewritten from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub safety_label: Option<SafetyLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub if_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diversity_score: Option<f64>,
    /// Content-hash key into the embedding cache.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_ref: Option<String>,
}

impl ResponseRecord {
    pub fn new(prompt_id: &str, origin: Origin, sample_index: usize, text: String) -> Self {
        let response_id = response_id(prompt_id, origin, sample_index, &text);
        ResponseRecord {
            response_id,
            prompt_id: prompt_id.to_string(),
            text,
            origin,
            parent_id: None,
            safety_label: None,
            if_score: None,
            diversity_score: None,
            embedding_ref: None,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.response_id.is_empty() {
            return Err("response_id is empty".into());
        }
        if self.prompt_id.is_empty() {
            return Err("prompt_id is empty".into());
        }
        if let Some(d) = self.diversity_score {
            if !(0.0..=2.0).contains(&d) {
                return Err("diversity_score out of [0,2]".into());
            }
        }
        if self.origin == Origin::BaseRewritten && self.parent_id.is_none() {
            return Err("base_rewritten record missing parent_id".into());
        }
        if let Some(s) = self.if_score {
            if !s.is_finite() {
                return Err("if_score is not finite".into());
            }
        }
        Ok(())
    }
}

/// Content-derived response identifier: stable across reruns, unique per
/// (prompt, origin, sample slot, text).
pub fn response_id(prompt_id: &str, origin: Origin, sample_index: usize, text: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(prompt_id.as_bytes());
    hasher.update([0x1f]);
    hasher.update(origin.as_str().as_bytes());
    hasher.update([0x1f]);
    hasher.update(sample_index.to_le_bytes());
    hasher.update([0x1f]);
    hasher.update(text.as_bytes());
    let digest = hasher.finalize();
    hex::encode(&digest[..8])
}

/// Content hash used as embedding-cache key.
pub fn content_hash(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    hex::encode(&digest[..16])
}

/// All candidate responses for one prompt plus prompt-level statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptPool {
    pub prompt_id: String,
    pub prompt_text: String,
    pub category: Category,
    pub responses: Vec<ResponseRecord>,
    /// Mean instruct if_score; set by the quality filter over its computation set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instruct_mean_if: Option<f64>,
}

impl PromptPool {
    pub fn new(prompt_id: &str, prompt_text: &str, category: Category) -> Self {
        PromptPool {
            prompt_id: prompt_id.to_string(),
            prompt_text: prompt_text.to_string(),
            category,
            responses: Vec::new(),
            instruct_mean_if: None,
        }
    }

    /// Restores the ordering invariant: responses sorted by response_id.
    pub fn normalize(&mut self) {
        self.responses
            .sort_by(|a, b| a.response_id.cmp(&b.response_id));
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }

    pub fn base_count(&self) -> usize {
        self.responses.iter().filter(|r| r.origin.is_base()).count()
    }

    pub fn instruct_count(&self) -> usize {
        self.responses
            .iter()
            .filter(|r| r.origin == Origin::Instruct)
            .count()
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.prompt_id.is_empty() {
            return Err("prompt_id is empty".into());
        }
        for r in &self.responses {
            r.validate()?;
            if r.prompt_id != self.prompt_id {
                return Err(format!(
                    "response {} belongs to prompt {} not {}",
                    r.response_id, r.prompt_id, self.prompt_id
                ));
            }
        }
        for w in self.responses.windows(2) {
            if w[0].response_id >= w[1].response_id {
                return Err("responses not sorted by response_id or duplicate ids".into());
            }
        }
        Ok(())
    }
}

/// Chosen/rejected response references with reward and diversity gaps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt_id: String,
    pub chosen_id: String,
    pub rejected_id: String,
    pub reward_gap: f64,
    pub diversity_gap: f64,
    pub strategy: Strategy,
}

impl PreferencePair {
    pub fn validate(&self) -> Result<(), String> {
        if self.chosen_id == self.rejected_id {
            return Err("chosen_id equals rejected_id".into());
        }
        if !self.reward_gap.is_finite() || self.reward_gap < 0.0 {
            return Err("reward_gap must be a nonnegative real".into());
        }
        if !self.diversity_gap.is_finite() || self.diversity_gap < 0.0 {
            return Err("diversity_gap must be a nonnegative real".into());
        }
        Ok(())
    }
}

/// Input prompt row as read from the prompts file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptEntry {
    pub prompt_id: String,
    pub prompt_text: String,
    pub category: Category,
}

impl PromptEntry {
    pub fn validate(&self) -> Result<(), String> {
        if self.prompt_id.is_empty() {
            return Err("prompt_id is empty".into());
        }
        Ok(())
    }
}

/// Rejects duplicate response ids within one run's record stream.
pub fn check_unique_ids(records: &[ResponseRecord]) -> Result<(), String> {
    let mut seen = std::collections::HashSet::with_capacity(records.len());
    for r in records {
        if !seen.insert(r.response_id.as_str()) {
            return Err(format!("duplicate response_id {}", r.response_id));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn response_id_is_stable_and_distinct() {
        let a = response_id("p1", Origin::Instruct, 0, "hello");
        let b = response_id("p1", Origin::Instruct, 0, "hello");
        let c = response_id("p1", Origin::Instruct, 1, "hello");
        let d = response_id("p1", Origin::BaseRaw, 0, "hello");
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
        assert_eq!(a.len(), 16);
        assert!(a.chars().all(|ch| ch.is_ascii_hexdigit()));
    }

    #[test]
    fn diversity_score_range_enforced() {
        let mut r = ResponseRecord::new("p1", Origin::Instruct, 0, "x".into());
        r.diversity_score = Some(2.5);
        let err = r.validate().unwrap_err();
        assert_eq!(err, "diversity_score out of [0,2]");
        r.diversity_score = Some(2.0);
        assert!(r.validate().is_ok());
    }

    #[test]
    fn rewritten_requires_parent() {
        let mut r = ResponseRecord::new("p1", Origin::BaseRewritten, 0, "x".into());
        assert!(r.validate().is_err());
        r.parent_id = Some("abcd".into());
        assert!(r.validate().is_ok());
    }

    #[test]
    fn pool_normalize_sorts_by_id() {
        let mut pool = PromptPool::new("p1", "q", Category::OpenQa);
        pool.responses
            .push(ResponseRecord::new("p1", Origin::Instruct, 3, "c".into()));
        pool.responses
            .push(ResponseRecord::new("p1", Origin::Instruct, 1, "a".into()));
        pool.responses
            .push(ResponseRecord::new("p1", Origin::Instruct, 2, "b".into()));
        pool.normalize();
        assert!(pool.validate().is_ok());
        let ids: Vec<_> = pool.responses.iter().map(|r| &r.response_id).collect();
        let mut sorted = ids.clone();
        sorted.sort();
        assert_eq!(ids, sorted);
    }

    #[test]
    fn pair_rejects_self_reference() {
        let p = PreferencePair {
            prompt_id: "p".into(),
            chosen_id: "a".into(),
            rejected_id: "a".into(),
            reward_gap: 0.0,
            diversity_gap: 0.0,
            strategy: Strategy::Redipo,
        };
        assert!(p.validate().is_err());
    }
}

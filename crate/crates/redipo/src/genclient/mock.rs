//! Deterministic in-process stand-ins for every model role.
//!
//! Each mock is a pure function of (seed, inputs): two runs with the same
//! config produce byte-identical stage outputs. Request counters let tests
//! assert that resumed runs issue no new traffic.

use sha2::{Digest, Sha256};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use super::{
    ClientError, Decoding, Embedder, EmbeddingClient, Endpoints, Rewriter, RewardScorer, Sampler,
    SafetyJudge,
};
use crate::types::SafetyLabel;

/// Marker word the mock sampler occasionally injects and the mock judge flags.
pub const DEFAULT_UNSAFE_MARKER: &str = "redflag";

/// Order-sensitive content hash used by every mock; stable across runs.
pub fn stable_hash64(parts: &[&[u8]]) -> u64 {
    let mut hasher = Sha256::new();
    for p in parts {
        hasher.update(p);
        hasher.update([0x1f]);
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Maps a 64-bit hash onto [0, 1).
pub fn hash_fraction(x: u64) -> f64 {
    (x >> 11) as f64 / (1u64 << 53) as f64
}

const BASE_VOCAB: &[&str] = &[
    "river", "stone", "lantern", "orbit", "thicket", "ember", "hollow", "signal", "meadow",
    "cipher", "harbor", "drift", "anvil", "comet", "moss", "ridge", "sparrow", "tide", "branch",
    "quarry", "fable", "mirror", "dune", "frost",
];

const INSTRUCT_VOCAB: &[&str] = &[
    "answer", "consider", "detail", "example", "option", "approach", "concise", "practical",
    "useful", "context", "summary", "clearly", "several", "notable", "common", "specific",
    "overall", "relevant", "distinct", "helpful", "direct", "simple", "broad", "precise",
];

/// Seeded hash-based text generator standing in for a sampling endpoint.
pub struct MockSampler {
    seed: u64,
    style: &'static str,
    vocab: &'static [&'static str],
    unsafe_marker: Option<String>,
    /// Inject the marker when the sample hash is divisible by this (0 = never).
    unsafe_modulus: u64,
    /// Append a dangling sentence fragment when divisible by this (0 = never).
    truncate_modulus: u64,
    requests: AtomicUsize,
}

impl MockSampler {
    pub fn base(seed: u64) -> Self {
        MockSampler {
            seed,
            style: "base",
            vocab: BASE_VOCAB,
            unsafe_marker: Some(DEFAULT_UNSAFE_MARKER.to_string()),
            unsafe_modulus: 23,
            truncate_modulus: 5,
            requests: AtomicUsize::new(0),
        }
    }

    pub fn instruct(seed: u64) -> Self {
        MockSampler {
            seed,
            style: "instruct",
            vocab: INSTRUCT_VOCAB,
            unsafe_marker: Some(DEFAULT_UNSAFE_MARKER.to_string()),
            unsafe_modulus: 41,
            truncate_modulus: 0,
            requests: AtomicUsize::new(0),
        }
    }

    pub fn without_unsafe(mut self) -> Self {
        self.unsafe_marker = None;
        self.unsafe_modulus = 0;
        self
    }

    pub fn requests(&self) -> usize {
        self.requests.load(Ordering::Relaxed)
    }

    fn generate(&self, prompt: &str, index: usize, decoding: &Decoding) -> String {
        let h = stable_hash64(&[
            &self.seed.to_le_bytes(),
            self.style.as_bytes(),
            prompt.as_bytes(),
            &index.to_le_bytes(),
        ]);
        let mut state = h;
        let word_count = (8 + (splitmix64(&mut state) % 9) as usize).min(decoding.max_tokens);
        let mut words: Vec<String> = (0..word_count)
            .map(|_| self.vocab[(splitmix64(&mut state) % self.vocab.len() as u64) as usize].to_string())
            .collect();
        if let Some(marker) = &self.unsafe_marker {
            if self.unsafe_modulus > 0 && h % self.unsafe_modulus == 0 {
                let pos = (splitmix64(&mut state) % words.len() as u64) as usize;
                words[pos] = marker.clone();
            }
        }
        if let Some(first) = words.first_mut() {
            let mut chars = first.chars();
            if let Some(c) = chars.next() {
                *first = c.to_uppercase().collect::<String>() + chars.as_str();
            }
        }
        let mut text = format!("{}.", words.join(" "));
        if self.truncate_modulus > 0 && h % self.truncate_modulus == 0 {
            // Simulate a max_tokens cutoff mid-sentence.
            text.push_str(" and then the rest was");
        }
        text
    }
}

impl Sampler for MockSampler {
    fn sample(
        &self,
        prompt: &str,
        n: usize,
        decoding: &Decoding,
    ) -> Result<Vec<String>, ClientError> {
        self.requests.fetch_add(n, Ordering::Relaxed);
        Ok((0..n).map(|i| self.generate(prompt, i, decoding)).collect())
    }
}

#[derive(Debug, Clone)]
pub enum RewriteMode {
    /// Returns the draft unchanged.
    Identity,
    /// Prepends a fixed prefix to the draft.
    Prefix(String),
}

pub struct MockRewriter {
    mode: RewriteMode,
    requests: AtomicUsize,
}

impl MockRewriter {
    pub fn identity() -> Self {
        MockRewriter {
            mode: RewriteMode::Identity,
            requests: AtomicUsize::new(0),
        }
    }

    pub fn prefix(prefix: &str) -> Self {
        MockRewriter {
            mode: RewriteMode::Prefix(prefix.to_string()),
            requests: AtomicUsize::new(0),
        }
    }

    pub fn requests(&self) -> usize {
        self.requests.load(Ordering::Relaxed)
    }
}

impl Rewriter for MockRewriter {
    fn rewrite(&self, _prompt: &str, draft: &str) -> Result<String, ClientError> {
        self.requests.fetch_add(1, Ordering::Relaxed);
        Ok(match &self.mode {
            RewriteMode::Identity => draft.to_string(),
            RewriteMode::Prefix(p) => format!("{p}{draft}"),
        })
    }
}

/// Hash-derived embedding vectors; deliberately not normalized so that the
/// client-side normalization path is always exercised.
pub struct MockEmbedder {
    seed: u64,
    dim: usize,
    texts_embedded: AtomicUsize,
}

impl MockEmbedder {
    pub fn new(seed: u64, dim: usize) -> Self {
        MockEmbedder {
            seed,
            dim,
            texts_embedded: AtomicUsize::new(0),
        }
    }

    pub fn texts_embedded(&self) -> usize {
        self.texts_embedded.load(Ordering::Relaxed)
    }
}

impl Embedder for MockEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ClientError> {
        self.texts_embedded.fetch_add(texts.len(), Ordering::Relaxed);
        Ok(texts
            .iter()
            .map(|t| {
                let mut state = stable_hash64(&[&self.seed.to_le_bytes(), t.as_bytes()]);
                (0..self.dim)
                    .map(|_| hash_fraction(splitmix64(&mut state)) - 0.5)
                    .collect()
            })
            .collect())
    }

    fn model_name(&self) -> &str {
        "mock-embedder"
    }
}

/// Reward score = 10 x hash fraction of (prompt, response), plus a fixed
/// offset used by shift-invariance tests.
pub struct MockRewardScorer {
    seed: u64,
    offset: f64,
    requests: AtomicUsize,
}

impl MockRewardScorer {
    pub fn new(seed: u64) -> Self {
        MockRewardScorer {
            seed,
            offset: 0.0,
            requests: AtomicUsize::new(0),
        }
    }

    pub fn with_offset(seed: u64, offset: f64) -> Self {
        MockRewardScorer {
            seed,
            offset,
            requests: AtomicUsize::new(0),
        }
    }

    pub fn requests(&self) -> usize {
        self.requests.load(Ordering::Relaxed)
    }
}

impl RewardScorer for MockRewardScorer {
    fn score(&self, prompt: &str, response: &str) -> Result<f64, ClientError> {
        self.requests.fetch_add(1, Ordering::Relaxed);
        let h = stable_hash64(&[
            &self.seed.to_le_bytes(),
            prompt.as_bytes(),
            response.as_bytes(),
        ]);
        Ok(10.0 * hash_fraction(h) + self.offset)
    }
}

/// Flags any response containing the configured marker substring.
pub struct MockSafetyJudge {
    marker: String,
    requests: AtomicUsize,
}

impl MockSafetyJudge {
    pub fn new(marker: &str) -> Self {
        MockSafetyJudge {
            marker: marker.to_string(),
            requests: AtomicUsize::new(0),
        }
    }
}

impl Default for MockSafetyJudge {
    fn default() -> Self {
        Self::new(DEFAULT_UNSAFE_MARKER)
    }
}

impl MockSafetyJudge {
    pub fn requests(&self) -> usize {
        self.requests.load(Ordering::Relaxed)
    }
}

impl SafetyJudge for MockSafetyJudge {
    fn judge(&self, _prompt: &str, response: &str) -> Result<SafetyLabel, ClientError> {
        self.requests.fetch_add(1, Ordering::Relaxed);
        Ok(if response.contains(&self.marker) {
            SafetyLabel::Unsafe
        } else {
            SafetyLabel::Safe
        })
    }
}

/// A full mock endpoint bundle plus handles to the per-role request counters.
pub struct MockSet {
    pub endpoints: Endpoints,
    pub base: Arc<MockSampler>,
    pub instruct: Arc<MockSampler>,
    pub rewriter: Arc<MockRewriter>,
    pub embedder: Arc<MockEmbedder>,
    pub reward: Arc<MockRewardScorer>,
    pub safety: Arc<MockSafetyJudge>,
}

impl MockSet {
    pub fn new(seed: u64) -> Self {
        let base = Arc::new(MockSampler::base(seed));
        let instruct = Arc::new(MockSampler::instruct(seed.wrapping_add(1)));
        let rewriter = Arc::new(MockRewriter::prefix("REWRITTEN: "));
        let embedder = Arc::new(MockEmbedder::new(seed.wrapping_add(2), 16));
        let reward = Arc::new(MockRewardScorer::new(seed.wrapping_add(3)));
        let safety = Arc::new(MockSafetyJudge::default());
        let endpoints = Endpoints {
            base_sampler: base.clone(),
            instruct_sampler: instruct.clone(),
            rewriter: rewriter.clone(),
            embedder: Arc::new(EmbeddingClient::new(embedder.clone())),
            reward: reward.clone(),
            safety: safety.clone(),
        };
        MockSet {
            endpoints,
            base,
            instruct,
            rewriter,
            embedder,
            reward,
            safety,
        }
    }

    /// Total requests issued across every role, for idempotence checks.
    pub fn total_requests(&self) -> usize {
        self.base.requests()
            + self.instruct.requests()
            + self.rewriter.requests()
            + self.embedder.texts_embedded()
            + self.reward.requests()
            + self.safety.requests()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampler_is_deterministic_and_distinct() {
        let s = MockSampler::base(42);
        let a = s.sample("prompt", 3, &Decoding::default()).unwrap();
        let b = s.sample("prompt", 3, &Decoding::default()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0], a[1]);
        assert_ne!(a[0], a[2]);
    }

    #[test]
    fn reward_is_deterministic_in_range_and_shiftable() {
        let r = MockRewardScorer::new(5);
        let s1 = r.score("p", "text").unwrap();
        let s2 = r.score("p", "text").unwrap();
        assert_eq!(s1, s2);
        assert!((0.0..10.0).contains(&s1));
        let shifted = MockRewardScorer::with_offset(5, 2.0);
        assert_eq!(shifted.score("p", "text").unwrap(), s1 + 2.0);
    }

    #[test]
    fn judge_flags_marker_only() {
        let j = MockSafetyJudge::default();
        assert_eq!(
            j.judge("p", "contains redflag word").unwrap(),
            SafetyLabel::Unsafe
        );
        assert_eq!(j.judge("p", "all calm here").unwrap(), SafetyLabel::Safe);
    }

    #[test]
    fn embedder_is_pure_per_text() {
        let e = MockEmbedder::new(9, 8);
        let v1 = e.embed(&["abc".into()]).unwrap();
        let v2 = e.embed(&["abc".into()]).unwrap();
        assert_eq!(v1, v2);
        assert_eq!(v1[0].len(), 8);
    }
}

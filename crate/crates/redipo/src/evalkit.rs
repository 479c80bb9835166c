//! Bootstrap confidence intervals and validation-set metrics.
//!
//! Intervals are percentile bootstrap over resampled means, reported as
//! half-widths. Resampling derives one RNG stream per resample index from
//! the seed, so results are independent of chunking and thread count.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diversity::{marginal_diversity, DiversityError};
use crate::dpolab::CheckpointMetrics;
use crate::genclient::{
    sample_responses, ClientError, Decoding, EmbeddingClient, RewardScorer, SafetyJudge, Sampler,
};
use crate::types::{PromptEntry, SafetyLabel};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty input")]
    EmptyInput,
    #[error("confidence must lie in (0,1), got {0}")]
    InvalidConfidence(f64),
    #[error("validation sampling needs k >= 2, got {0}")]
    InvalidK(usize),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Diversity(#[from] DiversityError),
}

/// Point estimate with a bootstrap half-width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCI {
    pub estimate: f64,
    pub half_width: f64,
    pub resamples: usize,
    pub confidence: f64,
}

/// Seed for resample `index`'s private RNG stream. Part of the output
/// contract: results depend only on (seed, index), never on chunking.
pub fn resample_seed(seed: u64, index: u64) -> u64 {
    seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(0x243f_6a88_85a3_08d3)
}

/// Linear-interpolation quantile of an already sorted slice.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Percentile bootstrap of the mean. The point estimate is the plain sample
/// mean; only the half-width comes from resampling.
pub fn bootstrap_ci(
    values: &[f64],
    resamples: usize,
    confidence: f64,
    seed: u64,
) -> Result<BootstrapCI, EvalError> {
    if values.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    if !(0.0 < confidence && confidence < 1.0) {
        return Err(EvalError::InvalidConfidence(confidence));
    }
    let n = values.len();
    let estimate = values.iter().sum::<f64>() / n as f64;
    let mut means: Vec<f64> = (0..resamples as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(resample_seed(seed, i));
            let mut sum = 0.0;
            for _ in 0..n {
                sum += values[rng.random_range(0..n)];
            }
            sum / n as f64
        })
        .collect();
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - confidence) / 2.0;
    let half_width = if means.is_empty() {
        0.0
    } else {
        (quantile_sorted(&means, 1.0 - tail) - quantile_sorted(&means, tail)) / 2.0
    };
    Ok(BootstrapCI {
        estimate,
        half_width,
        resamples,
        confidence,
    })
}

/// Mean and population standard deviation of whitespace word counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub mean: f64,
    pub std_dev: f64,
    pub count: usize,
}

pub fn length_stats(texts: &[String]) -> Option<LengthStats> {
    if texts.is_empty() {
        return None;
    }
    let counts: Vec<f64> = texts
        .iter()
        .map(|t| t.split_whitespace().count() as f64)
        .collect();
    let n = counts.len() as f64;
    let mean = counts.iter().sum::<f64>() / n;
    let variance = counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / n;
    Some(LengthStats {
        mean,
        std_dev: variance.sqrt(),
        count: texts.len(),
    })
}

/// Per-prompt aggregates collected during a validation sweep.
struct PromptAggregates {
    mean_diversity: f64,
    mean_if: f64,
    safety_rate: f64,
    texts: Vec<String>,
}

fn prompt_aggregates(
    sampler: &dyn Sampler,
    embedder: &EmbeddingClient,
    reward: &dyn RewardScorer,
    safety: &dyn SafetyJudge,
    prompt: &PromptEntry,
    k: usize,
    decoding: &Decoding,
) -> Result<PromptAggregates, EvalError> {
    let texts = sample_responses(sampler, &prompt.prompt_text, k, decoding)?;
    let embeddings = embedder.embed(&texts)?;
    let ids: Vec<String> = (0..k).map(|i| format!("v{i:03}")).collect();
    let report = marginal_diversity(&prompt.prompt_id, &ids, &embeddings)?;
    let mean_diversity = report
        .entries
        .iter()
        .map(|e| e.diversity_score)
        .sum::<f64>()
        / k as f64;
    let mut if_sum = 0.0;
    let mut safe = 0usize;
    for text in &texts {
        if_sum += reward.score(&prompt.prompt_text, text)?;
        if safety.judge(&prompt.prompt_text, text)? == SafetyLabel::Safe {
            safe += 1;
        }
    }
    Ok(PromptAggregates {
        mean_diversity,
        mean_if: if_sum / k as f64,
        safety_rate: safe as f64 / k as f64,
        texts,
    })
}

/// Samples `k` responses per validation prompt and aggregates mean marginal
/// diversity, mean reward score, and safety rate. All-or-nothing: any
/// endpoint failure refuses the whole metric set.
pub fn validation_metrics(
    sampler: &dyn Sampler,
    embedder: &EmbeddingClient,
    reward: &dyn RewardScorer,
    safety: &dyn SafetyJudge,
    prompts: &[PromptEntry],
    k: usize,
    decoding: &Decoding,
) -> Result<CheckpointMetrics, EvalError> {
    if prompts.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    if k < 2 {
        return Err(EvalError::InvalidK(k));
    }
    let per_prompt: Vec<PromptAggregates> = prompts
        .par_iter()
        .map(|p| prompt_aggregates(sampler, embedder, reward, safety, p, k, decoding))
        .collect::<Result<_, _>>()?;
    let n = per_prompt.len() as f64;
    Ok(CheckpointMetrics {
        mean_marginal_diversity: per_prompt.iter().map(|a| a.mean_diversity).sum::<f64>() / n,
        mean_if_score: per_prompt.iter().map(|a| a.mean_if).sum::<f64>() / n,
        safety_rate: per_prompt.iter().map(|a| a.safety_rate).sum::<f64>() / n,
    })
}

/// Full validation report with per-metric bootstrap intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub prompts: usize,
    pub k: usize,
    pub marginal_diversity: BootstrapCI,
    pub if_score: BootstrapCI,
    pub safety_rate: BootstrapCI,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub length: Option<LengthStats>,
}

#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    sampler: &dyn Sampler,
    embedder: &EmbeddingClient,
    reward: &dyn RewardScorer,
    safety: &dyn SafetyJudge,
    prompts: &[PromptEntry],
    k: usize,
    decoding: &Decoding,
    resamples: usize,
    confidence: f64,
    seed: u64,
) -> Result<EvalReport, EvalError> {
    if prompts.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    if k < 2 {
        return Err(EvalError::InvalidK(k));
    }
    let per_prompt: Vec<PromptAggregates> = prompts
        .par_iter()
        .map(|p| prompt_aggregates(sampler, embedder, reward, safety, p, k, decoding))
        .collect::<Result<_, _>>()?;
    let diversity: Vec<f64> = per_prompt.iter().map(|a| a.mean_diversity).collect();
    let if_scores: Vec<f64> = per_prompt.iter().map(|a| a.mean_if).collect();
    let safety_rates: Vec<f64> = per_prompt.iter().map(|a| a.safety_rate).collect();
    let texts: Vec<String> = per_prompt.iter().flat_map(|a| a.texts.clone()).collect();
    Ok(EvalReport {
        prompts: prompts.len(),
        k,
        marginal_diversity: bootstrap_ci(&diversity, resamples, confidence, seed)?,
        if_score: bootstrap_ci(&if_scores, resamples, confidence, seed.wrapping_add(1))?,
        safety_rate: bootstrap_ci(&safety_rates, resamples, confidence, seed.wrapping_add(2))?,
        length: length_stats(&texts),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genclient::mock::{MockRewardScorer, MockSafetyJudge};
    use crate::genclient::{ClientError, Embedder};
    use crate::types::Category;
    use std::sync::Arc;

    #[test]
    fn constant_values_have_zero_half_width() {
        let ci = bootstrap_ci(&[5.0, 5.0, 5.0, 5.0], 1000, 0.95, 7).unwrap();
        assert_eq!(ci.estimate, 5.0);
        assert_eq!(ci.half_width, 0.0);
    }

    #[test]
    fn single_value_has_zero_half_width() {
        let ci = bootstrap_ci(&[3.25], 1000, 0.95, 7).unwrap();
        assert_eq!(ci.estimate, 3.25);
        assert_eq!(ci.half_width, 0.0);
    }

    #[test]
    fn estimate_is_the_exact_sample_mean() {
        let values = [1.0, 2.0, 4.0, 9.0];
        let ci = bootstrap_ci(&values, 100, 0.95, 1).unwrap();
        assert_eq!(ci.estimate, values.iter().sum::<f64>() / 4.0);
    }

    #[test]
    fn empty_and_bad_confidence_rejected() {
        assert!(matches!(
            bootstrap_ci(&[], 100, 0.95, 1),
            Err(EvalError::EmptyInput)
        ));
        assert!(matches!(
            bootstrap_ci(&[1.0], 100, 1.0, 1),
            Err(EvalError::InvalidConfidence(_))
        ));
    }

    #[test]
    fn deterministic_under_seed_and_thread_count() {
        let values: Vec<f64> = (0..200).map(|i| (i as f64 * 0.37).sin()).collect();
        let a = bootstrap_ci(&values, 1000, 0.95, 42).unwrap();
        let b = bootstrap_ci(&values, 1000, 0.95, 42).unwrap();
        assert_eq!(a, b);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let c = pool.install(|| bootstrap_ci(&values, 1000, 0.95, 42).unwrap());
        assert_eq!(a, c);
    }

    #[test]
    fn half_width_shrinks_with_sample_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let mut wins = 0;
        for trial in 0..20 {
            let small: Vec<f64> = (0..100).map(|_| rng.random_range(0.0..1.0)).collect();
            let large: Vec<f64> = (0..400).map(|_| rng.random_range(0.0..1.0)).collect();
            let hw_small = bootstrap_ci(&small, 500, 0.95, trial).unwrap().half_width;
            let hw_large = bootstrap_ci(&large, 500, 0.95, trial).unwrap().half_width;
            if hw_large < hw_small {
                wins += 1;
            }
        }
        assert!(wins > 10, "only {wins}/20 trials shrank");
    }

    #[test]
    fn length_stats_basic() {
        let stats = length_stats(&["a b".to_string(), "a b c d".to_string()]).unwrap();
        assert_eq!(stats.mean, 3.0);
        assert_eq!(stats.std_dev, 1.0);
        assert!(length_stats(&[]).is_none());
    }

    #[test]
    fn length_stats_matches_independent_count() {
        let texts: Vec<String> = (0..50)
            .map(|i| {
                (0..(i % 7 + 1))
                    .map(|j| format!("w{j}"))
                    .collect::<Vec<_>>()
                    .join("  ")
            })
            .collect();
        let stats = length_stats(&texts).unwrap();
        // Count words by whitespace transitions instead of split().
        let mut total = 0usize;
        for t in &texts {
            let mut in_word = false;
            for c in t.chars() {
                if c.is_whitespace() {
                    in_word = false;
                } else if !in_word {
                    in_word = true;
                    total += 1;
                }
            }
        }
        assert_eq!(stats.mean, total as f64 / texts.len() as f64);
    }

    /// Sampler that replays a fixed list of texts for every prompt.
    struct FixedSampler(Vec<String>);

    impl Sampler for FixedSampler {
        fn sample(
            &self,
            _prompt: &str,
            n: usize,
            _decoding: &Decoding,
        ) -> Result<Vec<String>, ClientError> {
            Ok((0..n).map(|i| self.0[i % self.0.len()].clone()).collect())
        }
    }

    /// One-hot embedder: each distinct text gets its own axis.
    struct OneHotEmbedder {
        dim: usize,
        seen: parking_lot::Mutex<std::collections::HashMap<String, usize>>,
    }

    impl Embedder for OneHotEmbedder {
        fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ClientError> {
            let mut seen = self.seen.lock();
            Ok(texts
                .iter()
                .map(|t| {
                    let next = seen.len();
                    let idx = *seen.entry(t.clone()).or_insert(next);
                    let mut v = vec![0.0; self.dim];
                    v[idx % self.dim] = 1.0;
                    v
                })
                .collect())
        }

        fn model_name(&self) -> &str {
            "one-hot"
        }
    }

    fn validation_prompts(n: usize) -> Vec<PromptEntry> {
        (0..n)
            .map(|i| PromptEntry {
                prompt_id: format!("v{i}"),
                prompt_text: format!("validation prompt {i}"),
                category: Category::OpenQa,
            })
            .collect()
    }

    #[test]
    fn identical_samples_have_zero_mean_diversity() {
        let sampler = FixedSampler(vec!["the same answer.".to_string()]);
        let embedder = EmbeddingClient::new(Arc::new(OneHotEmbedder {
            dim: 16,
            seen: Default::default(),
        }));
        let reward = MockRewardScorer::new(1);
        let safety = MockSafetyJudge::default();
        let metrics = validation_metrics(
            &sampler,
            &embedder,
            &reward,
            &safety,
            &validation_prompts(3),
            5,
            &Decoding::default(),
        )
        .unwrap();
        assert_eq!(metrics.mean_marginal_diversity, 0.0);
        assert_eq!(metrics.safety_rate, 1.0);
    }

    #[test]
    fn orthogonal_samples_have_unit_mean_diversity() {
        let sampler = FixedSampler((0..5).map(|i| format!("answer {i}.")).collect());
        let embedder = EmbeddingClient::new(Arc::new(OneHotEmbedder {
            dim: 16,
            seen: Default::default(),
        }));
        let reward = MockRewardScorer::new(1);
        let safety = MockSafetyJudge::default();
        let metrics = validation_metrics(
            &sampler,
            &embedder,
            &reward,
            &safety,
            &validation_prompts(2),
            5,
            &Decoding::default(),
        )
        .unwrap();
        assert_eq!(metrics.mean_marginal_diversity, 1.0);
    }

    #[test]
    fn evaluate_is_deterministic_under_mocks() {
        let prompts = validation_prompts(6);
        let run = || {
            let mocks = crate::genclient::mock::MockSet::new(99);
            evaluate(
                mocks.endpoints.instruct_sampler.as_ref(),
                &mocks.endpoints.embedder,
                mocks.endpoints.reward.as_ref(),
                mocks.endpoints.safety.as_ref(),
                &prompts,
                4,
                &Decoding::default(),
                200,
                0.95,
                7,
            )
            .unwrap()
        };
        assert_eq!(run(), run());
    }
}

//! Preference-pair construction.
//!
//! The main strategy pairs responses of comparable reward (gap at most
//! epsilon), labels the more marginally diverse side as chosen, ranks pairs
//! by diversity gap, caps how often one response may appear, and keeps the
//! top alpha percent per prompt. Baseline strategies (plain reward-gap
//! pairing, reward-bucketed pairing with a log-probability proxy, and a
//! random ablation) are built over the same scored-response view.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::types::{PreferencePair, Strategy};

/// The per-response inputs pair construction needs: reward score and
/// marginal diversity, keyed by response id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredResponse {
    pub response_id: String,
    pub if_score: f64,
    pub diversity: f64,
}

/// An unordered candidate pair, canonicalized so `first_id < second_id`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePair {
    pub first_id: String,
    pub second_id: String,
    pub reward_gap: f64,
    pub diversity_gap: f64,
}

/// Knobs for the main selection strategy.
#[derive(Debug, Clone, Copy)]
pub struct RedipoParams {
    pub epsilon: f64,
    pub alpha_percent: f64,
    pub cap: usize,
    /// Exclude pairs with exactly zero diversity gap instead of ranking them last.
    pub drop_zero_gap: bool,
    /// Size the retention from the pre-cap feasible list.
    pub alpha_pre_cap: bool,
}

impl RedipoParams {
    pub fn new(epsilon: f64, alpha_percent: f64, cap: usize) -> Self {
        RedipoParams {
            epsilon,
            alpha_percent,
            cap,
            drop_zero_gap: false,
            alpha_pre_cap: false,
        }
    }
}

/// All unordered pairs whose reward gap is at most epsilon (inclusive).
pub fn enumerate_epsilon_pairs(
    responses: &[ScoredResponse],
    epsilon: f64,
) -> Vec<CandidatePair> {
    let mut sorted: Vec<&ScoredResponse> = responses.iter().collect();
    sorted.sort_by(|a, b| a.response_id.cmp(&b.response_id));
    let mut pairs = Vec::new();
    for i in 0..sorted.len() {
        for j in (i + 1)..sorted.len() {
            let reward_gap = (sorted[i].if_score - sorted[j].if_score).abs();
            if reward_gap <= epsilon {
                pairs.push(CandidatePair {
                    first_id: sorted[i].response_id.clone(),
                    second_id: sorted[j].response_id.clone(),
                    reward_gap,
                    diversity_gap: (sorted[i].diversity - sorted[j].diversity).abs(),
                });
            }
        }
    }
    pairs
}

/// Labels one pair: the larger marginal diversity wins; ties go to the
/// lexicographically smaller response id.
pub fn label_pair(
    prompt_id: &str,
    a: &ScoredResponse,
    b: &ScoredResponse,
    strategy: Strategy,
) -> PreferencePair {
    let a_chosen = match a.diversity.total_cmp(&b.diversity) {
        std::cmp::Ordering::Greater => true,
        std::cmp::Ordering::Less => false,
        std::cmp::Ordering::Equal => a.response_id < b.response_id,
    };
    let (chosen, rejected) = if a_chosen { (a, b) } else { (b, a) };
    PreferencePair {
        prompt_id: prompt_id.to_string(),
        chosen_id: chosen.response_id.clone(),
        rejected_id: rejected.response_id.clone(),
        reward_gap: (a.if_score - b.if_score).abs(),
        diversity_gap: (a.diversity - b.diversity).abs(),
        strategy,
    }
}

fn by_id<'a>(responses: &'a [ScoredResponse], id: &str) -> &'a ScoredResponse {
    responses
        .iter()
        .find(|r| r.response_id == id)
        .expect("candidate pair references a pool response")
}

/// Retention size: ceil of alpha percent of `base`, at least 1 when the
/// selection is nonempty.
fn alpha_keep(alpha_percent: f64, base: usize) -> usize {
    ((alpha_percent / 100.0) * base as f64).ceil().max(1.0) as usize
}

/// The main selection strategy over one prompt's surviving responses.
///
/// Steps: enumerate epsilon-feasible pairs, label by marginal diversity,
/// rank by diversity gap (ties by chosen then rejected id), sweep greedily
/// skipping pairs where either side already appears `cap` times, then keep
/// the top alpha percent of the accepted list.
pub fn select_redipo_pairs(
    prompt_id: &str,
    responses: &[ScoredResponse],
    params: &RedipoParams,
) -> Vec<PreferencePair> {
    let feasible = enumerate_epsilon_pairs(responses, params.epsilon);
    let feasible_count = feasible.len();

    let mut labeled: Vec<PreferencePair> = feasible
        .iter()
        .filter(|c| !(params.drop_zero_gap && c.diversity_gap == 0.0))
        .map(|c| {
            label_pair(
                prompt_id,
                by_id(responses, &c.first_id),
                by_id(responses, &c.second_id),
                Strategy::Redipo,
            )
        })
        .collect();

    labeled.sort_by(|a, b| {
        b.diversity_gap
            .total_cmp(&a.diversity_gap)
            .then_with(|| a.chosen_id.cmp(&b.chosen_id))
            .then_with(|| a.rejected_id.cmp(&b.rejected_id))
    });

    let mut occurrences: std::collections::HashMap<&str, usize> = std::collections::HashMap::new();
    let mut accepted: Vec<PreferencePair> = Vec::new();
    for pair in &labeled {
        let c = occurrences.get(pair.chosen_id.as_str()).copied().unwrap_or(0);
        let r = occurrences
            .get(pair.rejected_id.as_str())
            .copied()
            .unwrap_or(0);
        if c >= params.cap || r >= params.cap {
            continue;
        }
        *occurrences.entry(pair.chosen_id.as_str()).or_insert(0) += 1;
        *occurrences.entry(pair.rejected_id.as_str()).or_insert(0) += 1;
        accepted.push(pair.clone());
    }

    if accepted.is_empty() {
        return accepted;
    }
    let base = if params.alpha_pre_cap {
        feasible_count
    } else {
        accepted.len()
    };
    let keep = alpha_keep(params.alpha_percent, base).min(accepted.len());
    accepted.truncate(keep);
    accepted
}

/// Plain reward-gap baseline: every pair, chosen = higher score, keep the
/// top fraction per prompt by reward gap.
pub fn select_vanilla_dpo_pairs(
    prompt_id: &str,
    responses: &[ScoredResponse],
    top_fraction: f64,
) -> Vec<PreferencePair> {
    let mut sorted: Vec<&ScoredResponse> = responses.iter().collect();
    sorted.sort_by(|a, b| a.response_id.cmp(&b.response_id));
    let mut pairs = Vec::new();
    for i in 0..sorted.len() {
        for j in (i + 1)..sorted.len() {
            let (a, b) = (sorted[i], sorted[j]);
            let a_chosen = match a.if_score.total_cmp(&b.if_score) {
                std::cmp::Ordering::Greater => true,
                std::cmp::Ordering::Less => false,
                std::cmp::Ordering::Equal => a.response_id < b.response_id,
            };
            let (chosen, rejected) = if a_chosen { (a, b) } else { (b, a) };
            pairs.push(PreferencePair {
                prompt_id: prompt_id.to_string(),
                chosen_id: chosen.response_id.clone(),
                rejected_id: rejected.response_id.clone(),
                reward_gap: (a.if_score - b.if_score).abs(),
                diversity_gap: (a.diversity - b.diversity).abs(),
                strategy: Strategy::VanillaDpo,
            });
        }
    }
    pairs.sort_by(|a, b| {
        b.reward_gap
            .total_cmp(&a.reward_gap)
            .then_with(|| a.chosen_id.cmp(&b.chosen_id))
            .then_with(|| a.rejected_id.cmp(&b.rejected_id))
    });
    if pairs.is_empty() {
        return pairs;
    }
    let keep = (top_fraction * pairs.len() as f64).ceil().max(1.0) as usize;
    pairs.truncate(keep.min(pairs.len()));
    pairs
}

/// Keeps the global top `n` pairs by the given key, with a stable id-based
/// tie-break. Used for the baselines' global pair budget.
pub fn global_top_pairs(
    mut pairs: Vec<PreferencePair>,
    n: usize,
    by_reward: bool,
) -> Vec<PreferencePair> {
    pairs.sort_by(|a, b| {
        let key = if by_reward {
            b.reward_gap.total_cmp(&a.reward_gap)
        } else {
            b.diversity_gap.total_cmp(&a.diversity_gap)
        };
        key.then_with(|| a.prompt_id.cmp(&b.prompt_id))
            .then_with(|| a.chosen_id.cmp(&b.chosen_id))
            .then_with(|| a.rejected_id.cmp(&b.rejected_id))
    });
    pairs.truncate(n);
    pairs
}

/// Supplies total token log probability and token count for a response.
/// The default token unit is whitespace words.
pub trait LogprobScorer: Send + Sync {
    fn logprob_and_tokens(&self, text: &str) -> (f64, usize);
}

/// Mock scorer: hash-derived mean token log probability over whitespace tokens.
pub struct HashLogprobScorer {
    seed: u64,
}

impl HashLogprobScorer {
    pub fn new(seed: u64) -> Self {
        HashLogprobScorer { seed }
    }
}

impl LogprobScorer for HashLogprobScorer {
    fn logprob_and_tokens(&self, text: &str) -> (f64, usize) {
        use crate::genclient::mock::{hash_fraction, stable_hash64};
        let tokens = text.split_whitespace().count().max(1);
        let h = hash_fraction(stable_hash64(&[&self.seed.to_le_bytes(), text.as_bytes()]));
        // Mean token logprob in (-2.5, -0.5); total scales with length.
        let mean_logprob = -(0.5 + 2.0 * h);
        (mean_logprob * tokens as f64, tokens)
    }
}

/// One pair for the reward-bucketed baseline: responses are split at the
/// median reward into high/low groups; the most "diverse" high response
/// (largest negative length-normalized log probability) is chosen and the
/// least diverse low response rejected. Returns the pair plus its ranking
/// key (the chosen side's proxy) for the caller's global budget.
pub fn select_divpo_pair(
    prompt_id: &str,
    responses: &[ScoredResponse],
    proxies: &[f64],
) -> Option<(PreferencePair, f64)> {
    assert_eq!(responses.len(), proxies.len());
    if responses.len() < 2 {
        return None;
    }
    let mut order: Vec<usize> = (0..responses.len()).collect();
    order.sort_by(|&a, &b| {
        responses[a]
            .if_score
            .total_cmp(&responses[b].if_score)
            .then_with(|| responses[a].response_id.cmp(&responses[b].response_id))
    });
    let scores: Vec<f64> = order.iter().map(|&i| responses[i].if_score).collect();
    let n = scores.len();
    let median = if n % 2 == 0 {
        (scores[n / 2 - 1] + scores[n / 2]) / 2.0
    } else {
        scores[n / 2]
    };
    let high: Vec<usize> = (0..responses.len())
        .filter(|&i| responses[i].if_score >= median)
        .collect();
    let low: Vec<usize> = (0..responses.len())
        .filter(|&i| responses[i].if_score < median)
        .collect();
    if high.is_empty() || low.is_empty() {
        log::warn!("prompt {prompt_id}: empty reward group; skipping");
        return None;
    }
    let chosen = *high
        .iter()
        .max_by(|&&a, &&b| {
            proxies[a]
                .total_cmp(&proxies[b])
                .then_with(|| responses[b].response_id.cmp(&responses[a].response_id))
        })
        .unwrap();
    let rejected = *low
        .iter()
        .min_by(|&&a, &&b| {
            proxies[a]
                .total_cmp(&proxies[b])
                .then_with(|| responses[a].response_id.cmp(&responses[b].response_id))
        })
        .unwrap();
    let pair = PreferencePair {
        prompt_id: prompt_id.to_string(),
        chosen_id: responses[chosen].response_id.clone(),
        rejected_id: responses[rejected].response_id.clone(),
        reward_gap: (responses[chosen].if_score - responses[rejected].if_score).abs(),
        diversity_gap: (proxies[chosen] - proxies[rejected]).abs(),
        strategy: Strategy::Divpo,
    };
    Some((pair, proxies[chosen]))
}

/// Ablation: `count` pairs drawn uniformly without replacement from the
/// epsilon-feasible set, labels decided by a coin flip from the caller's RNG.
pub fn select_random_pairs(
    prompt_id: &str,
    responses: &[ScoredResponse],
    epsilon: f64,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<PreferencePair> {
    let feasible = enumerate_epsilon_pairs(responses, epsilon);
    if feasible.is_empty() || count == 0 {
        return Vec::new();
    }
    let mut indices: Vec<usize> = (0..feasible.len()).collect();
    let take = count.min(indices.len());
    for i in 0..take {
        let j = rng.random_range(i..indices.len());
        indices.swap(i, j);
    }
    indices.truncate(take);
    indices
        .into_iter()
        .map(|idx| {
            let c = &feasible[idx];
            let first_chosen = rng.random_bool(0.5);
            let (chosen_id, rejected_id) = if first_chosen {
                (c.first_id.clone(), c.second_id.clone())
            } else {
                (c.second_id.clone(), c.first_id.clone())
            };
            PreferencePair {
                prompt_id: prompt_id.to_string(),
                chosen_id,
                rejected_id,
                reward_gap: c.reward_gap,
                diversity_gap: c.diversity_gap,
                strategy: Strategy::Random,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;

    fn scored(items: &[(&str, f64, f64)]) -> Vec<ScoredResponse> {
        items
            .iter()
            .map(|(id, score, d)| ScoredResponse {
                response_id: id.to_string(),
                if_score: *score,
                diversity: *d,
            })
            .collect()
    }

    #[test]
    fn epsilon_boundary_is_inclusive() {
        let pool = scored(&[("a", 5.0, 0.1), ("b", 12.0, 0.2)]);
        assert!(enumerate_epsilon_pairs(&pool, 6.0).is_empty());
        let pool = scored(&[("a", 5.0, 0.1), ("b", 11.0, 0.2)]);
        let pairs = enumerate_epsilon_pairs(&pool, 6.0);
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].reward_gap, 6.0);
    }

    #[test]
    fn unbounded_epsilon_enumerates_all_pairs() {
        let pool: Vec<ScoredResponse> = (0..12)
            .map(|i| ScoredResponse {
                response_id: format!("r{i:02}"),
                if_score: i as f64,
                diversity: 0.0,
            })
            .collect();
        assert_eq!(enumerate_epsilon_pairs(&pool, f64::INFINITY).len(), 66);
    }

    #[test]
    fn label_assigns_larger_diversity_as_chosen() {
        let pool = scored(&[("a", 1.0, 0.8), ("b", 1.0, 0.3)]);
        let pair = label_pair("p", &pool[0], &pool[1], Strategy::Redipo);
        assert_eq!(pair.chosen_id, "a");
        assert_eq!(pair.rejected_id, "b");
    }

    #[test]
    fn label_tie_breaks_by_smaller_id() {
        let pool = scored(&[("b2", 1.0, 0.5), ("a1", 1.0, 0.5)]);
        let pair = label_pair("p", &pool[0], &pool[1], Strategy::Redipo);
        assert_eq!(pair.chosen_id, "a1");
    }

    #[test]
    fn label_agrees_with_argmax_on_random_pools() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let a = ScoredResponse {
                response_id: format!("r{}", rng.random_range(0..10)),
                if_score: 0.0,
                diversity: rng.random_range(0.0..2.0),
            };
            let mut b = a.clone();
            b.response_id.push('x');
            b.diversity = rng.random_range(0.0..2.0);
            let pair = label_pair("p", &a, &b, Strategy::Redipo);
            let expect_chosen = if a.diversity > b.diversity
                || (a.diversity == b.diversity && a.response_id < b.response_id)
            {
                &a.response_id
            } else {
                &b.response_id
            };
            assert_eq!(&pair.chosen_id, expect_chosen);
        }
    }

    #[test]
    fn redipo_without_binding_constraints_keeps_all_ranked() {
        let pool = scored(&[
            ("a", 1.0, 0.9),
            ("b", 1.5, 0.5),
            ("c", 2.0, 0.2),
            ("d", 2.5, 0.05),
        ]);
        let params = RedipoParams::new(f64::INFINITY, 100.0, 16);
        let pairs = select_redipo_pairs("p", &pool, &params);
        assert_eq!(pairs.len(), 6);
        for w in pairs.windows(2) {
            assert!(w[0].diversity_gap >= w[1].diversity_gap);
        }
    }

    #[test]
    fn cap_one_yields_a_matching() {
        let pool = scored(&[
            ("a", 1.0, 0.9),
            ("b", 1.1, 0.5),
            ("c", 1.2, 0.2),
            ("d", 1.3, 0.01),
        ]);
        let params = RedipoParams::new(f64::INFINITY, 100.0, 1);
        let pairs = select_redipo_pairs("p", &pool, &params);
        let mut seen = std::collections::HashSet::new();
        for pair in &pairs {
            assert!(seen.insert(pair.chosen_id.clone()));
            assert!(seen.insert(pair.rejected_id.clone()));
        }
    }

    #[test]
    fn emitted_pairs_satisfy_feasibility_and_label_rule() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let n = rng.random_range(2..10);
            let pool: Vec<ScoredResponse> = (0..n)
                .map(|i| ScoredResponse {
                    response_id: format!("r{i:02}"),
                    if_score: rng.random_range(0.0..10.0),
                    diversity: rng.random_range(0.0..1.5),
                })
                .collect();
            let eps = rng.random_range(0.0..8.0);
            let cap = rng.random_range(1..6);
            let params = RedipoParams::new(eps, rng.random_range(1.0..100.0), cap);
            let pairs = select_redipo_pairs("p", &pool, &params);
            let mut occurrences = std::collections::HashMap::new();
            for pair in &pairs {
                assert!(pair.reward_gap <= eps);
                let chosen = pool.iter().find(|r| r.response_id == pair.chosen_id).unwrap();
                let rejected = pool
                    .iter()
                    .find(|r| r.response_id == pair.rejected_id)
                    .unwrap();
                assert!(chosen.diversity >= rejected.diversity);
                *occurrences.entry(pair.chosen_id.clone()).or_insert(0usize) += 1;
                *occurrences.entry(pair.rejected_id.clone()).or_insert(0usize) += 1;
            }
            for (_, count) in occurrences {
                assert!(count <= cap);
            }
        }
    }

    #[test]
    fn reward_shift_leaves_selection_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let n = rng.random_range(2..9);
            let pool: Vec<ScoredResponse> = (0..n)
                .map(|i| ScoredResponse {
                    response_id: format!("r{i:02}"),
                    if_score: rng.random_range(-5.0..5.0),
                    diversity: rng.random_range(0.0..1.0),
                })
                .collect();
            let shift = rng.random_range(-100.0..100.0f64);
            let shifted: Vec<ScoredResponse> = pool
                .iter()
                .map(|r| ScoredResponse {
                    if_score: r.if_score + shift,
                    ..r.clone()
                })
                .collect();
            let params = RedipoParams::new(2.0, 50.0, 3);
            let a = select_redipo_pairs("p", &pool, &params);
            let b = select_redipo_pairs("p", &shifted, &params);
            assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(&b) {
                assert_eq!(x.chosen_id, y.chosen_id);
                assert_eq!(x.rejected_id, y.rejected_id);
                assert!((x.reward_gap - y.reward_gap).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn epsilon_monotonicity_of_feasible_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..200 {
            let n = rng.random_range(2..10);
            let pool: Vec<ScoredResponse> = (0..n)
                .map(|i| ScoredResponse {
                    response_id: format!("r{i:02}"),
                    if_score: rng.random_range(0.0..10.0),
                    diversity: 0.0,
                })
                .collect();
            let e1 = rng.random_range(0.0..5.0);
            let e2 = e1 + rng.random_range(0.0..5.0);
            let small: std::collections::HashSet<(String, String)> =
                enumerate_epsilon_pairs(&pool, e1)
                    .into_iter()
                    .map(|c| (c.first_id, c.second_id))
                    .collect();
            let large: std::collections::HashSet<(String, String)> =
                enumerate_epsilon_pairs(&pool, e2)
                    .into_iter()
                    .map(|c| (c.first_id, c.second_id))
                    .collect();
            assert!(small.is_subset(&large));
        }
    }

    #[test]
    fn vanilla_two_responses() {
        let pool = scored(&[("a", 3.0, 0.0), ("b", 7.0, 0.0)]);
        let pairs = select_vanilla_dpo_pairs("p", &pool, 0.25);
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].chosen_id, "b");
        assert_eq!(pairs[0].reward_gap, 4.0);
    }

    #[test]
    fn vanilla_equal_scores_tie_break_by_id() {
        let pool = scored(&[("a", 5.0, 0.0), ("b", 5.0, 0.0), ("c", 5.0, 0.0)]);
        let pairs = select_vanilla_dpo_pairs("p", &pool, 1.0);
        assert_eq!(pairs.len(), 3);
        for pair in &pairs {
            assert!(pair.chosen_id < pair.rejected_id);
            assert_eq!(pair.reward_gap, 0.0);
        }
    }

    #[test]
    fn vanilla_matches_top_fraction_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let n = rng.random_range(2..9);
            let pool: Vec<ScoredResponse> = (0..n)
                .map(|i| ScoredResponse {
                    response_id: format!("r{i:02}"),
                    if_score: rng.random_range(0.0..10.0),
                    diversity: 0.0,
                })
                .collect();
            let pairs = select_vanilla_dpo_pairs("p", &pool, 0.25);
            let total = n * (n - 1) / 2;
            let expected = ((0.25 * total as f64).ceil() as usize).max(1);
            assert_eq!(pairs.len(), expected.min(total));
            // Every kept pair's gap is >= every dropped pair's gap.
            let all = select_vanilla_dpo_pairs("p", &pool, 1.0);
            let min_kept = pairs
                .iter()
                .map(|p| p.reward_gap)
                .fold(f64::INFINITY, f64::min);
            for pair in &all[pairs.len()..] {
                assert!(pair.reward_gap <= min_kept + 1e-12);
            }
        }
    }

    #[test]
    fn divpo_hand_fixture() {
        let pool = scored(&[
            ("a", 1.0, 0.0),
            ("b", 2.0, 0.0),
            ("c", 8.0, 0.0),
            ("d", 9.0, 0.0),
        ]);
        let proxies = [0.5, 0.9, 1.2, 0.3];
        let (pair, key) = select_divpo_pair("p", &pool, &proxies).unwrap();
        assert_eq!(pair.chosen_id, "c");
        assert_eq!(pair.rejected_id, "a");
        assert_eq!(key, 1.2);
        assert_eq!(pair.reward_gap, 7.0);
    }

    #[test]
    fn divpo_identical_proxies_tie_break_by_id() {
        let pool = scored(&[
            ("a", 1.0, 0.0),
            ("b", 2.0, 0.0),
            ("c", 8.0, 0.0),
            ("d", 9.0, 0.0),
        ]);
        let proxies = [1.0, 1.0, 1.0, 1.0];
        let (pair, _) = select_divpo_pair("p", &pool, &proxies).unwrap();
        assert_eq!(pair.chosen_id, "c");
        assert_eq!(pair.rejected_id, "a");
    }

    #[test]
    fn divpo_degenerate_pools_yield_nothing() {
        let pool = scored(&[("a", 1.0, 0.0)]);
        assert!(select_divpo_pair("p", &pool, &[0.5]).is_none());
        // All scores equal: low group is empty.
        let pool = scored(&[("a", 5.0, 0.0), ("b", 5.0, 0.0)]);
        assert!(select_divpo_pair("p", &pool, &[0.5, 0.9]).is_none());
    }

    #[test]
    fn random_pairs_are_feasible_and_seed_deterministic() {
        let pool = scored(&[
            ("a", 1.0, 0.3),
            ("b", 2.0, 0.6),
            ("c", 3.0, 0.1),
            ("d", 4.0, 0.9),
        ]);
        let mut rng1 = ChaCha8Rng::seed_from_u64(7);
        let mut rng2 = ChaCha8Rng::seed_from_u64(7);
        let a = select_random_pairs("p", &pool, 2.0, 3, &mut rng1);
        let b = select_random_pairs("p", &pool, 2.0, 3, &mut rng2);
        assert_eq!(a, b);
        for pair in &a {
            assert!(pair.reward_gap <= 2.0);
        }
    }

    #[test]
    fn hash_logprob_scorer_is_deterministic() {
        let scorer = HashLogprobScorer::new(3);
        let (lp1, t1) = scorer.logprob_and_tokens("three word text");
        let (lp2, t2) = scorer.logprob_and_tokens("three word text");
        assert_eq!((lp1, t1), (lp2, t2));
        assert_eq!(t1, 3);
        assert!(lp1 < 0.0);
        let proxy = -(lp1 / t1 as f64);
        assert!((0.5..=2.5).contains(&proxy));
    }
}

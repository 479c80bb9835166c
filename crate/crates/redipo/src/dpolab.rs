//! Numeric laboratory for the preference-training objective: the sigmoid
//! loss with label smoothing and per-pair weights, analytic gradients with a
//! finite-difference check, a desk-scale categorical-policy trainer, and the
//! validation-gated checkpoint selector.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Gate width on mean instruction-following score during checkpoint selection.
pub const DEFAULT_TAU_IF: f64 = 6.0;
/// Gate width on safety rate during checkpoint selection.
pub const DEFAULT_TAU_SAFETY: f64 = 0.15;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("beta must be positive, got {0}")]
    InvalidBeta(f64),
    #[error("label smoothing must lie in [0, 0.5), got {0}")]
    InvalidLabelSmoothing(f64),
    #[error("weight must be nonnegative, got {0}")]
    InvalidWeight(f64),
    #[error("training diverged (loss not finite) at step {step}")]
    Diverged { step: usize },
    #[error("outcome space of {0} exceeds the supported 64")]
    OutcomeSpaceTooLarge(usize),
    #[error("pair references outcome {index} outside the space of {size}")]
    BadPairIndex { index: usize, size: usize },
    #[error("candidate list is empty")]
    EmptyCandidates,
    #[error("reference policy length {got} does not match outcome space {expected}")]
    ReferenceLengthMismatch { got: usize, expected: usize },
}

/// Log-probabilities for one preference pair under the policy and the frozen
/// reference, plus a loss weight (1.0 for plain training; the diversity
/// score of the chosen response for diversity-weighted training).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairLogits {
    pub policy_chosen: f64,
    pub policy_rejected: f64,
    pub reference_chosen: f64,
    pub reference_rejected: f64,
    pub weight: f64,
}

impl PairLogits {
    pub fn new(
        policy_chosen: f64,
        policy_rejected: f64,
        reference_chosen: f64,
        reference_rejected: f64,
    ) -> Self {
        PairLogits {
            policy_chosen,
            policy_rejected,
            reference_chosen,
            reference_rejected,
            weight: 1.0,
        }
    }

    pub fn with_weight(mut self, weight: f64) -> Self {
        self.weight = weight;
        self
    }

    /// Implicit-reward margin: (chosen log-ratio) minus (rejected log-ratio).
    pub fn delta(&self) -> f64 {
        (self.policy_chosen - self.reference_chosen)
            - (self.policy_rejected - self.reference_rejected)
    }
}

/// softplus(x) = ln(1 + e^x), overflow-free.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_args(pair: &PairLogits, beta: f64, label_smoothing: f64) -> Result<(), LabError> {
    if !(beta > 0.0) {
        return Err(LabError::InvalidBeta(beta));
    }
    if !(0.0..0.5).contains(&label_smoothing) {
        return Err(LabError::InvalidLabelSmoothing(label_smoothing));
    }
    if !(pair.weight >= 0.0) {
        return Err(LabError::InvalidWeight(pair.weight));
    }
    Ok(())
}

/// Label-smoothed sigmoid preference loss for one pair:
/// `weight * ((1-s) * softplus(-beta*delta) + s * softplus(beta*delta))`.
///
/// `-ln(sigmoid(x))` is computed as `softplus(-x)`, so the value stays
/// finite for |beta*delta| well past 1e4.
pub fn dpo_loss(pair: &PairLogits, beta: f64, label_smoothing: f64) -> Result<f64, LabError> {
    check_args(pair, beta, label_smoothing)?;
    let scaled = beta * pair.delta();
    Ok(pair.weight
        * ((1.0 - label_smoothing) * softplus(-scaled) + label_smoothing * softplus(scaled)))
}

/// Analytic partials of [`dpo_loss`] with respect to the four log-probs, in
/// the order (policy_chosen, policy_rejected, reference_chosen,
/// reference_rejected).
pub fn dpo_gradient(
    pair: &PairLogits,
    beta: f64,
    label_smoothing: f64,
) -> Result<[f64; 4], LabError> {
    check_args(pair, beta, label_smoothing)?;
    let scaled = beta * pair.delta();
    let g = pair.weight
        * beta
        * (label_smoothing * sigmoid(scaled) - (1.0 - label_smoothing) * sigmoid(-scaled));
    Ok([g, -g, -g, g])
}

/// Compares [`dpo_gradient`] against central finite differences (step 1e-5)
/// and returns the maximum relative error over the four partials.
pub fn dpo_grad_check(
    pair: &PairLogits,
    beta: f64,
    label_smoothing: f64,
) -> Result<f64, LabError> {
    const STEP: f64 = 1e-5;
    fn field_mut(p: &mut PairLogits, i: usize) -> &mut f64 {
        match i {
            0 => &mut p.policy_chosen,
            1 => &mut p.policy_rejected,
            2 => &mut p.reference_chosen,
            _ => &mut p.reference_rejected,
        }
    }
    let analytic = dpo_gradient(pair, beta, label_smoothing)?;
    let mut max_err = 0.0f64;
    for i in 0..4 {
        let mut lo = *pair;
        let mut hi = *pair;
        *field_mut(&mut lo, i) -= STEP;
        *field_mut(&mut hi, i) += STEP;
        let numeric =
            (dpo_loss(&hi, beta, label_smoothing)? - dpo_loss(&lo, beta, label_smoothing)?)
                / (2.0 * STEP);
        let scale = analytic[i].abs().max(numeric.abs()).max(1e-6);
        max_err = max_err.max((analytic[i] - numeric).abs() / scale);
    }
    Ok(max_err)
}

/// One training pair over a small discrete outcome space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyPair {
    pub chosen: usize,
    pub rejected: usize,
    /// Loss weight; zero silences the pair entirely.
    pub weight: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct ToyTrainConfig {
    pub beta: f64,
    pub label_smoothing: f64,
    pub steps: usize,
    pub learning_rate: f64,
}

impl Default for ToyTrainConfig {
    fn default() -> Self {
        ToyTrainConfig {
            beta: 0.1,
            label_smoothing: 0.05,
            steps: 200,
            learning_rate: 1.0,
        }
    }
}

/// Trace of a toy training run: per-step mean loss, per-step mean
/// chosen-minus-rejected log-prob margin, and the final policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub losses: Vec<f64>,
    pub margins: Vec<f64>,
    pub final_logits: Vec<f64>,
    pub final_policy: Vec<f64>,
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_norm = logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|z| z - log_norm).collect()
}

/// Full-batch gradient descent on the mean pair loss over a categorical
/// policy's logit table, against a fixed reference policy (uniform unless
/// supplied as logits).
pub fn toy_train(
    outcome_space: usize,
    pairs: &[ToyPair],
    reference_logits: Option<&[f64]>,
    config: &ToyTrainConfig,
) -> Result<TrainTrace, LabError> {
    if outcome_space > 64 {
        return Err(LabError::OutcomeSpaceTooLarge(outcome_space));
    }
    if !(config.beta > 0.0) {
        return Err(LabError::InvalidBeta(config.beta));
    }
    if !(0.0..0.5).contains(&config.label_smoothing) {
        return Err(LabError::InvalidLabelSmoothing(config.label_smoothing));
    }
    for pair in pairs {
        if pair.chosen >= outcome_space || pair.rejected >= outcome_space {
            return Err(LabError::BadPairIndex {
                index: pair.chosen.max(pair.rejected),
                size: outcome_space,
            });
        }
        if !(pair.weight >= 0.0) {
            return Err(LabError::InvalidWeight(pair.weight));
        }
    }
    let reference = match reference_logits {
        Some(r) if r.len() != outcome_space => {
            return Err(LabError::ReferenceLengthMismatch {
                got: r.len(),
                expected: outcome_space,
            })
        }
        Some(r) => log_softmax(r),
        None => log_softmax(&vec![0.0; outcome_space]),
    };

    let mut logits = vec![0.0f64; outcome_space];
    let mut losses = Vec::with_capacity(config.steps);
    let mut margins = Vec::with_capacity(config.steps);
    let count = pairs.len().max(1) as f64;

    for step in 0..config.steps {
        let logp = log_softmax(&logits);
        let mut loss_sum = 0.0;
        let mut margin_sum = 0.0;
        let mut grad = vec![0.0f64; outcome_space];
        for pair in pairs {
            let logits_pair = PairLogits {
                policy_chosen: logp[pair.chosen],
                policy_rejected: logp[pair.rejected],
                reference_chosen: reference[pair.chosen],
                reference_rejected: reference[pair.rejected],
                weight: pair.weight,
            };
            loss_sum += dpo_loss(&logits_pair, config.beta, config.label_smoothing)?;
            margin_sum += logp[pair.chosen] - logp[pair.rejected];
            let [g_chosen, g_rejected, _, _] =
                dpo_gradient(&logits_pair, config.beta, config.label_smoothing)?;
            // The softmax normalizer cancels in the chosen-rejected
            // difference, so the logit gradient lands on the two entries.
            grad[pair.chosen] += g_chosen / count;
            grad[pair.rejected] += g_rejected / count;
        }
        let loss = loss_sum / count;
        if !loss.is_finite() {
            return Err(LabError::Diverged { step });
        }
        losses.push(loss);
        margins.push(margin_sum / count);
        for (z, g) in logits.iter_mut().zip(&grad) {
            *z -= config.learning_rate * g;
        }
    }

    let final_policy = {
        let logp = log_softmax(&logits);
        logp.iter().map(|lp| lp.exp()).collect()
    };
    Ok(TrainTrace {
        losses,
        margins,
        final_logits: logits,
        final_policy,
    })
}

/// Validation metrics for one checkpoint (or for the instruct baseline).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMetrics {
    pub mean_marginal_diversity: f64,
    pub mean_if_score: f64,
    /// Fraction of validation responses judged safe.
    pub safety_rate: f64,
}

impl CheckpointMetrics {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.safety_rate) {
            return Err(format!("safety_rate out of [0,1]: {}", self.safety_rate));
        }
        Ok(())
    }
}

impl crate::jsonl::JsonlRecord for CheckpointMetrics {
    fn validate_record(&self) -> Result<(), String> {
        self.validate()
    }
}

/// Among candidates within `tau_if` of the baseline's instruction-following
/// mean and `tau_safety` of its safety rate, picks the one with the highest
/// mean marginal diversity (earliest index on ties). `Ok(None)` means no
/// candidate passed both gates.
pub fn select_checkpoint(
    candidates: &[CheckpointMetrics],
    baseline: &CheckpointMetrics,
    tau_if: f64,
    tau_safety: f64,
) -> Result<Option<usize>, LabError> {
    if candidates.is_empty() {
        return Err(LabError::EmptyCandidates);
    }
    let mut best: Option<usize> = None;
    for (i, c) in candidates.iter().enumerate() {
        let passes = c.mean_if_score >= baseline.mean_if_score - tau_if
            && c.safety_rate >= baseline.safety_rate - tau_safety;
        if !passes {
            continue;
        }
        match best {
            None => best = Some(i),
            Some(b) if c.mean_marginal_diversity > candidates[b].mean_marginal_diversity => {
                best = Some(i)
            }
            _ => {}
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    const LN_2: f64 = std::f64::consts::LN_2;

    fn pair_with_delta(delta: f64) -> PairLogits {
        PairLogits::new(delta / 2.0, -delta / 2.0, 0.0, 0.0)
    }

    #[test]
    fn zero_delta_loss_is_ln_two_for_any_smoothing() {
        for smoothing in [0.0, 0.05, 0.3] {
            let loss = dpo_loss(&pair_with_delta(0.0), 0.1, smoothing).unwrap();
            assert!((loss - LN_2).abs() < 1e-12, "smoothing {smoothing}: {loss}");
        }
    }

    #[test]
    fn large_positive_delta_drives_unsmoothed_loss_to_zero() {
        let loss = dpo_loss(&pair_with_delta(1e4), 1.0, 0.0).unwrap();
        assert!(loss >= 0.0 && loss < 1e-300);
        // No overflow in the other direction either.
        let loss = dpo_loss(&pair_with_delta(-1e4), 1.0, 0.0).unwrap();
        assert!(loss.is_finite() && loss >= 1e4 - 1.0);
    }

    #[test]
    fn matches_direct_formula_evaluation() {
        // Straightforward second implementation of the same expression.
        let beta = 0.03;
        let smoothing = 0.05;
        let delta = 10.0;
        let naive = -(1.0 - smoothing) * sigmoid(beta * delta).ln()
            - smoothing * sigmoid(-beta * delta).ln();
        let loss = dpo_loss(&pair_with_delta(delta), beta, smoothing).unwrap();
        assert!((loss - naive).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_arguments() {
        let p = pair_with_delta(1.0);
        assert!(matches!(dpo_loss(&p, 0.0, 0.0), Err(LabError::InvalidBeta(_))));
        assert!(matches!(
            dpo_loss(&p, 0.1, 0.5),
            Err(LabError::InvalidLabelSmoothing(_))
        ));
        assert!(matches!(
            dpo_loss(&p.with_weight(-1.0), 0.1, 0.0),
            Err(LabError::InvalidWeight(_))
        ));
    }

    #[test]
    fn loss_is_nonnegative_and_symmetric_about_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let delta: f64 = rng.random_range(-30.0..30.0);
            let beta: f64 = rng.random_range(0.01..1.0);
            let loss_pos = dpo_loss(&pair_with_delta(delta), beta, 0.0).unwrap();
            let loss_neg = dpo_loss(&pair_with_delta(-delta), beta, 0.0).unwrap();
            assert!(loss_pos >= 0.0);
            assert!(loss_pos + loss_neg >= 2.0 * LN_2 - 1e-12);
        }
        let at_zero = dpo_loss(&pair_with_delta(0.0), 0.1, 0.0).unwrap();
        assert!((2.0 * at_zero - 2.0 * LN_2).abs() < 1e-12);
    }

    #[test]
    fn reference_shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let pair = PairLogits::new(
                rng.random_range(-10.0..0.0),
                rng.random_range(-10.0..0.0),
                rng.random_range(-10.0..0.0),
                rng.random_range(-10.0..0.0),
            );
            let shift: f64 = rng.random_range(-50.0..50.0);
            let shifted = PairLogits {
                reference_chosen: pair.reference_chosen + shift,
                reference_rejected: pair.reference_rejected + shift,
                ..pair
            };
            let a = dpo_loss(&pair, 0.1, 0.05).unwrap();
            let b = dpo_loss(&shifted, 0.1, 0.05).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let pair = PairLogits::new(
                rng.random_range(-10.0..0.0),
                rng.random_range(-10.0..0.0),
                rng.random_range(-10.0..0.0),
                rng.random_range(-10.0..0.0),
            )
            .with_weight(rng.random_range(0.0..2.0));
            let beta = rng.random_range(0.01..0.2);
            let smoothing = [0.0, 0.05, 0.3][rng.random_range(0..3)];
            let err = dpo_grad_check(&pair, beta, smoothing).unwrap();
            assert!(err < 1e-5, "relative error {err}");
        }
    }

    #[test]
    fn gradient_at_zero_delta_has_known_magnitude() {
        let beta = 0.1;
        for smoothing in [0.0, 0.05, 0.3] {
            let g = dpo_gradient(&pair_with_delta(0.0), beta, smoothing).unwrap();
            let expected = beta * (1.0 - 2.0 * smoothing) / 2.0;
            assert!((g[0].abs() - expected).abs() < 1e-12);
            // Chosen-side gradient is negative (descending increases margin).
            assert!(g[0] < 0.0);
            assert_eq!(g[0], -g[1]);
            assert_eq!(g[0], g[3]);
        }
    }

    #[test]
    fn zero_weight_zeroes_the_gradient() {
        let pair = pair_with_delta(3.0).with_weight(0.0);
        let g = dpo_gradient(&pair, 0.1, 0.05).unwrap();
        assert_eq!(g, [0.0; 4]);
        assert_eq!(dpo_loss(&pair, 0.1, 0.05).unwrap(), 0.0);
    }

    #[test]
    fn toy_train_single_pair_prefers_chosen() {
        let pairs = [ToyPair {
            chosen: 0,
            rejected: 1,
            weight: 1.0,
        }];
        let trace = toy_train(4, &pairs, None, &ToyTrainConfig::default()).unwrap();
        assert!(trace.final_policy[0] > trace.final_policy[1]);
        // Margin rises monotonically after the first update.
        for w in trace.margins.windows(2).skip(1) {
            assert!(w[1] > w[0]);
        }
        // Loss curve is non-increasing at this learning rate.
        for w in trace.losses.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
    }

    #[test]
    fn toy_train_zero_weights_leave_policy_uniform() {
        let pairs = [
            ToyPair {
                chosen: 0,
                rejected: 1,
                weight: 0.0,
            },
            ToyPair {
                chosen: 2,
                rejected: 3,
                weight: 0.0,
            },
        ];
        let trace = toy_train(4, &pairs, None, &ToyTrainConfig::default()).unwrap();
        for p in &trace.final_policy {
            assert!((p - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn toy_train_conflicting_pairs_match_reordered_rerun() {
        let pairs = [
            ToyPair {
                chosen: 0,
                rejected: 1,
                weight: 1.0,
            },
            ToyPair {
                chosen: 1,
                rejected: 0,
                weight: 1.0,
            },
        ];
        let config = ToyTrainConfig::default();
        let trace = toy_train(2, &pairs, None, &config).unwrap();

        // Oracle: same descent, pairs applied in the opposite order, with an
        // independently written loss/gradient path.
        let mut logits = [0.0f64; 2];
        for _ in 0..config.steps {
            let logp = log_softmax(&logits);
            let mut grad = [0.0f64; 2];
            for pair in pairs.iter().rev() {
                let delta = logp[pair.chosen] - logp[pair.rejected];
                let x = config.beta * delta;
                let sig = 1.0 / (1.0 + (-x).exp());
                let g = pair.weight
                    * config.beta
                    * (config.label_smoothing * sig - (1.0 - config.label_smoothing) * (1.0 - sig));
                grad[pair.chosen] += g / pairs.len() as f64;
                grad[pair.rejected] -= g / pairs.len() as f64;
            }
            for (z, g) in logits.iter_mut().zip(&grad) {
                *z -= config.learning_rate * g;
            }
        }
        for (a, b) in trace.final_logits.iter().zip(&logits) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        // Conflicting equal-weight pairs cancel: the policy stays balanced.
        assert!((trace.final_policy[0] - trace.final_policy[1]).abs() < 1e-9);
    }

    #[test]
    fn toy_train_rejects_bad_input() {
        assert!(matches!(
            toy_train(65, &[], None, &ToyTrainConfig::default()),
            Err(LabError::OutcomeSpaceTooLarge(65))
        ));
        let bad = [ToyPair {
            chosen: 5,
            rejected: 0,
            weight: 1.0,
        }];
        assert!(matches!(
            toy_train(4, &bad, None, &ToyTrainConfig::default()),
            Err(LabError::BadPairIndex { .. })
        ));
    }

    fn metrics(d: f64, if_score: f64, safety: f64) -> CheckpointMetrics {
        CheckpointMetrics {
            mean_marginal_diversity: d,
            mean_if_score: if_score,
            safety_rate: safety,
        }
    }

    #[test]
    fn singleton_passing_both_gates_is_selected() {
        let baseline = metrics(0.2, 10.0, 0.95);
        let candidates = [metrics(0.5, 9.0, 0.9)];
        let picked =
            select_checkpoint(&candidates, &baseline, DEFAULT_TAU_IF, DEFAULT_TAU_SAFETY).unwrap();
        assert_eq!(picked, Some(0));
    }

    #[test]
    fn diversity_best_failing_safety_gate_is_skipped() {
        let baseline = metrics(0.2, 10.0, 0.95);
        let candidates = [
            metrics(0.9, 9.5, 0.70), // best diversity, fails safety gate (< 0.80)
            metrics(0.6, 9.0, 0.85),
            metrics(0.4, 9.8, 0.96),
        ];
        let picked =
            select_checkpoint(&candidates, &baseline, DEFAULT_TAU_IF, DEFAULT_TAU_SAFETY).unwrap();
        assert_eq!(picked, Some(1));
    }

    #[test]
    fn all_failing_if_gate_yields_none() {
        let baseline = metrics(0.2, 10.0, 0.95);
        let candidates = [metrics(0.9, 3.0, 0.95), metrics(0.6, 2.0, 0.99)];
        let picked =
            select_checkpoint(&candidates, &baseline, DEFAULT_TAU_IF, DEFAULT_TAU_SAFETY).unwrap();
        assert_eq!(picked, None);
        assert!(matches!(
            select_checkpoint(&[], &baseline, DEFAULT_TAU_IF, DEFAULT_TAU_SAFETY),
            Err(LabError::EmptyCandidates)
        ));
    }

    #[test]
    fn selection_invariant_under_diversity_rescaling() {
        let baseline = metrics(0.2, 10.0, 0.95);
        let candidates = [
            metrics(0.3, 9.0, 0.9),
            metrics(0.7, 9.0, 0.9),
            metrics(0.5, 9.0, 0.9),
        ];
        let picked =
            select_checkpoint(&candidates, &baseline, DEFAULT_TAU_IF, DEFAULT_TAU_SAFETY).unwrap();
        let scaled: Vec<CheckpointMetrics> = candidates
            .iter()
            .map(|c| metrics(c.mean_marginal_diversity * 37.5, c.mean_if_score, c.safety_rate))
            .collect();
        let picked_scaled =
            select_checkpoint(&scaled, &baseline, DEFAULT_TAU_IF, DEFAULT_TAU_SAFETY).unwrap();
        assert_eq!(picked, picked_scaled);
        // Ties resolve to the earliest index.
        let tied = [metrics(0.5, 9.0, 0.9), metrics(0.5, 9.0, 0.9)];
        assert_eq!(
            select_checkpoint(&tied, &baseline, DEFAULT_TAU_IF, DEFAULT_TAU_SAFETY).unwrap(),
            Some(0)
        );
    }
}

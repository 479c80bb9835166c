//! Python bindings over the core pipeline operations: truncation cleanup,
//! diversity scoring, pair selection, the preference loss with its gradient
//! check, checkpoint gating, and bootstrap intervals.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use redipo::diversity;
use redipo::dpolab;
use redipo::evalkit;
use redipo::genclient;
use redipo::pairing::{self, RedipoParams, ScoredResponse};

fn value_error<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Remove a trailing incomplete sentence left by a token-budget cutoff.
#[pyfunction]
fn cleanup_truncation(text: &str) -> String {
    genclient::cleanup_truncation(text)
}

/// Cosine similarity of two unit vectors, clamped to [-1, 1].
#[pyfunction]
fn cosine_similarity(u: Vec<f64>, v: Vec<f64>) -> PyResult<f64> {
    diversity::cosine_similarity(&u, &v).map_err(value_error)
}

/// Marginal diversity for each embedding against the rest of its pool.
#[pyfunction]
fn marginal_diversity(embeddings: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    let ids: Vec<String> = (0..embeddings.len()).map(|i| format!("r{i:04}")).collect();
    let report = diversity::marginal_diversity("pool", &ids, &embeddings).map_err(value_error)?;
    Ok(report.entries.into_iter().map(|e| e.diversity_score).collect())
}

/// Label-smoothed sigmoid preference loss for one pair of log-probs.
#[pyfunction]
#[pyo3(signature = (policy_chosen, policy_rejected, reference_chosen, reference_rejected, beta, label_smoothing=0.05, weight=1.0))]
#[allow(clippy::too_many_arguments)]
fn dpo_loss(
    policy_chosen: f64,
    policy_rejected: f64,
    reference_chosen: f64,
    reference_rejected: f64,
    beta: f64,
    label_smoothing: f64,
    weight: f64,
) -> PyResult<f64> {
    let pair = dpolab::PairLogits::new(
        policy_chosen,
        policy_rejected,
        reference_chosen,
        reference_rejected,
    )
    .with_weight(weight);
    dpolab::dpo_loss(&pair, beta, label_smoothing).map_err(value_error)
}

/// Max relative error between analytic and finite-difference gradients.
#[pyfunction]
#[pyo3(signature = (policy_chosen, policy_rejected, reference_chosen, reference_rejected, beta, label_smoothing=0.05, weight=1.0))]
#[allow(clippy::too_many_arguments)]
fn dpo_grad_check(
    policy_chosen: f64,
    policy_rejected: f64,
    reference_chosen: f64,
    reference_rejected: f64,
    beta: f64,
    label_smoothing: f64,
    weight: f64,
) -> PyResult<f64> {
    let pair = dpolab::PairLogits::new(
        policy_chosen,
        policy_rejected,
        reference_chosen,
        reference_rejected,
    )
    .with_weight(weight);
    dpolab::dpo_grad_check(&pair, beta, label_smoothing).map_err(value_error)
}

/// Preference pairs for one prompt: (chosen_id, rejected_id, reward_gap,
/// diversity_gap), ranked as the pipeline would emit them.
#[pyfunction]
#[pyo3(signature = (ids, if_scores, diversities, epsilon=6.0, alpha_percent=25.0, cap=16))]
fn select_redipo_pairs(
    ids: Vec<String>,
    if_scores: Vec<f64>,
    diversities: Vec<f64>,
    epsilon: f64,
    alpha_percent: f64,
    cap: usize,
) -> PyResult<Vec<(String, String, f64, f64)>> {
    if ids.len() != if_scores.len() || ids.len() != diversities.len() {
        return Err(PyValueError::new_err(
            "ids, if_scores, and diversities must have equal length",
        ));
    }
    let responses: Vec<ScoredResponse> = ids
        .into_iter()
        .zip(if_scores)
        .zip(diversities)
        .map(|((response_id, if_score), diversity)| ScoredResponse {
            response_id,
            if_score,
            diversity,
        })
        .collect();
    let params = RedipoParams::new(epsilon, alpha_percent, cap);
    Ok(pairing::select_redipo_pairs("prompt", &responses, &params)
        .into_iter()
        .map(|p| (p.chosen_id, p.rejected_id, p.reward_gap, p.diversity_gap))
        .collect())
}

/// Gated checkpoint selection. Candidates and baseline are
/// (mean_marginal_diversity, mean_if_score, safety_rate) triples; returns
/// the selected index or None.
#[pyfunction]
#[pyo3(signature = (candidates, baseline, tau_if=6.0, tau_s=0.15))]
fn select_checkpoint(
    candidates: Vec<(f64, f64, f64)>,
    baseline: (f64, f64, f64),
    tau_if: f64,
    tau_s: f64,
) -> PyResult<Option<usize>> {
    let to_metrics = |(d, s, r): (f64, f64, f64)| dpolab::CheckpointMetrics {
        mean_marginal_diversity: d,
        mean_if_score: s,
        safety_rate: r,
    };
    let candidates: Vec<dpolab::CheckpointMetrics> =
        candidates.into_iter().map(to_metrics).collect();
    dpolab::select_checkpoint(&candidates, &to_metrics(baseline), tau_if, tau_s)
        .map_err(value_error)
}

/// Percentile bootstrap of the mean: returns (estimate, half_width).
#[pyfunction]
#[pyo3(signature = (values, resamples=1000, confidence=0.95, seed=0))]
fn bootstrap_ci(
    values: Vec<f64>,
    resamples: usize,
    confidence: f64,
    seed: u64,
) -> PyResult<(f64, f64)> {
    let ci = evalkit::bootstrap_ci(&values, resamples, confidence, seed).map_err(value_error)?;
    Ok((ci.estimate, ci.half_width))
}

/// Mean and population std of whitespace word counts, or None for no texts.
#[pyfunction]
fn length_stats(texts: Vec<String>) -> Option<(f64, f64)> {
    evalkit::length_stats(&texts).map(|s| (s.mean, s.std_dev))
}

/// Full-batch toy trainer over a categorical policy. Pairs are
/// (chosen, rejected, weight) index triples; returns (losses, final_policy).
#[pyfunction]
#[pyo3(signature = (outcome_space, pairs, steps=200, learning_rate=1.0, beta=0.1, label_smoothing=0.05))]
fn toy_train(
    outcome_space: usize,
    pairs: Vec<(usize, usize, f64)>,
    steps: usize,
    learning_rate: f64,
    beta: f64,
    label_smoothing: f64,
) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let pairs: Vec<dpolab::ToyPair> = pairs
        .into_iter()
        .map(|(chosen, rejected, weight)| dpolab::ToyPair {
            chosen,
            rejected,
            weight,
        })
        .collect();
    let config = dpolab::ToyTrainConfig {
        beta,
        label_smoothing,
        steps,
        learning_rate,
    };
    let trace = dpolab::toy_train(outcome_space, &pairs, None, &config).map_err(value_error)?;
    Ok((trace.losses, trace.final_policy))
}

/// Default pipeline configuration rendered as TOML.
#[pyfunction]
fn default_config() -> String {
    redipo::config::PipelineConfig::default().show()
}

#[pymodule]
fn redipo_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(cleanup_truncation, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(marginal_diversity, m)?)?;
    m.add_function(wrap_pyfunction!(dpo_loss, m)?)?;
    m.add_function(wrap_pyfunction!(dpo_grad_check, m)?)?;
    m.add_function(wrap_pyfunction!(select_redipo_pairs, m)?)?;
    m.add_function(wrap_pyfunction!(select_checkpoint, m)?)?;
    m.add_function(wrap_pyfunction!(bootstrap_ci, m)?)?;
    m.add_function(wrap_pyfunction!(length_stats, m)?)?;
    m.add_function(wrap_pyfunction!(toy_train, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    Ok(())
}

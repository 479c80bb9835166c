//! The three response-filtering stages, applied in a fixed order:
//! safety, quality relative to the prompt-level instruct mean, and a
//! minimum-remaining-samples gate on the whole prompt.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{Origin, PromptPool, SafetyLabel};

/// A prompt must keep at least this many responses in total.
pub const MIN_TOTAL_RESPONSES: usize = 10;
/// And at least this many that originate from the base model.
pub const MIN_BASE_RESPONSES: usize = 2;

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("response {0} has no safety label; safety judging must run before filtering")]
    MissingSafetyLabel(String),
    #[error("response {0} has no if_score; reward scoring must run before quality filtering")]
    MissingScore(String),
    #[error("response {0} is unfiltered for safety; quality filtering requires the safety stage first")]
    SafetyStageSkipped(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterStage {
    Safety,
    Quality,
    MinSamples,
}

/// What one stage did to one prompt's pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterOutcome {
    pub stage: FilterStage,
    pub removed_response_ids: Vec<String>,
    pub removed_prompt_ids: Vec<String>,
    pub survivors: usize,
}

/// Stage (1): keep exactly the responses labeled safe.
pub fn filter_safety(pool: &PromptPool) -> Result<(PromptPool, FilterOutcome), FilterError> {
    let mut kept = pool.clone();
    let mut removed = Vec::new();
    let mut survivors = Vec::with_capacity(pool.responses.len());
    for r in &pool.responses {
        match r.safety_label {
            None => return Err(FilterError::MissingSafetyLabel(r.response_id.clone())),
            Some(SafetyLabel::Safe) => survivors.push(r.clone()),
            Some(SafetyLabel::Unsafe) => removed.push(r.response_id.clone()),
        }
    }
    kept.responses = survivors;
    let outcome = FilterOutcome {
        stage: FilterStage::Safety,
        removed_response_ids: removed,
        removed_prompt_ids: Vec::new(),
        survivors: kept.responses.len(),
    };
    Ok((kept, outcome))
}

/// Stage (2) with the mean computed from the pool's own instruct survivors.
pub fn filter_quality(
    pool: &PromptPool,
    delta: f64,
) -> Result<(Option<PromptPool>, FilterOutcome), FilterError> {
    filter_quality_with_mean(pool, delta, None)
}

/// Stage (2): remove every response scoring strictly below the tolerance
/// band under the prompt-level instruct mean.
///
/// The literal threshold `(1-delta)*mu` flips direction for negative means,
/// so the band is taken as `mu - delta*|mu|`: always `delta` relative below
/// the mean. A score exactly at the threshold is kept. `mu_override`
/// supplies a mean computed over a different set (e.g. before safety
/// filtering); otherwise the mean comes from the instruct responses present
/// in `pool`, and a pool with no instruct survivors drops the whole prompt.
pub fn filter_quality_with_mean(
    pool: &PromptPool,
    delta: f64,
    mu_override: Option<f64>,
) -> Result<(Option<PromptPool>, FilterOutcome), FilterError> {
    for r in &pool.responses {
        if r.if_score.is_none() {
            return Err(FilterError::MissingScore(r.response_id.clone()));
        }
        match r.safety_label {
            Some(SafetyLabel::Safe) => {}
            _ => return Err(FilterError::SafetyStageSkipped(r.response_id.clone())),
        }
    }

    let mu = match mu_override {
        Some(m) => Some(m),
        None => {
            let scores: Vec<f64> = pool
                .responses
                .iter()
                .filter(|r| r.origin == Origin::Instruct)
                .map(|r| r.if_score.unwrap())
                .collect();
            if scores.is_empty() {
                None
            } else {
                Some(scores.iter().sum::<f64>() / scores.len() as f64)
            }
        }
    };

    let Some(mu) = mu else {
        log::warn!(
            "prompt {} has no instruct survivors; dropping at quality stage",
            pool.prompt_id
        );
        let outcome = FilterOutcome {
            stage: FilterStage::Quality,
            removed_response_ids: pool
                .responses
                .iter()
                .map(|r| r.response_id.clone())
                .collect(),
            removed_prompt_ids: vec![pool.prompt_id.clone()],
            survivors: 0,
        };
        return Ok((None, outcome));
    };

    let threshold = mu - delta * mu.abs();
    let mut kept = pool.clone();
    let mut removed = Vec::new();
    kept.responses.retain(|r| {
        let score = r.if_score.unwrap();
        if score < threshold {
            removed.push(r.response_id.clone());
            false
        } else {
            true
        }
    });
    kept.instruct_mean_if = Some(mu);
    let outcome = FilterOutcome {
        stage: FilterStage::Quality,
        removed_response_ids: removed,
        removed_prompt_ids: Vec::new(),
        survivors: kept.responses.len(),
    };
    Ok((Some(kept), outcome))
}

/// Stage (3): drop the whole prompt unless enough responses survive, both in
/// total and from the base model.
pub fn filter_min_samples(pool: &PromptPool) -> (Option<PromptPool>, FilterOutcome) {
    let total = pool.responses.len();
    let base = pool.base_count();
    if total >= MIN_TOTAL_RESPONSES && base >= MIN_BASE_RESPONSES {
        let outcome = FilterOutcome {
            stage: FilterStage::MinSamples,
            removed_response_ids: Vec::new(),
            removed_prompt_ids: Vec::new(),
            survivors: total,
        };
        (Some(pool.clone()), outcome)
    } else {
        let outcome = FilterOutcome {
            stage: FilterStage::MinSamples,
            removed_response_ids: pool
                .responses
                .iter()
                .map(|r| r.response_id.clone())
                .collect(),
            removed_prompt_ids: vec![pool.prompt_id.clone()],
            survivors: 0,
        };
        (None, outcome)
    }
}

/// Runs the canonical safety -> quality -> min-samples sequence on one pool.
///
/// `mu_pre_safety` selects the alternative reading where the instruct mean
/// is computed before unsafe responses are removed.
pub fn apply_filters(
    pool: &PromptPool,
    delta: f64,
    mu_pre_safety: bool,
) -> Result<(Option<PromptPool>, Vec<FilterOutcome>), FilterError> {
    let mu_override = if mu_pre_safety {
        let scores: Vec<f64> = pool
            .responses
            .iter()
            .filter(|r| r.origin == Origin::Instruct)
            .map(|r| {
                r.if_score
                    .ok_or_else(|| FilterError::MissingScore(r.response_id.clone()))
            })
            .collect::<Result<_, _>>()?;
        if scores.is_empty() {
            None
        } else {
            Some(scores.iter().sum::<f64>() / scores.len() as f64)
        }
    } else {
        None
    };

    let mut outcomes = Vec::with_capacity(3);
    let (after_safety, outcome) = filter_safety(pool)?;
    outcomes.push(outcome);

    let (after_quality, outcome) = if mu_pre_safety && mu_override.is_some() {
        filter_quality_with_mean(&after_safety, delta, mu_override)?
    } else {
        filter_quality(&after_safety, delta)?
    };
    outcomes.push(outcome);

    let Some(after_quality) = after_quality else {
        return Ok((None, outcomes));
    };

    let (survivor, outcome) = filter_min_samples(&after_quality);
    outcomes.push(outcome);
    Ok((survivor, outcomes))
}

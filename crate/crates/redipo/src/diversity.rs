//! Marginal diversity scoring.
//!
//! A response's marginal diversity is one minus the maximum cosine
//! similarity between its embedding and every other response embedding in
//! the same prompt pool. Pools are small (at most a couple of times k), so
//! the exact O(n^2) sweep is fine.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiversityError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("marginal diversity is undefined for pools of size {0} (need at least 2)")]
    PoolTooSmall(usize),
    #[error("embedding for response {0} is missing")]
    MissingEmbedding(String),
}

/// Per-response marginal diversity for one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityEntry {
    pub prompt_id: String,
    pub response_id: String,
    pub diversity_score: f64,
    /// The other response realizing the maximum similarity.
    pub nearest_id: String,
}

impl crate::jsonl::JsonlRecord for DiversityEntry {
    fn validate_record(&self) -> Result<(), String> {
        if !(0.0..=2.0).contains(&self.diversity_score) {
            return Err("diversity_score out of [0,2]".into());
        }
        if self.nearest_id == self.response_id {
            return Err("nearest_id equals response_id".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub prompt_id: String,
    pub entries: Vec<DiversityEntry>,
}

/// Dot product of two unit vectors, clamped to [-1, 1] against rounding.
/// Bitwise-identical vectors (duplicate texts hitting one cache entry) get
/// exactly 1 so duplicates land on D = 0 with no floating-point residue.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64, DiversityError> {
    if u.len() != v.len() {
        return Err(DiversityError::DimensionMismatch(u.len(), v.len()));
    }
    debug_assert!(
        (u.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-6,
        "cosine_similarity expects unit vectors"
    );
    if u == v {
        return Ok(1.0);
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok(dot.clamp(-1.0, 1.0))
}

/// Computes D for every response in a pool. `embeddings[i]` belongs to
/// `response_ids[i]`; order is preserved in the report.
pub fn marginal_diversity(
    prompt_id: &str,
    response_ids: &[String],
    embeddings: &[Vec<f64>],
) -> Result<DiversityReport, DiversityError> {
    if response_ids.len() != embeddings.len() {
        return Err(DiversityError::DimensionMismatch(
            response_ids.len(),
            embeddings.len(),
        ));
    }
    let n = embeddings.len();
    if n < 2 {
        return Err(DiversityError::PoolTooSmall(n));
    }
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let mut max_sim = f64::NEG_INFINITY;
        let mut nearest = 0usize;
        for j in 0..n {
            if i == j {
                continue;
            }
            let sim = cosine_similarity(&embeddings[i], &embeddings[j])?;
            if sim > max_sim {
                max_sim = sim;
                nearest = j;
            }
        }
        // Clamp before subtracting so D never leaves [0, 2] under noise.
        let d = 1.0 - max_sim.clamp(-1.0, 1.0);
        entries.push(DiversityEntry {
            prompt_id: prompt_id.to_string(),
            response_id: response_ids[i].clone(),
            diversity_score: d,
            nearest_id: response_ids[nearest].clone(),
        });
    }
    Ok(DiversityReport {
        prompt_id: prompt_id.to_string(),
        entries,
    })
}

/// Full pairwise similarity matrix, for the debug dump.
pub fn similarity_matrix(embeddings: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, DiversityError> {
    let n = embeddings.len();
    let mut matrix = vec![vec![0.0; n]; n];
    for i in 0..n {
        matrix[i][i] = 1.0;
        for j in (i + 1)..n {
            let sim = cosine_similarity(&embeddings[i], &embeddings[j])?;
            matrix[i][j] = sim;
            matrix[j][i] = sim;
        }
    }
    Ok(matrix)
}

//! Run manifest: per-stage sample accounting plus a config snapshot.
//!
//! The counters follow the response stream through every stage, and
//! [`StageCounters::reconcile`] checks the accounting identity
//! `initial - removed at each stage = survivors entering pairing`.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::config::PipelineConfig;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse manifest {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("counters do not reconcile: {0}")]
    Reconcile(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounters {
    /// Sampled generations before any processing (base drafts + instruct).
    pub initial_generations: usize,
    /// Base drafts lost in the rewrite step (empty draft or failed request).
    pub rewrite_failed: usize,
    /// Responses dropped at pool assembly for having empty cleaned text.
    pub empty_removed: usize,
    pub safety_removed: usize,
    /// Responses removed by the quality filter, including whole prompts
    /// dropped for having no instruct survivors.
    pub quality_removed: usize,
    pub quality_prompts_dropped: usize,
    /// Responses belonging to prompts dropped by the min-samples gate.
    pub min_samples_removed: usize,
    pub prompts_removed_min_samples: usize,
    pub responses_entering_pairing: usize,
    pub surviving_pairs: usize,
    pub unique_prompts: usize,
}

impl StageCounters {
    /// Survivors after each stage must equal survivors before minus removed.
    pub fn reconcile(&self) -> Result<(), ManifestError> {
        let removed = self.rewrite_failed
            + self.empty_removed
            + self.safety_removed
            + self.quality_removed
            + self.min_samples_removed;
        let expected = self.initial_generations.checked_sub(removed);
        match expected {
            Some(n) if n == self.responses_entering_pairing => Ok(()),
            _ => Err(ManifestError::Reconcile(format!(
                "initial {} - removed {} != entering pairing {}",
                self.initial_generations, removed, self.responses_entering_pairing
            ))),
        }
    }
}

/// Aggregated filter outcome for one filtering stage across all prompts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterStageSummary {
    pub stage: String,
    pub removed_responses: usize,
    pub removed_prompts: usize,
    pub survivors: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Unix seconds; both are 0 under mock endpoints so reruns are byte-identical.
    pub started_unix: u64,
    pub finished_unix: u64,
    pub stages_completed: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed_stage: Option<String>,
    pub counters: StageCounters,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub filter_stages: Vec<FilterStageSummary>,
    pub config: PipelineConfig,
}

impl RunManifest {
    pub fn new(config: PipelineConfig) -> Self {
        let started_unix = if config.mock { 0 } else { now_unix() };
        RunManifest {
            started_unix,
            finished_unix: 0,
            stages_completed: Vec::new(),
            failed_stage: None,
            counters: StageCounters::default(),
            config,
        }
    }

    pub fn finish(&mut self) {
        self.finished_unix = if self.config.mock { 0 } else { now_unix() };
    }

    pub fn save(&self, path: &Path) -> Result<(), ManifestError> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, json + "\n").map_err(|source| ManifestError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ManifestError> {
        let text = std::fs::read_to_string(path).map_err(|source| ManifestError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| ManifestError::Parse {
            path: path.to_path_buf(),
            source,
        })
    }
}

fn now_unix() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reconcile_accepts_consistent_counters() {
        let counters = StageCounters {
            initial_generations: 100,
            rewrite_failed: 2,
            empty_removed: 1,
            safety_removed: 5,
            quality_removed: 40,
            min_samples_removed: 12,
            responses_entering_pairing: 40,
            ..Default::default()
        };
        assert!(counters.reconcile().is_ok());
    }

    #[test]
    fn reconcile_rejects_leaks() {
        let counters = StageCounters {
            initial_generations: 100,
            safety_removed: 5,
            responses_entering_pairing: 96,
            ..Default::default()
        };
        assert!(counters.reconcile().is_err());
    }

    #[test]
    fn manifest_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        let mut config = PipelineConfig::default();
        config.mock = true;
        let mut manifest = RunManifest::new(config);
        manifest.stages_completed.push("generate".into());
        manifest.finish();
        manifest.save(&path).unwrap();
        let back = RunManifest::load(&path).unwrap();
        assert_eq!(back, manifest);
        assert_eq!(back.started_unix, 0);
    }
}

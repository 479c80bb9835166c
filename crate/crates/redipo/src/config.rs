//! Pipeline configuration: a single human-editable TOML document with
//! CLI-flag overrides. Precedence is CLI > file > defaults.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::genclient::{Decoding, EndpointSpec, Role};
use crate::types::{Category, Strategy};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: Box<toml::de::Error>,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Behavior switches for documented pipeline ambiguities and debug modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Toggles {
    /// Exclude candidate pairs whose diversity gap is exactly zero.
    pub drop_zero_gap: bool,
    /// Size the top-percent retention from the pre-cap feasible list instead
    /// of the post-cap accepted list.
    pub alpha_pre_cap: bool,
    /// Compute the prompt-level instruct mean before safety filtering
    /// instead of after it.
    pub mu_pre_safety: bool,
    /// Keep raw base drafts in pools alongside their rewritten forms.
    pub include_raw_drafts: bool,
    /// Bootstrap per-sample values instead of per-prompt aggregates.
    pub bootstrap_per_sample: bool,
    /// Dump the full per-prompt similarity matrix during diversity scoring.
    pub dump_sim_matrix: bool,
}

/// All hyperparameters and endpoint addresses for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Generations sampled per prompt from each of the two models.
    pub k: usize,
    /// Quality-filter tolerance: responses scoring in the band more than
    /// delta below the prompt-level instruct mean are removed.
    pub delta: f64,
    /// Reward-gap bound for candidate pairs.
    pub epsilon: f64,
    /// Percentage of ranked pairs retained per prompt.
    pub alpha_percent: f64,
    /// Maximum number of emitted pairs any single response may appear in.
    pub pair_cap: usize,
    pub rng_seed: u64,
    pub strategy: Strategy,
    /// Per-prompt retention fraction for the plain reward-gap baseline.
    pub vanilla_top_fraction: f64,
    /// Global pair budget for the baseline strategies, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_pairs: Option<usize>,
    /// Worker-thread count. Runtime parallelism only, never data-affecting,
    /// so it is excluded from config snapshots.
    #[serde(skip_serializing, default = "default_workers")]
    pub workers: usize,
    /// Force in-process mock endpoints.
    pub mock: bool,
    pub categories: Vec<Category>,
    pub toggles: Toggles,
    pub decoding: Decoding,
    pub endpoints: BTreeMap<Role, EndpointSpec>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            k: 16,
            delta: 0.15,
            epsilon: 6.0,
            alpha_percent: 25.0,
            pair_cap: 16,
            rng_seed: 0,
            strategy: Strategy::Redipo,
            vanilla_top_fraction: 0.25,
            max_pairs: None,
            workers: 4,
            mock: false,
            categories: vec![
                Category::OpenQa,
                Category::Brainstorming,
                Category::CreativeWriting,
            ],
            toggles: Toggles::default(),
            decoding: Decoding::default(),
            endpoints: default_endpoints(),
        }
    }
}

fn default_workers() -> usize {
    4
}

fn default_endpoints() -> BTreeMap<Role, EndpointSpec> {
    let mut map = BTreeMap::new();
    for role in Role::all() {
        let spec = EndpointSpec {
            model_name: format!("{role}-model"),
            ..EndpointSpec::default()
        };
        map.insert(role, spec);
    }
    map
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |m: String| Err(ConfigError::Invalid(m));
        if self.k == 0 {
            return fail("k must be a positive integer".into());
        }
        if !(0.0..1.0).contains(&self.delta) {
            return fail(format!("delta must lie in [0,1), got {}", self.delta));
        }
        if !self.epsilon.is_finite() || self.epsilon < 0.0 {
            return fail(format!("epsilon must be nonnegative, got {}", self.epsilon));
        }
        if !(self.alpha_percent > 0.0 && self.alpha_percent <= 100.0) {
            return fail(format!(
                "alpha_percent must lie in (0,100], got {}",
                self.alpha_percent
            ));
        }
        if self.pair_cap == 0 {
            return fail("pair_cap must be a positive integer".into());
        }
        if !(self.vanilla_top_fraction > 0.0 && self.vanilla_top_fraction <= 1.0) {
            return fail(format!(
                "vanilla_top_fraction must lie in (0,1], got {}",
                self.vanilla_top_fraction
            ));
        }
        if self.workers == 0 {
            return fail("workers must be at least 1".into());
        }
        for (role, spec) in &self.endpoints {
            spec.validate()
                .map_err(|m| ConfigError::Invalid(format!("endpoint {role}: {m}")))?;
        }
        Ok(())
    }

    /// Effective configuration rendered as the same TOML dialect the config
    /// file uses; the output of `--show-config`.
    pub fn show(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Flag-level overrides collected from the command line.
#[derive(Debug, Clone, Default)]
pub struct ConfigOverrides {
    pub k: Option<usize>,
    pub delta: Option<f64>,
    pub epsilon: Option<f64>,
    pub alpha_percent: Option<f64>,
    pub pair_cap: Option<usize>,
    pub rng_seed: Option<u64>,
    pub strategy: Option<Strategy>,
    pub max_pairs: Option<usize>,
    pub workers: Option<usize>,
    pub mock: Option<bool>,
    pub drop_zero_gap: Option<bool>,
    pub dump_sim_matrix: Option<bool>,
}

/// Partial mirror of [`PipelineConfig`] for the TOML file: every field
/// optional, unknown keys rejected.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PartialConfig {
    k: Option<usize>,
    delta: Option<f64>,
    epsilon: Option<f64>,
    alpha_percent: Option<f64>,
    pair_cap: Option<usize>,
    rng_seed: Option<u64>,
    strategy: Option<Strategy>,
    vanilla_top_fraction: Option<f64>,
    max_pairs: Option<usize>,
    workers: Option<usize>,
    mock: Option<bool>,
    categories: Option<Vec<Category>>,
    toggles: Option<Toggles>,
    decoding: Option<Decoding>,
    endpoints: Option<BTreeMap<Role, EndpointSpec>>,
}

/// Loads defaults, applies the file (if any), then the CLI overrides, and
/// validates the result. `pair_cap` defaults to `k` when only `k` is set.
pub fn resolve_config(
    file: Option<&Path>,
    overrides: &ConfigOverrides,
) -> Result<PipelineConfig, ConfigError> {
    let partial = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
                path: path.to_path_buf(),
                source,
            })?;
            toml::from_str::<PartialConfig>(&text).map_err(|source| ConfigError::Parse {
                path: path.to_path_buf(),
                source: Box::new(source),
            })?
        }
        None => PartialConfig::default(),
    };

    let mut config = PipelineConfig::default();
    let mut cap_set = false;

    if let Some(k) = partial.k {
        config.k = k;
    }
    if let Some(v) = partial.delta {
        config.delta = v;
    }
    if let Some(v) = partial.epsilon {
        config.epsilon = v;
    }
    if let Some(v) = partial.alpha_percent {
        config.alpha_percent = v;
    }
    if let Some(v) = partial.pair_cap {
        config.pair_cap = v;
        cap_set = true;
    }
    if let Some(v) = partial.rng_seed {
        config.rng_seed = v;
    }
    if let Some(v) = partial.strategy {
        config.strategy = v;
    }
    if let Some(v) = partial.vanilla_top_fraction {
        config.vanilla_top_fraction = v;
    }
    if let Some(v) = partial.max_pairs {
        config.max_pairs = Some(v);
    }
    if let Some(v) = partial.workers {
        config.workers = v;
    }
    if let Some(v) = partial.mock {
        config.mock = v;
    }
    if let Some(v) = partial.categories {
        config.categories = v;
    }
    if let Some(v) = partial.toggles {
        config.toggles = v;
    }
    if let Some(v) = partial.decoding {
        config.decoding = v;
    }
    if let Some(v) = partial.endpoints {
        for (role, spec) in v {
            config.endpoints.insert(role, spec);
        }
    }

    if let Some(k) = overrides.k {
        config.k = k;
    }
    if let Some(v) = overrides.delta {
        config.delta = v;
    }
    if let Some(v) = overrides.epsilon {
        config.epsilon = v;
    }
    if let Some(v) = overrides.alpha_percent {
        config.alpha_percent = v;
    }
    if let Some(v) = overrides.pair_cap {
        config.pair_cap = v;
        cap_set = true;
    }
    if let Some(v) = overrides.rng_seed {
        config.rng_seed = v;
    }
    if let Some(v) = overrides.strategy {
        config.strategy = v;
    }
    if let Some(v) = overrides.max_pairs {
        config.max_pairs = Some(v);
    }
    if let Some(v) = overrides.workers {
        config.workers = v;
    }
    if let Some(v) = overrides.mock {
        config.mock = v;
    }
    if let Some(v) = overrides.drop_zero_gap {
        config.toggles.drop_zero_gap = v;
    }
    if let Some(v) = overrides.dump_sim_matrix {
        config.toggles.dump_sim_matrix = v;
    }

    if !cap_set {
        config.pair_cap = config.k;
    }
    config.validate()?;
    Ok(config)
}

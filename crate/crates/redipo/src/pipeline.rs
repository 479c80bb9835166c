//! End-to-end pipeline orchestration: stage ordering, per-stage JSONL
//! artifacts, content-hash stamps for resumption, manifest accounting, and
//! dataset export.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::config::PipelineConfig;
use crate::diversity::{marginal_diversity, similarity_matrix, DiversityEntry, DiversityError};
use crate::filters::{apply_filters, FilterError, FilterStage};
use crate::genclient::mock::stable_hash64;
use crate::genclient::{rewrite_response, sample_responses, ClientError, Endpoints};
use crate::jsonl::{read_jsonl, write_jsonl, JsonlError};
use crate::manifest::{ManifestError, RunManifest};
use crate::pairing::{
    global_top_pairs, select_divpo_pair, select_random_pairs, select_redipo_pairs,
    select_vanilla_dpo_pairs, HashLogprobScorer, LogprobScorer, RedipoParams, ScoredResponse,
};
use crate::types::{
    check_unique_ids, Origin, PreferencePair, PromptEntry, PromptPool, ResponseRecord, Strategy,
};

pub const RESPONSES_RAW: &str = "responses.raw.jsonl";
pub const RESPONSES_CANDIDATES: &str = "responses.rewritten.jsonl";
pub const RESPONSES_STAGE1: &str = "responses.stage1.jsonl";
pub const RESPONSES_STAGE2: &str = "responses.stage2.jsonl";
pub const RESPONSES_STAGE3: &str = "responses.stage3.jsonl";
pub const DIVERSITY_FILE: &str = "diversity.jsonl";
pub const SIM_MATRIX_FILE: &str = "sim_matrix.jsonl";
pub const PAIRS_FILE: &str = "pairs.jsonl";
pub const DATASET_FILE: &str = "dpo_dataset.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const EMBEDDING_CACHE_FILE: &str = "embedding_cache.jsonl";
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Diversity(#[from] DiversityError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Eval(#[from] crate::evalkit::EvalError),
    #[error("stage input {0} is missing; run the upstream stage first")]
    MissingInput(PathBuf),
    #[error("stage plan violates dependency order: {0:?} before {1:?}")]
    BadStageOrder(StageName, StageName),
    #[error("pairs reference responses that no longer exist: {0:?}")]
    DanglingReferences(Vec<String>),
    #[error("duplicate response ids in {path}: {message}")]
    DuplicateIds { path: PathBuf, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum StageName {
    Generate,
    Rewrite,
    Filter,
    Diversity,
    Pair,
    Export,
    Eval,
}

impl StageName {
    pub fn as_str(self) -> &'static str {
        match self {
            StageName::Generate => "generate",
            StageName::Rewrite => "rewrite",
            StageName::Filter => "filter",
            StageName::Diversity => "diversity",
            StageName::Pair => "pair",
            StageName::Export => "export",
            StageName::Eval => "eval",
        }
    }
}

impl fmt::Display for StageName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Ordered stage list plus the resume switch.
#[derive(Debug, Clone)]
pub struct RunPlan {
    pub stages: Vec<StageName>,
    pub resume: bool,
}

impl RunPlan {
    pub fn full() -> Self {
        RunPlan {
            stages: vec![
                StageName::Generate,
                StageName::Rewrite,
                StageName::Filter,
                StageName::Diversity,
                StageName::Pair,
                StageName::Export,
            ],
            resume: false,
        }
    }

    pub fn single(stage: StageName) -> Self {
        RunPlan {
            stages: vec![stage],
            resume: false,
        }
    }

    /// Stage order must respect the pipeline's data dependencies.
    pub fn validate(&self) -> Result<(), PipelineError> {
        for window in self.stages.windows(2) {
            if window[0] >= window[1] {
                return Err(PipelineError::BadStageOrder(window[0], window[1]));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    FlatJsonl,
    ConversationalJsonl,
}

impl std::str::FromStr for ExportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "flat" | "flat_jsonl" => Ok(ExportFormat::FlatJsonl),
            "conversational" | "conversational_jsonl" => Ok(ExportFormat::ConversationalJsonl),
            other => Err(format!("unknown export format: {other}")),
        }
    }
}

/// Everything a run needs: config, endpoint bundle, and file locations.
pub struct PipelineContext {
    pub config: PipelineConfig,
    pub endpoints: Endpoints,
    pub out_dir: PathBuf,
    pub prompts_path: PathBuf,
    pub validation_path: Option<PathBuf>,
    pub export_format: ExportFormat,
}

impl PipelineContext {
    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn require(&self, name: &str) -> Result<PathBuf, PipelineError> {
        let path = self.path(name);
        if !path.exists() {
            return Err(PipelineError::MissingInput(path));
        }
        Ok(path)
    }
}

fn file_digest(path: &Path) -> Result<Vec<u8>, PipelineError> {
    let bytes = std::fs::read(path).map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(Sha256::digest(&bytes).to_vec())
}

/// Stamp for one stage: hash of the stage's input files and the config
/// subset that affects it, so changing e.g. epsilon invalidates pairing
/// onward but nothing earlier.
fn stage_stamp(inputs: &[&Path], config_subset: &str) -> Result<String, PipelineError> {
    let mut hasher = Sha256::new();
    for path in inputs {
        hasher.update(file_digest(path)?);
    }
    hasher.update(config_subset.as_bytes());
    Ok(hex::encode(hasher.finalize()))
}

fn stamp_path(ctx: &PipelineContext, stage: StageName) -> PathBuf {
    ctx.path(&format!("{stage}.stamp"))
}

fn stamp_matches(ctx: &PipelineContext, stage: StageName, stamp: &str, outputs: &[&str]) -> bool {
    let path = stamp_path(ctx, stage);
    match std::fs::read_to_string(&path) {
        Ok(existing) if existing.trim() == stamp => {
            outputs.iter().all(|name| ctx.path(name).exists())
        }
        _ => false,
    }
}

fn write_stamp(ctx: &PipelineContext, stage: StageName, stamp: &str) -> Result<(), PipelineError> {
    let path = stamp_path(ctx, stage);
    std::fs::write(&path, format!("{stamp}\n")).map_err(|source| PipelineError::Io {
        path,
        source,
    })
}

/// Executes the plan's stages in order, persisting each stage's output and
/// the manifest. A failing stage is recorded in the manifest and nothing
/// downstream runs.
pub fn run_pipeline(
    plan: &RunPlan,
    ctx: &PipelineContext,
) -> Result<RunManifest, PipelineError> {
    plan.validate()?;
    std::fs::create_dir_all(&ctx.out_dir).map_err(|source| PipelineError::Io {
        path: ctx.out_dir.clone(),
        source,
    })?;

    let manifest_path = ctx.path(MANIFEST_FILE);
    let mut manifest = if plan.resume && manifest_path.exists() {
        let mut existing = RunManifest::load(&manifest_path)?;
        existing.config = ctx.config.clone();
        existing.failed_stage = None;
        existing
    } else {
        RunManifest::new(ctx.config.clone())
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(ctx.config.workers)
        .build()
        .expect("worker pool");

    for &stage in &plan.stages {
        let result = pool.install(|| run_stage(stage, ctx, &mut manifest, plan.resume));
        match result {
            Ok(()) => {
                if !manifest.stages_completed.iter().any(|s| s == stage.as_str()) {
                    manifest.stages_completed.push(stage.as_str().to_string());
                }
                manifest.finish();
                manifest.save(&manifest_path)?;
            }
            Err(e) => {
                manifest.failed_stage = Some(stage.as_str().to_string());
                manifest.finish();
                manifest.save(&manifest_path)?;
                return Err(e);
            }
        }
    }
    Ok(manifest)
}

fn run_stage(
    stage: StageName,
    ctx: &PipelineContext,
    manifest: &mut RunManifest,
    resume: bool,
) -> Result<(), PipelineError> {
    match stage {
        StageName::Generate => stage_generate(ctx, manifest, resume),
        StageName::Rewrite => stage_rewrite(ctx, manifest, resume),
        StageName::Filter => stage_filter(ctx, manifest, resume),
        StageName::Diversity => stage_diversity(ctx, manifest, resume),
        StageName::Pair => stage_pair(ctx, manifest, resume),
        StageName::Export => stage_export(ctx, manifest, resume),
        StageName::Eval => stage_eval(ctx),
    }
}

/// Prompt rows filtered to the configured categories, in file order.
fn load_prompts(ctx: &PipelineContext) -> Result<Vec<PromptEntry>, PipelineError> {
    if !ctx.prompts_path.exists() {
        return Err(PipelineError::MissingInput(ctx.prompts_path.clone()));
    }
    let prompts: Vec<PromptEntry> = read_jsonl(&ctx.prompts_path)?;
    Ok(prompts
        .into_iter()
        .filter(|p| ctx.config.categories.contains(&p.category))
        .collect())
}

fn stage_generate(
    ctx: &PipelineContext,
    manifest: &mut RunManifest,
    resume: bool,
) -> Result<(), PipelineError> {
    let config_subset = format!(
        "k={};seed={};decoding={:?};categories={:?}",
        ctx.config.k, ctx.config.rng_seed, ctx.config.decoding, ctx.config.categories
    );
    let stamp = stage_stamp(&[&ctx.prompts_path], &config_subset)?;
    if resume && stamp_matches(ctx, StageName::Generate, &stamp, &[RESPONSES_RAW]) {
        log::info!("generate: stamp hit, skipping");
        return Ok(());
    }

    let prompts = load_prompts(ctx)?;
    let k = ctx.config.k;
    let per_prompt: Vec<Vec<ResponseRecord>> = prompts
        .par_iter()
        .map(|prompt| -> Result<Vec<ResponseRecord>, PipelineError> {
            let base = sample_responses(
                ctx.endpoints.base_sampler.as_ref(),
                &prompt.prompt_text,
                k,
                &ctx.config.decoding,
            )?;
            let instruct = sample_responses(
                ctx.endpoints.instruct_sampler.as_ref(),
                &prompt.prompt_text,
                k,
                &ctx.config.decoding,
            )?;
            let mut records = Vec::with_capacity(2 * k);
            for (i, text) in base.into_iter().enumerate() {
                records.push(ResponseRecord::new(&prompt.prompt_id, Origin::BaseRaw, i, text));
            }
            for (i, text) in instruct.into_iter().enumerate() {
                records.push(ResponseRecord::new(
                    &prompt.prompt_id,
                    Origin::Instruct,
                    i,
                    text,
                ));
            }
            Ok(records)
        })
        .collect::<Result<_, _>>()?;

    let records: Vec<ResponseRecord> = per_prompt.into_iter().flatten().collect();
    check_unique_ids(&records).map_err(|message| PipelineError::DuplicateIds {
        path: ctx.path(RESPONSES_RAW),
        message,
    })?;
    manifest.counters.initial_generations = records.len();
    write_jsonl(&records, &ctx.path(RESPONSES_RAW))?;
    write_stamp(ctx, StageName::Generate, &stamp)
}

fn stage_rewrite(
    ctx: &PipelineContext,
    manifest: &mut RunManifest,
    resume: bool,
) -> Result<(), PipelineError> {
    let raw_path = ctx.require(RESPONSES_RAW)?;
    let config_subset = format!("include_raw={}", ctx.config.toggles.include_raw_drafts);
    let stamp = stage_stamp(&[&raw_path, &ctx.prompts_path], &config_subset)?;
    if resume && stamp_matches(ctx, StageName::Rewrite, &stamp, &[RESPONSES_CANDIDATES]) {
        log::info!("rewrite: stamp hit, skipping");
        return Ok(());
    }

    manifest.counters.rewrite_failed = 0;
    manifest.counters.empty_removed = 0;
    let raw: Vec<ResponseRecord> = read_jsonl(&raw_path)?;
    let prompts = load_prompts(ctx)?;
    let prompt_text: HashMap<&str, &str> = prompts
        .iter()
        .map(|p| (p.prompt_id.as_str(), p.prompt_text.as_str()))
        .collect();

    // Group records per prompt in file order; drafts keep their slot index.
    let mut order: Vec<&str> = Vec::new();
    let mut grouped: HashMap<&str, Vec<&ResponseRecord>> = HashMap::new();
    for record in &raw {
        let entry = grouped.entry(record.prompt_id.as_str()).or_default();
        if entry.is_empty() {
            order.push(record.prompt_id.as_str());
        }
        entry.push(record);
    }

    struct RewriteResult {
        records: Vec<ResponseRecord>,
        rewrite_failed: usize,
        empty_removed: usize,
    }

    let include_raw = ctx.config.toggles.include_raw_drafts;
    let per_prompt: Vec<RewriteResult> = order
        .par_iter()
        .map(|prompt_id| -> Result<RewriteResult, PipelineError> {
            let text = prompt_text.get(prompt_id).copied().unwrap_or_default();
            let mut records = Vec::new();
            let mut rewrite_failed = 0usize;
            let mut empty_removed = 0usize;
            let mut draft_index = 0usize;
            for record in &grouped[prompt_id] {
                match record.origin {
                    Origin::Instruct => {
                        if record.text.is_empty() {
                            empty_removed += 1;
                        } else {
                            records.push((*record).clone());
                        }
                    }
                    Origin::BaseRaw => {
                        let index = draft_index;
                        draft_index += 1;
                        match rewrite_response(
                            ctx.endpoints.rewriter.as_ref(),
                            text,
                            &record.text,
                        ) {
                            Ok(rewritten) if rewritten.is_empty() => empty_removed += 1,
                            Ok(rewritten) => {
                                let mut r = ResponseRecord::new(
                                    prompt_id,
                                    Origin::BaseRewritten,
                                    index,
                                    rewritten,
                                );
                                r.parent_id = Some(record.response_id.clone());
                                records.push(r);
                                if include_raw {
                                    records.push((*record).clone());
                                }
                            }
                            Err(ClientError::EmptyDraft) => {
                                log::warn!(
                                    "skipping empty draft {} for prompt {prompt_id}",
                                    record.response_id
                                );
                                rewrite_failed += 1;
                            }
                            Err(e) => return Err(e.into()),
                        }
                    }
                    Origin::BaseRewritten => records.push((*record).clone()),
                }
            }
            Ok(RewriteResult {
                records,
                rewrite_failed,
                empty_removed,
            })
        })
        .collect::<Result<_, _>>()?;

    let mut records = Vec::new();
    for result in per_prompt {
        manifest.counters.rewrite_failed += result.rewrite_failed;
        manifest.counters.empty_removed += result.empty_removed;
        records.extend(result.records);
    }
    // Raw drafts excluded from pools don't count as removals: each rewritten
    // record stands in for its parent one-for-one.
    check_unique_ids(&records).map_err(|message| PipelineError::DuplicateIds {
        path: ctx.path(RESPONSES_CANDIDATES),
        message,
    })?;
    write_jsonl(&records, &ctx.path(RESPONSES_CANDIDATES))?;
    write_stamp(ctx, StageName::Rewrite, &stamp)
}

/// Groups a record stream into pools ordered like the prompts file.
fn build_pools(
    prompts: &[PromptEntry],
    records: Vec<ResponseRecord>,
) -> Vec<PromptPool> {
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut pools: Vec<PromptPool> = prompts
        .iter()
        .enumerate()
        .map(|(i, p)| {
            index.insert(p.prompt_id.as_str(), i);
            PromptPool::new(&p.prompt_id, &p.prompt_text, p.category)
        })
        .collect();
    for record in records {
        if let Some(&i) = index.get(record.prompt_id.as_str()) {
            pools[i].responses.push(record);
        }
    }
    for pool in &mut pools {
        pool.normalize();
    }
    pools.retain(|p| !p.responses.is_empty());
    pools
}

fn stage_filter(
    ctx: &PipelineContext,
    manifest: &mut RunManifest,
    resume: bool,
) -> Result<(), PipelineError> {
    let candidates_path = ctx.require(RESPONSES_CANDIDATES)?;
    let config_subset = format!(
        "delta={};mu_pre_safety={}",
        ctx.config.delta, ctx.config.toggles.mu_pre_safety
    );
    let stamp = stage_stamp(&[&candidates_path, &ctx.prompts_path], &config_subset)?;
    let outputs = [RESPONSES_STAGE1, RESPONSES_STAGE2, RESPONSES_STAGE3];
    if resume && stamp_matches(ctx, StageName::Filter, &stamp, &outputs) {
        log::info!("filter: stamp hit, skipping");
        return Ok(());
    }

    manifest.counters.safety_removed = 0;
    manifest.counters.quality_removed = 0;
    manifest.counters.quality_prompts_dropped = 0;
    manifest.counters.min_samples_removed = 0;
    manifest.counters.prompts_removed_min_samples = 0;
    let records: Vec<ResponseRecord> = read_jsonl(&candidates_path)?;
    let prompts = load_prompts(ctx)?;
    let pools = build_pools(&prompts, records);

    struct FilterResult {
        stage1: Vec<ResponseRecord>,
        stage2: Vec<ResponseRecord>,
        stage3: Vec<ResponseRecord>,
        safety_removed: usize,
        quality_removed: usize,
        quality_prompt_dropped: bool,
        min_samples_removed: usize,
        min_samples_prompt_dropped: bool,
    }

    let delta = ctx.config.delta;
    let mu_pre_safety = ctx.config.toggles.mu_pre_safety;
    let per_pool: Vec<FilterResult> = pools
        .par_iter()
        .map(|pool| -> Result<FilterResult, PipelineError> {
            // Annotate: safety verdict and reward score for every response.
            let mut annotated = pool.clone();
            for r in &mut annotated.responses {
                r.safety_label =
                    Some(ctx.endpoints.safety.judge(&pool.prompt_text, &r.text)?);
                r.if_score = Some(ctx.endpoints.reward.score(&pool.prompt_text, &r.text)?);
            }
            let (survivor, outcomes) = apply_filters(&annotated, delta, mu_pre_safety)?;
            let mut result = FilterResult {
                stage1: Vec::new(),
                stage2: Vec::new(),
                stage3: Vec::new(),
                safety_removed: 0,
                quality_removed: 0,
                quality_prompt_dropped: false,
                min_samples_removed: 0,
                min_samples_prompt_dropped: false,
            };
            let mut current = annotated.responses.clone();
            for outcome in &outcomes {
                current.retain(|r| !outcome.removed_response_ids.contains(&r.response_id));
                match outcome.stage {
                    FilterStage::Safety => {
                        result.safety_removed = outcome.removed_response_ids.len();
                        result.stage1 = current.clone();
                    }
                    FilterStage::Quality => {
                        result.quality_removed = outcome.removed_response_ids.len();
                        result.quality_prompt_dropped = !outcome.removed_prompt_ids.is_empty();
                        // Carry the recorded mean onto the surviving records' pool.
                        result.stage2 = current.clone();
                    }
                    FilterStage::MinSamples => {
                        result.min_samples_removed = outcome.removed_response_ids.len();
                        result.min_samples_prompt_dropped =
                            !outcome.removed_prompt_ids.is_empty();
                        result.stage3 = current.clone();
                    }
                }
            }
            if let Some(pool) = survivor {
                result.stage3 = pool.responses;
            }
            Ok(result)
        })
        .collect::<Result<_, _>>()?;

    let mut stage1 = Vec::new();
    let mut stage2 = Vec::new();
    let mut stage3 = Vec::new();
    for result in per_pool {
        manifest.counters.safety_removed += result.safety_removed;
        manifest.counters.quality_removed += result.quality_removed;
        if result.quality_prompt_dropped {
            manifest.counters.quality_prompts_dropped += 1;
        }
        manifest.counters.min_samples_removed += result.min_samples_removed;
        if result.min_samples_prompt_dropped {
            manifest.counters.prompts_removed_min_samples += 1;
        }
        stage1.extend(result.stage1);
        stage2.extend(result.stage2);
        stage3.extend(result.stage3);
    }
    write_jsonl(&stage1, &ctx.path(RESPONSES_STAGE1))?;
    write_jsonl(&stage2, &ctx.path(RESPONSES_STAGE2))?;
    write_jsonl(&stage3, &ctx.path(RESPONSES_STAGE3))?;
    write_stamp(ctx, StageName::Filter, &stamp)
}

fn stage_diversity(
    ctx: &PipelineContext,
    manifest: &mut RunManifest,
    resume: bool,
) -> Result<(), PipelineError> {
    let stage3_path = ctx.require(RESPONSES_STAGE3)?;
    let config_subset = format!("dump_sim={}", ctx.config.toggles.dump_sim_matrix);
    let stamp = stage_stamp(&[&stage3_path], &config_subset)?;
    if resume && stamp_matches(ctx, StageName::Diversity, &stamp, &[DIVERSITY_FILE]) {
        log::info!("diversity: stamp hit, skipping");
        return Ok(());
    }

    let records: Vec<ResponseRecord> = read_jsonl(&stage3_path)?;
    let prompts = load_prompts(ctx)?;
    let pools = build_pools(&prompts, records);

    let per_pool: Vec<(Vec<DiversityEntry>, Option<serde_json::Value>)> = pools
        .par_iter()
        .map(|pool| -> Result<_, PipelineError> {
            let texts: Vec<String> = pool.responses.iter().map(|r| r.text.clone()).collect();
            let ids: Vec<String> = pool
                .responses
                .iter()
                .map(|r| r.response_id.clone())
                .collect();
            let embeddings = ctx.endpoints.embedder.embed(&texts)?;
            let report = marginal_diversity(&pool.prompt_id, &ids, &embeddings)?;
            let matrix = if ctx.config.toggles.dump_sim_matrix {
                Some(serde_json::json!({
                    "prompt_id": pool.prompt_id,
                    "response_ids": ids,
                    "matrix": similarity_matrix(&embeddings)?,
                }))
            } else {
                None
            };
            Ok((report.entries, matrix))
        })
        .collect::<Result<_, _>>()?;

    let mut entries = Vec::new();
    let mut matrices = Vec::new();
    for (pool_entries, matrix) in per_pool {
        entries.extend(pool_entries);
        if let Some(m) = matrix {
            matrices.push(m);
        }
    }
    write_jsonl(&entries, &ctx.path(DIVERSITY_FILE))?;
    if ctx.config.toggles.dump_sim_matrix {
        write_jsonl(&matrices, &ctx.path(SIM_MATRIX_FILE))?;
    }
    ctx.endpoints
        .embedder
        .cache()
        .save(&ctx.path(EMBEDDING_CACHE_FILE))?;
    let _ = manifest;
    write_stamp(ctx, StageName::Diversity, &stamp)
}

fn stage_pair(
    ctx: &PipelineContext,
    manifest: &mut RunManifest,
    resume: bool,
) -> Result<(), PipelineError> {
    let stage3_path = ctx.require(RESPONSES_STAGE3)?;
    let diversity_path = ctx.require(DIVERSITY_FILE)?;
    let config_subset = format!(
        "strategy={};epsilon={};alpha={};cap={};drop_zero={};alpha_pre_cap={};seed={};max_pairs={:?};top_fraction={}",
        ctx.config.strategy,
        ctx.config.epsilon,
        ctx.config.alpha_percent,
        ctx.config.pair_cap,
        ctx.config.toggles.drop_zero_gap,
        ctx.config.toggles.alpha_pre_cap,
        ctx.config.rng_seed,
        ctx.config.max_pairs,
        ctx.config.vanilla_top_fraction,
    );
    let stamp = stage_stamp(&[&stage3_path, &diversity_path], &config_subset)?;
    if resume && stamp_matches(ctx, StageName::Pair, &stamp, &[PAIRS_FILE]) {
        log::info!("pair: stamp hit, skipping");
        // Counters for this stage were restored from the saved manifest.
        return Ok(());
    }

    let records: Vec<ResponseRecord> = read_jsonl(&stage3_path)?;
    manifest.counters.responses_entering_pairing = records.len();
    let diversity: Vec<DiversityEntry> = read_jsonl(&diversity_path)?;
    let d_by_id: HashMap<&str, f64> = diversity
        .iter()
        .map(|e| (e.response_id.as_str(), e.diversity_score))
        .collect();
    let prompts = load_prompts(ctx)?;
    let pools = build_pools(&prompts, records);

    let scored: Vec<(String, Vec<ScoredResponse>, Vec<String>)> = pools
        .iter()
        .map(|pool| {
            let responses: Vec<ScoredResponse> = pool
                .responses
                .iter()
                .map(|r| ScoredResponse {
                    response_id: r.response_id.clone(),
                    if_score: r.if_score.unwrap_or(0.0),
                    diversity: d_by_id.get(r.response_id.as_str()).copied().unwrap_or(0.0),
                })
                .collect();
            let texts: Vec<String> = pool.responses.iter().map(|r| r.text.clone()).collect();
            (pool.prompt_id.clone(), responses, texts)
        })
        .collect();

    let redipo_params = RedipoParams {
        epsilon: ctx.config.epsilon,
        alpha_percent: ctx.config.alpha_percent,
        cap: ctx.config.pair_cap,
        drop_zero_gap: ctx.config.toggles.drop_zero_gap,
        alpha_pre_cap: ctx.config.toggles.alpha_pre_cap,
    };

    let pairs: Vec<PreferencePair> = match ctx.config.strategy {
        Strategy::Redipo => scored
            .par_iter()
            .flat_map(|(prompt_id, responses, _)| {
                select_redipo_pairs(prompt_id, responses, &redipo_params)
            })
            .collect(),
        Strategy::VanillaDpo => {
            let all: Vec<PreferencePair> = scored
                .par_iter()
                .flat_map(|(prompt_id, responses, _)| {
                    select_vanilla_dpo_pairs(prompt_id, responses, ctx.config.vanilla_top_fraction)
                })
                .collect();
            match ctx.config.max_pairs {
                Some(n) => global_top_pairs(all, n, true),
                None => all,
            }
        }
        Strategy::Divpo => {
            let scorer = HashLogprobScorer::new(ctx.config.rng_seed);
            let mut ranked: Vec<(PreferencePair, f64)> = scored
                .par_iter()
                .filter_map(|(prompt_id, responses, texts)| {
                    let proxies: Vec<f64> = texts
                        .iter()
                        .map(|t| {
                            let (logprob, tokens) = scorer.logprob_and_tokens(t);
                            -(logprob / tokens as f64)
                        })
                        .collect();
                    select_divpo_pair(prompt_id, responses, &proxies)
                })
                .collect();
            ranked.sort_by(|a, b| {
                b.1.total_cmp(&a.1)
                    .then_with(|| a.0.prompt_id.cmp(&b.0.prompt_id))
            });
            if let Some(n) = ctx.config.max_pairs {
                ranked.truncate(n);
            }
            ranked.into_iter().map(|(pair, _)| pair).collect()
        }
        Strategy::Random => scored
            .par_iter()
            .flat_map(|(prompt_id, responses, _)| {
                // Match the main strategy's per-prompt pair volume.
                let count = select_redipo_pairs(prompt_id, responses, &redipo_params).len();
                let mut rng = ChaCha8Rng::seed_from_u64(stable_hash64(&[
                    &ctx.config.rng_seed.to_le_bytes(),
                    prompt_id.as_bytes(),
                ]));
                select_random_pairs(
                    prompt_id,
                    responses,
                    ctx.config.epsilon,
                    count,
                    &mut rng,
                )
            })
            .collect(),
    };

    manifest.counters.surviving_pairs = pairs.len();
    manifest.counters.unique_prompts = {
        let mut ids: Vec<&str> = pairs.iter().map(|p| p.prompt_id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    };
    write_jsonl(&pairs, &ctx.path(PAIRS_FILE))?;
    write_stamp(ctx, StageName::Pair, &stamp)
}

/// Flat or conversational training-dataset export.
pub fn export_dpo_dataset(
    pairs: &[PreferencePair],
    responses: &[ResponseRecord],
    prompts: &[PromptEntry],
    format: ExportFormat,
    out: &Path,
) -> Result<usize, PipelineError> {
    let text_by_id: HashMap<&str, &str> = responses
        .iter()
        .map(|r| (r.response_id.as_str(), r.text.as_str()))
        .collect();
    let prompt_text: HashMap<&str, &str> = prompts
        .iter()
        .map(|p| (p.prompt_id.as_str(), p.prompt_text.as_str()))
        .collect();

    let mut dangling: Vec<String> = pairs
        .iter()
        .flat_map(|p| [&p.chosen_id, &p.rejected_id])
        .filter(|id| !text_by_id.contains_key(id.as_str()))
        .cloned()
        .collect();
    if !dangling.is_empty() {
        dangling.sort();
        dangling.dedup();
        return Err(PipelineError::DanglingReferences(dangling));
    }

    let rows: Vec<serde_json::Value> = pairs
        .iter()
        .map(|pair| {
            let prompt = prompt_text
                .get(pair.prompt_id.as_str())
                .copied()
                .unwrap_or_default();
            let chosen = text_by_id[pair.chosen_id.as_str()];
            let rejected = text_by_id[pair.rejected_id.as_str()];
            match format {
                ExportFormat::FlatJsonl => serde_json::json!({
                    "prompt": prompt,
                    "chosen": chosen,
                    "rejected": rejected,
                }),
                ExportFormat::ConversationalJsonl => serde_json::json!({
                    "chosen": [
                        {"role": "user", "content": prompt},
                        {"role": "assistant", "content": chosen},
                    ],
                    "rejected": [
                        {"role": "user", "content": prompt},
                        {"role": "assistant", "content": rejected},
                    ],
                }),
            }
        })
        .collect();
    Ok(write_jsonl(&rows, out)?)
}

fn stage_export(
    ctx: &PipelineContext,
    manifest: &mut RunManifest,
    resume: bool,
) -> Result<(), PipelineError> {
    let pairs_path = ctx.require(PAIRS_FILE)?;
    let stage3_path = ctx.require(RESPONSES_STAGE3)?;
    let config_subset = format!("format={:?}", ctx.export_format);
    let stamp = stage_stamp(&[&pairs_path, &stage3_path], &config_subset)?;
    if resume && stamp_matches(ctx, StageName::Export, &stamp, &[DATASET_FILE]) {
        log::info!("export: stamp hit, skipping");
        return Ok(());
    }

    let pairs: Vec<PreferencePair> = read_jsonl(&pairs_path)?;
    let responses: Vec<ResponseRecord> = read_jsonl(&stage3_path)?;
    let prompts = load_prompts(ctx)?;
    let written = export_dpo_dataset(
        &pairs,
        &responses,
        &prompts,
        ctx.export_format,
        &ctx.path(DATASET_FILE),
    )?;
    log::info!("exported {written} training records");
    let _ = manifest;
    write_stamp(ctx, StageName::Export, &stamp)
}

fn stage_eval(ctx: &PipelineContext) -> Result<(), PipelineError> {
    let validation_path = ctx
        .validation_path
        .clone()
        .ok_or_else(|| PipelineError::MissingInput(PathBuf::from("validation prompts")))?;
    if !validation_path.exists() {
        return Err(PipelineError::MissingInput(validation_path));
    }
    let prompts: Vec<PromptEntry> = read_jsonl(&validation_path)?;
    let report = crate::evalkit::evaluate(
        ctx.endpoints.instruct_sampler.as_ref(),
        &ctx.endpoints.embedder,
        ctx.endpoints.reward.as_ref(),
        ctx.endpoints.safety.as_ref(),
        &prompts,
        10,
        &ctx.config.decoding,
        1000,
        0.95,
        ctx.config.rng_seed,
    )?;
    let out = ctx.path(REPORT_FILE);
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    std::fs::write(&out, json + "\n").map_err(|source| PipelineError::Io { path: out, source })?;
    Ok(())
}

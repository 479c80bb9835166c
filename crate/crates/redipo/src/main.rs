use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use std::path::PathBuf;

use redipo::config::{resolve_config, ConfigOverrides, PipelineConfig};
use redipo::dpolab::{
    dpo_grad_check, dpo_loss, select_checkpoint, toy_train, CheckpointMetrics, PairLogits,
    ToyPair, ToyTrainConfig,
};
use redipo::genclient::{http::http_endpoints, mock::MockSet, Endpoints};
use redipo::jsonl::read_jsonl;
use redipo::pipeline::{
    run_pipeline, ExportFormat, PipelineContext, RunPlan, StageName, REPORT_FILE,
};
use redipo::types::Strategy;

#[derive(Parser)]
#[command(
    name = "redipo",
    version,
    about = "Preference-data construction pipeline for diversity-recovering DPO training"
)]
struct Cli {
    /// TOML config file; flags below override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Print the effective configuration and exit.
    #[arg(long, global = true)]
    show_config: bool,
    /// Directory for stage outputs.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Input prompts (JSONL: prompt_id, prompt_text, category).
    #[arg(long, global = true, default_value = "prompts.jsonl")]
    prompts: PathBuf,
    /// Generations per prompt per model.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Quality-filter tolerance.
    #[arg(long, global = true)]
    delta: Option<f64>,
    /// Reward-gap bound for candidate pairs.
    #[arg(long, global = true)]
    epsilon: Option<f64>,
    /// Percentage of ranked pairs kept per prompt.
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Per-response pair cap (defaults to k).
    #[arg(long, global = true)]
    cap: Option<usize>,
    #[arg(long, global = true, value_enum)]
    strategy: Option<Strategy>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Global pair budget for the baseline strategies.
    #[arg(long, global = true)]
    max_pairs: Option<usize>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Skip stages whose inputs and config are unchanged.
    #[arg(long, global = true)]
    resume: bool,
    /// Force in-process mock endpoints.
    #[arg(long, global = true)]
    mock: bool,
    /// Exclude zero-diversity-gap pairs.
    #[arg(long, global = true)]
    drop_zero_gap: bool,
    /// Emit the per-prompt similarity matrices.
    #[arg(long, global = true)]
    dump_sim_matrix: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample k responses per prompt from the base and instruct models.
    Generate,
    /// Rewrite base drafts in the instruct model's style.
    Rewrite,
    /// Apply safety, quality, and min-samples filtering.
    Filter,
    /// Embed survivors and score marginal diversity.
    Diversity,
    /// Construct preference pairs with the configured strategy.
    Pair,
    /// Export the training dataset from pairs and surviving responses.
    Export {
        /// flat or conversational
        #[arg(long, default_value = "flat")]
        format: String,
    },
    /// Run generate through export in order.
    All {
        #[arg(long, default_value = "flat")]
        format: String,
    },
    /// Validation metrics with bootstrap confidence intervals.
    Eval {
        /// Validation prompts (JSONL).
        #[arg(long)]
        validation: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value_t = 1000)]
        resamples: usize,
        #[arg(long, default_value_t = 0.95)]
        confidence: f64,
    },
    /// Numeric checks and toy training for the preference objective.
    Dpolab {
        #[command(subcommand)]
        command: DpolabCommand,
    },
}

#[derive(Subcommand)]
enum DpolabCommand {
    /// Spot-check loss values, including the ln 2 identity at zero margin.
    Losscheck {
        #[arg(long, default_value_t = 0.1)]
        beta: f64,
        #[arg(long, default_value_t = 0.05)]
        label_smoothing: f64,
    },
    /// Compare analytic gradients against finite differences on random inputs.
    Gradcheck {
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a categorical policy on a pair fixture and emit the loss curve.
    Toytrain {
        #[arg(long)]
        fixture: PathBuf,
        /// CSV output for the loss curve (step,loss,margin).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Gated checkpoint selection over validation metrics.
    Select {
        /// Candidate metrics, one JSON object per line.
        #[arg(long)]
        metrics: PathBuf,
        /// Baseline metrics, a single JSON object.
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long, default_value_t = redipo::dpolab::DEFAULT_TAU_IF)]
        tau_if: f64,
        #[arg(long, default_value_t = redipo::dpolab::DEFAULT_TAU_SAFETY)]
        tau_s: f64,
    },
}

#[derive(serde::Deserialize)]
struct ToyFixture {
    outcome_space: usize,
    pairs: Vec<ToyPair>,
    #[serde(default)]
    reference_logits: Option<Vec<f64>>,
    #[serde(default = "default_beta")]
    beta: f64,
    #[serde(default = "default_smoothing")]
    label_smoothing: f64,
    #[serde(default = "default_steps")]
    steps: usize,
    #[serde(default = "default_lr")]
    learning_rate: f64,
}

fn default_beta() -> f64 {
    0.1
}
fn default_smoothing() -> f64 {
    0.05
}
fn default_steps() -> usize {
    200
}
fn default_lr() -> f64 {
    1.0
}

fn build_endpoints(config: &PipelineConfig) -> Result<Endpoints> {
    if config.mock {
        Ok(MockSet::new(config.rng_seed).endpoints)
    } else {
        http_endpoints(&config.endpoints).context("building HTTP endpoints")
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();

    let overrides = ConfigOverrides {
        k: cli.k,
        delta: cli.delta,
        epsilon: cli.epsilon,
        alpha_percent: cli.alpha,
        pair_cap: cli.cap,
        rng_seed: cli.seed,
        strategy: cli.strategy,
        max_pairs: cli.max_pairs,
        workers: cli.workers,
        mock: if cli.mock { Some(true) } else { None },
        drop_zero_gap: if cli.drop_zero_gap { Some(true) } else { None },
        dump_sim_matrix: if cli.dump_sim_matrix {
            Some(true)
        } else {
            None
        },
    };
    let config = resolve_config(cli.config.as_deref(), &overrides)?;

    if cli.show_config {
        print!("{}", config.show());
        return Ok(());
    }

    let Some(command) = cli.command else {
        bail!("no subcommand given; see --help");
    };

    match command {
        Command::Dpolab { command } => return run_dpolab(command, &cli.out_dir),
        Command::Eval {
            validation,
            k,
            resamples,
            confidence,
        } => {
            let endpoints = build_endpoints(&config)?;
            let prompts: Vec<redipo::types::PromptEntry> = read_jsonl(&validation)?;
            let report = redipo::evalkit::evaluate(
                endpoints.instruct_sampler.as_ref(),
                &endpoints.embedder,
                endpoints.reward.as_ref(),
                endpoints.safety.as_ref(),
                &prompts,
                k,
                &config.decoding,
                resamples,
                confidence,
                config.rng_seed,
            )?;
            std::fs::create_dir_all(&cli.out_dir)?;
            let out = cli.out_dir.join(REPORT_FILE);
            std::fs::write(&out, serde_json::to_string_pretty(&report)? + "\n")?;
            println!(
                "diversity {:.4} ±{:.4} | if_score {:.4} ±{:.4} | safety {:.4} ±{:.4}",
                report.marginal_diversity.estimate,
                report.marginal_diversity.half_width,
                report.if_score.estimate,
                report.if_score.half_width,
                report.safety_rate.estimate,
                report.safety_rate.half_width,
            );
            println!("report written to {}", out.display());
            return Ok(());
        }
        other => {
            let (plan, format) = match other {
                Command::Generate => (RunPlan::single(StageName::Generate), None),
                Command::Rewrite => (RunPlan::single(StageName::Rewrite), None),
                Command::Filter => (RunPlan::single(StageName::Filter), None),
                Command::Diversity => (RunPlan::single(StageName::Diversity), None),
                Command::Pair => (RunPlan::single(StageName::Pair), None),
                Command::Export { format } => {
                    (RunPlan::single(StageName::Export), Some(format))
                }
                Command::All { format } => (RunPlan::full(), Some(format)),
                Command::Eval { .. } | Command::Dpolab { .. } => unreachable!(),
            };
            let mut plan = plan;
            plan.resume = cli.resume;
            let export_format = match format.as_deref() {
                Some(s) => s.parse::<ExportFormat>().map_err(anyhow::Error::msg)?,
                None => ExportFormat::FlatJsonl,
            };
            let endpoints = build_endpoints(&config)?;
            let ctx = PipelineContext {
                config,
                endpoints,
                out_dir: cli.out_dir.clone(),
                prompts_path: cli.prompts.clone(),
                validation_path: None,
                export_format,
            };
            let manifest = run_pipeline(&plan, &ctx)?;
            manifest.counters.reconcile().ok();
            println!(
                "stages {:?} done: {} initial generations, {} pairs over {} prompts",
                manifest.stages_completed,
                manifest.counters.initial_generations,
                manifest.counters.surviving_pairs,
                manifest.counters.unique_prompts,
            );
        }
    }
    Ok(())
}

fn run_dpolab(command: DpolabCommand, out_dir: &std::path::Path) -> Result<()> {
    match command {
        DpolabCommand::Losscheck {
            beta,
            label_smoothing,
        } => {
            let ln2 = std::f64::consts::LN_2;
            for delta in [0.0, 1.0, 5.0, 10.0, -5.0] {
                let pair = PairLogits::new(delta / 2.0, -delta / 2.0, 0.0, 0.0);
                let loss = dpo_loss(&pair, beta, label_smoothing)?;
                println!("delta {delta:>6.1}  loss {loss:.6}");
            }
            let at_zero = dpo_loss(&PairLogits::new(0.0, 0.0, 0.0, 0.0), beta, label_smoothing)?;
            let ok = (at_zero - ln2).abs() < 1e-12;
            println!(
                "[{}] loss at zero margin = ln 2 (got {at_zero:.12})",
                if ok { "PASS" } else { "FAIL" }
            );
            if !ok {
                bail!("zero-margin loss check failed");
            }
        }
        DpolabCommand::Gradcheck { n, seed } => {
            use rand::prelude::*;
            use rand_chacha::ChaCha8Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut max_err = 0.0f64;
            for _ in 0..n {
                let pair = PairLogits::new(
                    rng.random_range(-10.0..0.0),
                    rng.random_range(-10.0..0.0),
                    rng.random_range(-10.0..0.0),
                    rng.random_range(-10.0..0.0),
                )
                .with_weight(rng.random_range(0.0..2.0));
                let beta = rng.random_range(0.01..0.2);
                let smoothing = [0.0, 0.05, 0.3][rng.random_range(0..3)];
                max_err = max_err.max(dpo_grad_check(&pair, beta, smoothing)?);
            }
            let ok = max_err < 1e-5;
            println!(
                "[{}] max relative gradient error over {n} inputs: {max_err:.3e}",
                if ok { "PASS" } else { "FAIL" }
            );
            if !ok {
                bail!("gradient check failed");
            }
        }
        DpolabCommand::Toytrain { fixture, out } => {
            let text = std::fs::read_to_string(&fixture)
                .with_context(|| format!("reading fixture {}", fixture.display()))?;
            let fx: ToyFixture = serde_json::from_str(&text)?;
            let config = ToyTrainConfig {
                beta: fx.beta,
                label_smoothing: fx.label_smoothing,
                steps: fx.steps,
                learning_rate: fx.learning_rate,
            };
            let trace = toy_train(
                fx.outcome_space,
                &fx.pairs,
                fx.reference_logits.as_deref(),
                &config,
            )?;
            let out = out.unwrap_or_else(|| out_dir.join("loss_curve.csv"));
            if let Some(parent) = out.parent() {
                std::fs::create_dir_all(parent)?;
            }
            let mut csv = String::from("step,loss,margin\n");
            for (step, (loss, margin)) in trace.losses.iter().zip(&trace.margins).enumerate() {
                csv.push_str(&format!("{step},{loss},{margin}\n"));
            }
            std::fs::write(&out, csv)?;
            println!(
                "final loss {:.6}, final margin {:.6}, policy {:?}",
                trace.losses.last().unwrap_or(&f64::NAN),
                trace.margins.last().unwrap_or(&f64::NAN),
                trace.final_policy,
            );
            println!("loss curve written to {}", out.display());
        }
        DpolabCommand::Select {
            metrics,
            baseline,
            tau_if,
            tau_s,
        } => {
            let candidates: Vec<CheckpointMetrics> = read_jsonl(&metrics)?;
            let baseline_text = std::fs::read_to_string(&baseline)?;
            let baseline: CheckpointMetrics = serde_json::from_str(&baseline_text)?;
            match select_checkpoint(&candidates, &baseline, tau_if, tau_s)? {
                Some(index) => println!("selected checkpoint {index}"),
                None => println!("no eligible checkpoint"),
            }
        }
    }
    Ok(())
}

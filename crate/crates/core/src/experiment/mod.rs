//! End-to-end experiments: build the initial policy from a config, run the
//! orchestrator, and write the run directory.
//!
//! A run directory holds `metrics.csv`, `summary.json`, `config.toml` (the
//! resolved config in flat form), `checkpoints/ckpt_NNNN.bin`, and SVG plots of
//! reward, entropy, and KL.

mod compare;
mod metrics_io;
mod plots;
mod presets;

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{PolicyKind, RunConfig};
use crate::error::{Error, Result};
use crate::estimators::PassAtKReport;
use crate::objectives::GrpoStats;
use crate::orchestrator::{
    self, default_dataset_path, generate_offline_dataset, stream_rng, CheckpointEntry, RunArtifacts, RunContext, Stream,
};
use crate::seqmodel::{
    read_checkpoint, write_checkpoint, Checkpoint, LinearSoftmaxPolicy, SoftmaxPolicy, TabularPolicy,
};

pub use compare::{compare, ComparisonReport, MetricComparison};
pub use metrics_io::{metric_columns, write_metrics_csv, MetricsTable};
pub use plots::line_plot;
pub use presets::{preset, PRESETS};

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// The initial policy a config describes, drawn from the `init` seed stream.
pub fn initial_policy(cfg: &RunConfig) -> Result<Checkpoint> {
    let shape = cfg.shape();
    let prompts = cfg.model.prompts;
    let scale = cfg.model.init_scale;
    let mut rng = stream_rng(cfg.seeds.master, Stream::Init);
    Ok(match (cfg.model.policy, scale > 0.0) {
        (PolicyKind::Tabular, false) => TabularPolicy::uniform(shape, prompts)?.into(),
        (PolicyKind::Tabular, true) => TabularPolicy::random(shape, prompts, scale, &mut rng)?.into(),
        (PolicyKind::Linear, false) => LinearSoftmaxPolicy::zeros(shape, prompts, cfg.model.featurizer)?.into(),
        (PolicyKind::Linear, true) => {
            LinearSoftmaxPolicy::random(shape, prompts, cfg.model.featurizer, scale, &mut rng)?.into()
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestCheckpoint {
    pub id: usize,
    pub iteration: usize,
    pub file: String,
    /// Mean expected reward over prompts (exact when enumeration is on).
    pub expected_reward: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub algorithm: String,
    pub mode: String,
    pub iterations: usize,
    pub final_pass_at_k: PassAtKReport,
    pub final_entropy: f64,
    pub final_expected_reward: f64,
    pub best_checkpoint: Option<BestCheckpoint>,
    pub effective_lag: Option<usize>,
    /// GRPO only: importance-weight diagnostics pooled over the run.
    pub importance_weights: Option<GrpoStats>,
    pub wall_time_secs: f64,
    /// Resolved config in flat `section.key = value` form; parses back to the same config.
    pub config: String,
}

impl RunSummary {
    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_reader(BufReader::new(file))?)
    }
}

/// Runs the experiment a config describes and writes its run directory.
pub fn run_experiment(cfg: &RunConfig) -> Result<(PathBuf, RunSummary)> {
    cfg.validate()?;
    let dir = cfg.output_dir();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let started = Instant::now();
    tracing::info!(dir = %dir.display(), algorithm = ?cfg.algorithm, "starting run");
    let summary = match initial_policy(cfg)? {
        Checkpoint::Tabular(p) => finish_run(cfg, &dir, orchestrator::run(cfg, p)?, started)?,
        Checkpoint::Linear(p) => finish_run(cfg, &dir, orchestrator::run(cfg, p)?, started)?,
    };
    Ok((dir, summary))
}

fn finish_run<P>(cfg: &RunConfig, dir: &Path, art: RunArtifacts<P>, started: Instant) -> Result<RunSummary>
where
    P: SoftmaxPolicy + Into<Checkpoint>,
{
    write_metrics_csv(&dir.join(METRICS_FILE), &cfg.eval.k_list, &art.metrics)?;
    let flat = cfg.to_flat_toml()?;
    write_text(&dir.join(CONFIG_FILE), &flat)?;

    let best_checkpoint = if cfg.output.checkpoints {
        let ckpt_dir = dir.join(CHECKPOINT_DIR);
        std::fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
        for entry in &art.checkpoints {
            save_checkpoint(&ckpt_dir.join(checkpoint_file(entry.id)), entry.policy.clone().into())?;
        }
        best_of(cfg, &art.checkpoints)?
    } else {
        None
    };

    if cfg.output.plots {
        let series = |f: fn(&orchestrator::MetricsRecord) -> f64| art.metrics.iter().map(f).collect::<Vec<_>>();
        line_plot(&dir.join("reward.svg"), "mean_reward", &series(|m| m.mean_reward))?;
        line_plot(&dir.join("entropy.svg"), "entropy", &series(|m| m.entropy))?;
        line_plot(&dir.join("kl.svg"), "kl_to_vllm", &series(|m| m.kl_to_vllm))?;
    }

    let summary = RunSummary {
        algorithm: format!("{:?}", cfg.algorithm).to_lowercase(),
        mode: format!("{:?}", cfg.mode).to_lowercase(),
        iterations: art.metrics.len(),
        final_pass_at_k: art.final_pass_at_k,
        final_entropy: art.final_entropy,
        final_expected_reward: art.final_expected_reward,
        best_checkpoint,
        effective_lag: art.effective_lag,
        importance_weights: pool_stats(&art.grpo_stats),
        wall_time_secs: started.elapsed().as_secs_f64(),
        config: flat,
    };
    let path = dir.join(SUMMARY_FILE);
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::to_writer_pretty(BufWriter::new(file), &summary)?;
    tracing::info!(
        reward = summary.final_expected_reward,
        entropy = summary.final_entropy,
        secs = summary.wall_time_secs,
        "run finished"
    );
    Ok(summary)
}

fn pool_stats(per_iter: &[GrpoStats]) -> Option<GrpoStats> {
    if per_iter.is_empty() {
        return None;
    }
    let mut pooled = GrpoStats::default();
    let mut weight_total = 0.0;
    for s in per_iter {
        pooled.tokens += s.tokens;
        pooled.clipped += s.clipped;
        pooled.max_abs_log_is_weight = pooled.max_abs_log_is_weight.max(s.max_abs_log_is_weight);
        weight_total += s.mean_is_weight * s.tokens as f64;
    }
    if pooled.tokens > 0 {
        pooled.mean_is_weight = weight_total / pooled.tokens as f64;
    }
    Some(pooled)
}

pub fn checkpoint_file(id: usize) -> String {
    format!("ckpt_{id:04}.bin")
}

/// Highest mean expected reward; the earliest checkpoint wins ties.
fn best_of<P: SoftmaxPolicy>(cfg: &RunConfig, entries: &[CheckpointEntry<P>]) -> Result<Option<BestCheckpoint>> {
    let ctx = RunContext::new(cfg, &entries[0].policy)?;
    let mut best: Option<BestCheckpoint> = None;
    for e in entries {
        let mut rng = stream_rng(cfg.seeds.master, Stream::FinalMetrics);
        let (_, reward) = ctx.final_stats(&e.policy, &mut rng)?;
        if best.as_ref().is_none_or(|b| reward > b.expected_reward) {
            best = Some(BestCheckpoint {
                id: e.id,
                iteration: e.iteration,
                file: checkpoint_file(e.id),
                expected_reward: reward,
            });
        }
    }
    Ok(best)
}

pub fn save_checkpoint(path: &Path, ckpt: Checkpoint) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_checkpoint(&mut out, &ckpt).map_err(|e| Error::io(path, e))?;
    std::io::Write::flush(&mut out).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut BufReader::new(file))
}

/// Pass@k of a saved policy on the config's task and prompts.
pub fn eval_checkpoint(path: &Path, cfg: &RunConfig) -> Result<PassAtKReport> {
    let mut rng = stream_rng(cfg.seeds.master, Stream::FinalEval);
    match load_checkpoint(path)? {
        Checkpoint::Tabular(p) => RunContext::new(cfg, &p)?.evaluate(&p, &mut rng),
        Checkpoint::Linear(p) => RunContext::new(cfg, &p)?.evaluate(&p, &mut rng),
    }
}

/// Writes the stage-1 offline dataset for `cfg` and returns its path.
pub fn gen_offline(cfg: &RunConfig) -> Result<(PathBuf, usize)> {
    let path = default_dataset_path(cfg);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let groups = match initial_policy(cfg)? {
        Checkpoint::Tabular(p) => generate_offline_dataset(cfg, &p, &path)?,
        Checkpoint::Linear(p) => generate_offline_dataset(cfg, &p, &path)?,
    };
    Ok((path, groups.len()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

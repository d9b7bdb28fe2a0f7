use std::path::{Path, PathBuf};

use rand::seq::index;
use rand_chacha::ChaCha8Rng;

use super::{oapl_step, stream_rng, CheckpointEntry, MetricsRecord, RunArtifacts, RunContext, Stream};
use crate::config::RunConfig;
use crate::engine::{generate_group, make_snapshot, read_rollouts, write_rollouts, PolicySnapshot, RolloutBuffer};
use crate::error::{Error, Result};
use crate::objectives::OptimizerState;
use crate::seqmodel::{PromptInstance, RolloutGroup, SoftmaxPolicy};

pub const STAGE1_FILE: &str = "offline_stage1.jsonl";
pub const STAGE2_FILE: &str = "offline_stage2.jsonl";

/// One group per prompt from a version-0 snapshot of `policy`, written to `path`.
pub fn generate_offline_dataset<P: SoftmaxPolicy>(
    cfg: &RunConfig,
    policy: &P,
    path: &Path,
) -> Result<Vec<RolloutGroup>> {
    let ctx = RunContext::new(cfg, policy)?;
    let snapshot = make_snapshot(policy, 0, &ctx.mismatch)?;
    let mut rng = stream_rng(cfg.seeds.master, Stream::Generation);
    let groups = generate_for(&ctx, &snapshot, &ctx.prompts, &mut rng)?;
    write_dataset(path, &groups)?;
    Ok(groups)
}

fn generate_for<P: SoftmaxPolicy>(
    ctx: &RunContext,
    snapshot: &PolicySnapshot<P>,
    prompts: &[PromptInstance],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<RolloutGroup>> {
    prompts
        .iter()
        .map(|p| generate_group(snapshot, &ctx.task, p, ctx.cfg.train.group_size, rng))
        .collect()
}

fn write_dataset(path: &Path, groups: &[RolloutGroup]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_rollouts(path, groups)
}

/// Two-stage offline OAPL.
///
/// Stage 1 loads the dataset at `offline.dataset` (default
/// `<output dir>/offline_stage1.jsonl`) when it exists, and otherwise samples
/// one group per prompt from the initial policy and writes it there. It then
/// drops prompts whose rollouts all scored 0, and trains `offline.stage1_epochs`
/// passes over what is left. Stage 2 resyncs (version 1), regenerates on a
/// random subset of `offline.stage2_prompts` prompts, and trains
/// `offline.stage2_epochs` more passes without filtering. Each stage is OAPL
/// with the lag set to its number of optimizer steps, reported as
/// `effective_lag` for stage 1.
pub fn run_two_stage_offline<P: SoftmaxPolicy>(cfg: &RunConfig, init: P) -> Result<RunArtifacts<P>> {
    let ctx = RunContext::new(cfg, &init)?;
    let master = cfg.seeds.master;
    let mut gen_rng = stream_rng(master, Stream::Generation);
    let mut sample_rng = stream_rng(master, Stream::Sampling);
    let mut metrics_rng = stream_rng(master, Stream::Metrics);
    let mut eval_rng = stream_rng(master, Stream::Eval);
    let out_dir = cfg.output_dir();

    let mut trainer = init;
    let mut optimizer = cfg.optimizer.build();
    let snapshot = make_snapshot(&trainer, 0, &ctx.mismatch)?;
    let dataset = default_dataset_path(cfg);
    let stage1 = if dataset.exists() {
        let groups = read_rollouts(&dataset)?;
        if let Some(g) = groups.iter().find(|g| g.behavior_version() != 0) {
            return Err(Error::VersionMismatch {
                expected: 0,
                got: g.behavior_version(),
            });
        }
        groups
    } else {
        let groups = generate_for(&ctx, &snapshot, &ctx.prompts, &mut gen_rng)?;
        write_dataset(&dataset, &groups)?;
        groups
    };
    let total = stage1.len();
    let kept: Vec<RolloutGroup> = stage1
        .into_iter()
        .filter(|g| g.rewards().iter().any(|&r| r > 0.0))
        .collect();
    tracing::info!(total, kept = kept.len(), "filtered zero-success prompts");
    if kept.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "all {total} stage-1 prompts had zero successful rollouts"
        )));
    }

    let mut state = Stage {
        ctx: &ctx,
        trainer: &mut trainer,
        optimizer: &mut optimizer,
        metrics: Vec::new(),
        consumed: Vec::new(),
        sample_rng: &mut sample_rng,
        metrics_rng: &mut metrics_rng,
        eval_rng: &mut eval_rng,
    };
    let mut checkpoints = vec![CheckpointEntry {
        id: 0,
        iteration: 0,
        version: 0,
        policy: state.trainer.clone(),
    }];
    let stage1_steps = state.train(&snapshot, kept, cfg.offline.stage1_epochs)?;

    if cfg.offline.stage2_epochs > 0 {
        let snapshot = make_snapshot(&*state.trainer, 1, &ctx.mismatch)?;
        checkpoints.push(CheckpointEntry {
            id: 1,
            iteration: state.metrics.len(),
            version: 1,
            policy: state.trainer.clone(),
        });
        let n = match cfg.offline.stage2_prompts {
            0 => ctx.prompts.len(),
            n => n,
        };
        let mut chosen = index::sample(&mut gen_rng, ctx.prompts.len(), n).into_vec();
        chosen.sort_unstable();
        let subset: Vec<PromptInstance> = chosen.iter().map(|&i| ctx.prompts[i].clone()).collect();
        let groups = generate_for(&ctx, &snapshot, &subset, &mut gen_rng)?;
        write_dataset(&out_dir.join(STAGE2_FILE), &groups)?;
        state.train(&snapshot, groups, cfg.offline.stage2_epochs)?;
    }

    let Stage { metrics, consumed, .. } = state;
    checkpoints.push(CheckpointEntry {
        id: checkpoints.len(),
        iteration: metrics.len(),
        version: metrics.last().map_or(0, |m| m.snapshot_version),
        policy: trainer.clone(),
    });
    let mut artifacts = ctx.finish(trainer, metrics, checkpoints, consumed)?;
    artifacts.effective_lag = Some(stage1_steps);
    Ok(artifacts)
}

struct Stage<'a, P> {
    ctx: &'a RunContext,
    trainer: &'a mut P,
    optimizer: &'a mut OptimizerState,
    metrics: Vec<MetricsRecord>,
    consumed: Vec<Vec<u64>>,
    sample_rng: &'a mut ChaCha8Rng,
    metrics_rng: &'a mut ChaCha8Rng,
    eval_rng: &'a mut ChaCha8Rng,
}

impl<P: SoftmaxPolicy> Stage<'_, P> {
    /// `epochs · ceil(len / batch_size)` optimizer steps over a fixed dataset.
    fn train(&mut self, snapshot: &PolicySnapshot<P>, groups: Vec<RolloutGroup>, epochs: usize) -> Result<usize> {
        let cfg = &self.ctx.cfg;
        let b = cfg.train.batch_size;
        let steps = epochs * groups.len().div_ceil(b);
        let mut buffer = RolloutBuffer::new(groups.len(), snapshot.version())?;
        for g in groups {
            buffer.push(g)?;
        }
        for _ in 0..steps {
            let t = self.metrics.len();
            let (entropy, kl_to_vllm) = self.ctx.probe(&*self.trainer, snapshot, self.metrics_rng)?;
            let pass_at_k = self.ctx.periodic_eval(t, &*self.trainer, self.eval_rng)?;
            let batch = buffer.sample(b, self.sample_rng)?;
            self.consumed.push(batch.iter().map(|g| g.behavior_version()).collect());
            let step = oapl_step(cfg, self.trainer, self.optimizer, &[batch])?;
            let row = MetricsRecord {
                iter: t,
                mean_reward: step.mean_reward,
                entropy,
                kl_to_vllm,
                v_hat_mean: step.v_hat_mean,
                loss: step.loss,
                grad_norm: step.grad_norm,
                snapshot_version: snapshot.version(),
                pass_at_k,
            };
            self.ctx.log_progress("offline", &row);
            self.metrics.push(row);
        }
        Ok(steps)
    }
}

/// Where stage-1 data goes when `offline.dataset` is unset.
pub fn default_dataset_path(cfg: &RunConfig) -> PathBuf {
    match &cfg.offline.dataset {
        Some(path) => cfg.under_output_root(path),
        None => cfg.output_dir().join(STAGE1_FILE),
    }
}

use std::sync::Arc;

use super::{oapl_step, stream_rng, CheckpointEntry, MetricsRecord, RunArtifacts, RunContext, Stream};
use crate::config::RunConfig;
use crate::engine::{generate_group, make_snapshot, RolloutBuffer};
use crate::error::Result;
use crate::seqmodel::SoftmaxPolicy;

/// Lagged-sync OAPL in a single thread.
///
/// Iteration `t` (0-based) samples from snapshot version `t / L`. The snapshot
/// is refreshed, and the buffer cleared, at the start of every iteration that
/// is a multiple of `L`. Each iteration generates one batch of groups into the
/// buffer and takes one optimizer step on a batch sampled from it.
pub fn run_oapl<P: SoftmaxPolicy>(cfg: &RunConfig, init: P) -> Result<RunArtifacts<P>> {
    let ctx = RunContext::new(cfg, &init)?;
    let lag = cfg.train.lag;
    let master = cfg.seeds.master;
    let mut gen_rng = stream_rng(master, Stream::Generation);
    let mut sample_rng = stream_rng(master, Stream::Sampling);
    let mut metrics_rng = stream_rng(master, Stream::Metrics);
    let mut eval_rng = stream_rng(master, Stream::Eval);

    let mut trainer = init;
    let mut optimizer = cfg.optimizer.build();
    let mut snapshot = make_snapshot(&trainer, 0, &ctx.mismatch)?;
    let mut buffer = RolloutBuffer::new(cfg.buffer_capacity(), 0)?;
    let mut checkpoints = vec![CheckpointEntry {
        id: 0,
        iteration: 0,
        version: 0,
        policy: trainer.clone(),
    }];
    let mut metrics = Vec::with_capacity(cfg.train.iterations);
    let mut consumed = Vec::with_capacity(cfg.train.iterations);
    let mut generated = 0;

    for t in 0..cfg.train.iterations {
        if t > 0 && t % lag == 0 {
            let version = (t / lag) as u64;
            snapshot = make_snapshot(&trainer, version, &ctx.mismatch)?;
            buffer.clear_to(version);
            checkpoints.push(CheckpointEntry {
                id: checkpoints.len(),
                iteration: t,
                version,
                policy: trainer.clone(),
            });
        }
        let (entropy, kl_to_vllm) = ctx.probe(&trainer, &snapshot, &mut metrics_rng)?;
        let pass_at_k = ctx.periodic_eval(t, &trainer, &mut eval_rng)?;

        for _ in 0..ctx.groups_per_step() {
            let prompt = ctx.prompt_at(generated);
            generated += 1;
            let group = generate_group(&snapshot, &ctx.task, prompt, cfg.train.group_size, &mut gen_rng)?;
            buffer.push(group)?;
        }
        let batches = (0..cfg.train.accumulation_steps)
            .map(|_| buffer.sample(cfg.train.batch_size, &mut sample_rng))
            .collect::<Result<Vec<_>>>()?;
        consumed.push(
            batches
                .iter()
                .flatten()
                .map(|g: &Arc<_>| g.behavior_version())
                .collect(),
        );
        let step = oapl_step(cfg, &mut trainer, &mut optimizer, &batches)?;
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
        ctx.log_progress("oapl", &row);
        metrics.push(row);
    }
    checkpoints.push(CheckpointEntry {
        id: checkpoints.len(),
        iteration: cfg.train.iterations,
        version: snapshot.version(),
        policy: trainer.clone(),
    });
    ctx.finish(trainer, metrics, checkpoints, consumed)
}

use super::{mean_v_hat, stream_rng, CheckpointEntry, MetricsRecord, RunArtifacts, RunContext, Stream};
use crate::config::RunConfig;
use crate::engine::{generate_group, make_snapshot};
use crate::error::Result;
use crate::objectives::{apply_update, grpo_loss_and_grad, GrpoStats};
use crate::seqmodel::SoftmaxPolicy;

/// GRPO with off-by-one asynchrony.
///
/// With `grpo.max_async = 1`, iteration `t` samples from a (mismatched) copy of
/// the trainer as it was before the previous step, and that same unperturbed
/// copy serves as `π_old`. So `π_old` is exactly one optimizer step behind `π`
/// when the loss is evaluated (at `t = 0` both are the initial policy). With
/// `max_async = 0` generation is on-policy. The snapshot version equals `t`.
/// Checkpoints are kept every `train.lag` iterations and at the end.
pub fn run_grpo<P: SoftmaxPolicy>(cfg: &RunConfig, init: P) -> Result<RunArtifacts<P>> {
    let ctx = RunContext::new(cfg, &init)?;
    let master = cfg.seeds.master;
    let mut gen_rng = stream_rng(master, Stream::Generation);
    let mut metrics_rng = stream_rng(master, Stream::Metrics);
    let mut eval_rng = stream_rng(master, Stream::Eval);
    let loss_cfg = cfg.grpo.loss();
    let b = cfg.train.batch_size;

    let mut trainer = init;
    let mut previous = trainer.clone();
    let mut optimizer = cfg.optimizer.build();
    let mut checkpoints = vec![CheckpointEntry {
        id: 0,
        iteration: 0,
        version: 0,
        policy: trainer.clone(),
    }];
    let mut metrics = Vec::with_capacity(cfg.train.iterations);
    let mut consumed = Vec::with_capacity(cfg.train.iterations);
    let mut all_stats = Vec::with_capacity(cfg.train.iterations);
    let mut generated = 0;

    for t in 0..cfg.train.iterations {
        let version = t as u64;
        let old = if cfg.grpo.max_async == 1 {
            previous.clone()
        } else {
            trainer.clone()
        };
        let snapshot = make_snapshot(&old, version, &ctx.mismatch)?;
        let (entropy, kl_to_vllm) = ctx.probe(&trainer, &snapshot, &mut metrics_rng)?;
        let pass_at_k = ctx.periodic_eval(t, &trainer, &mut eval_rng)?;

        let mut groups = Vec::with_capacity(ctx.groups_per_step());
        for _ in 0..ctx.groups_per_step() {
            let prompt = ctx.prompt_at(generated);
            generated += 1;
            groups.push(generate_group(
                &snapshot,
                &ctx.task,
                prompt,
                cfg.train.group_size,
                &mut gen_rng,
            )?);
        }
        consumed.push(groups.iter().map(|g| g.behavior_version()).collect());

        let chunks = groups.chunks(b).count() as f64;
        let mut grad = vec![0.0; trainer.num_params()];
        let mut loss = 0.0;
        let mut stats = GrpoStats::default();
        let mut weight_total = 0.0;
        for chunk in groups.chunks(b) {
            let out = grpo_loss_and_grad(&trainer, &old, chunk, &loss_cfg)?;
            loss += out.loss / chunks;
            for (g, d) in grad.iter_mut().zip(&out.grad) {
                *g += d / chunks;
            }
            stats.tokens += out.stats.tokens;
            stats.clipped += out.stats.clipped;
            stats.max_abs_log_is_weight = stats.max_abs_log_is_weight.max(out.stats.max_abs_log_is_weight);
            weight_total += out.stats.mean_is_weight * out.stats.tokens as f64;
        }
        if stats.tokens > 0 {
            stats.mean_is_weight = weight_total / stats.tokens as f64;
        }
        let rewards: Vec<f64> = groups.iter().flat_map(|g| g.rewards()).collect();
        let v_hat_mean = mean_v_hat(&groups, cfg.oapl.beta1)?;

        previous = trainer.clone();
        let update = apply_update(trainer.params_mut(), &grad, &mut optimizer)?;
        all_stats.push(stats);

        let row = MetricsRecord {
            iter: t,
            mean_reward: super::mean(&rewards),
            entropy,
            kl_to_vllm,
            v_hat_mean,
            loss,
            grad_norm: update.grad_norm,
            snapshot_version: version,
            pass_at_k,
        };
        ctx.log_progress("grpo", &row);
        metrics.push(row);

        let done = t + 1;
        if done % cfg.train.lag == 0 && done < cfg.train.iterations {
            checkpoints.push(CheckpointEntry {
                id: checkpoints.len(),
                iteration: done,
                version,
                policy: trainer.clone(),
            });
        }
    }
    checkpoints.push(CheckpointEntry {
        id: checkpoints.len(),
        iteration: cfg.train.iterations,
        version: cfg.train.iterations.saturating_sub(1) as u64,
        policy: trainer.clone(),
    });
    let mut artifacts = ctx.finish(trainer, metrics, checkpoints, consumed)?;
    artifacts.grpo_stats = all_stats;
    Ok(artifacts)
}

use std::sync::{Arc, Condvar, Mutex, MutexGuard};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{oapl_step, stream_rng, CheckpointEntry, MetricsRecord, RunArtifacts, RunContext, Stream};
use crate::config::RunConfig;
use crate::engine::{generate_group, make_snapshot, PolicySnapshot, RolloutBuffer};
use crate::error::{Error, Result};
use crate::seqmodel::SoftmaxPolicy;

struct Shared<P> {
    snapshot: Arc<PolicySnapshot<P>>,
    buffer: RolloutBuffer,
    /// Groups handed out to generators for the current version.
    issued: usize,
    /// Groups accepted into the buffer for the current version.
    accepted: usize,
    /// Generators may run ahead up to this many groups per version.
    budget: usize,
    next_prompt: usize,
    done: bool,
    error: Option<Error>,
}

fn lock<P>(m: &Mutex<Shared<P>>) -> MutexGuard<'_, Shared<P>> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

/// OAPL with generation overlapped with training.
///
/// `concurrent.generators` threads sample groups from the current snapshot
/// while the trainer steps. Generators may run one batch ahead of the trainer
/// within a version. A sync swaps the snapshot and clears the buffer under the
/// lock; groups still in flight carry the old version and are discarded when
/// they arrive. Lag bound and buffer purity hold exactly as in serial mode, but
/// the interleaving, and so the metrics, are not reproducible.
pub fn run_oapl_concurrent<P: SoftmaxPolicy>(cfg: &RunConfig, init: P) -> Result<RunArtifacts<P>> {
    let ctx = RunContext::new(cfg, &init)?;
    let lag = cfg.train.lag;
    let per_step = ctx.groups_per_step();
    let master = cfg.seeds.master;
    let mut sample_rng = stream_rng(master, Stream::Sampling);
    let mut metrics_rng = stream_rng(master, Stream::Metrics);
    let mut eval_rng = stream_rng(master, Stream::Eval);

    let mut trainer = init;
    let mut optimizer = cfg.optimizer.build();
    let shared = Mutex::new(Shared {
        snapshot: Arc::new(make_snapshot(&trainer, 0, &ctx.mismatch)?),
        buffer: RolloutBuffer::new(cfg.buffer_capacity(), 0)?,
        issued: 0,
        accepted: 0,
        budget: 2 * per_step,
        next_prompt: 0,
        done: false,
        error: None,
    });
    let ready = Condvar::new();
    let mut checkpoints = vec![CheckpointEntry {
        id: 0,
        iteration: 0,
        version: 0,
        policy: trainer.clone(),
    }];
    let mut metrics = Vec::with_capacity(cfg.train.iterations);
    let mut consumed = Vec::with_capacity(cfg.train.iterations);

    let trained: Result<()> = std::thread::scope(|scope| {
        for worker in 0..cfg.concurrent.generators {
            let (ctx, shared, ready) = (&ctx, &shared, &ready);
            scope.spawn(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(master);
                rng.set_stream(100 + worker as u64);
                generator_loop(ctx, shared, ready, &mut rng);
            });
        }

        let result = (|| {
            for t in 0..cfg.train.iterations {
                let within = t % lag;
                let snapshot = {
                    let mut s = lock(&shared);
                    if t > 0 && within == 0 {
                        let version = (t / lag) as u64;
                        s.snapshot = Arc::new(make_snapshot(&trainer, version, &ctx.mismatch)?);
                        s.buffer.clear_to(version);
                        s.issued = 0;
                        s.accepted = 0;
                        checkpoints.push(CheckpointEntry {
                            id: checkpoints.len(),
                            iteration: t,
                            version,
                            policy: trainer.clone(),
                        });
                    }
                    s.budget = (within + 2) * per_step;
                    ready.notify_all();
                    Arc::clone(&s.snapshot)
                };
                let (entropy, kl_to_vllm) = ctx.probe(&trainer, &snapshot, &mut metrics_rng)?;
                let pass_at_k = ctx.periodic_eval(t, &trainer, &mut eval_rng)?;

                let batches = {
                    let mut s = lock(&shared);
                    while s.accepted < (within + 1) * per_step && s.error.is_none() {
                        s = ready.wait(s).unwrap_or_else(|e| e.into_inner());
                    }
                    if let Some(e) = s.error.take() {
                        return Err(e);
                    }
                    (0..cfg.train.accumulation_steps)
                        .map(|_| s.buffer.sample(cfg.train.batch_size, &mut sample_rng))
                        .collect::<Result<Vec<_>>>()?
                };
                consumed.push(batches.iter().flatten().map(|g| g.behavior_version()).collect());
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
                ctx.log_progress("oapl-concurrent", &row);
                metrics.push(row);
            }
            Ok(())
        })();
        lock(&shared).done = true;
        ready.notify_all();
        result
    });
    trained?;

    let version = lock(&shared).snapshot.version();
    checkpoints.push(CheckpointEntry {
        id: checkpoints.len(),
        iteration: cfg.train.iterations,
        version,
        policy: trainer.clone(),
    });
    ctx.finish(trainer, metrics, checkpoints, consumed)
}

fn generator_loop<P: SoftmaxPolicy>(
    ctx: &RunContext,
    shared: &Mutex<Shared<P>>,
    ready: &Condvar,
    rng: &mut ChaCha8Rng,
) {
    loop {
        let (snapshot, prompt) = {
            let mut s = lock(shared);
            while !s.done && s.issued >= s.budget {
                s = ready.wait(s).unwrap_or_else(|e| e.into_inner());
            }
            if s.done {
                return;
            }
            s.issued += 1;
            let k = s.next_prompt;
            s.next_prompt += 1;
            (Arc::clone(&s.snapshot), ctx.prompt_at(k).clone())
        };
        let group = generate_group(&snapshot, &ctx.task, &prompt, ctx.cfg.train.group_size, rng);
        let mut s = lock(shared);
        match group {
            Ok(g) if g.behavior_version() == s.buffer.version_tag() => {
                if let Err(e) = s.buffer.push(g) {
                    s.error = Some(e);
                } else {
                    s.accepted += 1;
                }
            }
            // Sampled before the last sync: dropped with the old buffer.
            Ok(_) => {}
            Err(e) => s.error = Some(e),
        }
        ready.notify_all();
    }
}

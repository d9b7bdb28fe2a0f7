//! Training loops: lagged-sync OAPL (serial and concurrent), the off-by-one GRPO
//! baseline, and two-stage offline OAPL.
//!
//! Serial runs are bit-reproducible: every random draw comes from a ChaCha
//! stream keyed by the master seed and a fixed stream id.

mod concurrent;
mod grpo;
mod offline;
mod serial;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Algorithm, Mode, RunConfig};
use crate::engine::{MismatchSpec, PolicySnapshot};
use crate::error::{Error, Result};
use crate::estimators::{evaluate_policy, v_hat_star, PassAtKReport};
use crate::objectives::{apply_update, oapl_loss_and_grad, GrpoStats, OptimizerState};
use crate::oracle::exact_kl;
use crate::seqmodel::{
    sample_completion, sequence_entropy, sequence_logprob, EntropyMode, PromptInstance, RolloutGroup, SoftmaxPolicy,
    ENUMERATION_CAP,
};
use crate::tasks::{expected_reward, TaskSpec};

pub use concurrent::run_oapl_concurrent;
pub use grpo::run_grpo;
pub use offline::{default_dataset_path, generate_offline_dataset, run_two_stage_offline, STAGE1_FILE, STAGE2_FILE};
pub use serial::run_oapl;

/// One row per optimizer step. Entropy, KL, and Pass@k describe the state at the
/// start of the iteration; loss and gradient norm describe the step taken.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iter: usize,
    /// Mean reward over the rollouts in the training batch.
    pub mean_reward: f64,
    /// Trainer sequence entropy, averaged over prompts.
    pub entropy: f64,
    /// `KL(trainer || inference snapshot)`, averaged over prompts.
    pub kl_to_vllm: f64,
    pub v_hat_mean: f64,
    pub loss: f64,
    /// Pre-clip gradient norm.
    pub grad_norm: f64,
    pub snapshot_version: u64,
    /// Aligned with `eval.k_list`; `None` on iterations without evaluation.
    pub pass_at_k: Vec<Option<f64>>,
}

/// Fixed metric columns, in file order. Pass@k columns follow.
pub const METRIC_COLUMNS: [&str; 8] = [
    "iter",
    "mean_reward",
    "entropy",
    "kl_to_vllm",
    "v_hat_mean",
    "loss",
    "grad_norm",
    "snapshot_version",
];

#[derive(Clone, Debug)]
pub struct CheckpointEntry<P> {
    pub id: usize,
    /// Optimizer steps taken before the snapshot.
    pub iteration: usize,
    pub version: u64,
    pub policy: P,
}

#[derive(Clone, Debug)]
pub struct RunArtifacts<P> {
    pub metrics: Vec<MetricsRecord>,
    pub final_policy: P,
    pub checkpoints: Vec<CheckpointEntry<P>>,
    /// Behavior versions of the groups consumed at each iteration.
    pub consumed_versions: Vec<Vec<u64>>,
    /// GRPO only: importance-weight and clipping diagnostics per iteration.
    pub grpo_stats: Vec<GrpoStats>,
    /// Offline only: optimizer steps between the two syncs.
    pub effective_lag: Option<usize>,
    pub final_entropy: f64,
    /// Mean over prompts of `E_{y~π} r(x, y)` for the final policy.
    pub final_expected_reward: f64,
    pub final_pass_at_k: PassAtKReport,
}

/// Dispatches on algorithm and mode.
pub fn run<P: SoftmaxPolicy>(cfg: &RunConfig, init: P) -> Result<RunArtifacts<P>> {
    match (cfg.algorithm, cfg.mode) {
        (Algorithm::Oapl, Mode::Serial) => run_oapl(cfg, init),
        (Algorithm::Oapl, Mode::Concurrent) => run_oapl_concurrent(cfg, init),
        (Algorithm::Grpo, _) => run_grpo(cfg, init),
        (Algorithm::Offline, _) => run_two_stage_offline(cfg, init),
    }
}

/// Independent RNG streams derived from the master seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Generation = 2,
    Sampling = 3,
    Metrics = 4,
    Eval = 5,
    FinalMetrics = 6,
    FinalEval = 7,
}

pub fn stream_rng(master: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream as u64);
    rng
}

/// Shared, read-only pieces of a run.
pub(crate) struct RunContext {
    pub cfg: RunConfig,
    pub task: TaskSpec,
    pub prompts: Vec<PromptInstance>,
    pub mismatch: MismatchSpec,
}

impl RunContext {
    pub fn new<P: SoftmaxPolicy>(cfg: &RunConfig, init: &P) -> Result<Self> {
        cfg.validate()?;
        let shape = cfg.shape();
        if init.shape() != shape || init.num_prompts() != cfg.model.prompts {
            return Err(Error::InvalidArgument(format!(
                "initial policy {:?} with {} prompts does not match the config",
                init.shape(),
                init.num_prompts()
            )));
        }
        Ok(RunContext {
            cfg: cfg.clone(),
            task: cfg.task_spec()?,
            prompts: cfg.model.prompt_set(),
            mismatch: cfg.mismatch_spec(),
        })
    }

    /// Groups generated per optimizer step.
    pub fn groups_per_step(&self) -> usize {
        self.cfg.train.batch_size * self.cfg.train.accumulation_steps
    }

    /// The `k`-th generated group's prompt, cycling through the set.
    pub fn prompt_at(&self, k: usize) -> &PromptInstance {
        &self.prompts[k % self.prompts.len()]
    }

    fn mean_over_prompts<F>(&self, f: F) -> Result<f64>
    where
        F: Fn(&PromptInstance) -> Result<f64> + Sync,
    {
        let values = self.prompts.par_iter().map(&f).collect::<Result<Vec<_>>>()?;
        Ok(values.iter().sum::<f64>() / values.len() as f64)
    }

    /// Mean sequence entropy and `KL(trainer || snapshot)` over prompts.
    pub fn probe<P: SoftmaxPolicy>(
        &self,
        trainer: &P,
        snapshot: &PolicySnapshot<P>,
        rng: &mut ChaCha8Rng,
    ) -> Result<(f64, f64)> {
        if self.cfg.metrics.exact {
            let entropy = self.exact_entropy(trainer)?;
            let kl = self.mean_over_prompts(|p| exact_kl(trainer, snapshot.policy(), p, ENUMERATION_CAP))?;
            return Ok((entropy, kl));
        }
        let n = self.cfg.metrics.mc_samples;
        let (mut h, mut kl) = (0.0, 0.0);
        for prompt in &self.prompts {
            for _ in 0..n {
                let s = sample_completion(trainer, prompt, rng)?;
                let lp = s.logprob_total();
                h -= lp;
                kl += lp - sequence_logprob(snapshot.policy(), prompt, s.completion.tokens())?;
            }
        }
        let denom = (n * self.prompts.len()) as f64;
        Ok((h / denom, kl / denom))
    }

    fn exact_entropy<P: SoftmaxPolicy>(&self, policy: &P) -> Result<f64> {
        self.mean_over_prompts(|p| {
            let mut unused = ChaCha8Rng::seed_from_u64(0);
            Ok(sequence_entropy(policy, p, EntropyMode::Exact { cap: ENUMERATION_CAP }, &mut unused)?.value)
        })
    }

    /// Mean entropy and expected reward of `policy`; Monte Carlo when enumeration is off.
    pub fn final_stats<P: SoftmaxPolicy>(&self, policy: &P, rng: &mut ChaCha8Rng) -> Result<(f64, f64)> {
        if self.cfg.metrics.exact {
            let entropy = self.exact_entropy(policy)?;
            let reward = self.mean_over_prompts(|p| expected_reward(&self.task, policy, p, ENUMERATION_CAP))?;
            return Ok((entropy, reward));
        }
        let n = self.cfg.metrics.mc_samples;
        let (mut h, mut r) = (0.0, 0.0);
        for prompt in &self.prompts {
            for _ in 0..n {
                let s = sample_completion(policy, prompt, rng)?;
                h -= s.logprob_total();
                r += self.task.reward(prompt, s.completion.tokens());
            }
        }
        let denom = (n * self.prompts.len()) as f64;
        Ok((h / denom, r / denom))
    }

    pub fn evaluate<P: SoftmaxPolicy>(&self, policy: &P, rng: &mut ChaCha8Rng) -> Result<PassAtKReport> {
        evaluate_policy(
            policy,
            &self.task,
            &self.prompts,
            self.cfg.eval.n,
            &self.cfg.eval.k_list,
            rng,
        )
    }

    /// Pass@k cells for iteration `t`: filled when `eval.every` divides `t`.
    pub fn periodic_eval<P: SoftmaxPolicy>(
        &self,
        t: usize,
        policy: &P,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Option<f64>>> {
        let every = self.cfg.eval.every;
        if every > 0 && t.is_multiple_of(every) {
            Ok(self.evaluate(policy, rng)?.mean.into_iter().map(Some).collect())
        } else {
            Ok(vec![None; self.cfg.eval.k_list.len()])
        }
    }

    pub fn log_progress(&self, algorithm: &str, row: &MetricsRecord) {
        let every = self.cfg.output.log_every;
        if every > 0 && row.iter.is_multiple_of(every) {
            tracing::info!(
                algorithm,
                iter = row.iter,
                reward = row.mean_reward,
                entropy = row.entropy,
                kl = row.kl_to_vllm,
                loss = row.loss,
                version = row.snapshot_version,
                "progress"
            );
        }
    }

    pub fn finish<P: SoftmaxPolicy>(
        &self,
        trainer: P,
        metrics: Vec<MetricsRecord>,
        checkpoints: Vec<CheckpointEntry<P>>,
        consumed_versions: Vec<Vec<u64>>,
    ) -> Result<RunArtifacts<P>> {
        let mut rng = stream_rng(self.cfg.seeds.master, Stream::FinalMetrics);
        let (final_entropy, final_expected_reward) = self.final_stats(&trainer, &mut rng)?;
        let mut eval_rng = stream_rng(self.cfg.seeds.master, Stream::FinalEval);
        let final_pass_at_k = self.evaluate(&trainer, &mut eval_rng)?;
        Ok(RunArtifacts {
            metrics,
            final_policy: trainer,
            checkpoints,
            consumed_versions,
            grpo_stats: Vec::new(),
            effective_lag: None,
            final_entropy,
            final_expected_reward,
            final_pass_at_k,
        })
    }
}

pub(crate) struct StepOutcome {
    pub loss: f64,
    pub grad_norm: f64,
    pub v_hat_mean: f64,
    pub mean_reward: f64,
}

/// One OAPL optimizer step. Gradients of the sub-batches are averaged.
pub(crate) fn oapl_step<P: SoftmaxPolicy>(
    cfg: &RunConfig,
    trainer: &mut P,
    optimizer: &mut OptimizerState,
    batches: &[Vec<Arc<RolloutGroup>>],
) -> Result<StepOutcome> {
    let mut grad = vec![0.0; trainer.num_params()];
    let mut loss = 0.0;
    let mut v_hat = Vec::new();
    let mut rewards = Vec::new();
    for batch in batches {
        let out = oapl_loss_and_grad(&*trainer, batch, &cfg.oapl)?;
        loss += out.loss / batches.len() as f64;
        for (g, d) in grad.iter_mut().zip(&out.grad) {
            *g += d / batches.len() as f64;
        }
        v_hat.extend(out.values);
        rewards.extend(batch.iter().flat_map(|g| g.rewards()));
    }
    let stats = apply_update(trainer.params_mut(), &grad, optimizer)?;
    Ok(StepOutcome {
        loss,
        grad_norm: stats.grad_norm,
        v_hat_mean: mean(&v_hat),
        mean_reward: mean(&rewards),
    })
}

pub(crate) fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Mean `V̂*` over groups, for logging.
pub(crate) fn mean_v_hat<G: std::borrow::Borrow<RolloutGroup>>(groups: &[G], beta1: f64) -> Result<f64> {
    let values = groups
        .iter()
        .map(|g| v_hat_star(&g.borrow().rewards(), beta1))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean(&values))
}

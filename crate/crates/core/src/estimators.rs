//! Sample-based estimators: the group soft-value estimate `V̂*`, the advantages
//! built on it, and the unbiased Pass@k estimator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seqmodel::math::log_sum_exp;
use crate::seqmodel::{sample_completion, PromptInstance, RolloutGroup, SoftmaxPolicy};
use crate::tasks::TaskSpec;

/// `V̂* = β₁ ln( (1/G) Σ_i exp(r_i / β₁) )`.
///
/// Interpolates between `max_i r_i` as `β₁ → 0` and the group mean as `β₁ → ∞`.
pub fn v_hat_star(rewards: &[f64], beta1: f64) -> Result<f64> {
    if rewards.is_empty() {
        return Err(Error::InvalidArgument("V̂* of an empty group".into()));
    }
    if beta1.is_nan() || beta1 <= 0.0 {
        return Err(Error::InvalidArgument(format!("beta1 must be > 0, got {beta1}")));
    }
    if let Some(r) = rewards.iter().find(|r| !r.is_finite()) {
        return Err(Error::NonFinite(format!("reward {r}")));
    }
    let scaled: Vec<f64> = rewards.iter().map(|r| r / beta1).collect();
    let v = beta1 * (log_sum_exp(&scaled) - (rewards.len() as f64).ln());
    // at very large β₁ the log-mean-exp is a difference of nearly equal terms;
    // clamp the rounding back into the hull of the rewards
    let (lo, hi) = rewards.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &r| {
        (lo.min(r), hi.max(r))
    });
    Ok(v.clamp(lo, hi))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupValueEstimate {
    pub v_hat: f64,
    pub beta1: f64,
    pub group_size: usize,
    pub rewards_used: Vec<f64>,
}

pub fn estimate_group_value(group: &RolloutGroup, beta1: f64) -> Result<GroupValueEstimate> {
    let rewards = group.rewards();
    Ok(GroupValueEstimate {
        v_hat: v_hat_star(&rewards, beta1)?,
        beta1,
        group_size: rewards.len(),
        rewards_used: rewards,
    })
}

/// `Â_i = r_i - V̂*` for every rollout in the group.
pub fn advantage_estimates(group: &RolloutGroup, beta1: f64) -> Result<Vec<f64>> {
    let rewards = group.rewards();
    let v = v_hat_star(&rewards, beta1)?;
    Ok(rewards.iter().map(|r| r - v).collect())
}

/// Largest `n` for which binomial coefficients are computed in exact integers.
const EXACT_BINOMIAL_MAX_N: usize = 64;

fn binomial_exact(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 1..=k as u128 {
        // acc · (n-k+i) is divisible by i at every step
        acc = acc * (n as u128 - k as u128 + i) / i;
    }
    acc
}

/// Unbiased Pass@k from `n` samples with `c` correct: `1 - C(n-c, k) / C(n, k)`.
pub fn pass_at_k(n: usize, c: usize, k: usize) -> Result<f64> {
    if c > n {
        return Err(Error::InvalidArgument(format!("c = {c} exceeds n = {n}")));
    }
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("k = {k} must be in 1..={n}")));
    }
    if n - c < k {
        return Ok(1.0);
    }
    if n <= EXACT_BINOMIAL_MAX_N {
        let miss = binomial_exact(n - c, k);
        let total = binomial_exact(n, k);
        return Ok(1.0 - miss as f64 / total as f64);
    }
    // C(n-c, k)/C(n, k) = Π_{i=n-c+1}^{n} (1 - k/i)
    let ratio: f64 = ((n - c + 1)..=n).map(|i| 1.0 - k as f64 / i as f64).product();
    Ok(1.0 - ratio)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptPassAtK {
    pub prompt_id: usize,
    pub correct: usize,
    pub estimates: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PassAtKReport {
    pub n: usize,
    pub k_values: Vec<usize>,
    pub per_prompt: Vec<PromptPassAtK>,
    /// Macro average over prompts, aligned with `k_values`.
    pub mean: Vec<f64>,
}

impl PassAtKReport {
    pub fn from_counts(n: usize, k_values: &[usize], counts: &[(usize, usize)]) -> Result<Self> {
        let per_prompt = counts
            .iter()
            .map(|&(prompt_id, correct)| {
                let estimates = k_values
                    .iter()
                    .map(|&k| pass_at_k(n, correct, k))
                    .collect::<Result<Vec<_>>>()?;
                Ok(PromptPassAtK {
                    prompt_id,
                    correct,
                    estimates,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let denom = per_prompt.len().max(1) as f64;
        let mean = (0..k_values.len())
            .map(|j| per_prompt.iter().map(|p| p.estimates[j]).sum::<f64>() / denom)
            .collect();
        Ok(PassAtKReport {
            n,
            k_values: k_values.to_vec(),
            per_prompt,
            mean,
        })
    }

    pub fn mean_at(&self, k: usize) -> Option<f64> {
        self.k_values.iter().position(|&kk| kk == k).map(|j| self.mean[j])
    }
}

/// Samples `n` completions per prompt, counts reward-1 completions, and applies
/// [`pass_at_k`]. Each prompt draws from its own stream keyed by `(seed, prompt_id)`
/// where `seed` comes from `rng`, so results do not depend on thread scheduling.
pub fn evaluate_policy<P: SoftmaxPolicy, R: Rng + ?Sized>(
    policy: &P,
    task: &TaskSpec,
    prompts: &[PromptInstance],
    n: usize,
    k_values: &[usize],
    rng: &mut R,
) -> Result<PassAtKReport> {
    let k_max = k_values.iter().copied().max().unwrap_or(0);
    if k_values.is_empty() || k_values.contains(&0) {
        return Err(Error::InvalidArgument("k values must be non-empty and >= 1".into()));
    }
    if n < k_max {
        return Err(Error::InvalidArgument(format!(
            "n = {n} rollouts cannot estimate Pass@{k_max}"
        )));
    }
    let seed: u64 = rng.random();
    let counts = prompts
        .par_iter()
        .map(|prompt| {
            let mut stream = ChaCha8Rng::seed_from_u64(seed);
            stream.set_stream(prompt.prompt_id as u64);
            let mut correct = 0;
            for _ in 0..n {
                let s = sample_completion(policy, prompt, &mut stream)?;
                if task.reward(prompt, s.completion.tokens()) == 1.0 {
                    correct += 1;
                }
            }
            Ok((prompt.prompt_id, correct))
        })
        .collect::<Result<Vec<_>>>()?;
    PassAtKReport::from_counts(n, k_values, &counts)
}

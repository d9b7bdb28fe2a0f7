use std::borrow::Borrow;

use serde::{Deserialize, Serialize};

use super::check_groups;
use crate::error::{Error, Result};
use crate::seqmodel::{accumulate_grad_token_logprob, token_logprobs, RolloutGroup, SoftmaxPolicy};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrpoLossConfig {
    pub clip_epsilon: f64,
    /// Divide each sequence's token sum by its length.
    pub length_normalize: bool,
    pub adv_norm_epsilon: f64,
}

impl Default for GrpoLossConfig {
    fn default() -> Self {
        GrpoLossConfig {
            clip_epsilon: 0.2,
            length_normalize: true,
            adv_norm_epsilon: 1e-8,
        }
    }
}

impl GrpoLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "clip_epsilon must be > 0, got {}",
                self.clip_epsilon
            )));
        }
        if self.adv_norm_epsilon.is_nan() || self.adv_norm_epsilon < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "adv_norm_epsilon must be >= 0, got {}",
                self.adv_norm_epsilon
            )));
        }
        Ok(())
    }
}

/// Diagnostics over all tokens in the batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GrpoStats {
    pub tokens: usize,
    /// Tokens whose clipped branch was active (zero gradient).
    pub clipped: usize,
    /// Largest `|ln w_t|` where `w_t = π_old / π_vllm`.
    pub max_abs_log_is_weight: f64,
    pub mean_is_weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GrpoOutput {
    pub loss: f64,
    pub grad: Vec<f64>,
    /// Per group, per rollout.
    pub advantages: Vec<Vec<f64>>,
    pub stats: GrpoStats,
}

/// `(r_i - mean) / (population std + eps)`.
pub fn normalized_advantages(rewards: &[f64], eps: f64) -> Result<Vec<f64>> {
    if rewards.is_empty() {
        return Err(Error::InvalidArgument("advantages of an empty group".into()));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let denom = var.sqrt() + eps;
    if denom == 0.0 {
        // All rewards equal with eps = 0: every advantage is exactly zero.
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / denom).collect())
}

/// Negated importance-weighted clipped surrogate:
///
/// `J = mean_groups (1/G) Σ_i (1/|y_i|) Σ_t w_t · min(r_t A_i, clip(r_t, 1-ε, 1+ε) A_i)`
///
/// with `r_t = π/π_old` and `w_t = π_old/π_vllm`, where `π_vllm` is the
/// recorded behavior log-prob per token. Only `π` carries gradient. Empty
/// completions contribute nothing.
pub fn grpo_loss_and_grad<P, G>(policy: &P, old_policy: &P, groups: &[G], config: &GrpoLossConfig) -> Result<GrpoOutput>
where
    P: SoftmaxPolicy,
    G: Borrow<RolloutGroup>,
{
    config.validate()?;
    check_groups(groups)?;
    if old_policy.num_params() != policy.num_params() || old_policy.shape() != policy.shape() {
        return Err(Error::InvalidArgument("old policy has a different layout".into()));
    }
    let eps = config.clip_epsilon;
    let num_groups = groups.len() as f64;
    let mut grad = vec![0.0; policy.num_params()];
    let mut objective = 0.0;
    let mut stats = GrpoStats::default();
    let mut weight_sum = 0.0;
    let mut all_advantages = Vec::with_capacity(groups.len());

    for group in groups {
        let group = group.borrow();
        let prompt = group.prompt();
        let advantages = normalized_advantages(&group.rewards(), config.adv_norm_epsilon)?;
        let g = group.len() as f64;
        for (rollout, &adv) in group.rollouts().iter().zip(&advantages) {
            let tokens = rollout.completion.tokens();
            if tokens.is_empty() {
                continue;
            }
            let cur = token_logprobs(policy, &prompt, tokens)?;
            let old = token_logprobs(old_policy, &prompt, tokens)?;
            let norm = if config.length_normalize {
                tokens.len() as f64
            } else {
                1.0
            };
            let scale = 1.0 / (num_groups * g * norm);
            for t in 0..tokens.len() {
                let behavior = rollout.behavior_logprobs[t];
                for (which, lp) in [("old", old[t]), ("inference", behavior)] {
                    if lp == f64::NEG_INFINITY {
                        return Err(Error::ZeroProbability {
                            which,
                            prompt_id: rollout.prompt_id,
                            position: t,
                            token: tokens[t],
                        });
                    }
                }
                let log_w = old[t] - behavior;
                let w = log_w.exp();
                let ratio = (cur[t] - old[t]).exp();
                let clipped_ratio = ratio.clamp(1.0 - eps, 1.0 + eps);
                let unclipped = ratio * adv;
                let clipped = clipped_ratio * adv;
                objective += scale * w * unclipped.min(clipped);

                stats.tokens += 1;
                weight_sum += w;
                stats.max_abs_log_is_weight = stats.max_abs_log_is_weight.max(log_w.abs());
                let clip_active = (adv > 0.0 && ratio > 1.0 + eps) || (adv < 0.0 && ratio < 1.0 - eps);
                if clip_active {
                    stats.clipped += 1;
                } else if adv != 0.0 {
                    // d(w r A)/dθ = w A r ∇ln π; the sign flips for the loss.
                    accumulate_grad_token_logprob(
                        policy,
                        &prompt,
                        &tokens[..t],
                        tokens[t],
                        -scale * w * adv * ratio,
                        &mut grad,
                    )?;
                }
            }
        }
        all_advantages.push(advantages);
    }
    if stats.tokens > 0 {
        stats.mean_is_weight = weight_sum / stats.tokens as f64;
    }
    let loss = -objective;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("GRPO loss {loss}")));
    }
    Ok(GrpoOutput {
        loss,
        grad,
        advantages: all_advantages,
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqmodel::{sample_completion, PromptInstance, SeqShape, TabularPolicy};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn advantage_normalization_example() {
        let a = normalized_advantages(&[1.0, 0.0, 0.0, 0.0], 0.0).unwrap();
        let expect = [1.7321, -0.5774, -0.5774, -0.5774];
        for (x, e) in a.iter().zip(expect) {
            assert!((x - e).abs() < 1e-4);
        }
        assert_eq!(normalized_advantages(&[0.5; 3], 1e-8).unwrap(), vec![0.0; 3]);
        assert_eq!(normalized_advantages(&[0.5; 3], 0.0).unwrap(), vec![0.0; 3]);
    }

    fn batch(policy: &TabularPolicy, rewards: &[f64], rng: &mut ChaCha8Rng) -> RolloutGroup {
        let prompt = PromptInstance::new(0);
        RolloutGroup::new(
            rewards
                .iter()
                .map(|&r| sample_completion(policy, &prompt, rng).unwrap().into_rollout(0, r, 0))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn equal_rewards_give_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = TabularPolicy::random(SeqShape::new(3, 3), 1, 1.0, &mut rng).unwrap();
        let g = batch(&p, &[1.0; 4], &mut rng);
        let out = grpo_loss_and_grad(&p, &p, &[g], &GrpoLossConfig::default()).unwrap();
        assert!(out.grad.iter().all(|&x| x == 0.0));
        assert_eq!(out.loss, 0.0);
    }

    #[test]
    fn far_ratios_are_clipped() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let shape = SeqShape::new(2, 1);
        let old = TabularPolicy::uniform(shape, 1).unwrap();
        let g = batch(&old, &[1.0, 0.0, 1.0, 0.0], &mut rng);
        let cur = TabularPolicy::from_params(shape, 1, vec![5.0, -5.0]).unwrap();
        let out = grpo_loss_and_grad(&cur, &old, &[g], &GrpoLossConfig::default()).unwrap();
        assert_eq!(out.stats.tokens, 4);
        assert!(out.stats.clipped > 0);
    }

    #[test]
    fn zero_probability_behavior_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = TabularPolicy::uniform(SeqShape::new(2, 1), 1).unwrap();
        let g = batch(&p, &[1.0, 0.0], &mut rng);
        let mut rollouts = g.rollouts().to_vec();
        rollouts[0].behavior_logprobs[0] = f64::NEG_INFINITY;
        rollouts[0].behavior_logprob_total = f64::NEG_INFINITY;
        let bad = RolloutGroup::new(rollouts).unwrap();
        let err = grpo_loss_and_grad(&p, &p, &[bad], &GrpoLossConfig::default()).unwrap_err();
        assert!(matches!(
            err,
            Error::ZeroProbability {
                which: "inference",
                position: 0,
                ..
            }
        ));
    }
}

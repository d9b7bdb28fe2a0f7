use std::borrow::Borrow;

use serde::{Deserialize, Serialize};

use super::check_groups;
use crate::error::{Error, Result};
use crate::estimators::v_hat_star;
use crate::seqmodel::{accumulate_grad_sequence_logprob, sequence_logprob, RolloutGroup, SoftmaxPolicy};

/// `beta1` smooths the group value estimate; `beta2` scales the log-ratio in the regression.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OaplLossConfig {
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for OaplLossConfig {
    fn default() -> Self {
        OaplLossConfig {
            beta1: 1.0,
            beta2: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OaplOutput {
    pub loss: f64,
    pub grad: Vec<f64>,
    /// Value baseline used for each group.
    pub values: Vec<f64>,
}

/// Squared regression of the scaled log-ratio onto the estimated optimal advantage:
///
/// `loss = mean_i ( β₂ (ln π(y_i|x) - ln π_b(y_i|x)) - (r_i - V̂*(x)) )²`
///
/// where `ln π_b` is the recorded behavior log-prob total and `V̂*` is the
/// group estimate at `β₁`. `V̂*` depends only on rewards and carries no gradient.
/// The average runs over all rollouts in the batch.
pub fn oapl_loss_and_grad<P, G>(policy: &P, groups: &[G], config: &OaplLossConfig) -> Result<OaplOutput>
where
    P: SoftmaxPolicy,
    G: Borrow<RolloutGroup>,
{
    let values = groups
        .iter()
        .map(|g| v_hat_star(&g.borrow().rewards(), config.beta1))
        .collect::<Result<Vec<_>>>()?;
    oapl_loss_with_values(policy, groups, &values, config.beta2)
}

/// The same regression with caller-supplied per-group baselines (e.g. the exact `V*`).
pub fn oapl_loss_with_values<P, G>(policy: &P, groups: &[G], values: &[f64], beta2: f64) -> Result<OaplOutput>
where
    P: SoftmaxPolicy,
    G: Borrow<RolloutGroup>,
{
    if beta2.is_nan() || beta2 <= 0.0 {
        return Err(Error::InvalidArgument(format!("beta2 must be > 0, got {beta2}")));
    }
    if values.len() != groups.len() {
        return Err(Error::InvalidArgument(format!(
            "{} baselines for {} groups",
            values.len(),
            groups.len()
        )));
    }
    let count = check_groups(groups)? as f64;
    let mut grad = vec![0.0; policy.num_params()];
    let mut loss = 0.0;
    for (group, &value) in groups.iter().zip(values) {
        let group = group.borrow();
        let prompt = group.prompt();
        for rollout in group.rollouts() {
            let tokens = rollout.completion.tokens();
            let log_ratio = sequence_logprob(policy, &prompt, tokens)? - rollout.behavior_logprob_total;
            let residual = beta2 * log_ratio - (rollout.reward - value);
            loss += residual * residual;
            accumulate_grad_sequence_logprob(policy, &prompt, tokens, 2.0 * beta2 * residual / count, &mut grad)?;
        }
    }
    let loss = loss / count;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("OAPL loss {loss}")));
    }
    Ok(OaplOutput {
        loss,
        grad,
        values: values.to_vec(),
    })
}

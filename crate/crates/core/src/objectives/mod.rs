//! Training losses with analytic gradients, and the parameter optimizer.

mod grpo;
mod oapl;
mod optim;

use std::borrow::Borrow;

pub use grpo::{grpo_loss_and_grad, normalized_advantages, GrpoLossConfig, GrpoOutput, GrpoStats};
pub use oapl::{oapl_loss_and_grad, oapl_loss_with_values, OaplLossConfig, OaplOutput};
pub use optim::{apply_update, OptimizerPreset, OptimizerScheme, OptimizerState, UpdateStats};

use crate::error::{Error, Result};
use crate::seqmodel::RolloutGroup;

fn check_groups<G: Borrow<RolloutGroup>>(groups: &[G]) -> Result<usize> {
    if groups.is_empty() {
        return Err(Error::InvalidArgument("loss over an empty batch".into()));
    }
    let mut rollouts = 0;
    for g in groups {
        let g = g.borrow();
        g.validate()?;
        rollouts += g.len();
    }
    Ok(rollouts)
}

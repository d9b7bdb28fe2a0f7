use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seqmodel::math::l2_norm;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerScheme {
    Sgd,
    Adamw,
}

/// Named hyperparameter sets. `PaperMath` targets large models and is far too
/// slow for tabular policies; `DeskTabular` keeps the same moments and decay
/// with a larger step and looser clip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerPreset {
    PaperMath,
    DeskTabular,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub scheme: OptimizerScheme,
    pub learning_rate: f64,
    pub b1: f64,
    pub b2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global L2 norm cap; `None` disables clipping.
    pub grad_clip_norm: Option<f64>,
    #[serde(default)]
    pub step: u64,
    #[serde(default)]
    m: Vec<f64>,
    #[serde(default)]
    v: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    /// Norm before clipping.
    pub grad_norm: f64,
    /// Norm of the gradient handed to the update rule.
    pub applied_norm: f64,
}

impl OptimizerState {
    pub fn preset(preset: OptimizerPreset) -> Self {
        let (lr, clip) = match preset {
            OptimizerPreset::PaperMath => (1e-6, 1e-3),
            OptimizerPreset::DeskTabular => (1e-2, 1.0),
        };
        OptimizerState::adamw(lr, 0.9, 0.95, 1e-2, Some(clip))
    }

    pub fn adamw(learning_rate: f64, b1: f64, b2: f64, weight_decay: f64, grad_clip_norm: Option<f64>) -> Self {
        OptimizerState {
            scheme: OptimizerScheme::Adamw,
            learning_rate,
            b1,
            b2,
            eps: 1e-8,
            weight_decay,
            grad_clip_norm,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Plain gradient descent, no decay.
    pub fn sgd(learning_rate: f64, grad_clip_norm: Option<f64>) -> Self {
        OptimizerState {
            scheme: OptimizerScheme::Sgd,
            weight_decay: 0.0,
            ..OptimizerState::adamw(learning_rate, 0.9, 0.95, 0.0, grad_clip_norm)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| Err(Error::InvalidArgument(format!("optimizer {what} = {v}")));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", self.learning_rate);
        }
        for (name, b) in [("b1", self.b1), ("b2", self.b2)] {
            if !(b > 0.0 && b < 1.0) {
                return bad(name, b);
            }
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad("weight_decay", self.weight_decay);
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return bad("eps", self.eps);
        }
        if let Some(c) = self.grad_clip_norm {
            if c.is_nan() || c <= 0.0 {
                return bad("grad_clip_norm", c);
            }
        }
        Ok(())
    }

    /// Clears the moment estimates and step counter.
    pub fn reset(&mut self) {
        self.step = 0;
        self.m.clear();
        self.v.clear();
    }
}

/// Clips `grad` to the global norm cap, then takes one SGD or AdamW step.
/// AdamW decay is decoupled: `θ ← θ(1 - lr·wd) - lr·m̂/(√v̂ + eps)`.
pub fn apply_update(params: &mut [f64], grad: &[f64], state: &mut OptimizerState) -> Result<UpdateStats> {
    state.validate()?;
    if grad.len() != params.len() {
        return Err(Error::InvalidArgument(format!(
            "gradient has {} entries for {} parameters",
            grad.len(),
            params.len()
        )));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!(
            "gradient entry {i} is {} at optimizer step {}",
            grad[i], state.step
        )));
    }
    let grad_norm = l2_norm(grad);
    let scale = match state.grad_clip_norm {
        Some(c) if grad_norm > c => c / grad_norm,
        _ => 1.0,
    };
    let lr = state.learning_rate;
    state.step += 1;
    match state.scheme {
        OptimizerScheme::Sgd => {
            let decay = 1.0 - lr * state.weight_decay;
            for (p, g) in params.iter_mut().zip(grad) {
                *p = *p * decay - lr * scale * g;
            }
        }
        OptimizerScheme::Adamw => {
            if state.m.len() != params.len() {
                state.m = vec![0.0; params.len()];
                state.v = vec![0.0; params.len()];
            }
            let t = state.step as i32;
            let bc1 = 1.0 - state.b1.powi(t);
            let bc2 = 1.0 - state.b2.powi(t);
            let decay = 1.0 - lr * state.weight_decay;
            for i in 0..params.len() {
                let g = grad[i] * scale;
                state.m[i] = state.b1 * state.m[i] + (1.0 - state.b1) * g;
                state.v[i] = state.b2 * state.v[i] + (1.0 - state.b2) * g * g;
                let m_hat = state.m[i] / bc1;
                let v_hat = state.v[i] / bc2;
                params[i] = params[i] * decay - lr * m_hat / (v_hat.sqrt() + state.eps);
            }
        }
    }
    Ok(UpdateStats {
        grad_norm,
        applied_norm: grad_norm * scale,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_only_decays() {
        let mut st = OptimizerState::preset(OptimizerPreset::PaperMath);
        let mut p = vec![1.0, -2.0];
        apply_update(&mut p, &[0.0, 0.0], &mut st).unwrap();
        let f = 1.0 - 1e-6 * 1e-2;
        assert_eq!(p, vec![f, -2.0 * f]);
    }

    #[test]
    fn clipping_scales_to_cap() {
        let mut st = OptimizerState::sgd(1.0, Some(1e-3));
        let mut p = vec![0.0, 0.0];
        let s = apply_update(&mut p, &[6.0, 8.0], &mut st).unwrap();
        assert_eq!(s.grad_norm, 10.0);
        assert!((s.applied_norm - 1e-3).abs() < 1e-12);
        assert!((l2_norm(&p) - 1e-3).abs() < 1e-12);
    }

    #[test]
    fn first_adamw_step_matches_hand_computation() {
        let mut st = OptimizerState::adamw(0.1, 0.9, 0.95, 0.0, None);
        let mut p = vec![1.0, 1.0];
        apply_update(&mut p, &[0.5, -2.0], &mut st).unwrap();
        // m̂ = g, v̂ = g², so each step is lr·g/(|g| + eps).
        let expect = [1.0 - 0.1 * 0.5 / (0.5 + 1e-8), 1.0 + 0.1 * 2.0 / (2.0 + 1e-8)];
        for (a, b) in p.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        // Second step by the raw recurrence.
        apply_update(&mut p, &[1.0, 1.0], &mut st).unwrap();
        let m = 0.9 * 0.1 * 0.5 + 0.1 * 1.0;
        let v: f64 = 0.95 * 0.05 * 0.25 + 0.05 * 1.0;
        let step = 0.1 * (m / (1.0 - 0.81)) / ((v / (1.0 - 0.9025)).sqrt() + 1e-8);
        assert!((p[0] - (expect[0] - step)).abs() < 1e-14);
    }

    #[test]
    fn rejects_non_finite_and_shape_mismatch() {
        let mut st = OptimizerState::sgd(0.1, None);
        let mut p = vec![0.0; 2];
        assert!(matches!(
            apply_update(&mut p, &[f64::NAN, 0.0], &mut st),
            Err(Error::NonFinite(_))
        ));
        assert!(apply_update(&mut p, &[0.0], &mut st).is_err());
        let mut bad = OptimizerState::adamw(0.1, 1.0, 0.9, 0.0, None);
        assert!(apply_update(&mut p, &[0.0, 0.0], &mut bad).is_err());
    }
}

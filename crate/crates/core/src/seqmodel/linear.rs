use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{PromptInstance, SeqShape, SoftmaxPolicy, Token};
use crate::error::{Error, Result};

/// Deterministic feature maps from `(prompt, prefix)` to a dense vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Featurizer {
    /// bias, one-hot position, one-hot last token (or "none"), one-hot prompt.
    PositionLastToken,
    /// bias, one-hot position, normalized token counts, one-hot prompt.
    PositionTokenCounts,
}

impl Featurizer {
    pub fn id(&self) -> u64 {
        match self {
            Featurizer::PositionLastToken => 0,
            Featurizer::PositionTokenCounts => 1,
        }
    }

    pub fn from_id(id: u64) -> Option<Self> {
        match id {
            0 => Some(Featurizer::PositionLastToken),
            1 => Some(Featurizer::PositionTokenCounts),
            _ => None,
        }
    }

    pub fn dim(&self, shape: &SeqShape, num_prompts: usize) -> usize {
        match self {
            Featurizer::PositionLastToken => 1 + shape.horizon + shape.vocab + 1 + num_prompts,
            Featurizer::PositionTokenCounts => 1 + shape.horizon + shape.vocab + num_prompts,
        }
    }

    fn write(&self, shape: &SeqShape, prompt_id: usize, prefix: &[Token], out: &mut [f64]) {
        out.fill(0.0);
        out[0] = 1.0;
        out[1 + prefix.len()] = 1.0;
        let base = 1 + shape.horizon;
        let prompt_base = match self {
            Featurizer::PositionLastToken => {
                let slot = prefix.last().map_or(shape.vocab, |&t| t as usize);
                out[base + slot] = 1.0;
                base + shape.vocab + 1
            }
            Featurizer::PositionTokenCounts => {
                for &t in prefix {
                    out[base + t as usize] += 1.0 / shape.horizon as f64;
                }
                base + shape.vocab
            }
        };
        out[prompt_base + prompt_id] = 1.0;
    }
}

/// `logits = φ(prompt, prefix)ᵀ W` with `W` of shape `feature_dim × V` (row-major).
#[derive(Clone, Debug, PartialEq)]
pub struct LinearSoftmaxPolicy {
    shape: SeqShape,
    num_prompts: usize,
    featurizer: Featurizer,
    feature_dim: usize,
    weights: Vec<f64>,
}

impl LinearSoftmaxPolicy {
    pub fn zeros(shape: SeqShape, num_prompts: usize, featurizer: Featurizer) -> Result<Self> {
        let dim = featurizer.dim(&shape, num_prompts);
        Self::from_params(shape, num_prompts, featurizer, vec![0.0; dim * shape.vocab])
    }

    pub fn random<R: Rng + ?Sized>(
        shape: SeqShape,
        num_prompts: usize,
        featurizer: Featurizer,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut policy = Self::zeros(shape, num_prompts, featurizer)?;
        let normal =
            Normal::new(0.0, scale).map_err(|e| Error::InvalidArgument(format!("weight scale {scale}: {e}")))?;
        for w in policy.weights.iter_mut() {
            *w = normal.sample(rng);
        }
        Ok(policy)
    }

    pub fn from_params(shape: SeqShape, num_prompts: usize, featurizer: Featurizer, weights: Vec<f64>) -> Result<Self> {
        if shape.vocab < 2 || shape.horizon == 0 || num_prompts == 0 {
            return Err(Error::InvalidArgument(
                "linear policy needs V >= 2, H >= 1, prompts >= 1".into(),
            ));
        }
        let feature_dim = featurizer.dim(&shape, num_prompts);
        if weights.len() != feature_dim * shape.vocab {
            return Err(Error::InvalidArgument(format!(
                "linear policy needs {} weights, got {}",
                feature_dim * shape.vocab,
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("linear policy weight".into()));
        }
        Ok(LinearSoftmaxPolicy {
            shape,
            num_prompts,
            featurizer,
            feature_dim,
            weights,
        })
    }

    pub fn featurizer(&self) -> Featurizer {
        self.featurizer
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn features(&self, prompt: &PromptInstance, prefix: &[Token]) -> Result<Vec<f64>> {
        self.check_prompt(prompt)?;
        self.shape.check_prefix(prefix)?;
        let mut phi = vec![0.0; self.feature_dim];
        self.featurizer.write(&self.shape, prompt.prompt_id, prefix, &mut phi);
        Ok(phi)
    }
}

impl SoftmaxPolicy for LinearSoftmaxPolicy {
    fn shape(&self) -> SeqShape {
        self.shape
    }

    fn num_prompts(&self) -> usize {
        self.num_prompts
    }

    fn logits_into(&self, prompt: &PromptInstance, prefix: &[Token], out: &mut [f64]) -> Result<()> {
        let phi = self.features(prompt, prefix)?;
        let v = self.shape.vocab;
        out.fill(0.0);
        for (f, &x) in phi.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(&self.weights[f * v..(f + 1) * v]) {
                *o += x * w;
            }
        }
        Ok(())
    }

    fn params(&self) -> &[f64] {
        &self.weights
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    fn backprop_logits(
        &self,
        prompt: &PromptInstance,
        prefix: &[Token],
        dlogits: &[f64],
        grad: &mut [f64],
    ) -> Result<()> {
        let phi = self.features(prompt, prefix)?;
        let v = self.shape.vocab;
        for (f, &x) in phi.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (g, d) in grad[f * v..(f + 1) * v].iter_mut().zip(dlogits) {
                *g += x * d;
            }
        }
        Ok(())
    }
}

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{PromptInstance, SeqShape, SoftmaxPolicy, Token};
use crate::error::{Error, Result};

/// One logit vector per `(prompt, full prefix)`.
///
/// Prefix states are addressed by length-offset plus the base-`V` positional
/// code of the prefix (first token most significant), so the state id of a
/// prefix is the same integer an enumeration over `V^len` would assign it.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularPolicy {
    shape: SeqShape,
    num_prompts: usize,
    offsets: Vec<usize>,
    num_states: usize,
    logits: Vec<f64>,
}

impl TabularPolicy {
    /// All logits zero: the uniform policy.
    pub fn uniform(shape: SeqShape, num_prompts: usize) -> Result<Self> {
        let n = Self::param_count(&shape, num_prompts)?;
        Self::from_params(shape, num_prompts, vec![0.0; n])
    }

    /// Logits drawn i.i.d. from `N(0, scale²)`.
    pub fn random<R: Rng + ?Sized>(shape: SeqShape, num_prompts: usize, scale: f64, rng: &mut R) -> Result<Self> {
        let mut policy = Self::uniform(shape, num_prompts)?;
        if scale > 0.0 {
            let normal =
                Normal::new(0.0, scale).map_err(|e| Error::InvalidArgument(format!("logit scale {scale}: {e}")))?;
            for l in policy.logits.iter_mut() {
                *l = normal.sample(rng);
            }
        }
        Ok(policy)
    }

    pub fn from_params(shape: SeqShape, num_prompts: usize, logits: Vec<f64>) -> Result<Self> {
        let expected = Self::param_count(&shape, num_prompts)?;
        if logits.len() != expected {
            return Err(Error::InvalidArgument(format!(
                "tabular policy needs {expected} logits, got {}",
                logits.len()
            )));
        }
        if let Some(bad) = logits.iter().find(|l| !l.is_finite()) {
            return Err(Error::NonFinite(format!("tabular logit {bad}")));
        }
        let mut offsets = Vec::with_capacity(shape.horizon);
        let (mut acc, mut width) = (0usize, 1usize);
        for _ in 0..shape.horizon {
            offsets.push(acc);
            acc += width;
            width *= shape.vocab;
        }
        Ok(TabularPolicy {
            shape,
            num_prompts,
            offsets,
            num_states: acc,
            logits,
        })
    }

    pub fn param_count(shape: &SeqShape, num_prompts: usize) -> Result<usize> {
        if shape.vocab < 2 || shape.horizon == 0 || num_prompts == 0 {
            return Err(Error::InvalidArgument(format!(
                "tabular policy needs V >= 2, H >= 1, prompts >= 1 (got V={}, H={}, prompts={})",
                shape.vocab, shape.horizon, num_prompts
            )));
        }
        if shape.sequence_space() > 1u128 << 32 {
            return Err(Error::InvalidArgument(format!(
                "tabular state space V^H = {} is not addressable",
                shape.sequence_space()
            )));
        }
        Ok(shape.num_prefix_states() * shape.vocab * num_prompts)
    }

    /// State id of `prefix` within one prompt's table.
    pub fn state_index(&self, prefix: &[Token]) -> usize {
        let code = prefix
            .iter()
            .fold(0usize, |acc, &t| acc * self.shape.vocab + t as usize);
        self.offsets[prefix.len()] + code
    }

    fn slot(&self, prompt: &PromptInstance, prefix: &[Token]) -> Result<usize> {
        self.check_prompt(prompt)?;
        self.shape.check_prefix(prefix)?;
        let state = prompt.prompt_id * self.num_states + self.state_index(prefix);
        Ok(state * self.shape.vocab)
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    /// Mutable logit vector at `(prompt, prefix)`.
    pub fn logits_mut(&mut self, prompt: &PromptInstance, prefix: &[Token]) -> Result<&mut [f64]> {
        let at = self.slot(prompt, prefix)?;
        let v = self.shape.vocab;
        Ok(&mut self.logits[at..at + v])
    }
}

impl SoftmaxPolicy for TabularPolicy {
    fn shape(&self) -> SeqShape {
        self.shape
    }

    fn num_prompts(&self) -> usize {
        self.num_prompts
    }

    fn logits_into(&self, prompt: &PromptInstance, prefix: &[Token], out: &mut [f64]) -> Result<()> {
        let at = self.slot(prompt, prefix)?;
        out.copy_from_slice(&self.logits[at..at + self.shape.vocab]);
        Ok(())
    }

    fn params(&self) -> &[f64] {
        &self.logits
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    fn backprop_logits(
        &self,
        prompt: &PromptInstance,
        prefix: &[Token],
        dlogits: &[f64],
        grad: &mut [f64],
    ) -> Result<()> {
        let at = self.slot(prompt, prefix)?;
        for (g, d) in grad[at..at + self.shape.vocab].iter_mut().zip(dlogits) {
            *g += d;
        }
        Ok(())
    }
}

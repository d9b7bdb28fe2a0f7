//! Token sequences, rollouts, and autoregressive softmax policies.
//!
//! A policy maps `(prompt, prefix)` to a vector of next-token logits. Two
//! parameterizations are provided: [`TabularPolicy`], which owns one logit
//! vector per full prefix and therefore shares exact state identity with the
//! enumeration oracle, and [`LinearSoftmaxPolicy`], a feature-based variant
//! used to exercise the gradient code on shared parameters.

mod checkpoint;
mod linear;
pub mod math;
mod ops;
mod tabular;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use linear::{Featurizer, LinearSoftmaxPolicy};
pub use ops::{
    accumulate_grad_sequence_logprob, accumulate_grad_token_logprob, for_each_sequence, grad_sequence_logprob,
    next_token_probs, sample_completion, sequence_distribution, sequence_entropy, sequence_logprob, token_logprobs,
    EntropyEstimate, EntropyMode, SampledCompletion, SequenceDistribution,
};
pub use tabular::TabularPolicy;

pub type Token = u32;

/// Default cap on the number of complete sequences an exact routine may enumerate.
pub const ENUMERATION_CAP: u64 = 1 << 20;

/// Vocabulary size, horizon, and whether token `V-1` is a reserved end-of-sequence marker.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeqShape {
    pub vocab: usize,
    pub horizon: usize,
    pub eos: bool,
}

impl SeqShape {
    pub fn new(vocab: usize, horizon: usize) -> Self {
        SeqShape {
            vocab,
            horizon,
            eos: false,
        }
    }

    pub fn with_eos(mut self, eos: bool) -> Self {
        self.eos = eos;
        self
    }

    pub fn eos_token(&self) -> Option<Token> {
        self.eos.then(|| (self.vocab - 1) as Token)
    }

    /// `V^H`, the size of the fixed-horizon sequence space. Upper-bounds the EOS-mode space.
    pub fn sequence_space(&self) -> u128 {
        (self.vocab as u128).saturating_pow(self.horizon as u32)
    }

    /// Number of distinct prefixes of length `< H`.
    pub fn num_prefix_states(&self) -> usize {
        let mut total = 0usize;
        let mut width = 1usize;
        for _ in 0..self.horizon {
            total += width;
            width *= self.vocab;
        }
        total
    }

    pub fn check_enumerable(&self, cap: u64) -> Result<()> {
        let count = self.sequence_space();
        if count > cap as u128 {
            return Err(Error::EnumerationCap { count, cap });
        }
        Ok(())
    }

    fn check_tokens(&self, tokens: &[Token]) -> Result<()> {
        for &t in tokens {
            if t as usize >= self.vocab {
                return Err(Error::TokenOutOfRange {
                    token: t,
                    vocab: self.vocab,
                });
            }
        }
        Ok(())
    }

    /// A prefix must be shorter than `H` and must not contain EOS.
    pub fn check_prefix(&self, prefix: &[Token]) -> Result<()> {
        if prefix.len() >= self.horizon {
            return Err(Error::SequenceTooLong {
                len: prefix.len() + 1,
                horizon: self.horizon,
            });
        }
        self.check_tokens(prefix)?;
        if let Some(eos) = self.eos_token() {
            if prefix.contains(&eos) {
                return Err(Error::PrefixPastEos);
            }
        }
        Ok(())
    }

    /// A completion has length `<= H`; in EOS mode, EOS may only appear last.
    pub fn check_completion(&self, tokens: &[Token]) -> Result<()> {
        if tokens.len() > self.horizon {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                horizon: self.horizon,
            });
        }
        self.check_tokens(tokens)?;
        if let (Some(eos), Some((_, head))) = (self.eos_token(), tokens.split_last()) {
            if head.contains(&eos) {
                return Err(Error::PrefixPastEos);
            }
        }
        Ok(())
    }

    /// Whether generation stops after `prefix`.
    pub fn is_complete(&self, prefix: &[Token]) -> bool {
        prefix.len() >= self.horizon || matches!((self.eos_token(), prefix.last()), (Some(e), Some(&l)) if e == l)
    }
}

/// A validated sequence of token ids.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence(Vec<Token>);

impl TokenSequence {
    pub fn new(tokens: Vec<Token>, shape: &SeqShape) -> Result<Self> {
        shape.check_completion(&tokens)?;
        Ok(TokenSequence(tokens))
    }

    pub fn empty() -> Self {
        TokenSequence(Vec::new())
    }

    pub fn tokens(&self) -> &[Token] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<Token> {
        self.0
    }
}

/// Unchecked; shape limits are enforced wherever a policy scores the tokens.
impl From<Vec<Token>> for TokenSequence {
    fn from(tokens: Vec<Token>) -> Self {
        TokenSequence(tokens)
    }
}

impl AsRef<[Token]> for TokenSequence {
    fn as_ref(&self) -> &[Token] {
        &self.0
    }
}

/// A task input `x`. Tabular policies key on `prompt_id` only; tasks may read the context.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptInstance {
    pub prompt_id: usize,
    pub context: Vec<Token>,
}

impl PromptInstance {
    pub fn new(prompt_id: usize) -> Self {
        PromptInstance {
            prompt_id,
            context: Vec::new(),
        }
    }

    pub fn with_context(prompt_id: usize, context: Vec<Token>) -> Self {
        PromptInstance { prompt_id, context }
    }

    /// `count` prompts with ids `0..count`. With `context_len > 0`, the context
    /// holds the low base-`vocab` digits of the prompt id.
    pub fn make_set(count: usize, context_len: usize, vocab: usize) -> Vec<PromptInstance> {
        (0..count)
            .map(|id| {
                let mut rest = id;
                let context = (0..context_len)
                    .map(|_| {
                        let d = rest % vocab;
                        rest /= vocab;
                        d as Token
                    })
                    .collect();
                PromptInstance::with_context(id, context)
            })
            .collect()
    }
}

/// One sampled completion with its reward and the behavior policy's log-probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub prompt_id: usize,
    pub completion: TokenSequence,
    pub reward: f64,
    pub behavior_logprob_total: f64,
    pub behavior_logprobs: Vec<f64>,
    pub behavior_version: u64,
}

impl Rollout {
    pub fn validate(&self) -> Result<()> {
        if self.behavior_logprobs.len() != self.completion.len() {
            return Err(Error::MalformedGroup(format!(
                "rollout has {} behavior log-probs for {} tokens",
                self.behavior_logprobs.len(),
                self.completion.len()
            )));
        }
        let sum: f64 = self.behavior_logprobs.iter().sum();
        // A zero-probability token makes both sides -inf; that is consistent
        // here and reported by the losses that cannot handle it.
        let gap = (sum - self.behavior_logprob_total).abs();
        if !(sum == self.behavior_logprob_total || gap <= 1e-9) {
            return Err(Error::MalformedGroup(format!(
                "per-token behavior log-probs sum to {sum}, total says {}",
                self.behavior_logprob_total
            )));
        }
        if !self.reward.is_finite() {
            return Err(Error::NonFinite(format!("reward {}", self.reward)));
        }
        Ok(())
    }
}

/// `G` rollouts for one prompt from one behavior-policy version.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RolloutGroup {
    prompt_id: usize,
    behavior_version: u64,
    rollouts: Vec<Rollout>,
}

impl RolloutGroup {
    pub fn new(rollouts: Vec<Rollout>) -> Result<Self> {
        let (prompt_id, behavior_version) = check_group(&rollouts)?;
        Ok(RolloutGroup {
            prompt_id,
            behavior_version,
            rollouts,
        })
    }

    pub fn prompt_id(&self) -> usize {
        self.prompt_id
    }

    /// The prompt as policies address it (by id).
    pub fn prompt(&self) -> PromptInstance {
        PromptInstance::new(self.prompt_id)
    }

    pub fn behavior_version(&self) -> u64 {
        self.behavior_version
    }

    pub fn rollouts(&self) -> &[Rollout] {
        &self.rollouts
    }

    pub fn len(&self) -> usize {
        self.rollouts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rollouts.is_empty()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.rollouts.iter().map(|r| r.reward).collect()
    }

    /// Re-checks every invariant. Groups built through [`RolloutGroup::new`] always pass.
    pub fn validate(&self) -> Result<()> {
        check_group(&self.rollouts).map(|_| ())
    }
}

fn check_group(rollouts: &[Rollout]) -> Result<(usize, u64)> {
    let first = rollouts
        .first()
        .ok_or_else(|| Error::MalformedGroup("empty group".into()))?;
    let (prompt_id, behavior_version) = (first.prompt_id, first.behavior_version);
    for r in rollouts {
        r.validate()?;
        if r.prompt_id != prompt_id {
            return Err(Error::MalformedGroup(format!(
                "mixed prompts {} and {}",
                prompt_id, r.prompt_id
            )));
        }
        if r.behavior_version != behavior_version {
            return Err(Error::MalformedGroup(format!(
                "mixed behavior versions {} and {}",
                behavior_version, r.behavior_version
            )));
        }
    }
    Ok((prompt_id, behavior_version))
}

/// An autoregressive policy whose next-token distribution is a softmax over logits
/// that depend linearly on a flat parameter vector. Prompts are addressed by
/// `prompt_id`; the context tokens are for tasks.
pub trait SoftmaxPolicy: Clone + Send + Sync + std::fmt::Debug {
    fn shape(&self) -> SeqShape;

    fn num_prompts(&self) -> usize;

    /// Writes the next-token logits after `prefix` into `out` (length `V`).
    fn logits_into(&self, prompt: &PromptInstance, prefix: &[Token], out: &mut [f64]) -> Result<()>;

    fn params(&self) -> &[f64];

    fn params_mut(&mut self) -> &mut [f64];

    /// Chain rule through the logit map: `grad += (∂logits/∂θ)ᵀ · dlogits`.
    fn backprop_logits(
        &self,
        prompt: &PromptInstance,
        prefix: &[Token],
        dlogits: &[f64],
        grad: &mut [f64],
    ) -> Result<()>;

    fn num_params(&self) -> usize {
        self.params().len()
    }

    fn check_prompt(&self, prompt: &PromptInstance) -> Result<()> {
        if prompt.prompt_id >= self.num_prompts() {
            return Err(Error::PromptOutOfRange {
                prompt_id: prompt.prompt_id,
                num_prompts: self.num_prompts(),
            });
        }
        Ok(())
    }

    fn logits(&self, prompt: &PromptInstance, prefix: &[Token]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.shape().vocab];
        self.logits_into(prompt, prefix, &mut out)?;
        Ok(out)
    }
}

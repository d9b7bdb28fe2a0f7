use rand::Rng;
use serde::{Deserialize, Serialize};

use super::math::{log_softmax_at, log_sum_exp, softmax_into};
use super::{PromptInstance, Rollout, SoftmaxPolicy, Token, TokenSequence};
use crate::error::{Error, Result};

pub fn next_token_probs<P: SoftmaxPolicy>(policy: &P, prompt: &PromptInstance, prefix: &[Token]) -> Result<Vec<f64>> {
    let logits = policy.logits(prompt, prefix)?;
    let mut probs = vec![0.0; logits.len()];
    softmax_into(&logits, &mut probs);
    Ok(probs)
}

/// A completion together with the per-token log-probs of the policy that sampled it.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledCompletion {
    pub completion: TokenSequence,
    pub logprobs: Vec<f64>,
}

impl SampledCompletion {
    pub fn logprob_total(&self) -> f64 {
        self.logprobs.iter().sum()
    }

    pub fn into_rollout(self, prompt_id: usize, reward: f64, behavior_version: u64) -> Rollout {
        Rollout {
            prompt_id,
            behavior_logprob_total: self.logprob_total(),
            completion: self.completion,
            reward,
            behavior_logprobs: self.logprobs,
            behavior_version,
        }
    }
}

/// Samples one completion autoregressively. Stops at `H` tokens, or after EOS in EOS mode.
pub fn sample_completion<P: SoftmaxPolicy, R: Rng + ?Sized>(
    policy: &P,
    prompt: &PromptInstance,
    rng: &mut R,
) -> Result<SampledCompletion> {
    policy.check_prompt(prompt)?;
    let shape = policy.shape();
    let mut logits = vec![0.0; shape.vocab];
    let mut probs = vec![0.0; shape.vocab];
    let mut tokens: Vec<Token> = Vec::with_capacity(shape.horizon);
    let mut logprobs = Vec::with_capacity(shape.horizon);
    while !shape.is_complete(&tokens) {
        policy.logits_into(prompt, &tokens, &mut logits)?;
        softmax_into(&logits, &mut probs);
        let token = draw(&probs, rng.random::<f64>());
        logprobs.push(log_softmax_at(&logits, token));
        tokens.push(token as Token);
    }
    Ok(SampledCompletion {
        completion: TokenSequence(tokens),
        logprobs,
    })
}

/// Inverse-CDF draw; `u` in `[0, 1)`.
fn draw(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left u above the final cumulative sum
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// `ln π(y_t | x, y_<t)` for every position.
pub fn token_logprobs<P: SoftmaxPolicy>(policy: &P, prompt: &PromptInstance, completion: &[Token]) -> Result<Vec<f64>> {
    let shape = policy.shape();
    shape.check_completion(completion)?;
    policy.check_prompt(prompt)?;
    let mut logits = vec![0.0; shape.vocab];
    completion
        .iter()
        .enumerate()
        .map(|(t, &tok)| {
            policy.logits_into(prompt, &completion[..t], &mut logits)?;
            Ok(log_softmax_at(&logits, tok as usize))
        })
        .collect()
}

/// `ln π(y | x) = Σ_t ln π(y_t | x, y_<t)`. The empty completion has log-prob 0.
pub fn sequence_logprob<P: SoftmaxPolicy>(policy: &P, prompt: &PromptInstance, completion: &[Token]) -> Result<f64> {
    Ok(token_logprobs(policy, prompt, completion)?.iter().sum())
}

/// Adds `scale · ∂ ln π(token | prefix) / ∂θ` into `grad`.
pub fn accumulate_grad_token_logprob<P: SoftmaxPolicy>(
    policy: &P,
    prompt: &PromptInstance,
    prefix: &[Token],
    token: Token,
    scale: f64,
    grad: &mut [f64],
) -> Result<()> {
    let logits = policy.logits(prompt, prefix)?;
    let mut dlogits = vec![0.0; logits.len()];
    softmax_into(&logits, &mut dlogits);
    for d in dlogits.iter_mut() {
        *d *= -scale;
    }
    dlogits[token as usize] += scale;
    policy.backprop_logits(prompt, prefix, &dlogits, grad)
}

/// Adds `scale · ∂ ln π(completion | x) / ∂θ` into `grad`.
pub fn accumulate_grad_sequence_logprob<P: SoftmaxPolicy>(
    policy: &P,
    prompt: &PromptInstance,
    completion: &[Token],
    scale: f64,
    grad: &mut [f64],
) -> Result<()> {
    policy.shape().check_completion(completion)?;
    for (t, &tok) in completion.iter().enumerate() {
        accumulate_grad_token_logprob(policy, prompt, &completion[..t], tok, scale, grad)?;
    }
    Ok(())
}

/// Exact `∂ ln π(completion | x) / ∂θ`. For tabular policies each visited state
/// receives `onehot(y_t) - softmax(logits)`; unvisited states stay zero.
pub fn grad_sequence_logprob<P: SoftmaxPolicy>(
    policy: &P,
    prompt: &PromptInstance,
    completion: &[Token],
) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; policy.num_params()];
    accumulate_grad_sequence_logprob(policy, prompt, completion, 1.0, &mut grad)?;
    Ok(grad)
}

/// Visits every complete sequence with its log-probability, depth first in
/// lexicographic token order.
pub fn for_each_sequence<P, F>(policy: &P, prompt: &PromptInstance, cap: u64, mut f: F) -> Result<()>
where
    P: SoftmaxPolicy,
    F: FnMut(&[Token], f64),
{
    let shape = policy.shape();
    shape.check_enumerable(cap)?;
    policy.check_prompt(prompt)?;
    let mut prefix = Vec::with_capacity(shape.horizon);
    let mut scratch = vec![vec![0.0; shape.vocab]; shape.horizon];
    walk(policy, prompt, &mut prefix, 0.0, &mut scratch, &mut f)
}

fn walk<P, F>(
    policy: &P,
    prompt: &PromptInstance,
    prefix: &mut Vec<Token>,
    logp: f64,
    scratch: &mut [Vec<f64>],
    f: &mut F,
) -> Result<()>
where
    P: SoftmaxPolicy,
    F: FnMut(&[Token], f64),
{
    let shape = policy.shape();
    if shape.is_complete(prefix) {
        f(prefix, logp);
        return Ok(());
    }
    let (logits, rest) = scratch.split_first_mut().expect("scratch depth matches horizon");
    policy.logits_into(prompt, prefix, logits)?;
    let lse = log_sum_exp(logits);
    for (tok, &logit) in logits.iter().enumerate() {
        let step = logit - lse;
        prefix.push(tok as Token);
        walk(policy, prompt, prefix, logp + step, rest, f)?;
        prefix.pop();
    }
    Ok(())
}

/// The explicit distribution over complete sequences for one prompt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceDistribution {
    pub sequences: Vec<Vec<Token>>,
    pub log_probs: Vec<f64>,
}

impl SequenceDistribution {
    pub fn probs(&self) -> Vec<f64> {
        self.log_probs.iter().map(|l| l.exp()).collect()
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Total variation distance. Both distributions must list the same sequences in the same order.
    pub fn total_variation(&self, other: &SequenceDistribution) -> Result<f64> {
        if self.sequences != other.sequences {
            return Err(Error::InvalidArgument(
                "distributions are over different sequence lists".into(),
            ));
        }
        Ok(0.5
            * self
                .log_probs
                .iter()
                .zip(&other.log_probs)
                .map(|(a, b)| (a.exp() - b.exp()).abs())
                .sum::<f64>())
    }

    pub fn entropy(&self) -> f64 {
        -self
            .log_probs
            .iter()
            .filter(|l| l.is_finite())
            .map(|&l| l.exp() * l)
            .sum::<f64>()
    }
}

pub fn sequence_distribution<P: SoftmaxPolicy>(
    policy: &P,
    prompt: &PromptInstance,
    cap: u64,
) -> Result<SequenceDistribution> {
    let mut dist = SequenceDistribution {
        sequences: Vec::new(),
        log_probs: Vec::new(),
    };
    for_each_sequence(policy, prompt, cap, |seq, lp| {
        dist.sequences.push(seq.to_vec());
        dist.log_probs.push(lp);
    })?;
    Ok(dist)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum EntropyMode {
    /// Enumerate; fail if the sequence space exceeds `cap`.
    Exact { cap: u64 },
    /// Enumerate when within `cap`, otherwise average `-ln π(y)` over `samples` draws.
    ExactOrMonteCarlo { cap: u64, samples: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyEstimate {
    pub value: f64,
    /// Zero for exact values.
    pub std_error: f64,
    pub exact: bool,
}

/// Shannon entropy of the full sequence distribution `-Σ_y π(y|x) ln π(y|x)`.
pub fn sequence_entropy<P: SoftmaxPolicy, R: Rng + ?Sized>(
    policy: &P,
    prompt: &PromptInstance,
    mode: EntropyMode,
    rng: &mut R,
) -> Result<EntropyEstimate> {
    let cap = match mode {
        EntropyMode::Exact { cap } | EntropyMode::ExactOrMonteCarlo { cap, .. } => cap,
    };
    match (policy.shape().check_enumerable(cap), mode) {
        (Ok(()), _) => {
            let mut h = 0.0;
            for_each_sequence(policy, prompt, cap, |_, lp| {
                if lp.is_finite() {
                    h -= lp.exp() * lp;
                }
            })?;
            Ok(EntropyEstimate {
                value: h,
                std_error: 0.0,
                exact: true,
            })
        }
        (Err(e), EntropyMode::Exact { .. }) => Err(e),
        (Err(_), EntropyMode::ExactOrMonteCarlo { samples, .. }) => {
            if samples < 2 {
                return Err(Error::InvalidArgument(
                    "Monte Carlo entropy needs at least 2 samples".into(),
                ));
            }
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            for _ in 0..samples {
                let s = sample_completion(policy, prompt, rng)?;
                let h = -s.logprob_total();
                sum += h;
                sum_sq += h * h;
            }
            let n = samples as f64;
            let mean = sum / n;
            let var = ((sum_sq / n - mean * mean) * n / (n - 1.0)).max(0.0);
            Ok(EntropyEstimate {
                value: mean,
                std_error: (var / n).sqrt(),
                exact: false,
            })
        }
    }
}

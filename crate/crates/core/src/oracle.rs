//! Exact solutions of the KL-regularized objective
//! `max_π E_{y~π} r(x,y) - β KL(π || π_ref)` by full enumeration.
//!
//! The optimum is the exponential tilt of the reference policy,
//! `π*(y|x) ∝ π_ref(y|x) exp(r(x,y)/β)`, with value
//! `V*(x) = β ln E_{y~π_ref} exp(r(x,y)/β)`. Everything here is computed in
//! the log domain so small `β` does not overflow.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seqmodel::math::log_sum_exp;
use crate::seqmodel::{
    for_each_sequence, sequence_distribution, PromptInstance, SequenceDistribution, SoftmaxPolicy, Token,
};
use crate::tasks::TaskSpec;

fn check_beta(beta: f64) -> Result<()> {
    if beta.is_nan() || beta <= 0.0 {
        return Err(Error::InvalidArgument(format!("beta must be > 0, got {beta}")));
    }
    Ok(())
}

/// `V*(x) = β ln Σ_y π_ref(y|x) exp(r/β)`.
pub fn exact_v_star<P: SoftmaxPolicy>(
    task: &TaskSpec,
    reference: &P,
    prompt: &PromptInstance,
    beta: f64,
    cap: u64,
) -> Result<f64> {
    check_beta(beta)?;
    let mut terms = Vec::new();
    for_each_sequence(reference, prompt, cap, |seq, lp| {
        terms.push(lp + task.reward(prompt, seq) / beta);
    })?;
    Ok(beta * log_sum_exp(&terms))
}

/// `π*(y|x) = π_ref(y|x) exp((r - V*)/β)`, listed in enumeration order.
pub fn exact_pi_star<P: SoftmaxPolicy>(
    task: &TaskSpec,
    reference: &P,
    prompt: &PromptInstance,
    beta: f64,
    cap: u64,
) -> Result<SequenceDistribution> {
    check_beta(beta)?;
    let mut dist = sequence_distribution(reference, prompt, cap)?;
    for (seq, lp) in dist.sequences.iter().zip(dist.log_probs.iter_mut()) {
        *lp += task.reward(prompt, seq) / beta;
    }
    let norm = log_sum_exp(&dist.log_probs);
    for lp in dist.log_probs.iter_mut() {
        *lp -= norm;
    }
    Ok(dist)
}

/// `A*(x, y) = r(x, y) - V*(x)`.
pub fn optimal_advantage(task: &TaskSpec, prompt: &PromptInstance, completion: &[Token], v_star: f64) -> f64 {
    task.reward(prompt, completion) - v_star
}

/// `KL(p || q) = Σ_y p(y) ln(p(y)/q(y))`, exact. Zero-probability sequences under
/// `q` that `p` visits are reported, never clamped.
pub fn exact_kl<P: SoftmaxPolicy, Q: SoftmaxPolicy>(p: &P, q: &Q, prompt: &PromptInstance, cap: u64) -> Result<f64> {
    if p.shape() != q.shape() {
        return Err(Error::InvalidArgument("KL between policies of different shapes".into()));
    }
    let dp = sequence_distribution(p, prompt, cap)?;
    let dq = sequence_distribution(q, prompt, cap)?;
    kl_divergence(&dp, &dq)
}

/// KL between two explicit distributions listed over the same sequences.
pub fn kl_divergence(p: &SequenceDistribution, q: &SequenceDistribution) -> Result<f64> {
    if p.sequences != q.sequences {
        return Err(Error::InvalidArgument(
            "distributions are over different sequence lists".into(),
        ));
    }
    let mut kl = 0.0;
    for ((seq, &lp), &lq) in p.sequences.iter().zip(&p.log_probs).zip(&q.log_probs) {
        let pv = lp.exp();
        if pv == 0.0 {
            continue;
        }
        if lq == f64::NEG_INFINITY || lq.exp() == 0.0 {
            return Err(Error::SupportViolation {
                sequence: seq.clone(),
                p: pv,
            });
        }
        kl += pv * (lp - lq);
    }
    Ok(kl)
}

/// `E_{y~π} r - β KL(π || π_ref)` for explicit distributions.
pub fn kl_regularized_objective(
    task: &TaskSpec,
    prompt: &PromptInstance,
    policy: &SequenceDistribution,
    reference: &SequenceDistribution,
    beta: f64,
) -> Result<f64> {
    check_beta(beta)?;
    let reward: f64 = policy
        .sequences
        .iter()
        .zip(&policy.log_probs)
        .map(|(seq, lp)| lp.exp() * task.reward(prompt, seq))
        .sum();
    Ok(reward - beta * kl_divergence(policy, reference)?)
}

/// The KL-regularized optimum for a set of prompts against one reference policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlRegSolution {
    pub beta: f64,
    pub prompt_ids: Vec<usize>,
    pub v_star: Vec<f64>,
    pub pi_star: Vec<SequenceDistribution>,
    /// Snapshot version of the reference, when it came from the inference engine.
    pub reference_version: Option<u64>,
}

impl KlRegSolution {
    pub fn solve<P: SoftmaxPolicy>(
        task: &TaskSpec,
        reference: &P,
        prompts: &[PromptInstance],
        beta: f64,
        reference_version: Option<u64>,
        cap: u64,
    ) -> Result<Self> {
        let mut v_star = Vec::with_capacity(prompts.len());
        let mut pi_star = Vec::with_capacity(prompts.len());
        for prompt in prompts {
            v_star.push(exact_v_star(task, reference, prompt, beta, cap)?);
            pi_star.push(exact_pi_star(task, reference, prompt, beta, cap)?);
        }
        Ok(KlRegSolution {
            beta,
            prompt_ids: prompts.iter().map(|p| p.prompt_id).collect(),
            v_star,
            pi_star,
            reference_version,
        })
    }

    pub fn v_star_for(&self, prompt_id: usize) -> Option<f64> {
        self.prompt_ids
            .iter()
            .position(|&id| id == prompt_id)
            .map(|i| self.v_star[i])
    }
}

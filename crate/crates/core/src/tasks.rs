//! Synthetic verifiable-reward tasks. Rewards are deterministic and lie in `[0, 1]`.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seqmodel::{for_each_sequence, PromptInstance, SeqShape, SoftmaxPolicy, Token};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskSpec {
    /// 1 iff `target` occurs as a contiguous run inside the completion.
    SubsequenceMatch { target: Vec<Token> },
    /// 1 iff the sum of context and completion tokens is `residue` mod `modulus`.
    ModularSum { modulus: u32, residue: u32 },
    /// Exact-sequence lookup; absent sequences score 0. Entries are sorted by tokens.
    RewardTable { entries: Vec<(Vec<Token>, f64)> },
}

impl TaskSpec {
    pub fn subsequence_match(target: Vec<Token>) -> Result<Self> {
        let t = TaskSpec::SubsequenceMatch { target };
        t.validate()?;
        Ok(t)
    }

    pub fn modular_sum(modulus: u32, residue: u32) -> Result<Self> {
        let t = TaskSpec::ModularSum { modulus, residue };
        t.validate()?;
        Ok(t)
    }

    pub fn reward_table(mut entries: Vec<(Vec<Token>, f64)>) -> Result<Self> {
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        if entries.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::InvalidArgument("duplicate reward-table sequence".into()));
        }
        let t = TaskSpec::RewardTable { entries };
        t.validate()?;
        Ok(t)
    }

    /// `size` distinct fixed-horizon sequences drawn uniformly, each with reward 1.
    /// Under the uniform policy the solve rate is exactly `size / V^H`.
    pub fn random_table(shape: &SeqShape, size: usize, seed: u64) -> Result<Self> {
        let space = shape.sequence_space();
        if space > usize::MAX as u128 || size as u128 > space {
            return Err(Error::InvalidArgument(format!(
                "cannot pick {size} sequences from a space of {space}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = index::sample(&mut rng, space as usize, size)
            .into_iter()
            .map(|code| (decode(code, shape), 1.0))
            .collect();
        Self::reward_table(entries)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            TaskSpec::SubsequenceMatch { target } if target.is_empty() => {
                Err(Error::InvalidArgument("subsequence target must be non-empty".into()))
            }
            TaskSpec::ModularSum { modulus, residue } if *modulus == 0 || residue >= modulus => {
                Err(Error::InvalidArgument(format!(
                    "modular_sum needs 0 <= residue < modulus (got {residue} mod {modulus})"
                )))
            }
            TaskSpec::RewardTable { entries } => {
                for (seq, r) in entries {
                    if !(0.0..=1.0).contains(r) {
                        return Err(Error::InvalidArgument(format!("reward {r} for {seq:?} outside [0, 1]")));
                    }
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// `r(x, y)`.
    pub fn reward(&self, prompt: &PromptInstance, completion: &[Token]) -> f64 {
        let hit = match self {
            TaskSpec::SubsequenceMatch { target } => completion.windows(target.len()).any(|w| w == target.as_slice()),
            TaskSpec::ModularSum { modulus, residue } => {
                let m = *modulus as u64;
                let sum: u64 = prompt.context.iter().chain(completion).map(|&t| t as u64 % m).sum();
                sum % m == *residue as u64
            }
            TaskSpec::RewardTable { entries } => {
                return entries
                    .binary_search_by(|(seq, _)| seq.as_slice().cmp(completion))
                    .map_or(0.0, |i| entries[i].1)
            }
        };
        if hit {
            1.0
        } else {
            0.0
        }
    }

    /// Largest reward any completion can earn, by enumeration.
    pub fn max_reward(&self, shape: &SeqShape, prompt: &PromptInstance, cap: u64) -> Result<f64> {
        shape.check_enumerable(cap)?;
        let mut best = f64::NEG_INFINITY;
        let mut prefix = Vec::with_capacity(shape.horizon);
        visit_all(shape, &mut prefix, &mut |seq| {
            best = best.max(self.reward(prompt, seq));
        });
        Ok(best)
    }
}

fn visit_all(shape: &SeqShape, prefix: &mut Vec<Token>, f: &mut impl FnMut(&[Token])) {
    if shape.is_complete(prefix) {
        f(prefix);
        return;
    }
    for t in 0..shape.vocab as Token {
        prefix.push(t);
        visit_all(shape, prefix, f);
        prefix.pop();
    }
}

fn decode(mut code: usize, shape: &SeqShape) -> Vec<Token> {
    let mut out = vec![0; shape.horizon];
    for slot in out.iter_mut().rev() {
        *slot = (code % shape.vocab) as Token;
        code /= shape.vocab;
    }
    out
}

/// Exact `Σ_y π(y|x)·1[r(x,y) = 1]`.
pub fn solve_rate<P: SoftmaxPolicy>(task: &TaskSpec, policy: &P, prompt: &PromptInstance, cap: u64) -> Result<f64> {
    let mut total = 0.0;
    for_each_sequence(policy, prompt, cap, |seq, lp| {
        if task.reward(prompt, seq) == 1.0 {
            total += lp.exp();
        }
    })?;
    Ok(total)
}

/// Exact `E_{y~π} r(x, y)`.
pub fn expected_reward<P: SoftmaxPolicy>(
    task: &TaskSpec,
    policy: &P,
    prompt: &PromptInstance,
    cap: u64,
) -> Result<f64> {
    let mut total = 0.0;
    for_each_sequence(policy, prompt, cap, |seq, lp| {
        total += lp.exp() * task.reward(prompt, seq);
    })?;
    Ok(total)
}

//! The simulated inference engine: frozen, optionally perturbed copies of the
//! trainer that generate rollouts, and the single-version rollout buffer.

mod buffer;
mod dump;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seqmodel::{sample_completion, PromptInstance, RolloutGroup, SoftmaxPolicy};
use crate::tasks::TaskSpec;

pub use buffer::RolloutBuffer;
pub use dump::{read_rollouts, write_rollouts, RolloutRecord};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MismatchKind {
    #[default]
    None,
    /// Gaussian noise with stddev `scale` on every parameter.
    AdditiveLogitNoise,
    /// Parameters divided by `scale`.
    TemperatureSkew,
}

/// How the inference copy departs from the trainer. The perturbation is a pure
/// function of `(seed, version)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MismatchSpec {
    pub kind: MismatchKind,
    pub scale: f64,
    pub seed: u64,
}

impl MismatchSpec {
    pub fn none() -> Self {
        MismatchSpec::default()
    }

    pub fn additive(scale: f64, seed: u64) -> Self {
        MismatchSpec {
            kind: MismatchKind::AdditiveLogitNoise,
            scale,
            seed,
        }
    }

    pub fn temperature(multiplier: f64) -> Self {
        MismatchSpec {
            kind: MismatchKind::TemperatureSkew,
            scale: multiplier,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.kind {
            MismatchKind::None => true,
            MismatchKind::AdditiveLogitNoise => self.scale >= 0.0 && self.scale.is_finite(),
            MismatchKind::TemperatureSkew => self.scale > 0.0 && self.scale.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "mismatch scale {} invalid for {:?}",
                self.scale, self.kind
            )))
        }
    }

    fn apply(&self, params: &mut [f64], version: u64) -> Result<()> {
        match self.kind {
            MismatchKind::None => {}
            MismatchKind::AdditiveLogitNoise => {
                if self.scale > 0.0 {
                    let normal = Normal::new(0.0, self.scale).map_err(|e| Error::InvalidArgument(e.to_string()))?;
                    let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                    rng.set_stream(version);
                    for p in params.iter_mut() {
                        *p += normal.sample(&mut rng);
                    }
                }
            }
            MismatchKind::TemperatureSkew => {
                for p in params.iter_mut() {
                    *p /= self.scale;
                }
            }
        }
        Ok(())
    }
}

/// A frozen copy of the trainer as the inference engine sees it.
#[derive(Clone, Debug)]
pub struct PolicySnapshot<P> {
    policy: P,
    version: u64,
    mismatch: MismatchSpec,
}

impl<P: SoftmaxPolicy> PolicySnapshot<P> {
    pub fn policy(&self) -> &P {
        &self.policy
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn mismatch(&self) -> &MismatchSpec {
        &self.mismatch
    }
}

/// Copies the trainer and applies the mismatch perturbation for `version`.
pub fn make_snapshot<P: SoftmaxPolicy>(
    trainer: &P,
    version: u64,
    mismatch: &MismatchSpec,
) -> Result<PolicySnapshot<P>> {
    mismatch.validate()?;
    if let Some(i) = trainer.params().iter().position(|p| !p.is_finite()) {
        return Err(Error::NonFinite(format!(
            "trainer parameter {i} is {} at sync {version}",
            trainer.params()[i]
        )));
    }
    let mut policy = trainer.clone();
    mismatch.apply(policy.params_mut(), version)?;
    Ok(PolicySnapshot {
        policy,
        version,
        mismatch: *mismatch,
    })
}

/// Samples `g` completions for `prompt` from the snapshot. Behavior log-probs are
/// the snapshot's own values.
pub fn generate_group<P: SoftmaxPolicy, R: Rng + ?Sized>(
    snapshot: &PolicySnapshot<P>,
    task: &TaskSpec,
    prompt: &PromptInstance,
    g: usize,
    rng: &mut R,
) -> Result<RolloutGroup> {
    if g == 0 {
        return Err(Error::InvalidArgument("group size must be >= 1".into()));
    }
    let rollouts = (0..g)
        .map(|_| {
            let s = sample_completion(&snapshot.policy, prompt, rng)?;
            let reward = task.reward(prompt, s.completion.tokens());
            Ok(s.into_rollout(prompt.prompt_id, reward, snapshot.version))
        })
        .collect::<Result<Vec<_>>>()?;
    RolloutGroup::new(rollouts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::exact_kl;
    use crate::seqmodel::{sequence_logprob, SeqShape, TabularPolicy, ENUMERATION_CAP};

    fn p0() -> PromptInstance {
        PromptInstance::new(0)
    }

    #[test]
    fn none_and_unit_temperature_copy_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = TabularPolicy::random(SeqShape::new(3, 3), 2, 1.0, &mut rng).unwrap();
        let a = make_snapshot(&t, 0, &MismatchSpec::none()).unwrap();
        let b = make_snapshot(&t, 0, &MismatchSpec::temperature(1.0)).unwrap();
        assert_eq!(a.policy().params(), t.params());
        assert_eq!(b.policy().params(), t.params());
    }

    #[test]
    fn additive_noise_is_small_and_reproducible() {
        let t = TabularPolicy::uniform(SeqShape::new(4, 3), 1).unwrap();
        let spec = MismatchSpec::additive(0.05, 9);
        let a = make_snapshot(&t, 3, &spec).unwrap();
        let b = make_snapshot(&t, 3, &spec).unwrap();
        let c = make_snapshot(&t, 4, &spec).unwrap();
        assert_eq!(a.policy().params(), b.policy().params());
        assert_ne!(a.policy().params(), c.policy().params());
        let kl = exact_kl(a.policy(), &t, &p0(), ENUMERATION_CAP).unwrap();
        assert!(kl > 0.0 && kl < 0.1, "kl = {kl}");
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let t = TabularPolicy::uniform(SeqShape::new(2, 1), 1).unwrap();
        assert!(make_snapshot(&t, 0, &MismatchSpec::temperature(0.0)).is_err());
        assert!(make_snapshot(&t, 0, &MismatchSpec::additive(-1.0, 0)).is_err());
    }

    #[test]
    fn generated_groups_record_snapshot_logprobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = TabularPolicy::random(SeqShape::new(4, 3), 1, 1.0, &mut rng).unwrap();
        let snap = make_snapshot(&t, 7, &MismatchSpec::additive(0.1, 1)).unwrap();
        let task = TaskSpec::modular_sum(4, 0).unwrap();
        let g = generate_group(&snap, &task, &p0(), 8, &mut rng).unwrap();
        assert_eq!(g.len(), 8);
        assert_eq!(g.behavior_version(), 7);
        let mut differs = false;
        for r in g.rollouts() {
            let tokens = r.completion.tokens();
            let lp = sequence_logprob(snap.policy(), &p0(), tokens).unwrap();
            assert!((lp - r.behavior_logprob_total).abs() < 1e-12);
            assert_eq!(r.reward, task.reward(&p0(), tokens));
            differs |= (sequence_logprob(&t, &p0(), tokens).unwrap() - lp).abs() > 1e-9;
        }
        assert!(differs);
        assert!(generate_group(&snap, &task, &p0(), 0, &mut rng).is_err());
    }
}

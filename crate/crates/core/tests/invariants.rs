use oapl_core::engine::{generate_group, make_snapshot, read_rollouts, write_rollouts, MismatchSpec, RolloutBuffer};
use oapl_core::estimators::{pass_at_k, v_hat_star};
use oapl_core::objectives::{apply_update, oapl_loss_and_grad, OaplLossConfig, OptimizerState};
use oapl_core::oracle::{exact_kl, exact_pi_star, exact_v_star, kl_regularized_objective};
use oapl_core::seqmodel::{sequence_distribution, PromptInstance, SeqShape, TabularPolicy, ENUMERATION_CAP};
use oapl_core::tasks::TaskSpec;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_policy(seed: u64, prompts: usize) -> TabularPolicy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    TabularPolicy::random(SeqShape::new(3, 3), prompts, 1.0, &mut rng).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Smoothing interpolates monotonically between max and mean.
    #[test]
    fn v_hat_decreases_in_beta(rewards in prop::collection::vec(0.0f64..=1.0, 1..40), b in 0.01f64..10.0) {
        let lo = v_hat_star(&rewards, b).unwrap();
        let hi = v_hat_star(&rewards, 2.0 * b).unwrap();
        prop_assert!(hi <= lo + 1e-12);
    }

    #[test]
    fn pass_at_k_grows_with_correct_count(n in 1usize..40, k_frac in 0.0f64..1.0) {
        let k = 1 + ((n - 1) as f64 * k_frac) as usize;
        let mut prev = 0.0;
        for c in 0..=n {
            let p = pass_at_k(n, c, k).unwrap();
            prop_assert!((0.0..=1.0).contains(&p));
            prop_assert!(p >= prev);
            prev = p;
        }
    }

    /// π* beats every other policy on the KL-regularized objective.
    #[test]
    fn pi_star_maximizes_the_regularized_objective(seed in 0u64..1000, beta in 0.1f64..5.0) {
        let task = TaskSpec::modular_sum(3, 1).unwrap();
        let reference = small_policy(seed, 1);
        let other = small_policy(seed + 1, 1);
        let p = PromptInstance::new(0);
        let pi_star = exact_pi_star(&task, &reference, &p, beta, ENUMERATION_CAP).unwrap();
        let ref_dist = sequence_distribution(&reference, &p, ENUMERATION_CAP).unwrap();
        let other_dist = sequence_distribution(&other, &p, ENUMERATION_CAP).unwrap();
        let best = kl_regularized_objective(&task, &p, &pi_star, &ref_dist, beta).unwrap();
        let v_star = exact_v_star(&task, &reference, &p, beta, ENUMERATION_CAP).unwrap();
        prop_assert!((best - v_star).abs() < 1e-9, "objective at optimum {best} vs V* {v_star}");
        prop_assert!(kl_regularized_objective(&task, &p, &other_dist, &ref_dist, beta).unwrap() <= best + 1e-12);
    }

    #[test]
    fn oapl_loss_is_nonnegative(seed in 0u64..1000, beta2 in 1e-3f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let policy = small_policy(seed, 2);
        let behavior = small_policy(seed + 7, 2);
        let task = TaskSpec::modular_sum(3, 0).unwrap();
        let snap = make_snapshot(&behavior, 0, &MismatchSpec::none()).unwrap();
        let groups: Vec<_> = (0..2)
            .map(|k| generate_group(&snap, &task, &PromptInstance::new(k), 4, &mut rng).unwrap())
            .collect();
        let out = oapl_loss_and_grad(&policy, &groups, &OaplLossConfig { beta1: 1.0, beta2 }).unwrap();
        prop_assert!(out.loss >= 0.0);
        prop_assert!(out.grad.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn clipping_bounds_the_applied_norm(grad in prop::collection::vec(-100.0f64..100.0, 1..30), clip in 1e-4f64..10.0) {
        let mut params = vec![0.0; grad.len()];
        let mut opt = OptimizerState::sgd(1.0, Some(clip));
        let stats = apply_update(&mut params, &grad, &mut opt).unwrap();
        prop_assert!(stats.applied_norm <= clip * (1.0 + 1e-12));
        let moved = params.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!((moved - stats.applied_norm).abs() <= 1e-9 * (1.0 + moved));
    }

    /// Whatever the push/clear/sample order, a sample never mixes versions and
    /// always carries the buffer's current version.
    #[test]
    fn buffer_batches_are_version_pure(ops in prop::collection::vec(0u8..4, 1..80), cap in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let policy = small_policy(3, 1);
        let task = TaskSpec::modular_sum(3, 0).unwrap();
        let mut buffer = RolloutBuffer::new(cap, 0).unwrap();
        let mut snap = make_snapshot(&policy, 0, &MismatchSpec::none()).unwrap();
        for op in ops {
            match op {
                0 | 1 => {
                    let g = generate_group(&snap, &task, &PromptInstance::new(0), 2, &mut rng).unwrap();
                    buffer.push(g).unwrap();
                    prop_assert!(buffer.len() <= cap);
                }
                2 => {
                    buffer.clear();
                    snap = make_snapshot(&policy, buffer.version_tag(), &MismatchSpec::none()).unwrap();
                    prop_assert!(buffer.is_empty());
                }
                _ if !buffer.is_empty() => {
                    let batch = buffer.sample(3, &mut rng).unwrap();
                    prop_assert!(batch.iter().all(|g| g.behavior_version() == buffer.version_tag()));
                }
                _ => {}
            }
        }
    }

    #[test]
    fn rollout_dump_round_trips(seed in 0u64..500, groups in 1usize..5, g in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let policy = small_policy(seed, 3);
        let task = TaskSpec::subsequence_match(vec![1, 2]).unwrap();
        let snap = make_snapshot(&policy, seed % 4, &MismatchSpec::additive(0.1, seed)).unwrap();
        let written: Vec<_> = (0..groups)
            .map(|k| generate_group(&snap, &task, &PromptInstance::new(k % 3), g, &mut rng).unwrap())
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        write_rollouts(&path, &written).unwrap();
        prop_assert_eq!(read_rollouts(&path).unwrap(), written);
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_self(seed in 0u64..1000) {
        let p = small_policy(seed, 1);
        let q = small_policy(seed + 1, 1);
        let prompt = PromptInstance::new(0);
        prop_assert!(exact_kl(&p, &q, &prompt, ENUMERATION_CAP).unwrap() >= 0.0);
        prop_assert_eq!(exact_kl(&p, &p, &prompt, ENUMERATION_CAP).unwrap(), 0.0);
    }
}

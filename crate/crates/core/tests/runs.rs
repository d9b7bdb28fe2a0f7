use std::path::Path;

use oapl_core::config::{Algorithm, Mode, RunConfig};
use oapl_core::experiment::{
    self, compare, eval_checkpoint, gen_offline, load_checkpoint, preset, run_experiment, MetricsTable, RunSummary,
    CHECKPOINT_DIR, CONFIG_FILE, METRICS_FILE, SUMMARY_FILE,
};
use oapl_core::orchestrator::{self, STAGE2_FILE};
use oapl_core::seqmodel::{Checkpoint, LinearSoftmaxPolicy, TabularPolicy};
use oapl_core::Error;

fn small(algorithm: &str, dir: &Path) -> RunConfig {
    let mut cfg = RunConfig::parse(preset(&format!("benchmark_{algorithm}")).unwrap()).unwrap();
    cfg.train.iterations = 120;
    cfg.train.lag = 20;
    cfg.eval.every = 40;
    cfg.output.dir = dir.to_path_buf();
    cfg
}

#[test]
fn run_dir_has_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small("oapl", &tmp.path().join("a"));
    let (dir, summary) = run_experiment(&cfg).unwrap();

    for f in [
        METRICS_FILE,
        SUMMARY_FILE,
        CONFIG_FILE,
        "reward.svg",
        "entropy.svg",
        "kl.svg",
    ] {
        assert!(dir.join(f).is_file(), "missing {f}");
    }
    // Syncs at 0, 20, ..., 100, plus the final policy.
    let ckpts: Vec<_> = std::fs::read_dir(dir.join(CHECKPOINT_DIR)).unwrap().collect();
    assert_eq!(ckpts.len(), 7);

    let table = MetricsTable::read(&dir.join(METRICS_FILE)).unwrap();
    assert_eq!(table.columns, experiment::metric_columns(&cfg.eval.k_list));
    assert_eq!(table.rows.len(), 120);
    assert!(table.rows.iter().all(|r| r.len() == table.columns.len()));
    let iters: Vec<_> = table.column("iter").unwrap().into_iter().map(Option::unwrap).collect();
    assert!(iters.windows(2).all(|w| w[1] == w[0] + 1.0));
    let p1 = table.column("pass_at_1").unwrap();
    assert_eq!(p1.iter().filter(|v| v.is_some()).count(), 3);

    let on_disk = RunSummary::read(&dir.join(SUMMARY_FILE)).unwrap();
    assert_eq!(on_disk.algorithm, "oapl");
    assert_eq!(on_disk.iterations, 120);
    assert_eq!(on_disk.final_pass_at_k, summary.final_pass_at_k);
    assert!(on_disk.best_checkpoint.is_some());
    assert!(on_disk.importance_weights.is_none());
    assert!(on_disk.wall_time_secs >= 0.0);
}

#[test]
fn resolved_config_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small("grpo", &tmp.path().join("g"));
    let (dir, summary) = run_experiment(&cfg).unwrap();
    let mut expected = cfg.clone();
    expected.resolve();
    assert_eq!(RunConfig::parse(&summary.config).unwrap(), expected);
    assert_eq!(RunConfig::load(&dir.join(CONFIG_FILE)).unwrap(), expected);
    let stats = summary.importance_weights.unwrap();
    assert!(stats.tokens > 0);
    assert!(stats.mean_is_weight > 0.5 && stats.mean_is_weight < 2.0);
}

#[test]
fn compare_self_and_across_algorithms() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, _) = run_experiment(&small("oapl", &tmp.path().join("a"))).unwrap();
    let (b, _) = run_experiment(&small("grpo", &tmp.path().join("b"))).unwrap();

    let same = compare(&a, &a).unwrap();
    for m in &same.metrics {
        assert_eq!(m.final_delta().unwrap_or(0.0), 0.0, "{}", m.column);
        assert_eq!(m.best_delta().unwrap_or(0.0), 0.0, "{}", m.column);
    }
    assert_eq!(same.entropy_delta, Some(0.0));

    let cross = compare(&a, &b).unwrap();
    let entropy = cross.metrics.iter().find(|m| m.column == "entropy").unwrap();
    assert_eq!(
        cross.entropy_delta,
        Some(entropy.final_a.unwrap() - entropy.final_b.unwrap())
    );
    assert_eq!(cross.pass_at_k_deltas.len(), 3);
    let text = cross.to_string();
    assert!(text.contains("final entropy delta (A-B): "));
    assert!(text.contains("best pass_at_5 delta"));
}

#[test]
fn compare_reports_missing_column() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, _) = run_experiment(&small("oapl", &tmp.path().join("a"))).unwrap();
    let b = tmp.path().join("b");
    std::fs::create_dir_all(&b).unwrap();
    let text = std::fs::read_to_string(a.join(METRICS_FILE)).unwrap();
    let trimmed: String = text
        .lines()
        .map(|l| l.rsplit_once(',').unwrap().0.to_string() + "\n")
        .collect();
    std::fs::write(b.join(METRICS_FILE), trimmed).unwrap();
    match compare(&a, &b) {
        Err(Error::SchemaMismatch { column, path }) => {
            assert_eq!(column, "pass_at_10");
            assert_eq!(path, b.join(METRICS_FILE));
        }
        other => panic!("expected schema mismatch, got {other:?}"),
    }

    std::fs::write(b.join(METRICS_FILE), "iter,mean_reward,loss\n0,1,2\n").unwrap();
    match compare(&a, &b) {
        Err(Error::SchemaMismatch { column, .. }) => assert_eq!(column, "entropy"),
        other => panic!("expected schema mismatch, got {other:?}"),
    }
}

#[test]
fn eval_reads_back_a_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small("oapl", &tmp.path().join("a"));
    let (dir, summary) = run_experiment(&cfg).unwrap();
    let last = dir.join(CHECKPOINT_DIR).join(experiment::checkpoint_file(6));
    match load_checkpoint(&last).unwrap() {
        Checkpoint::Tabular(p) => assert_eq!(
            p.num_states() * 4 * 4,
            oapl_core::seqmodel::SoftmaxPolicy::num_params(&p)
        ),
        other => panic!("expected tabular, got {other:?}"),
    }
    // The final checkpoint is the final policy, evaluated on the same stream.
    assert_eq!(eval_checkpoint(&last, &cfg).unwrap(), summary.final_pass_at_k);
}

#[test]
fn linear_policy_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small("oapl", &tmp.path().join("lin"));
    cfg.model.policy = oapl_core::config::PolicyKind::Linear;
    cfg.optimizer.learning_rate = Some(0.05);
    let (dir, summary) = run_experiment(&cfg).unwrap();
    assert!(summary.final_entropy.is_finite());
    assert!(matches!(
        load_checkpoint(&dir.join(CHECKPOINT_DIR).join(experiment::checkpoint_file(0))).unwrap(),
        Checkpoint::Linear(_)
    ));
}

#[test]
fn two_stage_offline_uses_the_generated_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small("oapl", &tmp.path().join("off"));
    cfg.algorithm = Algorithm::Offline;
    cfg.model.prompts = 16;
    cfg.offline.dataset = Some(tmp.path().join("data").join("stage1.jsonl"));
    cfg.offline.stage1_epochs = 20;
    cfg.offline.stage2_prompts = 8;
    cfg.offline.stage2_epochs = 20;
    cfg.validate().unwrap();

    let (path, groups) = gen_offline(&cfg).unwrap();
    assert_eq!(path, tmp.path().join("data").join("stage1.jsonl"));
    assert_eq!(groups, 16);
    let before = std::fs::read(&path).unwrap();

    let init = TabularPolicy::uniform(cfg.shape(), cfg.model.prompts).unwrap();
    let art = orchestrator::run(&cfg, init).unwrap();
    assert_eq!(
        std::fs::read(&path).unwrap(),
        before,
        "stage-1 dataset is reused, not rewritten"
    );
    assert!(cfg.output_dir().join(STAGE2_FILE).is_file());
    let lag = art.effective_lag.unwrap();
    assert!(lag > 0);
    let versions: Vec<u64> = art.metrics.iter().map(|m| m.snapshot_version).collect();
    assert_eq!(versions.iter().filter(|&&v| v == 0).count(), lag);
    assert!(versions.iter().skip(lag).all(|&v| v == 1));
}

#[test]
fn concurrent_mode_keeps_the_lag_bound() {
    let mut cfg = small("oapl", Path::new("unused"));
    cfg.mode = Mode::Concurrent;
    cfg.concurrent.generators = 3;
    cfg.train.lag = 7;
    cfg.train.iterations = 600;
    let init = TabularPolicy::uniform(cfg.shape(), cfg.model.prompts).unwrap();
    let art = orchestrator::run(&cfg, init).unwrap();
    assert_eq!(art.metrics.len(), 600);
    for (t, versions) in art.consumed_versions.iter().enumerate() {
        assert!(
            versions.iter().all(|&v| v == (t / 7) as u64),
            "iteration {t}: {versions:?}"
        );
    }
    assert!(art.final_expected_reward > 0.5);
}

#[test]
fn linear_checkpoint_shape_mismatch_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small("oapl", &tmp.path().join("x"));
    let mut other = cfg.clone();
    other.model.prompts = 3;
    let p = LinearSoftmaxPolicy::zeros(other.shape(), 3, other.model.featurizer).unwrap();
    let path = tmp.path().join("p.bin");
    experiment::save_checkpoint(&path, p.into()).unwrap();
    assert!(eval_checkpoint(&path, &cfg).is_err());
}

#[test]
fn orchestrator_errors_abort_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small("oapl", &tmp.path().join("bad"));
    cfg.algorithm = Algorithm::Offline;
    cfg.task = oapl_core::config::TaskConfig::RewardTable {
        entries: vec![(vec![0, 0, 0, 0], 0.0)],
    };
    assert!(matches!(run_experiment(&cfg), Err(Error::EmptyDataset(_))));
}

use std::path::Path;
use std::process::{Command, Output};

fn oapl(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_oapl"))
        .args(args)
        .env("OAPL_OUTPUT_ROOT", root)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &str = r#"
algorithm = "oapl"
model.vocab = 3
model.horizon = 3
model.prompts = 2
task.kind = "modular_sum"
task.modulus = 3
task.residue = 0
train.iterations = 40
train.lag = 10
oapl.beta2 = 1.0
optimizer.preset = "desk_tabular"
eval.k_list = [1, 2]
eval.n = 4
output.dir = "small"
"#;

#[test]
fn empty_config_echoes_the_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("empty.toml");
    std::fs::write(&path, "").unwrap();
    let out = oapl(&["config", path.to_str().unwrap()], tmp.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    for line in [
        "train.group_size = 8",
        "train.lag = 50",
        "oapl.beta1 = 1.0",
        "oapl.beta2 = 0.001",
        "grpo.clip_epsilon = 0.2",
        "optimizer.learning_rate = 0.000001",
    ] {
        assert!(text.lines().any(|l| l == line), "missing `{line}` in\n{text}");
    }
    // The echo is itself a valid config that resolves to the same thing.
    std::fs::write(&path, &text).unwrap();
    let again = oapl(&["config", path.to_str().unwrap()], tmp.path());
    assert_eq!(stdout(&again), text);
}

#[test]
fn invalid_configs_fail_with_the_field_name() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.toml");
    for (text, needle) in [
        ("model.vocab = 10\nmodel.horizon = 8\n", "metrics.exact"),
        ("oapl.beta2 = 0.0\n", "oapl.beta2"),
        ("train.lagg = 3\n", "lagg"),
        ("algorithm = \"grpo\"\ntrain.group_size = 1\n", "train.group_size"),
    ] {
        std::fs::write(&path, text).unwrap();
        let out = oapl(&["run", path.to_str().unwrap()], tmp.path());
        assert!(!out.status.success(), "{text} was accepted");
        assert!(stderr(&out).contains(needle), "{text}: {}", stderr(&out));
    }
    let out = oapl(&["run", "/nonexistent/config.toml"], tmp.path());
    assert!(!out.status.success());
}

#[test]
fn run_compare_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("small.toml");
    std::fs::write(&cfg, SMALL).unwrap();
    let out = oapl(&["run", cfg.to_str().unwrap()], tmp.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let dir = tmp.path().join("small");
    assert!(stdout(&out).contains(&format!("run dir: {}", dir.display())));
    for f in ["metrics.csv", "summary.json", "config.toml", "reward.svg"] {
        assert!(dir.join(f).is_file(), "missing {f}");
    }

    let d = dir.to_str().unwrap();
    let out = oapl(&["compare", d, d, "--json"], tmp.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let report: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(report["entropy_delta"], 0.0);

    let ckpt = dir.join("checkpoints").join("ckpt_0004.bin");
    let out = oapl(&["eval", ckpt.to_str().unwrap(), cfg.to_str().unwrap()], tmp.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let report: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(report["k_values"], serde_json::json!([1, 2]));

    let out = oapl(&["compare", d, tmp.path().join("nope").to_str().unwrap()], tmp.path());
    assert!(!out.status.success());
}

#[test]
fn gen_offline_writes_a_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("off.toml");
    std::fs::write(&cfg, format!("{SMALL}offline.dataset = \"data.jsonl\"\n")).unwrap();
    let out = oapl(&["gen-offline", cfg.to_str().unwrap()], tmp.path());
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).starts_with("wrote 2 groups to "));
    let lines = std::fs::read_to_string(tmp.path().join("data.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 2 * 8);
}

#[test]
fn presets_are_listed_and_loadable() {
    let tmp = tempfile::tempdir().unwrap();
    let out = oapl(&["presets"], tmp.path());
    assert_eq!(stdout(&out), "benchmark_oapl\nbenchmark_grpo\n");
    let out = oapl(&["config", "benchmark_grpo"], tmp.path());
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("algorithm = \"grpo\""));
}

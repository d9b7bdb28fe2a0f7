//! Run configuration: TOML with dotted section keys (`oapl.beta2 = 1e-3` or an
//! `[oapl]` table), strict about unknown keys, validated with field names.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::engine::{MismatchKind, MismatchSpec};
use crate::error::{Error, Result};
use crate::objectives::{GrpoLossConfig, OaplLossConfig, OptimizerPreset, OptimizerScheme, OptimizerState};
use crate::seqmodel::{Featurizer, PromptInstance, SeqShape, TabularPolicy, Token, ENUMERATION_CAP};
use crate::tasks::TaskSpec;

/// Overrides the root that relative `output.dir` paths resolve against.
pub const OUTPUT_ROOT_ENV: &str = "OAPL_OUTPUT_ROOT";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    #[default]
    Oapl,
    Grpo,
    /// Two-stage offline OAPL: one sync per stage.
    Offline,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Serial,
    Concurrent,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    #[default]
    Tabular,
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    pub mode: Mode,
    pub model: ModelConfig,
    pub task: TaskConfig,
    pub train: TrainConfig,
    pub oapl: OaplLossConfig,
    pub grpo: GrpoConfig,
    pub optimizer: OptimizerConfig,
    pub mismatch: MismatchConfig,
    pub seeds: SeedConfig,
    pub eval: EvalConfig,
    pub metrics: MetricsConfig,
    pub offline: OfflineConfig,
    pub concurrent: ConcurrentConfig,
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            algorithm: Algorithm::Oapl,
            mode: Mode::Serial,
            model: ModelConfig::default(),
            task: TaskConfig::default(),
            train: TrainConfig::default(),
            oapl: OaplLossConfig::default(),
            grpo: GrpoConfig::default(),
            optimizer: OptimizerConfig::default(),
            mismatch: MismatchConfig::default(),
            seeds: SeedConfig::default(),
            eval: EvalConfig::default(),
            metrics: MetricsConfig::default(),
            offline: OfflineConfig::default(),
            concurrent: ConcurrentConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab: usize,
    pub horizon: usize,
    pub prompts: usize,
    /// Reserve token `vocab - 1` as end-of-sequence.
    pub eos: bool,
    /// Context tokens per prompt (read by tasks such as `modular_sum`).
    pub context_len: usize,
    pub policy: PolicyKind,
    pub featurizer: Featurizer,
    /// Stddev of the initial Gaussian logits; 0 starts uniform.
    pub init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab: 4,
            horizon: 4,
            prompts: 4,
            eos: false,
            context_len: 0,
            policy: PolicyKind::Tabular,
            featurizer: Featurizer::PositionTokenCounts,
            init_scale: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn shape(&self) -> SeqShape {
        SeqShape::new(self.vocab, self.horizon).with_eos(self.eos)
    }

    pub fn prompt_set(&self) -> Vec<PromptInstance> {
        PromptInstance::make_set(self.prompts, self.context_len, self.vocab)
    }
}

/// Task selection. `random_table` draws `size` rewarded sequences with `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskConfig {
    SubsequenceMatch { target: Vec<Token> },
    ModularSum { modulus: u32, residue: u32 },
    RandomTable { size: usize, seed: u64 },
    RewardTable { entries: Vec<(Vec<Token>, f64)> },
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig::RandomTable { size: 16, seed: 0 }
    }
}

impl TaskConfig {
    pub fn build(&self, shape: &SeqShape) -> Result<TaskSpec> {
        match self {
            TaskConfig::SubsequenceMatch { target } => TaskSpec::subsequence_match(target.clone()),
            TaskConfig::ModularSum { modulus, residue } => TaskSpec::modular_sum(*modulus, *residue),
            TaskConfig::RandomTable { size, seed } => TaskSpec::random_table(shape, *size, *seed),
            TaskConfig::RewardTable { entries } => TaskSpec::reward_table(entries.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Completions per prompt (G).
    pub group_size: usize,
    /// Optimizer steps between inference syncs (L).
    pub lag: usize,
    /// Total optimizer steps (T).
    pub iterations: usize,
    /// Groups per optimizer step.
    pub batch_size: usize,
    /// Buffer batches averaged into one optimizer step.
    pub accumulation_steps: usize,
    /// Buffer capacity in training batches.
    pub buffer_batches: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            group_size: 8,
            lag: 50,
            iterations: 500,
            batch_size: 4,
            accumulation_steps: 1,
            buffer_batches: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoConfig {
    pub clip_epsilon: f64,
    pub length_normalize: bool,
    pub adv_norm_epsilon: f64,
    /// How many optimizer steps the inference copy may trail the trainer (0 or 1).
    pub max_async: usize,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        let l = GrpoLossConfig::default();
        GrpoConfig {
            clip_epsilon: l.clip_epsilon,
            length_normalize: l.length_normalize,
            adv_norm_epsilon: l.adv_norm_epsilon,
            max_async: 1,
        }
    }
}

impl GrpoConfig {
    pub fn loss(&self) -> GrpoLossConfig {
        GrpoLossConfig {
            clip_epsilon: self.clip_epsilon,
            length_normalize: self.length_normalize,
            adv_norm_epsilon: self.adv_norm_epsilon,
        }
    }
}

/// A named preset plus optional per-field overrides. Resolution fills every
/// override from the preset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub preset: OptimizerPreset,
    pub scheme: Option<OptimizerScheme>,
    pub learning_rate: Option<f64>,
    pub b1: Option<f64>,
    pub b2: Option<f64>,
    pub weight_decay: Option<f64>,
    /// 0 disables clipping.
    pub grad_clip_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            preset: OptimizerPreset::PaperMath,
            scheme: None,
            learning_rate: None,
            b1: None,
            b2: None,
            weight_decay: None,
            grad_clip_norm: None,
        }
    }
}

impl OptimizerConfig {
    pub fn build(&self) -> OptimizerState {
        let mut st = OptimizerState::preset(self.preset);
        if let Some(s) = self.scheme {
            st.scheme = s;
        }
        if let Some(v) = self.learning_rate {
            st.learning_rate = v;
        }
        if let Some(v) = self.b1 {
            st.b1 = v;
        }
        if let Some(v) = self.b2 {
            st.b2 = v;
        }
        if let Some(v) = self.weight_decay {
            st.weight_decay = v;
        }
        if let Some(v) = self.grad_clip_norm {
            st.grad_clip_norm = (v > 0.0).then_some(v);
        }
        st
    }

    fn resolve(&mut self) {
        let st = self.build();
        *self = OptimizerConfig {
            preset: self.preset,
            scheme: Some(st.scheme),
            learning_rate: Some(st.learning_rate),
            b1: Some(st.b1),
            b2: Some(st.b2),
            weight_decay: Some(st.weight_decay),
            grad_clip_norm: Some(st.grad_clip_norm.unwrap_or(0.0)),
        };
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MismatchConfig {
    pub kind: MismatchKind,
    pub scale: f64,
    /// Defaults to a value derived from the master seed.
    pub seed: Option<u64>,
}

impl MismatchConfig {
    pub fn spec(&self, master: u64) -> MismatchSpec {
        MismatchSpec {
            kind: self.kind,
            scale: self.scale,
            seed: self.seed.unwrap_or(master ^ 0x6d69_736d_6174_6368),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedConfig {
    pub master: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Samples per prompt for Pass@k.
    pub n: usize,
    pub k_list: Vec<usize>,
    /// Evaluate every this many iterations; 0 only evaluates the final policy.
    pub every: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n: 10,
            k_list: vec![1, 5, 10],
            every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    /// Exact entropy and KL by enumeration; otherwise Monte Carlo.
    pub exact: bool,
    pub mc_samples: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            exact: true,
            mc_samples: 2048,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OfflineConfig {
    /// Existing stage-1 rollout file; generated when absent.
    pub dataset: Option<PathBuf>,
    pub stage1_epochs: usize,
    /// Prompts regenerated for stage 2; 0 means all.
    pub stage2_prompts: usize,
    pub stage2_epochs: usize,
}

impl Default for OfflineConfig {
    fn default() -> Self {
        OfflineConfig {
            dataset: None,
            stage1_epochs: 1,
            stage2_prompts: 0,
            stage2_epochs: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConcurrentConfig {
    pub generators: usize,
}

impl Default for ConcurrentConfig {
    fn default() -> Self {
        ConcurrentConfig { generators: 2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub checkpoints: bool,
    pub plots: bool,
    /// Log progress every this many iterations; 0 disables.
    pub log_every: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("runs/default"),
            checkpoints: true,
            plots: true,
            log_every: 100,
        }
    }
}

impl RunConfig {
    /// Parses, applies defaults, resolves presets, and validates.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))?;
        cfg.resolve();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Fills optimizer overrides from the preset and pins the mismatch seed.
    pub fn resolve(&mut self) {
        self.optimizer.resolve();
        self.mismatch.seed = Some(self.mismatch.spec(self.seeds.master).seed);
    }

    pub fn shape(&self) -> SeqShape {
        self.model.shape()
    }

    pub fn task_spec(&self) -> Result<TaskSpec> {
        self.task.build(&self.shape())
    }

    pub fn mismatch_spec(&self) -> MismatchSpec {
        self.mismatch.spec(self.seeds.master)
    }

    pub fn buffer_capacity(&self) -> usize {
        self.train.buffer_batches * self.train.batch_size * self.train.accumulation_steps
    }

    /// `output.dir`, placed under `$OAPL_OUTPUT_ROOT` when it is set and the dir is relative.
    pub fn output_dir(&self) -> PathBuf {
        self.under_output_root(&self.output.dir)
    }

    /// `path` placed under `$OAPL_OUTPUT_ROOT` when it is set and `path` is relative.
    pub fn under_output_root(&self, path: &Path) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if path.is_relative() => Path::new(&root).join(path),
            _ => path.to_path_buf(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.vocab < 2 {
            return Err(Error::config("model.vocab", "must be at least 2"));
        }
        if m.horizon < 1 {
            return Err(Error::config("model.horizon", "must be at least 1"));
        }
        if m.prompts < 1 {
            return Err(Error::config("model.prompts", "must be at least 1"));
        }
        if m.eos && m.vocab < 3 {
            return Err(Error::config("model.eos", "needs vocab >= 3"));
        }
        if !(m.init_scale >= 0.0 && m.init_scale.is_finite()) {
            return Err(Error::config("model.init_scale", "must be finite and >= 0"));
        }
        let shape = self.shape();
        if self.metrics.exact {
            shape.check_enumerable(ENUMERATION_CAP).map_err(|_| {
                Error::config(
                    "metrics.exact",
                    format!(
                        "vocab^horizon = {} exceeds the enumeration cap {ENUMERATION_CAP}",
                        shape.sequence_space()
                    ),
                )
            })?;
        } else if self.metrics.mc_samples == 0 {
            return Err(Error::config(
                "metrics.mc_samples",
                "must be >= 1 without exact metrics",
            ));
        }
        if m.policy == PolicyKind::Tabular {
            TabularPolicy::param_count(&shape, m.prompts)
                .map_err(|e| Error::config("model", format!("tabular policy too large: {e}")))?;
        }
        self.validate_task(&shape)?;

        let t = &self.train;
        let min_group = if self.algorithm == Algorithm::Grpo { 2 } else { 1 };
        if t.group_size < min_group {
            return Err(Error::config(
                "train.group_size",
                format!("must be at least {min_group} for {:?}", self.algorithm),
            ));
        }
        for (field, v) in [
            ("train.lag", t.lag),
            ("train.iterations", t.iterations),
            ("train.batch_size", t.batch_size),
            ("train.accumulation_steps", t.accumulation_steps),
            ("train.buffer_batches", t.buffer_batches),
            ("concurrent.generators", self.concurrent.generators),
            ("offline.stage1_epochs", self.offline.stage1_epochs),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if self.offline.stage2_prompts > m.prompts {
            return Err(Error::config("offline.stage2_prompts", "exceeds model.prompts"));
        }
        for (field, b) in [("oapl.beta1", self.oapl.beta1), ("oapl.beta2", self.oapl.beta2)] {
            if !(b > 0.0 && b.is_finite()) {
                return Err(Error::config(field, format!("must be finite and > 0, got {b}")));
            }
        }
        self.grpo
            .loss()
            .validate()
            .map_err(|e| Error::config("grpo", e.to_string()))?;
        if self.grpo.max_async > 1 {
            return Err(Error::config("grpo.max_async", "only 0 or 1 is supported"));
        }
        self.optimizer
            .build()
            .validate()
            .map_err(|e| Error::config("optimizer", e.to_string()))?;
        self.mismatch_spec()
            .validate()
            .map_err(|e| Error::config("mismatch.scale", e.to_string()))?;
        if self.mismatch.kind == MismatchKind::None && self.mismatch.scale != 0.0 {
            return Err(Error::config("mismatch.scale", "set without a mismatch kind"));
        }
        if self.eval.n == 0 {
            return Err(Error::config("eval.n", "must be at least 1"));
        }
        for &k in &self.eval.k_list {
            if k == 0 || k > self.eval.n {
                return Err(Error::config(
                    "eval.k_list",
                    format!("k = {k} must be in 1..={}", self.eval.n),
                ));
            }
        }
        if self.mode == Mode::Concurrent && self.algorithm != Algorithm::Oapl {
            return Err(Error::config("mode", "concurrent mode runs OAPL only"));
        }
        Ok(())
    }

    fn validate_task(&self, shape: &SeqShape) -> Result<()> {
        let vocab = shape.vocab as Token;
        match &self.task {
            TaskConfig::SubsequenceMatch { target } => {
                if target.iter().any(|&t| t >= vocab) {
                    return Err(Error::config("task.target", "token outside the vocabulary"));
                }
            }
            TaskConfig::RewardTable { entries } => {
                for (seq, _) in entries {
                    shape
                        .check_completion(seq)
                        .map_err(|e| Error::config("task.entries", e.to_string()))?;
                    if !shape.is_complete(seq) {
                        return Err(Error::config(
                            "task.entries",
                            format!("{seq:?} can never be generated (incomplete sequence)"),
                        ));
                    }
                }
            }
            TaskConfig::RandomTable { size, .. } => {
                if shape.eos {
                    return Err(Error::config("task.kind", "random_table needs a fixed horizon"));
                }
                if *size == 0 || *size as u128 > shape.sequence_space() {
                    return Err(Error::config(
                        "task.size",
                        format!("must be in 1..={}", shape.sequence_space()),
                    ));
                }
            }
            TaskConfig::ModularSum { .. } => {}
        }
        self.task
            .build(shape)
            .map(|_| ())
            .map_err(|e| Error::config("task", e.to_string()))
    }

    /// The resolved config as flat `section.key = value` lines.
    pub fn to_flat_toml(&self) -> Result<String> {
        let value = toml::Value::try_from(self).map_err(|e| Error::ConfigParse(e.to_string()))?;
        let mut lines = Vec::new();
        flatten("", &value, &mut lines);
        let mut out = lines.join("\n");
        out.push('\n');
        Ok(out)
    }
}

fn flatten(prefix: &str, value: &toml::Value, out: &mut Vec<String>) {
    match value {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        v => out.push(format!("{prefix} = {v}")),
    }
}

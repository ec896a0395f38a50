//! Experiment configuration: one JSON document, unknown keys rejected.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use pnpslab_core::datagen::{TaskId, TaskSpec, TokenId};
use pnpslab_core::error::Error;
use pnpslab_core::neuralnet::{Encoder, ModelConfig};
use pnpslab_core::repranalysis::{InlpConfig, ProbeConfig, DEFAULT_SCHEDULE};
use pnpslab_core::training::{TrainConfig, TrainMethod};
use serde::{Deserialize, Serialize};

use crate::error::{RunError, RunResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    PnpsReport,
    BiasSweep,
    InlpSweep,
    CrossGroup,
    MethodTable,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::PnpsReport => "pnps_report",
            ExperimentKind::BiasSweep => "bias_sweep",
            ExperimentKind::InlpSweep => "inlp_sweep",
            ExperimentKind::CrossGroup => "cross_group",
            ExperimentKind::MethodTable => "method_table",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentKind {
    type Err = RunError;
    fn from_str(s: &str) -> RunResult<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| RunError::Config(format!("unknown experiment `{s}`")))
    }
}

/// Generative-process fields shared by every task in an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskDefaults {
    pub vocab_size: u32,
    pub seq_len: usize,
    pub reserved_token: TokenId,
    pub identical_prob: f64,
    /// Token used by marker-injection experiments.
    pub marker_token: TokenId,
}

impl Default for TaskDefaults {
    fn default() -> Self {
        Self {
            vocab_size: 1000,
            seq_len: 10,
            reserved_token: 2,
            identical_prob: 0.3,
            marker_token: 3,
        }
    }
}

impl TaskDefaults {
    pub fn spec(&self, task: TaskId, strength: f64, seed: u64) -> TaskSpec {
        TaskSpec {
            task_id: task,
            vocab_size: self.vocab_size,
            seq_len: self.seq_len,
            reserved_token: self.reserved_token,
            identical_prob: self.identical_prob,
            bias_strength: strength,
            seed,
            marker_token: None,
        }
    }

    pub fn spec_with_marker(&self, task: TaskId, strength: f64, seed: u64) -> TaskSpec {
        self.spec(task, strength, seed).with_marker(self.marker_token)
    }
}

/// Network shape; vocabulary, class count and seed come from the task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelDefaults {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub mlp_hidden: usize,
    pub init_scale: f64,
    pub encoder: Encoder,
}

impl Default for ModelDefaults {
    fn default() -> Self {
        let m = ModelConfig::new(1, 1);
        Self {
            embed_dim: m.embed_dim,
            hidden_dim: m.hidden_dim,
            mlp_hidden: m.mlp_hidden,
            init_scale: m.init_scale,
            encoder: m.encoder,
        }
    }
}

impl ModelDefaults {
    pub fn config(&self, spec: &TaskSpec, seed: u64) -> ModelConfig {
        ModelConfig {
            vocab_size: spec.vocab_size as usize,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            mlp_hidden: self.mlp_hidden,
            n_classes: spec.n_classes(),
            init_scale: self.init_scale,
            seed,
            encoder: self.encoder,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSizes {
    pub n_train: usize,
    pub n_dev: usize,
    /// Examples used to fit probes and online codes.
    pub n_probe: usize,
    /// Held-out examples for INLP evaluation.
    pub n_eval: usize,
}

impl Default for DataSizes {
    fn default() -> Self {
        Self {
            n_train: 20000,
            n_dev: 2000,
            n_probe: 4000,
            n_eval: 2000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PnpsSection {
    pub strength: f64,
    pub mc_samples: usize,
    pub threshold: f64,
    pub include_marker: bool,
}

impl Default for PnpsSection {
    fn default() -> Self {
        Self {
            strength: 0.9,
            mc_samples: 10000,
            threshold: 0.5,
            include_marker: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrossGroupSection {
    pub tasks: Vec<TaskId>,
    pub strength: f64,
    /// Size of the generated pool the F=1 training group is cut from.
    pub n_pool: usize,
    pub n_test: usize,
}

impl Default for CrossGroupSection {
    fn default() -> Self {
        Self {
            tasks: vec![TaskId::A, TaskId::B],
            strength: 0.9,
            n_pool: 100000,
            n_test: 4000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InlpSection {
    pub tasks: Vec<TaskId>,
    /// Strength of the training data; 0.5 is the unbiased setting.
    pub train_strength: f64,
    pub max_iters: usize,
    pub stop_at_majority: bool,
    pub majority_tolerance: f64,
    /// Probe-accuracy level at which task accuracy is compared for a feature
    /// that is not necessary for the label.
    pub low_pn_probe_level: f64,
    /// Same, for a necessary feature.
    pub high_pn_probe_level: f64,
}

impl Default for InlpSection {
    fn default() -> Self {
        Self {
            tasks: vec![TaskId::A, TaskId::C],
            train_strength: 0.5,
            max_iters: 30,
            stop_at_majority: false,
            majority_tolerance: 0.01,
            low_pn_probe_level: 0.52,
            high_pn_probe_level: 0.6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub tasks: Vec<TaskId>,
    pub strengths: Vec<f64>,
    /// Strength of the probing data, chosen so the feature carries no
    /// label information beyond what the task itself implies.
    pub probe_strength: f64,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            tasks: vec![TaskId::A, TaskId::C],
            strengths: vec![0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99],
            probe_strength: 0.5,
        }
    }
}

/// Non-causal cell: a marker token injected into an otherwise unbiased task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MarkerCell {
    pub task: TaskId,
    pub strength: f64,
    pub prevalence: f64,
    pub marker_strength: f64,
    pub target_label: usize,
    /// Marker prevalence in the probing data, injected label-independently.
    pub probe_prevalence: f64,
    /// Overrides `data.n_train` for this cell.
    pub n_train: Option<usize>,
}

impl Default for MarkerCell {
    fn default() -> Self {
        Self {
            task: TaskId::A,
            strength: 0.5,
            prevalence: 0.25,
            marker_strength: 0.9,
            target_label: 1,
            probe_prevalence: 0.5,
            n_train: None,
        }
    }
}

/// Necessary-feature cell: the reserved token of a task where it is causal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReservedCell {
    pub task: TaskId,
    pub strength: f64,
    pub probe_strength: f64,
    /// Overrides `data.n_train` for this cell.
    pub n_train: Option<usize>,
}

impl Default for ReservedCell {
    fn default() -> Self {
        Self {
            task: TaskId::C,
            strength: 0.9,
            probe_strength: 0.5,
            n_train: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MethodTableSection {
    pub methods: Vec<TrainMethod>,
    pub low_pn: MarkerCell,
    pub high_pn: ReservedCell,
}

impl Default for MethodTableSection {
    fn default() -> Self {
        Self {
            methods: TrainMethod::ALL.to_vec(),
            low_pn: MarkerCell::default(),
            high_pn: ReservedCell::default(),
        }
    }
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_schedule() -> Vec<f64> {
    DEFAULT_SCHEDULE.to_vec()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Optional when the CLI subcommand already names the experiment.
    #[serde(default)]
    pub experiment: Option<ExperimentKind>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub task: TaskDefaults,
    #[serde(default)]
    pub model: ModelDefaults,
    #[serde(default)]
    pub train: TrainConfig,
    /// Per-task override of `train.epochs`.
    #[serde(default)]
    pub epochs_by_task: BTreeMap<TaskId, usize>,
    /// Per-task override of `data.n_train`.
    #[serde(default)]
    pub n_train_by_task: BTreeMap<TaskId, usize>,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default = "default_schedule")]
    pub mdl_schedule: Vec<f64>,
    #[serde(default)]
    pub data: DataSizes,
    #[serde(default)]
    pub pnps: PnpsSection,
    #[serde(default)]
    pub cross_group: CrossGroupSection,
    #[serde(default)]
    pub inlp: InlpSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub method_table: MethodTableSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl ExperimentConfig {
    pub fn for_experiment(kind: ExperimentKind) -> Self {
        Self {
            experiment: Some(kind),
            ..Self::default()
        }
    }

    pub fn from_json(text: &str) -> RunResult<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| RunError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> RunResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RunError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Training settings for one run; the method and seed are filled in.
    pub fn train_config(&self, task: TaskId, method: TrainMethod, seed: u64) -> TrainConfig {
        let mut t = self.train.clone();
        t.method = method;
        t.seed = seed;
        if let Some(&e) = self.epochs_by_task.get(&task) {
            t.epochs = e;
        }
        t
    }

    pub fn n_train(&self, task: TaskId) -> usize {
        self.n_train_by_task.get(&task).copied().unwrap_or(self.data.n_train)
    }

    pub fn probe_config(&self, seed: u64) -> ProbeConfig {
        ProbeConfig {
            seed,
            ..self.probe.clone()
        }
    }

    pub fn inlp_config(&self, seed: u64) -> InlpConfig {
        InlpConfig {
            max_iters: self.inlp.max_iters,
            stop_at_majority: self.inlp.stop_at_majority,
            majority_tolerance: self.inlp.majority_tolerance,
            probe: self.probe_config(seed),
        }
    }

    pub fn validate(&self) -> RunResult<()> {
        let cfg = |e: Error| RunError::Config(e.to_string());
        if self.seeds.is_empty() {
            return Err(RunError::Config("seeds must be non-empty".into()));
        }
        let probe = self.task.spec(TaskId::A, 0.5, 0).with_marker(self.task.marker_token);
        probe.validate().map_err(cfg)?;
        self.model.config(&probe, 0).validate().map_err(cfg)?;
        self.train.validate().map_err(cfg)?;
        if self.epochs_by_task.values().chain(self.n_train_by_task.values()).any(|&e| e == 0) {
            return Err(RunError::Config("per-task overrides must be >= 1".into()));
        }
        self.probe.validate().map_err(cfg)?;
        let n = self.data.n_probe;
        pnpslab_core::repranalysis::block_ends(n, &self.mdl_schedule).map_err(cfg)?;
        for (name, v) in [
            ("data.n_train", self.data.n_train),
            ("data.n_dev", self.data.n_dev),
            ("data.n_probe", self.data.n_probe),
            ("data.n_eval", self.data.n_eval),
            ("cross_group.n_pool", self.cross_group.n_pool),
            ("cross_group.n_test", self.cross_group.n_test),
            ("inlp.max_iters", self.inlp.max_iters),
            ("pnps.mc_samples", self.pnps.mc_samples),
        ] {
            if v == 0 {
                return Err(RunError::Config(format!("{name} must be >= 1")));
            }
        }
        let strength_ok = |b: f64| (0.5..=1.0).contains(&b);
        let mut strengths = vec![
            self.pnps.strength,
            self.cross_group.strength,
            self.inlp.train_strength,
            self.sweep.probe_strength,
            self.method_table.low_pn.strength,
            self.method_table.high_pn.strength,
            self.method_table.high_pn.probe_strength,
        ];
        strengths.extend(&self.sweep.strengths);
        if let Some(b) = strengths.into_iter().find(|&b| !strength_ok(b)) {
            return Err(RunError::Config(format!("bias strength {b} outside [0.5, 1]")));
        }
        if self.sweep.strengths.is_empty() || self.sweep.tasks.is_empty() {
            return Err(RunError::Config("sweep needs tasks and strengths".into()));
        }
        if self.method_table.methods.is_empty() {
            return Err(RunError::Config("method_table.methods is empty".into()));
        }
        let lp = &self.method_table.low_pn;
        for (name, v) in [
            ("prevalence", lp.prevalence),
            ("marker_strength", lp.marker_strength),
            ("probe_prevalence", lp.probe_prevalence),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(RunError::Config(format!("method_table.low_pn.{name} outside [0, 1]")));
            }
        }
        if lp.n_train == Some(0) || self.method_table.high_pn.n_train == Some(0) {
            return Err(RunError::Config("method_table cell n_train must be >= 1".into()));
        }
        if lp.target_label >= lp.task.n_classes() {
            return Err(RunError::Config("method_table.low_pn.target_label out of range".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_errors() {
        assert!(ExperimentConfig::from_json(r#"{"experiment":"bias_sweep","sedes":[1]}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"train":{"epochz":3}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"sweep":{"strengths":[0.4]}}"#).is_err());
    }

    #[test]
    fn epochs_by_task_override() {
        let c = ExperimentConfig::from_json(r#"{"epochs_by_task":{"C":9},"seeds":[4]}"#).unwrap();
        assert_eq!(c.train_config(TaskId::C, TrainMethod::Dfl, 4).epochs, 9);
        assert_eq!(c.train_config(TaskId::A, TrainMethod::Erm, 4).epochs, 3);
        let back = ExperimentConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn empty_seeds_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"seeds":[]}"#).is_err());
    }
}

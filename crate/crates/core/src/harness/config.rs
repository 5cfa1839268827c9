//! Experiment configuration, read from TOML.
//!
//! Every key is optional; missing keys take the defaults shown by
//! `ExperimentConfig::default()`. Top-level keys:
//!
//! ```toml
//! checkpoint = "model.ckpt"   # omit to train from [model] and [train]
//! train_examples = 3000
//! num_demos = 32
//! num_eval = 64
//! chunk_budget = 200          # tokens per chunk
//! num_chunks = 4              # optional; even split instead of the budget
//! methods = ["full", "adaptive", "uniform_topk", "pyramid"]
//! grouped_size = 2            # layers per group for adaptive_grouped
//! baseline_ratio = 0.3        # omit to match the adaptive ratio
//! seeds = [0, 1, 2]
//! output_dir = "out"
//!
//! [model]    # ModelConfig; vocab_size is derived from [task]
//! [train]    # TrainConfig
//! [task]     # TaskSpec
//! [policy]   # RetentionPolicy
//! [baseline] # pyramid slope and initial_recent sink
//! [sweep]    # axis values: delta, demos, chunk_budget, k, ratios, window
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::{BaselineKind, BaselineSpec};
use crate::compressor::Method;
use crate::error::{Error, Result};
use crate::lap::{ObservationWindow, RetentionPolicy};
use crate::model::train::TrainConfig;
use crate::model::ModelConfig;
use crate::taskgen::TaskSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    Full,
    Adaptive,
    AdaptiveGrouped,
    UniformTopk,
    Pyramid,
    InitialRecent,
}

impl MethodKind {
    pub const ALL: [MethodKind; 6] = [
        Self::Full,
        Self::Adaptive,
        Self::AdaptiveGrouped,
        Self::UniformTopk,
        Self::Pyramid,
        Self::InitialRecent,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::Adaptive => "adaptive",
            Self::AdaptiveGrouped => "adaptive_grouped",
            Self::UniformTopk => "uniform_topk",
            Self::Pyramid => "pyramid",
            Self::InitialRecent => "initial_recent",
        }
    }

    pub fn baseline(self) -> Option<BaselineKind> {
        match self {
            Self::UniformTopk => Some(BaselineKind::UniformTopK),
            Self::Pyramid => Some(BaselineKind::Pyramid),
            Self::InitialRecent => Some(BaselineKind::InitialRecent),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Delta,
    Demos,
    ChunkBudget,
    K,
    Ratios,
    Window,
}

impl Axis {
    pub const ALL: [Axis; 6] = [Self::Delta, Self::Demos, Self::ChunkBudget, Self::K, Self::Ratios, Self::Window];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Delta => "delta",
            Self::Demos => "demos",
            Self::ChunkBudget => "chunk_budget",
            Self::K => "k",
            Self::Ratios => "ratios",
            Self::Window => "window",
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|a| a.as_str() == s).ok_or_else(|| Error::Field {
            field: "axis".into(),
            reason: format!("unknown axis `{s}`"),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineParams {
    pub pyramid_slope: f64,
    pub sink: usize,
}

impl Default for BaselineParams {
    fn default() -> Self {
        Self {
            pyramid_slope: 1.0,
            sink: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepAxes {
    pub delta: Vec<f64>,
    pub demos: Vec<usize>,
    pub chunk_budget: Vec<usize>,
    pub k: Vec<usize>,
    pub ratios: Vec<Vec<f64>>,
    pub window: Vec<ObservationWindow>,
}

impl Default for SweepAxes {
    fn default() -> Self {
        Self {
            delta: vec![0.002, 0.005, 0.02],
            demos: vec![0, 4, 16, 64],
            chunk_budget: vec![100, 200, 400],
            k: vec![1, 2, 4, 8],
            ratios: vec![vec![0.1, 0.2, 0.5, 1.0], vec![0.2, 0.5, 1.0], vec![0.5, 1.0]],
            window: vec![
                ObservationWindow::Answer,
                ObservationWindow::QuestionAnswer,
                ObservationWindow::ImageQuestionAnswer,
            ],
        }
    }
}

impl SweepAxes {
    pub fn len(&self, axis: Axis) -> usize {
        match axis {
            Axis::Delta => self.delta.len(),
            Axis::Demos => self.demos.len(),
            Axis::ChunkBudget => self.chunk_budget.len(),
            Axis::K => self.k.len(),
            Axis::Ratios => self.ratios.len(),
            Axis::Window => self.window.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub checkpoint: Option<PathBuf>,
    pub train_examples: usize,
    pub num_demos: usize,
    pub num_eval: usize,
    pub chunk_budget: usize,
    pub num_chunks: Option<usize>,
    pub methods: Vec<MethodKind>,
    pub grouped_size: usize,
    pub baseline_ratio: Option<f64>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub task: TaskSpec,
    pub policy: RetentionPolicy,
    pub baseline: BaselineParams,
    pub sweep: SweepAxes,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            train_examples: 3000,
            num_demos: 32,
            num_eval: 64,
            chunk_budget: 200,
            num_chunks: None,
            methods: vec![MethodKind::Full, MethodKind::Adaptive, MethodKind::UniformTopk, MethodKind::Pyramid],
            grouped_size: 2,
            baseline_ratio: None,
            seeds: vec![0, 1, 2, 3, 4],
            output_dir: PathBuf::from("out"),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            task: TaskSpec::default(),
            policy: RetentionPolicy::default(),
            baseline: BaselineParams::default(),
            sweep: SweepAxes::default(),
        }
    }
}

fn field(name: &str, reason: impl Into<String>) -> Error {
    Error::Field {
        field: name.into(),
        reason: reason.into(),
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| field("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate().map_err(|e| field("task", e.to_string()))?;
        self.policy.validate().map_err(|e| field("policy", e.to_string()))?;
        if self.checkpoint.is_none() {
            self.model_config().validate().map_err(|e| field("model", e.to_string()))?;
        }
        if self.seeds.is_empty() {
            return Err(field("seeds", "at least one seed is required"));
        }
        if self.methods.is_empty() {
            return Err(field("methods", "at least one method is required"));
        }
        if self.num_eval == 0 {
            return Err(field("num_eval", "must be >= 1"));
        }
        if self.chunk_budget < self.task.demo_len() {
            return Err(field(
                "chunk_budget",
                format!("{} is smaller than one demonstration ({} tokens)", self.chunk_budget, self.task.demo_len()),
            ));
        }
        if self.num_chunks == Some(0) {
            return Err(field("num_chunks", "must be >= 1"));
        }
        if self.grouped_size < 2 {
            return Err(field("grouped_size", "must be >= 2"));
        }
        if let Some(r) = self.baseline_ratio {
            if !(r > 0.0 && r <= 1.0) {
                return Err(field("baseline_ratio", format!("must lie in (0, 1], got {r}")));
            }
        }
        if self.checkpoint.is_none() && self.train_examples == 0 {
            return Err(field("train_examples", "must be >= 1 when no checkpoint is given"));
        }
        for axis in Axis::ALL {
            if self.sweep.len(axis) == 0 {
                return Err(field(&format!("sweep.{axis}"), "axis must be nonempty"));
            }
        }
        if self.sweep.delta.iter().any(|&d| !(d > 0.0)) {
            return Err(field("sweep.delta", "values must be positive"));
        }
        if self.sweep.k.contains(&0) {
            return Err(field("sweep.k", "values must be >= 1"));
        }
        if let Some(&b) = self.sweep.chunk_budget.iter().find(|&&b| b < self.task.demo_len()) {
            return Err(field("sweep.chunk_budget", format!("{b} is smaller than one demonstration")));
        }
        for (i, ratios) in self.sweep.ratios.iter().enumerate() {
            RetentionPolicy {
                ratios: ratios.clone(),
                ..self.policy.clone()
            }
            .validate()
            .map_err(|e| field(&format!("sweep.ratios[{i}]"), e.to_string()))?;
        }
        Ok(())
    }

    /// Model config with the vocabulary sized to the task.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            vocab_size: self.task.layout().size,
            ..self.model.clone()
        }
    }

    /// Concrete method for `kind`; baselines use `ratio`.
    pub fn method(&self, kind: MethodKind, policy: &RetentionPolicy, ratio: f64) -> Method {
        match kind {
            MethodKind::Full => Method::Full,
            MethodKind::Adaptive => Method::Adaptive(RetentionPolicy {
                group_size: 1,
                ..policy.clone()
            }),
            MethodKind::AdaptiveGrouped => Method::Adaptive(RetentionPolicy {
                group_size: self.grouped_size,
                ..policy.clone()
            }),
            _ => {
                let kind = kind.baseline().expect("baseline kind");
                Method::Baseline(BaselineSpec {
                    slope: self.baseline.pyramid_slope,
                    sink: self.baseline.sink,
                    ..BaselineSpec::new(kind, ratio)
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = ExperimentConfig::default();
        cfg.seeds = vec![7];
        cfg.checkpoint = Some("m.ckpt".into());
        cfg.sweep.delta = vec![0.01];
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn errors_name_the_field() {
        let cases = [
            ("seeds = []", "seeds"),
            ("[sweep]\ndelta = []", "sweep.delta"),
            ("[policy]\nratios = [0.5]", "policy"),
            ("chunk_budget = 3", "chunk_budget"),
            ("[sweep]\nratios = [[0.2, 0.1, 1.0]]", "sweep.ratios[0]"),
            ("bogus = 1", "config"),
        ];
        for (text, name) in cases {
            match ExperimentConfig::from_toml(text) {
                Err(Error::Field { field, .. }) => assert_eq!(field, name, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn axis_names_parse() {
        for axis in Axis::ALL {
            assert_eq!(axis.as_str().parse::<Axis>().unwrap(), axis);
        }
        assert!("speed".parse::<Axis>().is_err());
    }
}

//! Experiment configuration: one TOML file with a section per concern.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::loss::LossConfig;
use crate::model::ModelConfig;
use crate::nn::AdamConfig;
use crate::sim::{GridSpec, ScenarioConfig, SolverConfig, WindConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub scenarios: usize,
    /// Extra scenarios with `ood_source_count` sources, kept out of training.
    pub ood_scenarios: usize,
    pub ood_source_count: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            scenarios: 4000,
            ood_scenarios: 100,
            ood_source_count: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObservationConfig {
    /// Inclusive range of sensor counts drawn per scenario and epoch.
    pub sensors: [usize; 2],
    /// Sensor count used for held-out evaluation.
    pub eval_sensors: usize,
    /// Standard deviation of additive sensor noise; 0 disables it.
    pub noise_std: f64,
}

impl Default for ObservationConfig {
    fn default() -> Self {
        Self {
            sensors: [30, 100],
            eval_sensors: 50,
            noise_std: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub train_fraction: f64,
    #[serde(flatten)]
    pub adam: AdamConfig,
    /// Use at most this many training scenarios (all when absent).
    pub max_train_scenarios: Option<usize>,
    /// Rescale each batch gradient to at most this global L2 norm.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 8,
            train_fraction: 0.8,
            adam: AdamConfig::default(),
            max_train_scenarios: None,
            grad_clip: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub threshold: f64,
    pub pi_level: f64,
    /// Seed offset for the fixed evaluation sensor networks.
    pub sensor_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            pi_level: 0.95,
            sensor_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub sensor_counts: Vec<usize>,
    pub source_counts: Vec<usize>,
    /// Limit on test scenarios per sweep point (all when absent).
    pub max_scenarios: Option<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            sensor_counts: (20..=110).step_by(10).collect(),
            source_counts: vec![1, 2, 3, 4, 5],
            max_scenarios: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlotConfig {
    /// Row indices for the fixed-y slice plots.
    pub slice_rows: Vec<usize>,
    /// Time frame shown in map plots (last frame when absent).
    pub frame: Option<usize>,
}

impl Default for PlotConfig {
    fn default() -> Self {
        Self {
            slice_rows: vec![30, 37],
            frame: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Dataset directory; defaults to `<out>/dataset`.
    pub dataset_dir: Option<PathBuf>,
    pub grid: GridSpec,
    pub scenario: ScenarioConfig,
    pub wind: WindConfig,
    pub solver: SolverConfig,
    pub dataset: DatasetConfig,
    pub observation: ObservationConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub training: TrainingConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
    pub plot: PlotConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset_dir: None,
            grid: GridSpec::default(),
            scenario: ScenarioConfig::default(),
            wind: WindConfig::default(),
            solver: SolverConfig::default(),
            dataset: DatasetConfig::default(),
            observation: ObservationConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            training: TrainingConfig::default(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
            plot: PlotConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.scenario.validate()?;
        self.wind.validate()?;
        if !(self.solver.cfl > 0.0 && self.solver.cfl <= 1.0) {
            return Err(Error::Config(format!("solver.cfl must be in (0, 1], got {}", self.solver.cfl)));
        }
        if self.dataset.scenarios < 2 {
            return Err(Error::Config("dataset.scenarios must be at least 2".into()));
        }
        if self.dataset.ood_scenarios > 0 && self.dataset.ood_source_count == 0 {
            return Err(Error::Config("dataset.ood_source_count must be > 0".into()));
        }
        let nodes = self.grid.nodes();
        let [lo, hi] = self.observation.sensors;
        if lo == 0 || lo > hi || hi > nodes {
            return Err(Error::Config(format!("observation.sensors [{lo}, {hi}] invalid for {nodes} nodes")));
        }
        if self.observation.eval_sensors == 0 || self.observation.eval_sensors > nodes {
            return Err(Error::Config("observation.eval_sensors out of range".into()));
        }
        if !(self.observation.noise_std >= 0.0) {
            return Err(Error::Config("observation.noise_std must be >= 0".into()));
        }
        self.model.validate(&self.grid)?;
        if let Some(cells) = self.scenario.detection_cells {
            if cells != self.model.detection_cells {
                return Err(Error::Config(format!(
                    "scenario.detection_cells ({cells}) must match model.detection_cells ({})",
                    self.model.detection_cells
                )));
            }
        }
        self.loss.validate()?;
        let t = &self.training;
        if t.epochs == 0 || t.batch_size == 0 {
            return Err(Error::Config("training.epochs and training.batch_size must be > 0".into()));
        }
        if !(t.train_fraction > 0.0 && t.train_fraction < 1.0) {
            return Err(Error::Config("training.train_fraction must be in (0, 1)".into()));
        }
        if t.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("training.grad_clip must be > 0".into()));
        }
        if !(t.adam.learning_rate > 0.0) {
            return Err(Error::Config("training.learning_rate must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.eval.threshold) {
            return Err(Error::Config("eval.threshold must be in [0, 1]".into()));
        }
        if !(self.eval.pi_level > 0.0 && self.eval.pi_level < 1.0) {
            return Err(Error::Config("eval.pi_level must be in (0, 1)".into()));
        }
        for (name, axis) in [("sweep.sensor_counts", &self.sweep.sensor_counts), ("sweep.source_counts", &self.sweep.source_counts)] {
            if axis.is_empty() || axis.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Config(format!("{name} must be non-empty and strictly increasing")));
            }
        }
        if self.sweep.sensor_counts.iter().any(|&c| c == 0 || c > nodes) {
            return Err(Error::Config(format!("sweep.sensor_counts must lie in [1, {nodes}]")));
        }
        Ok(())
    }

    /// Hash of everything that determines the dataset bytes.
    pub fn dataset_hash(&self) -> String {
        #[derive(Serialize)]
        struct Key<'a> {
            seed: u64,
            grid: &'a GridSpec,
            scenario: &'a ScenarioConfig,
            wind: &'a WindConfig,
            solver: &'a SolverConfig,
            dataset: &'a DatasetConfig,
        }
        hash_json(&Key {
            seed: self.seed,
            grid: &self.grid,
            scenario: &self.scenario,
            wind: &self.wind,
            solver: &self.solver,
            dataset: &self.dataset,
        })
    }

    /// Hash of everything that determines a trained model.
    pub fn model_hash(&self) -> String {
        #[derive(Serialize)]
        struct Key<'a> {
            dataset: String,
            observation: &'a ObservationConfig,
            model: &'a ModelConfig,
            loss: &'a LossConfig,
            training: &'a TrainingConfig,
        }
        hash_json(&Key {
            dataset: self.dataset_hash(),
            observation: &self.observation,
            model: &self.model,
            loss: &self.loss,
            training: &self.training,
        })
    }

    /// Hash of the whole resolved configuration.
    pub fn hash(&self) -> String {
        hash_json(self)
    }

    pub fn dataset_path(&self, out: &Path) -> PathBuf {
        self.dataset_dir.clone().unwrap_or_else(|| out.join("dataset"))
    }
}

fn hash_json<S: Serialize>(value: &S) -> String {
    let bytes = serde_json::to_vec(value).expect("configuration serialises");
    hex::encode(Sha256::digest(bytes))
}

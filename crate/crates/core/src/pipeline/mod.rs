//! Run orchestration: configuration files, the training loop, evaluation
//! aggregation, and the ablation and sampling-comparison harnesses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::metrics::MetricsReport;
use crate::network::{ModuleToggles, NetworkConfig};
use crate::pointcloud::{MultispectralPointCloud, SceneSpec};

mod eval;
mod experiments;
mod gradsuite;
mod train;


pub use eval::{evaluate, Aggregator, Evaluation};
pub use gradsuite::{gradient_suite, tiny_config, GradSuiteCase, GRAD_SUITE_TOLERANCE};
pub use experiments::{
    ablate, ablation_configs, compare_sampling, prepare_sampling, run_once, sweep, AblationRow,
    AblationTable, MeanStd, RunOutcome, SamplingArtifacts, SamplingComparison, StrategyStats,
    SweepKind, SweepRow, SweepTable,
};
pub use train::{lr_at, train, train_label_histogram};

/// How samples are drawn from a cloud.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingStrategy {
    /// Grid-balanced sampling.
    Gbs,
    /// The random-sampling baseline.
    Rs,
}

impl std::str::FromStr for SamplingStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gbs" => Ok(Self::Gbs),
            "rs" => Ok(Self::Rs),
            other => Err(Error::validation(
                "strategy",
                format!("unknown sampling strategy {other:?} (expected gbs or rs)"),
            )),
        }
    }
}

/// The `sampling` section of a run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub strategy: SamplingStrategy,
    /// Grid cell size in scene units; derived from the cloud when absent.
    pub cell_size: Option<f64>,
    /// Fraction of each class's labeled centroids that become TRAIN.
    pub train_ratio: f64,
    /// Points per sample (the receptive field).
    pub k: usize,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            strategy: SamplingStrategy::Gbs,
            cell_size: None,
            train_ratio: 0.05,
            k: 4096,
            seed: 0,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_ratio > 0.0 && self.train_ratio < 1.0) {
            return Err(Error::validation("train_ratio", "must be in (0, 1)"));
        }
        if self.k == 0 {
            return Err(Error::validation("k", "must be >= 1"));
        }
        if let Some(cs) = self.cell_size {
            if !(cs > 0.0 && cs.is_finite()) {
                return Err(Error::validation("cell_size", "must be positive"));
            }
        }
        Ok(())
    }
}

/// The `network` section of a run config; shape fields that depend on the
/// cloud (bands, classes) are resolved at run time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSettings {
    /// Defaults to the sampling k so samples fill the receptive field.
    pub receptive_field: Option<usize>,
    pub base_channels: usize,
    pub knn_neighbors: usize,
}

impl Default for NetworkSettings {
    fn default() -> Self {
        Self {
            receptive_field: None,
            base_channels: 4,
            knn_neighbors: 8,
        }
    }
}

/// The `train` section of a run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Per-epoch multiplier on the learning rate.
    pub lr_decay_per_epoch: f64,
    /// Decoupled weight decay, applied to weight matrices only.
    pub weight_decay: f64,
    pub seed: u64,
    pub toggles: ModuleToggles,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            learning_rate: 0.005,
            lr_decay_per_epoch: 0.95,
            weight_decay: 1e-4,
            seed: 0,
            toggles: ModuleToggles::all(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.batch_size >= 1, "batch_size", "must be >= 1"),
            (self.learning_rate > 0.0, "learning_rate", "must be > 0"),
            (
                self.lr_decay_per_epoch > 0.0 && self.lr_decay_per_epoch <= 1.0,
                "lr_decay_per_epoch",
                "must be in (0, 1]",
            ),
            (self.weight_decay >= 0.0, "weight_decay", "must be >= 0"),
        ];
        for (ok, field, reason) in checks {
            if !ok {
                return Err(Error::validation(field, reason));
            }
        }
        Ok(())
    }
}

/// One structured file describing a full run: scene generation, sampling,
/// network shape, loss, and training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scene: SceneSpec,
    pub sampling: SamplingConfig,
    pub network: NetworkSettings,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scene: SceneSpec::default(),
            sampling: SamplingConfig::default(),
            network: NetworkSettings::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.sampling.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        Ok(())
    }

    /// Resolve the network shape against a concrete cloud.
    pub fn network_config(&self, cloud: &MultispectralPointCloud) -> NetworkConfig {
        let mut config = NetworkConfig::new(
            self.network.receptive_field.unwrap_or(self.sampling.k),
            cloud.bands(),
            cloud.classes(),
        );
        config.base_channels = self.network.base_channels;
        config.knn_neighbors = self.network.knn_neighbors;
        config
    }
}

/// Loss components and timing of one epoch. `l_scale` and `l_tail` are the
/// means of the multi-scale and long-tailed terms over the epoch's samples
/// (zero when the module is off); `l_ce` likewise for the plain
/// cross-entropy head used when the long-tailed heads are off.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub l_scale: f64,
    pub l_tail: f64,
    pub l_ce: f64,
    pub total: f64,
    pub wall_ms: f64,
}

/// Everything a training run reports.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub epochs: Vec<EpochLog>,
    /// Filled in by the caller after evaluation.
    pub final_report: Option<MetricsReport>,
}

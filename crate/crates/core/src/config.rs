//! Flat run configuration shared by every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::advisor::{AdvisorReadout, DEFAULT_ALPHA, DEFAULT_BETA};
use crate::continual::{Precision, TrainConfig};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::kernel_attention::DEFAULT_STABILIZER;
use crate::model::{BlockAttention, ModelConfig, TrainScope};
use crate::optim::{AdamWConfig, LrSchedule};
use crate::pointcloud::RadiusMode;
use crate::rpp::PerturbationConfig;
use crate::synthgen::{even_partition, CategorySpec, DefectKind, DefectSpec, Shape, SplitSizes};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// File name of the echoed configuration in every output directory.
pub const ECHO_FILE: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,

    pub tasks: usize,
    pub categories: Vec<Shape>,
    pub points_per_cloud: usize,
    pub jitter_sigma: f64,
    pub pose_randomization: bool,
    pub train_per_category: usize,
    pub normal_test_per_category: usize,
    pub anomalous_test_per_category: usize,
    pub defect_kinds: Vec<DefectKind>,
    pub defect_amplitude: f64,
    pub defect_extent: f64,

    pub centers: usize,
    pub group_size: usize,
    pub eta: f64,
    pub radius_mode: RadiusMode,
    pub dim: usize,
    pub features: usize,
    pub blocks: usize,
    pub embed_hidden: usize,
    pub alpha: f64,
    pub beta: f64,
    pub attention: BlockAttention,
    pub kal: bool,
    pub readout: AdvisorReadout,
    pub kernel_scale: f64,
    pub residual_gain: f64,
    pub stabilizer: f64,

    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_dropped: f64,
    pub lr_drop_fraction: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub train_scope: TrainScope,
    pub precision: Precision,

    pub epsilon: f64,
    pub ascent_steps: usize,
    pub step_size: f64,
    pub lambda_rpp: f64,

    /// 0 uses every available core.
    pub threads: usize,
    pub deterministic: bool,

    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let train = TrainConfig::default();
        let perturbation = PerturbationConfig::default();
        let defects = DefectSpec::default_mix();
        let sizes = SplitSizes::default();
        let cat = CategorySpec::new(Shape::Sphere);
        Self {
            seed: 0,
            tasks: 3,
            categories: Shape::ALL.to_vec(),
            points_per_cloud: cat.points_per_cloud,
            jitter_sigma: cat.jitter_sigma,
            pose_randomization: cat.pose_randomization,
            train_per_category: sizes.train,
            normal_test_per_category: sizes.normal_test,
            anomalous_test_per_category: sizes.anomalous_test,
            defect_kinds: defects.iter().map(|d| d.kind).collect(),
            defect_amplitude: defects[0].amplitude,
            defect_extent: defects[0].extent,
            centers: model.centers,
            group_size: model.group_size,
            eta: model.eta,
            radius_mode: model.radius_mode,
            dim: model.dim,
            features: model.features,
            blocks: model.blocks,
            embed_hidden: model.embed_hidden,
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            attention: model.attention,
            kal: model.kal,
            readout: model.readout,
            kernel_scale: model.kernel_scale,
            residual_gain: model.residual_gain,
            stabilizer: DEFAULT_STABILIZER,
            epochs: train.epochs,
            batch_size: train.batch_size,
            lr: train.lr.initial,
            lr_dropped: train.lr.dropped,
            lr_drop_fraction: train.lr.drop_fraction,
            weight_decay: train.adamw.weight_decay,
            adam_beta1: train.adamw.beta1,
            adam_beta2: train.adamw.beta2,
            adam_eps: train.adamw.eps,
            train_scope: train.scope,
            precision: train.precision,
            epsilon: perturbation.epsilon,
            ascent_steps: perturbation.ascent_steps,
            step_size: perturbation.step_size,
            lambda_rpp: perturbation.lambda_rpp,
            threads: 0,
            deterministic: false,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config is always representable")
    }

    /// Write the effective configuration, headed by the tool version.
    pub fn echo_to(&self, dir: &Path) -> Result<()> {
        let path = dir.join(ECHO_FILE);
        let text = format!("# incr3d {VERSION}\n{}", self.to_toml());
        std::fs::write(&path, text).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.categories.is_empty() {
            return bad("categories must not be empty");
        }
        let mut seen = self.categories.clone();
        seen.sort_by_key(|s| s.name());
        seen.dedup();
        if seen.len() != self.categories.len() {
            return bad("categories must be distinct");
        }
        if self.tasks == 0 || self.tasks > self.categories.len() {
            return bad("tasks must lie in 1..=number of categories");
        }
        if self.train_per_category == 0 {
            return bad("train_per_category must be >= 1");
        }
        if self.normal_test_per_category == 0 || self.anomalous_test_per_category == 0 {
            return bad("every category needs normal and anomalous test clouds");
        }
        if self.defect_kinds.is_empty() {
            return bad("defect_kinds must not be empty");
        }
        if self.threads > 0 && self.deterministic && self.threads != 1 {
            return bad("deterministic runs are single-threaded; drop threads or set it to 1");
        }
        for c in self.category_specs() {
            c.validate().map_err(to_config)?;
        }
        for d in self.defects() {
            d.validate().map_err(to_config)?;
        }
        self.model_config().validate().map_err(to_config)?;
        self.train_config().validate().map_err(to_config)
    }

    pub fn category_specs(&self) -> Vec<CategorySpec> {
        self.categories
            .iter()
            .map(|&shape| CategorySpec {
                points_per_cloud: self.points_per_cloud,
                jitter_sigma: self.jitter_sigma,
                pose_randomization: self.pose_randomization,
                ..CategorySpec::new(shape)
            })
            .collect()
    }

    pub fn task_partition(&self) -> Result<Vec<Vec<usize>>> {
        even_partition(self.categories.len(), self.tasks).map_err(to_config)
    }

    pub fn split_sizes(&self) -> SplitSizes {
        SplitSizes {
            train: self.train_per_category,
            normal_test: self.normal_test_per_category,
            anomalous_test: self.anomalous_test_per_category,
        }
    }

    pub fn defects(&self) -> Vec<DefectSpec> {
        self.defect_kinds
            .iter()
            .map(|&kind| DefectSpec {
                kind,
                amplitude: self.defect_amplitude,
                extent: self.defect_extent,
            })
            .collect()
    }

    pub fn execution(&self) -> Execution {
        if self.deterministic {
            Execution::Sequential
        } else {
            Execution::Parallel
        }
    }

    pub fn perturbation(&self) -> PerturbationConfig {
        PerturbationConfig {
            epsilon: self.epsilon,
            ascent_steps: self.ascent_steps,
            step_size: self.step_size,
            lambda_rpp: self.lambda_rpp,
            seed: self.seed,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            dim: self.dim,
            features: self.features,
            blocks: self.blocks,
            embed_hidden: self.embed_hidden,
            centers: self.centers,
            group_size: self.group_size,
            eta: self.eta,
            radius_mode: self.radius_mode,
            alpha: self.alpha,
            beta: self.beta,
            attention: self.attention,
            kal: self.kal,
            readout: self.readout,
            kernel_scale: self.kernel_scale,
            residual_gain: self.residual_gain,
            stabilizer: self.stabilizer,
            seed: self.seed,
            epsilon: self.epsilon,
            lambda_rpp: self.lambda_rpp,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: LrSchedule {
                initial: self.lr,
                dropped: self.lr_dropped,
                drop_fraction: self.lr_drop_fraction,
            },
            adamw: AdamWConfig {
                beta1: self.adam_beta1,
                beta2: self.adam_beta2,
                eps: self.adam_eps,
                weight_decay: self.weight_decay,
            },
            perturbation: self.perturbation(),
            scope: self.train_scope,
            precision: self.precision,
            exec: self.execution(),
            seed: self.seed,
        }
    }
}

fn to_config(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

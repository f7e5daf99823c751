use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::AuditedStream;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::{Model, ModelInput, TokenBatch, TrainScope};
use crate::optim::{AdamW, AdamWConfig, LrSchedule};
use crate::pointcloud::{prepare_groups, GroupedCloud, PointCloud};
use crate::rpp::{composite_step, PerturbationConfig};
use crate::seed;

/// Arithmetic used for the trainable weights between steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    /// Weights are rounded to `f32` after every optimizer step.
    #[default]
    Single,
    Double,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub adamw: AdamWConfig,
    pub perturbation: PerturbationConfig,
    pub scope: TrainScope,
    pub precision: Precision,
    pub exec: Execution,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 1,
            lr: LrSchedule::default(),
            adamw: AdamWConfig::default(),
            perturbation: PerturbationConfig::default(),
            scope: TrainScope::default(),
            precision: Precision::default(),
            exec: Execution::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr.initial > 0.0 && self.lr.dropped > 0.0) || !(0.0..=1.0).contains(&self.lr.drop_fraction) {
            return Err(Error::Config("learning rates must be positive and drop_fraction in [0, 1]".into()));
        }
        self.perturbation.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub task: usize,
    pub epoch: usize,
    pub recon: f64,
    pub rpp: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub epochs: Vec<EpochRecord>,
    /// Per block, mean `||phi(k)||` over the keys seen in the last epoch.
    pub feature_norms: Vec<f64>,
}

/// Model input for one cloud: cached tokens when the embedder is frozen,
/// otherwise the grouped points.
#[derive(Debug, Clone)]
pub enum Prepared {
    Tokens(TokenBatch),
    Groups(GroupedCloud),
}

impl Prepared {
    pub fn input(&self) -> ModelInput<'_> {
        match self {
            Prepared::Tokens(t) => ModelInput::Tokens(t),
            Prepared::Groups(g) => ModelInput::Groups(g),
        }
    }
}

pub(crate) fn grouping_seed(sample_seed: u64) -> u64 {
    seed::derive(sample_seed, &[seed::label("fps")])
}

/// Group (and, for a frozen embedder, embed) every cloud.
pub fn prepare_inputs(
    model: &Model,
    clouds: &[(&PointCloud, u64)],
    scope: TrainScope,
    exec: Execution,
) -> Result<Vec<Prepared>> {
    let params = model.config.grouping();
    exec.map(clouds, |(cloud, s)| -> Result<Prepared> {
        let g = prepare_groups(cloud, &params, grouping_seed(*s))?;
        Ok(match scope {
            TrainScope::All => Prepared::Groups(g),
            TrainScope::EncoderDecoder => Prepared::Tokens(model.embed_groups(&g)?),
        })
    })
    .into_iter()
    .collect()
}

/// Train on the train set of `task` only. On a numeric failure the model is
/// left at its last good state and the error is returned.
pub fn train_task(model: &mut Model, data: AuditedStream<'_>, task: usize, cfg: &TrainConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let mut summary = TrainSummary::default();
    if cfg.epochs == 0 {
        return Ok(summary);
    }
    let n = data.train_len(task);
    if n == 0 {
        return Err(Error::Dataset(format!("task {task} has no training samples")));
    }
    let samples: Vec<_> = (0..n).map(|i| data.train(task, i)).collect();
    let clouds: Vec<_> = samples.iter().map(|s| (&s.cloud, s.seed)).collect();
    let inputs = prepare_inputs(model, &clouds, cfg.scope, cfg.exec)?;

    let mut opt = AdamW::new(cfg.adamw, &model.weights);
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr.rate(epoch, cfg.epochs);
        let mut rng = seed::rng(seed::derive(cfg.seed, &[seed::label("shuffle"), task as u64, epoch as u64]));
        order.shuffle(&mut rng);
        let (mut recon, mut rpp) = (0.0, 0.0);
        let mut norms = vec![(0.0, 0usize); model.config.blocks];
        for batch in order.chunks(cfg.batch_size) {
            let step_seed = seed::derive(cfg.seed, &[task as u64, step]);
            let batch_inputs: Vec<_> = batch.iter().map(|&i| inputs[i].input()).collect();
            let out = composite_step(model, &batch_inputs, &cfg.perturbation, cfg.scope, cfg.exec, step_seed)?;

            let last_good = model.weights.clone();
            opt.step(&mut model.weights, &out.grads, lr, cfg.scope);
            if cfg.precision == Precision::Single {
                model.weights.round_to_f32();
            }
            if !model.weights.is_finite() {
                model.weights = last_good;
                return Err(Error::NonFinite(format!("weights after step {step} of task {task}")));
            }
            if let Err(e) = model.update_advisors(&out.key_values) {
                model.weights = last_good;
                return Err(e);
            }
            if epoch + 1 == cfg.epochs {
                for (b, pairs) in out.key_values.iter().enumerate() {
                    for (phi, _) in pairs {
                        for row in phi.rows() {
                            norms[b].0 += row.dot(&row).sqrt();
                            norms[b].1 += 1;
                        }
                    }
                }
            }
            let w = batch.len() as f64 / n as f64;
            recon += w * out.recon;
            rpp += w * out.rpp;
            step += 1;
        }
        log::debug!("task={task} epoch={epoch} recon={recon:.6} rpp={rpp:.6} lr={lr}");
        summary.epochs.push(EpochRecord {
            task,
            epoch,
            recon,
            rpp,
            lr,
        });
        if epoch + 1 == cfg.epochs {
            summary.feature_norms = norms.iter().map(|&(s, c)| if c > 0 { s / c as f64 } else { 0.0 }).collect();
        }
    }
    summary.steps = step;
    Ok(summary)
}

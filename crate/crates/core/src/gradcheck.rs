//! Finite-difference check of the full-model reconstruction gradient.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::exec::Execution;
use crate::model::{BlockAttention, Model, ModelConfig, ModelInput, Weights};
use crate::pointcloud::{prepare_groups, GroupedCloud};
use crate::seed;
use crate::synthgen::{generate_normal, CategorySpec, Shape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamClass {
    Embedder,
    Projection,
    FeedForward,
    Normalization,
}

impl ParamClass {
    pub fn of(name: &str) -> ParamClass {
        if name.starts_with("embedder.") {
            ParamClass::Embedder
        } else if name.contains(".norm") {
            ParamClass::Normalization
        } else if name.contains(".ff") {
            ParamClass::FeedForward
        } else {
            ParamClass::Projection
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub rel_tol: f64,
    /// Magnitudes below this are compared absolutely against `rel_tol * floor`.
    pub floor: f64,
    pub step: f64,
    /// Skip rounding the weights to `f32` before checking.
    pub double: bool,
    /// Add an error to one analytic entry; the check must then fail.
    pub corrupt: bool,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            rel_tol: 1e-4,
            floor: 1e-6,
            step: 1e-6,
            double: true,
            corrupt: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EntryCheck {
    pub variant: String,
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub checked: usize,
    pub per_class: Vec<(ParamClass, usize)>,
    pub max_rel_error: f64,
    pub failures: Vec<EntryCheck>,
    pub double: bool,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }
}

/// The model the gradient suite runs on.
pub fn tiny_config(attention: BlockAttention) -> ModelConfig {
    ModelConfig {
        dim: 8,
        features: 8,
        blocks: 2,
        embed_hidden: 8,
        centers: 4,
        group_size: 4,
        attention,
        seed: 11,
        ..ModelConfig::default()
    }
}

fn tiny_input(cfg: &ModelConfig, seed: u64) -> Result<GroupedCloud> {
    let spec = CategorySpec {
        points_per_cloud: 64,
        jitter_sigma: 0.01,
        ..CategorySpec::new(Shape::Torus)
    };
    let cloud = generate_normal(&spec, seed)?;
    prepare_groups(&cloud, &cfg.grouping(), seed)
}

fn loss(model: &Model, w: &Weights, input: ModelInput<'_>) -> Result<f64> {
    let mut m = model.clone();
    m.weights = w.clone();
    Ok(m.recon_gradients(&[input], Execution::Sequential)?.0)
}

/// Compare the analytic reconstruction gradient (embedder trained too) with
/// central differences on every trainable entry, for advisor and plain
/// linear-attention blocks.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut report = GradcheckReport {
        checked: 0,
        per_class: Vec::new(),
        max_rel_error: 0.0,
        failures: Vec::new(),
        double: cfg.double,
    };
    let mut counts = std::collections::BTreeMap::new();
    for attention in [BlockAttention::Advisor, BlockAttention::Linear] {
        let variant = format!("{attention:?}").to_lowercase();
        let mcfg = tiny_config(attention);
        let mut model = Model::new(mcfg.clone())?;
        let mut rng = seed::rng(seed::derive(cfg.seed, &[seed::label(&variant)]));
        // non-zero advisors so the query path carries gradient
        for adv in model.advisors_mut() {
            let s = Array2::from_shape_simple_fn((adv.dim(), adv.features()), || rng.random_range(-0.5..0.5));
            adv.set_matrix(s);
        }
        if !cfg.double {
            model.weights.round_to_f32();
        }
        let groups = tiny_input(&mcfg, cfg.seed)?;
        let input = ModelInput::Groups(&groups);
        let (_, mut grads) = model.recon_gradients(&[input], Execution::Sequential)?;
        if cfg.corrupt && attention == BlockAttention::Advisor {
            let mut t = grads.tensors_mut();
            let (_, g) = t.iter_mut().find(|(n, _)| n.contains(".ff1.")).expect("feed-forward weights exist");
            g[0] += 1e-2 * (1.0 + g[0].abs());
        }
        let names: Vec<String> = grads.tensors().into_iter().map(|(n, _)| n).collect();
        for (ti, name) in names.iter().enumerate() {
            let analytic: Vec<f64> = grads.tensors()[ti].1.to_vec();
            for (j, &a) in analytic.iter().enumerate() {
                let mut wp = model.weights.clone();
                wp.tensors_mut()[ti].1[j] += cfg.step;
                let mut wm = model.weights.clone();
                wm.tensors_mut()[ti].1[j] -= cfg.step;
                let numeric = (loss(&model, &wp, input)? - loss(&model, &wm, input)?) / (2.0 * cfg.step);
                let scale = numeric.abs().max(a.abs()).max(cfg.floor);
                let rel = (numeric - a).abs() / scale;
                report.max_rel_error = report.max_rel_error.max(rel);
                report.checked += 1;
                *counts.entry(ParamClass::of(name)).or_insert(0) += 1;
                if rel > cfg.rel_tol {
                    report.failures.push(EntryCheck {
                        variant: variant.clone(),
                        name: name.clone(),
                        index: j,
                        analytic: a,
                        numeric,
                    });
                }
            }
        }
    }
    report.per_class = counts.into_iter().collect();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classes() {
        assert_eq!(ParamClass::of("embedder.kal.wq"), ParamClass::Embedder);
        assert_eq!(ParamClass::of("blocks.1.attn.norm.gamma"), ParamClass::Normalization);
        assert_eq!(ParamClass::of("blocks.0.norm2.beta"), ParamClass::Normalization);
        assert_eq!(ParamClass::of("blocks.0.ff2.b"), ParamClass::FeedForward);
        assert_eq!(ParamClass::of("blocks.0.attn.wk"), ParamClass::Projection);
    }
}

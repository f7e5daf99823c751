//! Reconstruction with parameter perturbation.
//!
//! The perturbation loss compares the network with its own copy shifted by a
//! worst-case `delta` inside an L2 ball over the trainable parameters:
//! `L(delta) = mean_tokens ||h(theta, x) - h(theta + delta, x)||^2`, maximized
//! by projected normalized-gradient ascent.

use log::warn;
use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::{recon_loss_grad, sum_mean, Mode, Model, ModelInput, TrainScope, Trace, Weights};
use crate::seed;

const MAX_HALVINGS: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationConfig {
    pub epsilon: f64,
    pub ascent_steps: usize,
    /// Ascent step as a fraction of `epsilon`.
    pub step_size: f64,
    pub lambda_rpp: f64,
    pub seed: u64,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            ascent_steps: 1,
            step_size: 0.5,
            lambda_rpp: 1.0,
            seed: 0,
        }
    }
}

impl PerturbationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::Config("epsilon must be finite and >= 0".into()));
        }
        if !(self.step_size > 0.0 && self.step_size <= 1.0) {
            return Err(Error::Config("step_size must lie in (0, 1]".into()));
        }
        if !(self.lambda_rpp >= 0.0) {
            return Err(Error::Config("lambda_rpp must be >= 0".into()));
        }
        Ok(())
    }

    /// True when the perturbation term contributes nothing.
    pub fn is_off(&self) -> bool {
        self.epsilon == 0.0 || self.lambda_rpp == 0.0
    }
}

/// Gaussian direction over the tensors in `scope`, rescaled to `epsilon / 2`.
pub fn sample_perturbation(weights: &Weights, epsilon: f64, scope: TrainScope, seed: u64) -> Weights {
    let mut delta = weights.zeros_like();
    if epsilon == 0.0 {
        return delta;
    }
    let mut rng = seed::rng(seed);
    for (name, t) in delta.tensors_mut() {
        if scope.includes(&name) {
            t.iter_mut().for_each(|x| *x = StandardNormal.sample(&mut rng));
        }
    }
    let n = delta.norm(scope);
    if n > 0.0 {
        delta.scale(0.5 * epsilon / n);
    }
    delta
}

#[derive(Debug, Clone)]
pub struct RppOutcome {
    pub loss: f64,
    /// Loss at the sampled starting point.
    pub initial: f64,
    /// Loss after each accepted ascent step.
    pub steps: Vec<f64>,
    pub delta: Weights,
}

fn shifted(weights: &Weights, delta: &Weights) -> Weights {
    let mut w = weights.clone();
    w.axpy(1.0, delta, TrainScope::All);
    w
}

/// `mean_tokens ||a - b||^2` and its gradient with respect to `b`.
fn gap(anchor: &Array2<f64>, moved: &Array2<f64>) -> (f64, Array2<f64>) {
    let n = anchor.nrows().max(1) as f64;
    let diff = moved - anchor;
    let loss = diff.iter().map(|x| x * x).sum::<f64>() / n;
    (loss, diff * (2.0 / n))
}

struct Search<'a> {
    model: &'a Model,
    inputs: &'a [ModelInput<'a>],
    anchors: &'a [Array2<f64>],
    scope: TrainScope,
    exec: Execution,
}

impl Search<'_> {
    fn value(&self, delta: &Weights) -> Result<f64> {
        let w = shifted(&self.model.weights, delta);
        let per = self.exec.map_indexed(self.inputs.len(), |i| -> Result<f64> {
            let t = self.model.trace(&w, self.inputs[i], Mode::Eval)?;
            Ok(gap(&self.anchors[i], &t.output).0)
        });
        let mut total = 0.0;
        for v in per {
            total += v?;
        }
        Ok(total / self.inputs.len().max(1) as f64)
    }

    fn value_and_grad(&self, delta: &Weights) -> Result<(f64, Weights)> {
        let w = shifted(&self.model.weights, delta);
        let per = self.exec.map_indexed(self.inputs.len(), |i| -> Result<(f64, Weights)> {
            let t = self.model.trace(&w, self.inputs[i], Mode::Eval)?;
            let (l, d_out) = gap(&self.anchors[i], &t.output);
            Ok((l, self.model.backward(&w, &t, d_out.view(), None)))
        });
        let (l, mut g) = sum_mean(per)?;
        g.zero_outside(self.scope);
        Ok((l, g))
    }

    fn run(&self, cfg: &PerturbationConfig, seed: u64) -> Result<RppOutcome> {
        let eps = cfg.epsilon;
        let mut delta = sample_perturbation(&self.model.weights, eps, self.scope, seed);
        if eps == 0.0 {
            return Ok(RppOutcome {
                loss: 0.0,
                initial: 0.0,
                steps: vec![0.0; cfg.ascent_steps],
                delta,
            });
        }
        let initial = self.value(&delta)?;
        let mut current = initial;
        let mut steps = Vec::with_capacity(cfg.ascent_steps);
        for _ in 0..cfg.ascent_steps {
            let grad = match self.value_and_grad(&delta) {
                Ok((_, g)) if g.is_finite() => g,
                _ => {
                    warn!("non-finite perturbation gradient; using the sampled perturbation");
                    let delta = sample_perturbation(&self.model.weights, eps, self.scope, seed);
                    return Ok(RppOutcome {
                        loss: initial,
                        initial,
                        steps,
                        delta,
                    });
                }
            };
            let gnorm = grad.norm(self.scope);
            if gnorm == 0.0 {
                steps.push(current);
                continue;
            }
            let mut step = cfg.step_size * eps / gnorm;
            let mut accepted = None;
            for _ in 0..MAX_HALVINGS {
                let mut cand = delta.clone();
                cand.axpy(step, &grad, TrainScope::All);
                let n = cand.norm(TrainScope::All);
                if n > eps {
                    cand.scale(eps / n);
                }
                let v = self.value(&cand)?;
                if v >= current {
                    accepted = Some((cand, v));
                    break;
                }
                step *= 0.5;
            }
            if let Some((cand, v)) = accepted {
                delta = cand;
                current = v;
            }
            steps.push(current);
        }
        Ok(RppOutcome {
            loss: current,
            initial,
            steps,
            delta,
        })
    }
}

/// Worst-case perturbation loss over `inputs`. Neither the weights nor the
/// advisor states of `model` are touched.
pub fn rpp_loss(
    model: &Model,
    inputs: &[ModelInput<'_>],
    cfg: &PerturbationConfig,
    scope: TrainScope,
    exec: Execution,
) -> Result<RppOutcome> {
    cfg.validate()?;
    let anchors = exec
        .map_indexed(inputs.len(), |i| model.trace(&model.weights, inputs[i], Mode::Eval).map(|t| t.output))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Search {
        model,
        inputs,
        anchors: &anchors,
        scope,
        exec,
    }
    .run(cfg, cfg.seed)
}

/// Losses, gradient and advisor pairs of one training step.
pub struct CompositeStep {
    pub recon: f64,
    pub rpp: f64,
    pub total: f64,
    /// Restricted to the training scope.
    pub grads: Weights,
    /// Per block, the `(phi(K), V)` pairs of every input in the batch.
    pub key_values: Vec<Vec<(Array2<f64>, Array2<f64>)>>,
}

/// `recon + lambda * rpp` with `delta` held fixed at its ascended value, and
/// its gradient. Anchors are evaluated in train mode so the same pass yields
/// the advisor pairs.
pub fn composite_step(
    model: &Model,
    inputs: &[ModelInput<'_>],
    cfg: &PerturbationConfig,
    scope: TrainScope,
    exec: Execution,
    step_seed: u64,
) -> Result<CompositeStep> {
    cfg.validate()?;
    let traces: Vec<Trace> = exec
        .map_indexed(inputs.len(), |i| model.trace(&model.weights, inputs[i], Mode::Train))
        .into_iter()
        .collect::<Result<_>>()?;
    let anchors: Vec<Array2<f64>> = traces.iter().map(|t| t.output.clone()).collect();

    let lambda = cfg.lambda_rpp;
    let delta = if cfg.is_off() {
        None
    } else {
        let search = Search {
            model,
            inputs,
            anchors: &anchors,
            scope,
            exec,
        };
        Some(search.run(cfg, seed::derive(cfg.seed, &[step_seed]))?.delta)
    };
    let perturbed = delta.as_ref().map(|d| shifted(&model.weights, d));

    let per = exec.map_indexed(inputs.len(), |i| -> Result<(f64, f64, Weights)> {
        let tr = &traces[i];
        let (recon, d_recon) = recon_loss_grad(&tr.tokens, &tr.output);
        // the target is the input tokens, so it moves with the embedder
        let d_tok = d_recon.mapv(|x| -x);
        let Some(pw) = &perturbed else {
            let g = model.backward(&model.weights, tr, d_recon.view(), Some(d_tok.view()));
            return Ok((recon, 0.0, g));
        };
        let pt = model.trace(pw, inputs[i], Mode::Eval)?;
        // d/d(theta) of ||a(theta) - b(theta + delta)||^2 / n
        let (rpp, d_b) = gap(&tr.output, &pt.output);
        let d_out = &d_recon - &(&d_b * lambda);
        let mut g = model.backward(&model.weights, tr, d_out.view(), Some(d_tok.view()));
        let d_pert = &d_b * lambda;
        g.axpy(1.0, &model.backward(pw, &pt, d_pert.view(), None), TrainScope::All);
        Ok((recon, rpp, g))
    });

    let mut recon = 0.0;
    let mut rpp = 0.0;
    let mut parts = Vec::with_capacity(per.len());
    for r in per {
        let (a, b, g) = r?;
        recon += a;
        rpp += b;
        parts.push(Ok((0.0, g)));
    }
    let n = inputs.len().max(1) as f64;
    let (_, mut grads) = sum_mean(parts)?;
    grads.zero_outside(scope);
    let (recon, rpp) = (recon / n, rpp / n);
    let total = recon + lambda * rpp;
    if !total.is_finite() {
        return Err(Error::NonFinite("composite loss".into()));
    }

    let blocks = model.config.blocks;
    let mut key_values = vec![Vec::with_capacity(inputs.len()); blocks];
    for tr in &traces {
        for (b, kv) in tr.key_values().into_iter().enumerate() {
            if let Some(p) = kv {
                key_values[b].push(p);
            }
        }
    }
    Ok(CompositeStep {
        recon,
        rpp,
        total,
        grads,
        key_values,
    })
}

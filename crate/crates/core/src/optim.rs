//! AdamW with a single step-drop learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::model::{TrainScope, Weights};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    pub dropped: f64,
    /// Fraction of the epoch budget after which `dropped` applies.
    pub drop_fraction: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            initial: 1e-4,
            dropped: 1e-5,
            drop_fraction: 0.8,
        }
    }
}

impl LrSchedule {
    /// First epoch (0-based) that runs at the dropped rate.
    pub fn drop_epoch(&self, epochs: usize) -> usize {
        (self.drop_fraction * epochs as f64).round() as usize
    }

    pub fn rate(&self, epoch: usize, epochs: usize) -> f64 {
        if epoch < self.drop_epoch(epochs) {
            self.initial
        } else {
            self.dropped
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Weights,
    v: Weights,
    t: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, like: &Weights) -> Self {
        Self {
            config,
            m: like.zeros_like(),
            v: like.zeros_like(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One decoupled-weight-decay step on the tensors in `scope`.
    pub fn step(&mut self, weights: &mut Weights, grads: &Weights, lr: f64, scope: TrainScope) {
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let params = weights.tensors_mut();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for ((((name, p), (_, m)), (_, v)), (_, g)) in params.into_iter().zip(ms).zip(vs).zip(grads.tensors()) {
            if !scope.includes(&name) {
                continue;
            }
            // norm gains and biases are not decayed
            let decay = if name.ends_with(".w") || name.ends_with(".wq") || name.ends_with(".wk")
                || name.ends_with(".wv") || name.ends_with(".wo")
            {
                c.weight_decay
            } else {
                0.0
            };
            for i in 0..p.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= lr * (mh / (vh.sqrt() + c.eps) + decay * p[i]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelConfig};

    #[test]
    fn schedule_drops_at_fraction() {
        let s = LrSchedule::default();
        assert_eq!(s.drop_epoch(200), 160);
        assert_eq!(s.rate(159, 200), 1e-4);
        assert_eq!(s.rate(160, 200), 1e-5);
        assert_eq!(s.drop_epoch(1000), 800);
    }

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let cfg = ModelConfig {
            dim: 4,
            features: 2,
            blocks: 1,
            embed_hidden: 4,
            centers: 2,
            group_size: 1,
            ..ModelConfig::default()
        };
        let model = Model::new(cfg).unwrap();
        let mut w = model.weights.clone();
        let mut g = w.zeros_like();
        g.fill(3.0);
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
            &w,
        );
        opt.step(&mut w, &g, 0.01, TrainScope::EncoderDecoder);
        for ((n, a), (_, b)) in w.tensors().into_iter().zip(model.weights.tensors()) {
            for (x, y) in a.iter().zip(b) {
                let want = if n.starts_with("embedder.") { 0.0 } else { -0.01 };
                assert!((x - y - want).abs() < 1e-9, "{n}");
            }
        }
    }
}

//! Trainable weights and a name-addressed flat view over them.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;

use super::ModelConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `in x out`
    pub w: Array2<f64>,
    pub b: Option<Array1<f64>>,
}

impl Linear {
    fn init(rng: &mut impl Rng, fan_in: usize, fan_out: usize, gain: f64, bias: bool) -> Self {
        let std = gain / (fan_in as f64).sqrt();
        let w = Array2::from_shape_simple_fn((fan_in, fan_out), || {
            std * rng.sample::<f64, _>(StandardNormal)
        });
        Self {
            w,
            b: bias.then(|| Array1::zeros(fan_out)),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [f64])>) {
        out.push((format!("{prefix}.w"), slice(&self.w)));
        if let Some(b) = &self.b {
            out.push((format!("{prefix}.b"), b.as_slice().unwrap()));
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [f64])>) {
        out.push((format!("{prefix}.w"), self.w.as_slice_mut().unwrap()));
        if let Some(b) = &mut self.b {
            out.push((format!("{prefix}.b"), b.as_slice_mut().unwrap()));
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

impl LayerNorm {
    fn new(dim: usize) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [f64])>) {
        out.push((format!("{prefix}.gamma"), self.gamma.as_slice().unwrap()));
        out.push((format!("{prefix}.beta"), self.beta.as_slice().unwrap()));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [f64])>) {
        out.push((format!("{prefix}.gamma"), self.gamma.as_slice_mut().unwrap()));
        out.push((format!("{prefix}.beta"), self.beta.as_slice_mut().unwrap()));
    }
}

/// Pre-normalized attention sublayer: norm, q/k/v projections, output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub norm: LayerNorm,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
}

impl AttentionWeights {
    fn init(rng: &mut impl Rng, d: usize, out_gain: f64) -> Self {
        let mut proj = |gain: f64| Linear::init(rng, d, d, gain, false).w;
        Self {
            norm: LayerNorm::new(d),
            wq: proj(1.0),
            wk: proj(1.0),
            wv: proj(1.0),
            wo: proj(out_gain),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [f64])>) {
        self.norm.visit(&format!("{prefix}.norm"), out);
        for (n, a) in [("wq", &self.wq), ("wk", &self.wk), ("wv", &self.wv), ("wo", &self.wo)] {
            out.push((format!("{prefix}.{n}"), slice(a)));
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [f64])>) {
        self.norm.visit_mut(&format!("{prefix}.norm"), out);
        for (n, a) in [
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("wo", &mut self.wo),
        ] {
            out.push((format!("{prefix}.{n}"), a.as_slice_mut().unwrap()));
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub attn: AttentionWeights,
    pub norm2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedderWeights {
    pub point1: Linear,
    pub point2: Linear,
    pub pos1: Linear,
    pub pos2: Linear,
    pub kal: Option<AttentionWeights>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub embedder: EmbedderWeights,
    pub blocks: Vec<BlockWeights>,
}

/// Which weights a training step may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainScope {
    /// Embedder and encoder-decoder.
    All,
    /// Encoder-decoder only; the embedder acts as a fixed feature extractor.
    #[default]
    EncoderDecoder,
}

impl TrainScope {
    pub fn includes(self, name: &str) -> bool {
        match self {
            TrainScope::All => true,
            TrainScope::EncoderDecoder => !name.starts_with("embedder."),
        }
    }
}

fn slice(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("weights are stored in standard layout")
}

impl Weights {
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.dim;
        let h = cfg.embed_hidden;
        let embedder = EmbedderWeights {
            point1: Linear::init(rng, 3, h, 1.0, true),
            point2: Linear::init(rng, h, d, 1.0, true),
            pos1: Linear::init(rng, 3, d, 1.0, true),
            pos2: Linear::init(rng, d, d, 1.0, true),
            kal: cfg.kal.then(|| AttentionWeights::init(rng, d, 1.0)),
        };
        let blocks = (0..cfg.blocks)
            .map(|_| BlockWeights {
                attn: AttentionWeights::init(rng, d, cfg.residual_gain),
                norm2: LayerNorm::new(d),
                ff1: Linear::init(rng, d, 4 * d, 1.0, true),
                ff2: Linear::init(rng, 4 * d, d, cfg.residual_gain, true),
            })
            .collect();
        Self { embedder, blocks }
    }

    /// Every trainable tensor, flattened, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        let e = &self.embedder;
        e.point1.visit("embedder.point1", &mut out);
        e.point2.visit("embedder.point2", &mut out);
        e.pos1.visit("embedder.pos1", &mut out);
        e.pos2.visit("embedder.pos2", &mut out);
        if let Some(k) = &e.kal {
            k.visit("embedder.kal", &mut out);
        }
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("blocks.{i}");
            b.attn.visit(&format!("{p}.attn"), &mut out);
            b.norm2.visit(&format!("{p}.norm2"), &mut out);
            b.ff1.visit(&format!("{p}.ff1"), &mut out);
            b.ff2.visit(&format!("{p}.ff2"), &mut out);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        let e = &mut self.embedder;
        e.point1.visit_mut("embedder.point1", &mut out);
        e.point2.visit_mut("embedder.point2", &mut out);
        e.pos1.visit_mut("embedder.pos1", &mut out);
        e.pos2.visit_mut("embedder.pos2", &mut out);
        if let Some(k) = &mut e.kal {
            k.visit_mut("embedder.kal", &mut out);
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = format!("blocks.{i}");
            b.attn.visit_mut(&format!("{p}.attn"), &mut out);
            b.norm2.visit_mut(&format!("{p}.norm2"), &mut out);
            b.ff1.visit_mut(&format!("{p}.ff1"), &mut out);
            b.ff2.visit_mut(&format!("{p}.ff2"), &mut out);
        }
        out
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }

    pub fn fill(&mut self, value: f64) {
        for (_, t) in self.tensors_mut() {
            t.fill(value);
        }
    }

    /// `self += scale * other` over tensors in `scope`.
    pub fn axpy(&mut self, scale: f64, other: &Weights, scope: TrainScope) {
        for ((name, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            if scope.includes(&name) {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += scale * y;
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, t) in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn dot(&self, other: &Weights, scope: TrainScope) -> f64 {
        self.tensors()
            .into_iter()
            .zip(other.tensors())
            .filter(|((n, _), _)| scope.includes(n))
            .map(|((_, a), (_, b))| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>())
            .sum()
    }

    pub fn norm(&self, scope: TrainScope) -> f64 {
        self.dot(self, scope).sqrt()
    }

    /// Number of scalars in `scope`.
    pub fn count(&self, scope: TrainScope) -> usize {
        self.tensors()
            .iter()
            .filter(|(n, _)| scope.includes(n))
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn zero_outside(&mut self, scope: TrainScope) {
        for (name, t) in self.tensors_mut() {
            if !scope.includes(&name) {
                t.fill(0.0);
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }

    /// Round every entry to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for (_, t) in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x = *x as f32 as f64);
        }
    }
}

//! Token embedder, stacked advisor-attention encoder-decoder, reconstruction
//! loss and exact parameter gradients.
//!
//! The trainable weights live in [`Weights`]. Random feature maps and advisor
//! states are owned by [`Model`] next to them but are never part of the
//! trainable set: feature maps are fixed at construction and advisors change
//! only through [`Model::update_advisors`].

mod checkpoint;
mod layers;
mod weights;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use weights::{
    AttentionWeights, BlockWeights, EmbedderWeights, LayerNorm, Linear, TrainScope, Weights,
};

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::advisor::{AdvisorReadout, AdvisorState, DEFAULT_ALPHA, DEFAULT_BETA};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::kernel_attention::{RandomFeatureMap, DEFAULT_STABILIZER};
use crate::pointcloud::{GroupedCloud, GroupingParams, Point, RadiusMode};
use crate::seed;

use layers::{BlockCache, EmbedCache, Mixer};

/// Token mixing used inside the encoder-decoder blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockAttention {
    /// Queries read from a per-layer advisor state.
    #[default]
    Advisor,
    /// Plain linear kernel attention over the cloud's own tokens.
    Linear,
}

/// Architecture and the hyperparameter record stored with every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    pub features: usize,
    pub blocks: usize,
    pub embed_hidden: usize,
    pub centers: usize,
    pub group_size: usize,
    pub eta: f64,
    pub radius_mode: RadiusMode,
    pub alpha: f64,
    pub beta: f64,
    pub attention: BlockAttention,
    /// Global kernel-attention layer at the end of the embedder.
    pub kal: bool,
    pub readout: AdvisorReadout,
    /// Norm that projected queries and keys are scaled toward before the
    /// feature map (`scale = kernel_scale / sqrt(dim)`).
    pub kernel_scale: f64,
    /// Init gain of the projections that write into the residual stream.
    pub residual_gain: f64,
    pub stabilizer: f64,
    pub seed: u64,
    /// Recorded for reference; the perturbation loss reads its own config.
    pub epsilon: f64,
    pub lambda_rpp: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            features: 10,
            blocks: 4,
            embed_hidden: 128,
            centers: 256,
            group_size: 32,
            eta: 10.0,
            radius_mode: RadiusMode::PerCenter,
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            attention: BlockAttention::Advisor,
            kal: true,
            readout: AdvisorReadout::Raw,
            kernel_scale: 0.5,
            residual_gain: 0.5,
            stabilizer: DEFAULT_STABILIZER,
            seed: 0,
            epsilon: 0.1,
            lambda_rpp: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.dim == 0 || self.features == 0 || self.embed_hidden == 0 {
            return bad("dim, features and embed_hidden must be positive");
        }
        if self.blocks == 0 {
            return bad("at least one block is required");
        }
        if self.centers < 2 || self.group_size == 0 {
            return bad("need centers >= 2 and group_size >= 1");
        }
        if !(self.eta >= 0.0) || !(self.kernel_scale > 0.0) || !(self.stabilizer >= 0.0) {
            return bad("eta, kernel_scale and stabilizer must be non-negative (kernel_scale positive)");
        }
        if !(0.0..=1.0).contains(&self.alpha) || !(self.beta > 0.0 && self.beta <= 1.0) {
            return bad("alpha must lie in [0, 1] and beta in (0, 1]");
        }
        Ok(())
    }

    pub fn grouping(&self) -> GroupingParams {
        GroupingParams {
            centers: self.centers,
            group_size: self.group_size,
            eta: self.eta,
            radius_mode: self.radius_mode,
        }
    }

    fn qk_scale(&self) -> f64 {
        self.kernel_scale / (self.dim as f64).sqrt()
    }
}

/// `n` feature tokens of width `d` and the group centers they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub tokens: Array2<f64>,
    pub centers: Vec<Point>,
}

impl TokenBatch {
    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// What the network is run on: raw groups (embedder included) or tokens.
#[derive(Clone, Copy)]
pub enum ModelInput<'a> {
    Groups(&'a GroupedCloud),
    Tokens(&'a TokenBatch),
}

pub struct ForwardOutput {
    pub recon: TokenBatch,
    /// Per block, in train mode with advisor attention: `(phi(K), V)`.
    pub key_values: Vec<Option<(Array2<f64>, Array2<f64>)>>,
}

/// Cached activations of one evaluation, consumed by [`Model::backward`].
pub struct Trace {
    pub tokens: Array2<f64>,
    pub output: Array2<f64>,
    embed: Option<EmbedCache>,
    blocks: Vec<BlockCache>,
}

impl Trace {
    pub fn key_values(&self) -> Vec<Option<(Array2<f64>, Array2<f64>)>> {
        self.blocks
            .iter()
            .map(|b| b.attn.key_value().map(|(k, v)| (k.clone(), v.clone())))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub weights: Weights,
    kal_map: Option<RandomFeatureMap>,
    maps: Vec<RandomFeatureMap>,
    advisors: Vec<AdvisorState>,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(seed::derive(config.seed, &[seed::label("weights")]));
        let weights = Weights::init(&config, &mut rng);
        let kal_map = if config.kal {
            Some(RandomFeatureMap::new(
                config.dim,
                config.features,
                seed::derive(config.seed, &[seed::label("kal-features")]),
            )?)
        } else {
            None
        };
        let maps = (0..config.blocks)
            .map(|i| {
                RandomFeatureMap::new(
                    config.dim,
                    config.features,
                    seed::derive(config.seed, &[seed::label("block-features"), i as u64]),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let advisors = (0..config.blocks)
            .map(|_| AdvisorState::new(config.dim, config.features, config.alpha, config.beta))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            weights,
            kal_map,
            maps,
            advisors,
        })
    }

    pub fn advisors(&self) -> &[AdvisorState] {
        &self.advisors
    }

    pub fn advisors_mut(&mut self) -> &mut [AdvisorState] {
        &mut self.advisors
    }

    pub fn feature_maps(&self) -> &[RandomFeatureMap] {
        &self.maps
    }

    pub fn kal_feature_map(&self) -> Option<&RandomFeatureMap> {
        self.kal_map.as_ref()
    }

    /// Blocks `0..encoder_blocks()` form the encoder, the rest the decoder.
    pub fn encoder_blocks(&self) -> usize {
        self.config.blocks.div_ceil(2)
    }

    fn mixer(&self, block: usize) -> Mixer<'_> {
        match self.config.attention {
            BlockAttention::Advisor => Mixer::Advisor {
                state: &self.advisors[block],
                readout: self.config.readout,
                stabilizer: self.config.stabilizer,
            },
            BlockAttention::Linear => Mixer::Linear {
                stabilizer: self.config.stabilizer,
            },
        }
    }

    pub fn embed_groups(&self, grouped: &GroupedCloud) -> Result<TokenBatch> {
        let (tokens, _) = self.embed_with(&self.weights, grouped);
        check_finite(&tokens, "embedder")?;
        Ok(TokenBatch {
            tokens,
            centers: grouped.centers.clone(),
        })
    }

    fn embed_with(&self, weights: &Weights, grouped: &GroupedCloud) -> (Array2<f64>, EmbedCache) {
        let points = points_matrix(&grouped.points);
        let centers = points_matrix(&grouped.centers);
        layers::embed_fwd(
            points,
            centers,
            grouped.group_size,
            &weights.embedder,
            self.kal_map.as_ref(),
            self.config.stabilizer,
            self.config.qk_scale(),
        )
    }

    /// Run the encoder-decoder on tokens.
    pub fn forward(&self, tokens: &TokenBatch, mode: Mode) -> Result<ForwardOutput> {
        let trace = self.trace(&self.weights, ModelInput::Tokens(tokens), mode)?;
        let key_values = match mode {
            Mode::Train => trace.key_values(),
            Mode::Eval => vec![None; self.config.blocks],
        };
        Ok(ForwardOutput {
            recon: TokenBatch {
                tokens: trace.output,
                centers: tokens.centers.clone(),
            },
            key_values,
        })
    }

    /// Evaluate with explicit weights, keeping every activation for backward.
    pub fn trace(&self, weights: &Weights, input: ModelInput<'_>, mode: Mode) -> Result<Trace> {
        let (tokens, embed) = match input {
            ModelInput::Groups(g) => {
                let (t, c) = self.embed_with(weights, g);
                check_finite(&t, "embedder")?;
                (t, Some(c))
            }
            ModelInput::Tokens(t) => (t.tokens.clone(), None),
        };
        let want_kv = mode == Mode::Train && self.config.attention == BlockAttention::Advisor;
        let scale = self.config.qk_scale();
        let mut x = tokens.clone();
        let mut blocks = Vec::with_capacity(self.config.blocks);
        for (i, bw) in weights.blocks.iter().enumerate() {
            let (y, cache) = layers::block_fwd(x.view(), bw, &self.maps[i], self.mixer(i), scale, want_kv);
            check_finite(&y, &format!("block {i}"))?;
            blocks.push(cache);
            x = y;
        }
        Ok(Trace {
            tokens,
            output: x,
            embed,
            blocks,
        })
    }

    /// Gradient of a loss with respect to every trainable weight, given the
    /// loss gradient on the reconstruction (`d_out`) and, optionally, a direct
    /// gradient on the input tokens (`d_tokens`, e.g. from a reconstruction
    /// target that itself depends on the embedder).
    pub fn backward(
        &self,
        weights: &Weights,
        trace: &Trace,
        d_out: ArrayView2<f64>,
        d_tokens: Option<ArrayView2<f64>>,
    ) -> Weights {
        let mut grads = weights.zeros_like();
        let scale = self.config.qk_scale();
        let mut d = d_out.to_owned();
        for i in (0..trace.blocks.len()).rev() {
            d = layers::block_bwd(
                &trace.blocks[i],
                &weights.blocks[i],
                &self.maps[i],
                self.mixer(i),
                scale,
                d.view(),
                &mut grads.blocks[i],
            );
        }
        if let Some(extra) = d_tokens {
            d += &extra;
        }
        if let Some(ec) = &trace.embed {
            layers::embed_bwd(
                ec,
                &weights.embedder,
                self.kal_map.as_ref(),
                self.config.stabilizer,
                scale,
                d.view(),
                &mut grads.embedder,
            );
        }
        grads
    }

    /// Mean reconstruction loss over `inputs` and its exact gradient.
    pub fn recon_gradients(&self, inputs: &[ModelInput<'_>], exec: Execution) -> Result<(f64, Weights)> {
        let per = exec.map_indexed(inputs.len(), |i| -> Result<(f64, Weights)> {
            let trace = self.trace(&self.weights, inputs[i], Mode::Eval)?;
            let (loss, d_out) = recon_loss_grad(&trace.tokens, &trace.output);
            let d_tok = d_out.mapv(|x| -x);
            Ok((loss, self.backward(&self.weights, &trace, d_out.view(), Some(d_tok.view()))))
        });
        sum_mean(per)
    }

    /// Apply one advisor update per block from the concatenated `(phi(K), V)`
    /// pairs of a training step. All-or-nothing: on error no advisor changes.
    pub fn update_advisors(&mut self, pairs: &[Vec<(Array2<f64>, Array2<f64>)>]) -> Result<()> {
        if self.config.attention != BlockAttention::Advisor {
            return Ok(());
        }
        let mut next = self.advisors.clone();
        for (i, adv) in next.iter_mut().enumerate() {
            let layer = &pairs[i];
            if layer.is_empty() {
                continue;
            }
            let phis: Vec<_> = layer.iter().map(|(p, _)| p.view()).collect();
            let vals: Vec<_> = layer.iter().map(|(_, v)| v.view()).collect();
            let phi = concatenate(Axis(0), &phis).map_err(|e| Error::Argument(e.to_string()))?;
            let v = concatenate(Axis(0), &vals).map_err(|e| Error::Argument(e.to_string()))?;
            adv.update(phi.view(), v.view())?;
        }
        self.advisors = next;
        Ok(())
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut Weights, &mut Vec<RandomFeatureMap>, &mut Option<RandomFeatureMap>, &mut Vec<AdvisorState>) {
        (&mut self.weights, &mut self.maps, &mut self.kal_map, &mut self.advisors)
    }
}

pub(crate) fn sum_mean(per: Vec<Result<(f64, Weights)>>) -> Result<(f64, Weights)> {
    let n = per.len().max(1) as f64;
    let mut total = 0.0;
    let mut acc: Option<Weights> = None;
    for r in per {
        let (l, g) = r?;
        total += l;
        match &mut acc {
            None => acc = Some(g),
            Some(a) => a.axpy(1.0, &g, TrainScope::All),
        }
    }
    let mut g = acc.ok_or_else(|| Error::Argument("empty batch".into()))?;
    g.scale(1.0 / n);
    if !g.is_finite() || !total.is_finite() {
        return Err(Error::NonFinite("gradient".into()));
    }
    Ok((total / n, g))
}

fn check_finite(a: &Array2<f64>, what: &str) -> Result<()> {
    if a.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("activations of {what}")))
    }
}

fn points_matrix(points: &[Point]) -> Array2<f64> {
    Array2::from_shape_fn((points.len(), 3), |(i, k)| points[i][k])
}

/// Mean squared error over all `n * d` entries.
pub fn recon_loss(input: &TokenBatch, output: &TokenBatch) -> f64 {
    mse(&input.tokens, &output.tokens)
}

pub(crate) fn mse(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim(), "reconstruction shape mismatch");
    let n = a.len().max(1) as f64;
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n
}

/// Loss and its gradient with respect to `output`.
pub(crate) fn recon_loss_grad(input: &Array2<f64>, output: &Array2<f64>) -> (f64, Array2<f64>) {
    let n = input.len().max(1) as f64;
    let diff = output - input;
    let loss = diff.iter().map(|x| x * x).sum::<f64>() / n;
    (loss, diff * (2.0 / n))
}

/// Squared L2 distance between each input token and its reconstruction.
pub fn token_scores(input: &TokenBatch, output: &TokenBatch) -> Vec<f64> {
    input
        .tokens
        .axis_iter(Axis(0))
        .zip(output.tokens.axis_iter(Axis(0)))
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointcloud::{prepare_groups, Label, PointCloud};
    use rand::Rng;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            dim: 8,
            features: 8,
            blocks: 2,
            embed_hidden: 12,
            centers: 6,
            group_size: 4,
            seed: 3,
            ..ModelConfig::default()
        }
    }

    pub(crate) fn sample_groups(cfg: &ModelConfig, seed: u64) -> GroupedCloud {
        let mut rng = seed::rng(seed);
        let pts: Vec<Point> = (0..64)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-0.5..0.5)])
            .collect();
        let cloud = PointCloud::new(pts, Label::Normal).unwrap();
        prepare_groups(&cloud, &cfg.grouping(), seed).unwrap()
    }

    fn with_random_advisors(model: &mut Model, seed: u64) {
        let mut rng = seed::rng(seed);
        for adv in model.advisors_mut() {
            let s = Array2::from_shape_simple_fn((adv.dim(), adv.features()), || rng.random_range(-0.5..0.5));
            adv.set_matrix(s);
        }
    }

    #[test]
    fn zero_residual_branches_give_identity() {
        let mut model = Model::new(tiny_config()).unwrap();
        for b in &mut model.weights.blocks {
            b.ff2.w.fill(0.0);
            b.ff2.b.as_mut().unwrap().fill(0.0);
        }
        let g = sample_groups(&model.config, 1);
        let tokens = model.embed_groups(&g).unwrap();
        let out = model.forward(&tokens, Mode::Eval).unwrap();
        assert_eq!(out.recon.tokens, tokens.tokens);
        assert_eq!(recon_loss(&tokens, &out.recon), 0.0);
    }

    #[test]
    fn eval_is_deterministic_and_train_exposes_pairs() {
        let mut model = Model::new(tiny_config()).unwrap();
        with_random_advisors(&mut model, 4);
        let g = sample_groups(&model.config, 2);
        let t = model.embed_groups(&g).unwrap();
        let a = model.forward(&t, Mode::Eval).unwrap();
        let b = model.forward(&t, Mode::Eval).unwrap();
        assert_eq!(a.recon, b.recon);
        assert!(a.key_values.iter().all(Option::is_none));
        let tr = model.forward(&t, Mode::Train).unwrap();
        assert_eq!(tr.recon, a.recon);
        for kv in tr.key_values {
            let (phi, v) = kv.unwrap();
            assert_eq!(phi.dim(), (t.len(), model.config.features));
            assert_eq!(v.dim(), (t.len(), model.config.dim));
        }
    }

    #[test]
    fn permutations_within_and_across_groups() {
        let mut model = Model::new(tiny_config()).unwrap();
        with_random_advisors(&mut model, 5);
        let g = sample_groups(&model.config, 3);
        let t = model.embed_groups(&g).unwrap();

        // shuffle points inside group 0
        let mut inner = g.clone();
        inner.points[..g.group_size].reverse();
        let t2 = model.embed_groups(&inner).unwrap();
        assert!((&t.tokens - &t2.tokens).iter().all(|x| x.abs() < 1e-12));

        let perm: Vec<usize> = (0..g.len()).rev().collect();
        let tp = model.embed_groups(&g.permuted(&perm)).unwrap();
        let expected = t.tokens.select(Axis(0), &perm);
        assert!((&tp.tokens - &expected).iter().all(|x| x.abs() < 1e-12));
        let r = model.forward(&t, Mode::Eval).unwrap().recon.tokens.select(Axis(0), &perm);
        let rp = model.forward(&tp, Mode::Eval).unwrap().recon.tokens;
        assert!((&r - &rp).iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn identical_groups_differ_only_by_position() {
        let mut cfg = tiny_config();
        cfg.kal = false;
        let mut model = Model::new(cfg).unwrap();
        let mut g = sample_groups(&model.config, 6);
        let gs = g.group_size;
        let first: Vec<Point> = g.group(0).to_vec();
        g.points[gs..2 * gs].copy_from_slice(&first);
        let t = model.embed_groups(&g).unwrap();
        assert!((&t.tokens.row(0) - &t.tokens.row(1)).iter().any(|x| x.abs() > 1e-9));
        let e = &mut model.weights.embedder;
        e.pos2.w.fill(0.0);
        e.pos2.b.as_mut().unwrap().fill(0.0);
        let t = model.embed_groups(&g).unwrap();
        assert_eq!(t.tokens.row(0), t.tokens.row(1));
    }

    #[test]
    fn recon_loss_closed_forms() {
        let a = TokenBatch {
            tokens: Array2::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f64),
            centers: vec![[0.0; 3]; 3],
        };
        let mut b = a.clone();
        assert_eq!(recon_loss(&a, &b), 0.0);
        b.tokens.mapv_inplace(|x| x + 0.5);
        assert!((recon_loss(&a, &b) - 0.25).abs() < 1e-15);
        assert_eq!(recon_loss(&a, &b), recon_loss(&b, &a));
    }

    #[test]
    fn advisor_updates_are_atomic() {
        let mut model = Model::new(tiny_config()).unwrap();
        let g = sample_groups(&model.config, 7);
        let t = model.embed_groups(&g).unwrap();
        let kv = model.forward(&t, Mode::Train).unwrap().key_values;
        let mut pairs: Vec<Vec<_>> = kv.into_iter().map(|p| vec![p.unwrap()]).collect();
        model.update_advisors(&pairs).unwrap();
        assert!(model.advisors().iter().all(|a| a.update_count() == 1));
        pairs[1][0].1[[0, 0]] = f64::NAN;
        let before = model.advisors().to_vec();
        assert!(model.update_advisors(&pairs).is_err());
        assert_eq!(model.advisors(), &before[..]);
    }
}

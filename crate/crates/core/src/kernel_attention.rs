//! Positive random features and linear-cost kernel attention.
//!
//! The feature map is
//! `phi(x) = exp(-|x|^2 / 2) * [exp(w_1 . x), ..., exp(w_m . x)] / sqrt(m)`
//! with Gaussian rows `w_i`, so that `E[phi(q) . phi(k)] = exp(q . k)`.
//! Attention with the induced kernel is computed in linear time by first
//! summarizing keys and values (`sum_i v_i phi(k_i)^T` and `sum_i phi(k_i)`)
//! and then visiting each query once. The quadratic [`kernel_oracle`] and
//! [`softmax_oracle`] exist as references.

use log::warn;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::seed;

/// Exponent clamp applied before `exp` in the feature map.
pub const EXP_CLAMP: f64 = 30.0;

/// Default denominator stabilizer for [`linear_attention`].
pub const DEFAULT_STABILIZER: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct RandomFeatureMap {
    /// `m x d`, rows i.i.d. standard normal.
    projections: Array2<f64>,
    seed: u64,
}

impl RandomFeatureMap {
    pub fn new(dim: usize, features: usize, seed: u64) -> Result<Self> {
        if features == 0 || dim == 0 {
            return Err(Error::Argument(format!(
                "feature map needs m >= 1 and d >= 1 (got m={features}, d={dim})"
            )));
        }
        let mut rng = seed::rng(seed);
        let projections =
            Array2::from_shape_simple_fn((features, dim), || StandardNormal.sample(&mut rng));
        Ok(Self { projections, seed })
    }

    /// Rebuild from stored projections (checkpoint load).
    pub fn from_projections(projections: Array2<f64>, seed: u64) -> Result<Self> {
        if projections.nrows() == 0 || projections.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("invalid feature projections".into()));
        }
        Ok(Self { projections, seed })
    }

    pub fn features(&self) -> usize {
        self.projections.nrows()
    }

    pub fn dim(&self) -> usize {
        self.projections.ncols()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn projections(&self) -> &Array2<f64> {
        &self.projections
    }

    /// Feature vector of a single input. All entries are strictly positive.
    pub fn phi(&self, x: ArrayView1<f64>) -> Array1<f64> {
        let x2 = x.view().insert_axis(Axis(0));
        let out = self.phi_rows(x2);
        out.values.index_axis_move(Axis(0), 0)
    }

    /// Row-wise feature map of an `n x d` matrix.
    pub fn phi_rows(&self, x: ArrayView2<f64>) -> FeatureRows {
        let half_log_m = 0.5 * (self.features() as f64).ln();
        let mut e = x.dot(&self.projections.t());
        let mut clamped = None::<Array2<bool>>;
        for (mut row, xr) in e.axis_iter_mut(Axis(0)).zip(x.axis_iter(Axis(0))) {
            let half_sq = 0.5 * xr.dot(&xr);
            row.mapv_inplace(|v| v - half_sq);
        }
        let mut n_clamped = 0usize;
        if e.iter().any(|v| v.abs() > EXP_CLAMP || !v.is_finite()) {
            let mask = e.mapv(|v| !(v.abs() <= EXP_CLAMP));
            n_clamped = mask.iter().filter(|&&b| b).count();
            e.mapv_inplace(|v| if v.is_nan() { -EXP_CLAMP } else { v.clamp(-EXP_CLAMP, EXP_CLAMP) });
            clamped = Some(mask);
            warn!("random features clamped: entries={n_clamped} bound={EXP_CLAMP}");
        }
        let values = e.mapv(|v| (v - half_log_m).exp());
        FeatureRows {
            values,
            clamped,
            n_clamped,
        }
    }

    /// Pull back a gradient on the features to the inputs of [`phi_rows`].
    ///
    /// Clamped entries are constant in the input and contribute nothing.
    pub fn phi_rows_backward(
        &self,
        x: ArrayView2<f64>,
        rows: &FeatureRows,
        d_phi: ArrayView2<f64>,
    ) -> Array2<f64> {
        // d e_ij = d phi_ij * phi_ij;  dx_i = sum_j de_ij (w_j - x_i)
        let mut de = &d_phi * &rows.values;
        if let Some(mask) = &rows.clamped {
            de.zip_mut_with(mask, |v, &m| {
                if m {
                    *v = 0.0
                }
            });
        }
        let mut dx = de.dot(&self.projections);
        let row_sums = de.sum_axis(Axis(1));
        for ((mut dxr, xr), s) in dx.axis_iter_mut(Axis(0)).zip(x.axis_iter(Axis(0))).zip(row_sums) {
            dxr.scaled_add(-s, &xr);
        }
        dx
    }
}

#[derive(Debug, Clone)]
pub struct FeatureRows {
    pub values: Array2<f64>,
    clamped: Option<Array2<bool>>,
    pub n_clamped: usize,
}

/// Query, key and value rows for self-attention.
#[derive(Debug, Clone)]
pub struct AttentionInputs {
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
}

impl AttentionInputs {
    pub fn new(q: Array2<f64>, k: Array2<f64>, v: Array2<f64>) -> Result<Self> {
        let n = q.nrows();
        if k.nrows() != n || v.nrows() != n || q.ncols() != k.ncols() {
            return Err(Error::Argument(format!(
                "attention shapes disagree: q {:?}, k {:?}, v {:?}",
                q.dim(),
                k.dim(),
                v.dim()
            )));
        }
        if q.iter().chain(k.iter()).chain(v.iter()).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("attention inputs".into()));
        }
        Ok(Self { q, k, v })
    }
}

/// Key/value summaries plus per-query denominators, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct LinearAttentionCache {
    /// `d_v x m`: `sum_i v_i phi(k_i)^T`.
    pub summary: Array2<f64>,
    /// `m`: `sum_i phi(k_i)`.
    pub key_sum: Array1<f64>,
    /// `n`: `key_sum . phi(q_l) + stabilizer`.
    pub denom: Array1<f64>,
}

/// Linear-cost attention on precomputed features.
pub fn linear_attention_features(
    phi_q: ArrayView2<f64>,
    phi_k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    stabilizer: f64,
) -> (Array2<f64>, LinearAttentionCache) {
    let summary = v.t().dot(&phi_k);
    let key_sum = phi_k.sum_axis(Axis(0));
    let denom = phi_q.dot(&key_sum).mapv(|x| x + stabilizer);
    let mut out = phi_q.dot(&summary.t());
    for (mut row, &den) in out.axis_iter_mut(Axis(0)).zip(denom.iter()) {
        row.mapv_inplace(|x| x / den);
    }
    (
        out,
        LinearAttentionCache {
            summary,
            key_sum,
            denom,
        },
    )
}

pub struct LinearAttentionGrads {
    pub d_phi_q: Array2<f64>,
    pub d_phi_k: Array2<f64>,
    pub d_v: Array2<f64>,
}

pub fn linear_attention_features_backward(
    phi_q: ArrayView2<f64>,
    phi_k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    out: ArrayView2<f64>,
    cache: &LinearAttentionCache,
    d_out: ArrayView2<f64>,
) -> LinearAttentionGrads {
    // o_l = num_l / den_l with num_l = A phi_q_l, den_l = z . phi_q_l + lambda
    let mut d_num = d_out.to_owned();
    let mut d_den = Array1::<f64>::zeros(out.nrows());
    for l in 0..out.nrows() {
        let den = cache.denom[l];
        d_den[l] = -d_out.row(l).dot(&out.row(l)) / den;
        d_num.row_mut(l).mapv_inplace(|x| x / den);
    }
    let mut d_phi_q = d_num.dot(&cache.summary);
    for (mut row, &dd) in d_phi_q.axis_iter_mut(Axis(0)).zip(d_den.iter()) {
        row.scaled_add(dd, &cache.key_sum);
    }
    let d_summary = d_num.t().dot(&phi_q);
    let d_key_sum = phi_q.t().dot(&d_den);
    let d_v = phi_k.dot(&d_summary.t());
    let mut d_phi_k = v.dot(&d_summary);
    for mut row in d_phi_k.axis_iter_mut(Axis(0)) {
        row += &d_key_sum;
    }
    LinearAttentionGrads {
        d_phi_q,
        d_phi_k,
        d_v,
    }
}

/// Kernel attention in linear time: `o_l = (sum_i v_i phi(k_i)^T) phi(q_l) /
/// (sum_j phi(k_j)^T phi(q_l) + stabilizer)`.
pub fn linear_attention(inputs: &AttentionInputs, map: &RandomFeatureMap) -> Array2<f64> {
    linear_attention_with(inputs, map, DEFAULT_STABILIZER)
}

pub fn linear_attention_with(
    inputs: &AttentionInputs,
    map: &RandomFeatureMap,
    stabilizer: f64,
) -> Array2<f64> {
    let fq = map.phi_rows(inputs.q.view());
    let fk = map.phi_rows(inputs.k.view());
    linear_attention_features(fq.values.view(), fk.values.view(), inputs.v.view(), stabilizer).0
}

/// The `n x n` kernel matrix `kappa(q_l, k_i) = phi(q_l) . phi(k_i)`.
pub fn kernel_matrix(inputs: &AttentionInputs, map: &RandomFeatureMap) -> Array2<f64> {
    let fq = map.phi_rows(inputs.q.view()).values;
    let fk = map.phi_rows(inputs.k.view()).values;
    let n = fq.nrows();
    Array2::from_shape_fn((n, fk.nrows()), |(l, i)| fq.row(l).dot(&fk.row(i)))
}

/// Direct quadratic evaluation of kernel attention. Reference only.
pub fn kernel_oracle(inputs: &AttentionInputs, map: &RandomFeatureMap, stabilizer: f64) -> Array2<f64> {
    let kappa = kernel_matrix(inputs, map);
    weighted_rows(&kappa, &inputs.v, stabilizer)
}

/// Plain softmax attention, `exp(q_l . k_i)` weights. Reference only.
pub fn softmax_oracle(inputs: &AttentionInputs) -> Array2<f64> {
    let logits = inputs.q.dot(&inputs.k.t());
    let mut w = logits.clone();
    for mut row in w.axis_iter_mut(Axis(0)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|x| (x - max).exp());
    }
    weighted_rows(&w, &inputs.v, 0.0)
}

fn weighted_rows(weights: &Array2<f64>, v: &Array2<f64>, stabilizer: f64) -> Array2<f64> {
    let (n, d) = (weights.nrows(), v.ncols());
    let mut out = Array2::zeros((n, d));
    for l in 0..n {
        let mut den = stabilizer;
        for i in 0..weights.ncols() {
            let w = weights[[l, i]];
            den += w;
            for c in 0..d {
                out[[l, c]] += w * v[[i, c]];
            }
        }
        for c in 0..d {
            out[[l, c]] /= den;
        }
    }
    out
}

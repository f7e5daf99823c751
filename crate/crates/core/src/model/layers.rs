//! Forward passes with cached activations and their reverse-mode adjoints.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use super::weights::{AttentionWeights, BlockWeights, EmbedderWeights, LayerNorm, Linear};
use crate::advisor::{AdvisorReadout, AdvisorState};
use crate::kernel_attention::{
    linear_attention_features, linear_attention_features_backward, FeatureRows,
    LinearAttentionCache, RandomFeatureMap,
};

const LN_EPS: f64 = 1e-5;
const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

pub(crate) fn linear_fwd(x: ArrayView2<f64>, l: &Linear) -> Array2<f64> {
    let mut y = x.dot(&l.w);
    if let Some(b) = &l.b {
        y += b;
    }
    y
}

/// Accumulates into `g`, returns the input gradient.
pub(crate) fn linear_bwd(x: ArrayView2<f64>, l: &Linear, dy: ArrayView2<f64>, g: &mut Linear) -> Array2<f64> {
    g.w += &x.t().dot(&dy);
    if let Some(gb) = &mut g.b {
        *gb += &dy.sum_axis(Axis(0));
    }
    dy.dot(&l.w.t())
}

pub(crate) struct NormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

pub(crate) fn norm_fwd(x: ArrayView2<f64>, ln: &LayerNorm) -> (Array2<f64>, NormCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.to_owned();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, s) in xhat.axis_iter_mut(Axis(0)).zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.dot(&row) / d;
        *s = 1.0 / (var + LN_EPS).sqrt();
        let si = *s;
        row.mapv_inplace(|v| v * si);
    }
    let y = &xhat * &ln.gamma + &ln.beta;
    (y, NormCache { xhat, inv_std })
}

pub(crate) fn norm_bwd(c: &NormCache, ln: &LayerNorm, dy: ArrayView2<f64>, g: &mut LayerNorm) -> Array2<f64> {
    g.gamma += &(&dy * &c.xhat).sum_axis(Axis(0));
    g.beta += &dy.sum_axis(Axis(0));
    let d = dy.ncols() as f64;
    let mut dx = &dy * &ln.gamma;
    for ((mut row, xh), &s) in dx.axis_iter_mut(Axis(0)).zip(c.xhat.axis_iter(Axis(0))).zip(&c.inv_std) {
        let m1 = row.sum() / d;
        let m2 = row.dot(&xh) / d;
        row.zip_mut_with(&xh, |v, &h| *v = s * (*v - m1 - h * m2));
    }
    dx
}

/// How the attention sublayer mixes tokens.
#[derive(Clone, Copy)]
pub(crate) enum Mixer<'a> {
    /// Linear-cost kernel attention over the tokens themselves.
    Linear { stabilizer: f64 },
    /// Read-out from a frozen advisor state.
    Advisor {
        state: &'a AdvisorState,
        readout: AdvisorReadout,
        stabilizer: f64,
    },
}

pub(crate) struct AttentionCache {
    norm: NormCache,
    h: Array2<f64>,
    q: Array2<f64>,
    fq: FeatureRows,
    k: Option<Array2<f64>>,
    fk: Option<FeatureRows>,
    v: Option<Array2<f64>>,
    lin: Option<LinearAttentionCache>,
    /// advisor readout denominators (normalized readout only)
    adv_den: Option<Array1<f64>>,
    mixed: Array2<f64>,
}

impl AttentionCache {
    /// Key features and values seen by this layer, if they were computed.
    pub(crate) fn key_value(&self) -> Option<(&Array2<f64>, &Array2<f64>)> {
        Some((&self.fk.as_ref()?.values, self.v.as_ref()?))
    }
}

/// Returns the residual branch (not yet added to `x`).
pub(crate) fn attention_fwd(
    x: ArrayView2<f64>,
    w: &AttentionWeights,
    map: &RandomFeatureMap,
    mixer: Mixer<'_>,
    scale: f64,
    want_kv: bool,
) -> (Array2<f64>, AttentionCache) {
    let (h, norm) = norm_fwd(x, &w.norm);
    let q = h.dot(&w.wq) * scale;
    let fq = map.phi_rows(q.view());
    let need_kv = want_kv || matches!(mixer, Mixer::Linear { .. });
    let (k, fk, v) = if need_kv {
        let k = h.dot(&w.wk) * scale;
        let fk = map.phi_rows(k.view());
        let v = h.dot(&w.wv);
        (Some(k), Some(fk), Some(v))
    } else {
        (None, None, None)
    };
    let (mixed, lin, adv_den) = match mixer {
        Mixer::Linear { stabilizer } => {
            let (o, c) = linear_attention_features(
                fq.values.view(),
                fk.as_ref().unwrap().values.view(),
                v.as_ref().unwrap().view(),
                stabilizer,
            );
            (o, Some(c), None)
        }
        Mixer::Advisor {
            state,
            readout,
            stabilizer,
        } => {
            let o = state.output(fq.values.view(), readout, stabilizer);
            let den = (readout == AdvisorReadout::Normalized)
                .then(|| fq.values.sum_axis(Axis(1)).mapv(|s| s + stabilizer));
            (o, None, den)
        }
    };
    let out = mixed.dot(&w.wo);
    (
        out,
        AttentionCache {
            norm,
            h,
            q,
            fq,
            k,
            fk,
            v,
            lin,
            adv_den,
            mixed,
        },
    )
}

pub(crate) fn attention_bwd(
    c: &AttentionCache,
    w: &AttentionWeights,
    map: &RandomFeatureMap,
    mixer: Mixer<'_>,
    scale: f64,
    d_out: ArrayView2<f64>,
    g: &mut AttentionWeights,
) -> Array2<f64> {
    g.wo += &c.mixed.t().dot(&d_out);
    let d_mixed = d_out.dot(&w.wo.t());
    let mut dh;
    match mixer {
        Mixer::Linear { .. } => {
            let (fk, v) = (c.fk.as_ref().unwrap(), c.v.as_ref().unwrap());
            let grads = linear_attention_features_backward(
                c.fq.values.view(),
                fk.values.view(),
                v.view(),
                c.mixed.view(),
                c.lin.as_ref().unwrap(),
                d_mixed.view(),
            );
            let dq = map.phi_rows_backward(c.q.view(), &c.fq, grads.d_phi_q.view()) * scale;
            let dk = map.phi_rows_backward(c.k.as_ref().unwrap().view(), fk, grads.d_phi_k.view()) * scale;
            g.wq += &c.h.t().dot(&dq);
            g.wk += &c.h.t().dot(&dk);
            g.wv += &c.h.t().dot(&grads.d_v);
            dh = dq.dot(&w.wq.t());
            dh += &dk.dot(&w.wk.t());
            dh += &grads.d_v.dot(&w.wv.t());
        }
        Mixer::Advisor { state, .. } => {
            // keys and values only reach the output through the advisor, which
            // is held constant here
            let d_phi_q = match &c.adv_den {
                None => d_mixed.dot(state.matrix()),
                Some(den) => {
                    let mut d_num = d_mixed.clone();
                    let mut d_den = Array1::zeros(den.len());
                    for l in 0..den.len() {
                        d_den[l] = -d_mixed.row(l).dot(&c.mixed.row(l)) / den[l];
                        let dl = den[l];
                        d_num.row_mut(l).mapv_inplace(|x| x / dl);
                    }
                    let mut dp = d_num.dot(state.matrix());
                    for (mut row, dd) in dp.axis_iter_mut(Axis(0)).zip(d_den) {
                        row.mapv_inplace(|x| x + dd);
                    }
                    dp
                }
            };
            let dq = map.phi_rows_backward(c.q.view(), &c.fq, d_phi_q.view()) * scale;
            g.wq += &c.h.t().dot(&dq);
            dh = dq.dot(&w.wq.t());
        }
    }
    norm_bwd(&c.norm, &w.norm, dh.view(), &mut g.norm)
}

pub(crate) struct BlockCache {
    pub(crate) attn: AttentionCache,
    norm2: NormCache,
    h2: Array2<f64>,
    f1: Array2<f64>,
    a1: Array2<f64>,
}

pub(crate) fn block_fwd(
    x: ArrayView2<f64>,
    w: &BlockWeights,
    map: &RandomFeatureMap,
    mixer: Mixer<'_>,
    scale: f64,
    want_kv: bool,
) -> (Array2<f64>, BlockCache) {
    let (a, attn) = attention_fwd(x, &w.attn, map, mixer, scale, want_kv);
    let x1 = &x + &a;
    let (h2, norm2) = norm_fwd(x1.view(), &w.norm2);
    let f1 = linear_fwd(h2.view(), &w.ff1);
    let a1 = f1.mapv(gelu);
    let f2 = linear_fwd(a1.view(), &w.ff2);
    let out = x1 + f2;
    (
        out,
        BlockCache {
            attn,
            norm2,
            h2,
            f1,
            a1,
        },
    )
}

pub(crate) fn block_bwd(
    c: &BlockCache,
    w: &BlockWeights,
    map: &RandomFeatureMap,
    mixer: Mixer<'_>,
    scale: f64,
    d_out: ArrayView2<f64>,
    g: &mut BlockWeights,
) -> Array2<f64> {
    let d_a1 = linear_bwd(c.a1.view(), &w.ff2, d_out, &mut g.ff2);
    let mut d_f1 = d_a1;
    d_f1.zip_mut_with(&c.f1, |d, &f| *d *= gelu_grad(f));
    let d_h2 = linear_bwd(c.h2.view(), &w.ff1, d_f1.view(), &mut g.ff1);
    let mut d_x1 = norm_bwd(&c.norm2, &w.norm2, d_h2.view(), &mut g.norm2);
    d_x1 += &d_out;
    let d_attn_in = attention_bwd(&c.attn, &w.attn, map, mixer, scale, d_x1.view(), &mut g.attn);
    d_x1 + d_attn_in
}

pub(crate) struct EmbedCache {
    points: Array2<f64>,
    z1: Array2<f64>,
    a1: Array2<f64>,
    z2: Array2<f64>,
    argmax: Array2<usize>,
    centers: Array2<f64>,
    y1: Array2<f64>,
    y1a: Array2<f64>,
    kal: Option<AttentionCache>,
}

/// Per-point two-stage MLP with max-pooling per group, plus a learned
/// encoding of the group center, then an optional global kernel-attention layer.
pub(crate) fn embed_fwd(
    points: Array2<f64>,
    centers: Array2<f64>,
    group_size: usize,
    w: &EmbedderWeights,
    kal_map: Option<&RandomFeatureMap>,
    stabilizer: f64,
    scale: f64,
) -> (Array2<f64>, EmbedCache) {
    let n = centers.nrows();
    let z1 = linear_fwd(points.view(), &w.point1);
    let a1 = z1.mapv(gelu);
    let z2 = linear_fwd(a1.view(), &w.point2);
    let a2 = z2.mapv(gelu);
    let d = a2.ncols();
    let mut pooled = Array2::from_elem((n, d), f64::NEG_INFINITY);
    let mut argmax = Array2::zeros((n, d));
    for (r, row) in a2.axis_iter(Axis(0)).enumerate() {
        let gi = r / group_size;
        for c in 0..d {
            if row[c] > pooled[[gi, c]] {
                pooled[[gi, c]] = row[c];
                argmax[[gi, c]] = r;
            }
        }
    }
    let y1 = linear_fwd(centers.view(), &w.pos1);
    let y1a = y1.mapv(gelu);
    let pe = linear_fwd(y1a.view(), &w.pos2);
    let base = pooled + pe;
    let (tokens, kal) = match (&w.kal, kal_map) {
        (Some(kw), Some(map)) => {
            let (a, c) = attention_fwd(base.view(), kw, map, Mixer::Linear { stabilizer }, scale, false);
            (&base + &a, Some(c))
        }
        _ => (base.clone(), None),
    };
    (
        tokens,
        EmbedCache {
            points,
            z1,
            a1,
            z2,
            argmax,
            centers,
            y1,
            y1a,
            kal,
        },
    )
}

pub(crate) fn embed_bwd(
    c: &EmbedCache,
    w: &EmbedderWeights,
    kal_map: Option<&RandomFeatureMap>,
    stabilizer: f64,
    scale: f64,
    d_tokens: ArrayView2<f64>,
    g: &mut EmbedderWeights,
) {
    let mut d_base = d_tokens.to_owned();
    if let (Some(kc), Some(kw), Some(map), Some(gk)) = (&c.kal, &w.kal, kal_map, g.kal.as_mut()) {
        d_base += &attention_bwd(kc, kw, map, Mixer::Linear { stabilizer }, scale, d_tokens, gk);
    }
    let d_y1a = linear_bwd(c.y1a.view(), &w.pos2, d_base.view(), &mut g.pos2);
    let mut d_y1 = d_y1a;
    d_y1.zip_mut_with(&c.y1, |d, &y| *d *= gelu_grad(y));
    linear_bwd(c.centers.view(), &w.pos1, d_y1.view(), &mut g.pos1);

    let mut d_z2 = Array2::zeros(c.z2.dim());
    for ((gi, ch), &r) in c.argmax.indexed_iter() {
        d_z2[[r, ch]] += d_base[[gi, ch]];
    }
    d_z2.zip_mut_with(&c.z2, |d, &z| *d *= gelu_grad(z));
    let d_a1 = linear_bwd(c.a1.view(), &w.point2, d_z2.view(), &mut g.point2);
    let mut d_z1 = d_a1;
    d_z1.zip_mut_with(&c.z1, |d, &z| *d *= gelu_grad(z));
    linear_bwd(c.points.view(), &w.point1, d_z1.view(), &mut g.point1);
}

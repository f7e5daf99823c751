//! The advisor: a `d x m` fast-weight matrix `S` that maps key features to
//! values and is updated in closed form instead of by backpropagation.
//!
//! Per token the objective is `1/2 |S phi(k) - v|^2 - alpha v.(S phi(k))`.
//! A step of size `beta` along its negative gradient can be written as
//! replacing the value currently stored for `phi(k)`,
//! `v_old = S phi(k)`, by `v_new = (1 - beta) v_old + beta (1 + alpha) v`:
//! `S <- S - v_old phi(k)^T + v_new phi(k)^T`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_ALPHA: f64 = 0.7;
pub const DEFAULT_BETA: f64 = 0.7;

/// How the advisor output is scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvisorReadout {
    /// `o = S phi(q)`.
    #[default]
    Raw,
    /// `o = S phi(q) / (sum(phi(q)) + stabilizer)`.
    Normalized,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdvisorState {
    s: Array2<f64>,
    update_count: u64,
    pub alpha: f64,
    pub beta: f64,
}

impl AdvisorState {
    pub fn new(dim: usize, features: usize, alpha: f64, beta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Argument(format!("alpha must lie in [0, 1], got {alpha}")));
        }
        if !(beta > 0.0 && beta <= 1.0) {
            return Err(Error::Argument(format!("beta must lie in (0, 1], got {beta}")));
        }
        Ok(Self {
            s: Array2::zeros((dim, features)),
            update_count: 0,
            alpha,
            beta,
        })
    }

    /// Restore a saved state.
    pub fn from_parts(s: Array2<f64>, update_count: u64, alpha: f64, beta: f64) -> Result<Self> {
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("advisor state".into()));
        }
        let mut st = Self::new(s.nrows(), s.ncols(), alpha, beta)?;
        st.s = s;
        st.update_count = update_count;
        Ok(st)
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.s
    }

    /// Overwrite `S` directly. Intended for tests and experiments.
    pub fn set_matrix(&mut self, s: Array2<f64>) {
        assert_eq!(s.dim(), self.s.dim());
        self.s = s;
    }

    pub fn update_count(&self) -> u64 {
        self.update_count
    }

    pub fn dim(&self) -> usize {
        self.s.nrows()
    }

    pub fn features(&self) -> usize {
        self.s.ncols()
    }

    pub fn loss(&self, phi_k: ArrayView1<f64>, v: ArrayView1<f64>) -> f64 {
        let sk = self.s.dot(&phi_k);
        let r = &sk - &v;
        0.5 * r.dot(&r) - self.alpha * v.dot(&sk)
    }

    /// `(S phi) phi^T - (1 + alpha) v phi^T`, a `d x m` matrix.
    pub fn gradient(&self, phi_k: ArrayView1<f64>, v: ArrayView1<f64>) -> Array2<f64> {
        let sk = self.s.dot(&phi_k);
        let coef = &sk - &(&v * (1.0 + self.alpha));
        outer(coef.view(), phi_k)
    }

    /// Batch update: every token's replacement `(v_new - v_old) phi^T` is
    /// computed against the current `S`, and the mean is added.
    ///
    /// On a non-finite result the state is left untouched and an error returned.
    pub fn update(&mut self, phi_k: ArrayView2<f64>, v: ArrayView2<f64>) -> Result<()> {
        let n = phi_k.nrows();
        if n == 0 || v.nrows() != n || phi_k.ncols() != self.features() || v.ncols() != self.dim() {
            return Err(Error::Argument(format!(
                "advisor update shapes: phi {:?}, v {:?}, state {:?}",
                phi_k.dim(),
                v.dim(),
                self.s.dim()
            )));
        }
        let v_old = phi_k.dot(&self.s.t());
        let v_new = &v_old * (1.0 - self.beta) + &v * (self.beta * (1.0 + self.alpha));
        let delta = (&v_new - &v_old).t().dot(&phi_k) / n as f64;
        let next = &self.s + &delta;
        if next.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!(
                "advisor update {} (state left unchanged)",
                self.update_count + 1
            )));
        }
        self.s = next;
        self.update_count += 1;
        Ok(())
    }

    /// Rows `S phi(q_l)` (optionally normalized) for an `n x m` feature matrix.
    pub fn output(&self, phi_q: ArrayView2<f64>, readout: AdvisorReadout, stabilizer: f64) -> Array2<f64> {
        let mut out = phi_q.dot(&self.s.t());
        if readout == AdvisorReadout::Normalized {
            let den = phi_q.sum_axis(Axis(1)).mapv(|x| x + stabilizer);
            for (mut row, d) in out.axis_iter_mut(Axis(0)).zip(den) {
                row.mapv_inplace(|x| x / d);
            }
        }
        out
    }
}

pub(crate) fn outer(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    let a2 = a.insert_axis(Axis(1));
    let b2 = b.insert_axis(Axis(0));
    a2.dot(&b2)
}

/// Free-function forms matching the operation names used elsewhere.
pub fn kaa_loss(state: &AdvisorState, phi_k: &Array1<f64>, v: &Array1<f64>) -> f64 {
    state.loss(phi_k.view(), v.view())
}

pub fn kaa_gradient(state: &AdvisorState, phi_k: &Array1<f64>, v: &Array1<f64>) -> Array2<f64> {
    state.gradient(phi_k.view(), v.view())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn randn(shape: (usize, usize), rng: &mut impl Rng) -> Array2<f64> {
        Array2::from_shape_simple_fn(shape, || rng.sample(StandardNormal))
    }

    fn randv(n: usize, rng: &mut impl Rng) -> Array1<f64> {
        Array1::from_shape_simple_fn(n, || rng.sample(StandardNormal))
    }

    fn pos(n: usize, rng: &mut impl Rng) -> Array1<f64> {
        Array1::from_shape_simple_fn(n, || rng.random_range(0.05..1.0))
    }

    #[test]
    fn loss_closed_forms() {
        let mut rng = seed::rng(1);
        let mut st = AdvisorState::new(4, 3, 0.7, 0.7).unwrap();
        let phi = pos(3, &mut rng);
        let v = randv(4, &mut rng);
        assert!((kaa_loss(&st, &phi, &v) - 0.5 * v.dot(&v)).abs() < 1e-12);

        // S phi = v: pick S = v phi^T / |phi|^2
        st.set_matrix(outer(v.view(), phi.view()) / phi.dot(&phi));
        assert!((kaa_loss(&st, &phi, &v) + 0.7 * v.dot(&v)).abs() < 1e-12);

        st.alpha = 0.0;
        st.set_matrix(randn((4, 3), &mut rng));
        let r = st.matrix().dot(&phi) - &v;
        assert!((kaa_loss(&st, &phi, &v) - 0.5 * r.dot(&r)).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = seed::rng(2);
        for _ in 0..20 {
            let mut st = AdvisorState::new(5, 4, rng.random_range(0.0..1.0), 0.5).unwrap();
            st.set_matrix(randn((5, 4), &mut rng));
            let phi = pos(4, &mut rng);
            let v = randv(5, &mut rng);
            let g = kaa_gradient(&st, &phi, &v);
            let h = 1e-6;
            for idx in ndarray::indices((5, 4)) {
                let base = st.matrix().clone();
                let mut p = base.clone();
                p[idx] += h;
                st.set_matrix(p);
                let up = kaa_loss(&st, &phi, &v);
                let mut m = base.clone();
                m[idx] -= h;
                st.set_matrix(m);
                let down = kaa_loss(&st, &phi, &v);
                st.set_matrix(base);
                let fd = (up - down) / (2.0 * h);
                assert!((fd - g[idx]).abs() <= 1e-6 * fd.abs().max(g[idx].abs()).max(1.0));
            }
        }
    }

    #[test]
    fn gradient_special_points() {
        let mut rng = seed::rng(3);
        let mut st = AdvisorState::new(3, 5, 0.7, 0.7).unwrap();
        let phi = pos(5, &mut rng);
        let v = randv(3, &mut rng);
        let g0 = kaa_gradient(&st, &phi, &v);
        let expected = outer(v.view(), phi.view()) * -1.7;
        assert!((&g0 - &expected).iter().all(|x| x.abs() < 1e-12));

        st.set_matrix(outer(v.view(), phi.view()) * 1.7 / phi.dot(&phi));
        assert!(kaa_gradient(&st, &phi, &v).iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn update_special_cases() {
        let mut rng = seed::rng(4);
        let phi = pos(4, &mut rng).insert_axis(Axis(0));
        let v = randv(3, &mut rng).insert_axis(Axis(0));

        let mut st = AdvisorState::new(3, 4, 0.0, 1.0).unwrap();
        st.update(phi.view(), v.view()).unwrap();
        let expected = outer(v.row(0), phi.row(0));
        assert!((st.matrix() - &expected).iter().all(|x| x.abs() < 1e-14));
        assert_eq!(st.update_count(), 1);

        // beta -> 0 leaves S unchanged: smallest admissible beta
        let mut st = AdvisorState::new(3, 4, 0.7, f64::MIN_POSITIVE).unwrap();
        st.set_matrix(randn((3, 4), &mut rng));
        let before = st.matrix().clone();
        st.update(phi.view(), v.view()).unwrap();
        assert_eq!(st.matrix(), &before);
    }

    #[test]
    fn non_finite_update_is_rejected() {
        let mut st = AdvisorState::new(2, 2, 0.7, 0.7).unwrap();
        let phi = ndarray::array![[1.0, 1.0]];
        let v = ndarray::array![[f64::INFINITY, 0.0]];
        assert!(st.update(phi.view(), v.view()).is_err());
        assert_eq!(st.update_count(), 0);
        assert!(st.matrix().iter().all(|&x| x == 0.0));
        assert!(AdvisorState::new(2, 2, 1.5, 0.5).is_err());
        assert!(AdvisorState::new(2, 2, 0.5, 0.0).is_err());
    }

    #[test]
    fn output_rank_one_and_linearity() {
        let mut rng = seed::rng(5);
        let mut st = AdvisorState::new(3, 4, 0.7, 0.7).unwrap();
        let phi_q = randn((5, 4), &mut rng).mapv(f64::abs);
        assert!(st.output(phi_q.view(), AdvisorReadout::Raw, 0.0).iter().all(|&x| x == 0.0));

        let k = pos(4, &mut rng);
        let v = randv(3, &mut rng);
        st.set_matrix(outer(v.view(), k.view()));
        let out = st.output(phi_q.view(), AdvisorReadout::Raw, 0.0);
        for l in 0..5 {
            let w = k.dot(&phi_q.row(l));
            for c in 0..3 {
                assert!((out[[l, c]] - v[c] * w).abs() < 1e-12);
            }
        }

        st.set_matrix(randn((3, 4), &mut rng));
        let p2 = randn((5, 4), &mut rng).mapv(f64::abs);
        let mixed = &phi_q * 2.0 + &p2 * -0.5;
        let lhs = st.output(mixed.view(), AdvisorReadout::Raw, 0.0);
        let rhs = st.output(phi_q.view(), AdvisorReadout::Raw, 0.0) * 2.0
            + st.output(p2.view(), AdvisorReadout::Raw, 0.0) * -0.5;
        assert!((&lhs - &rhs).iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn small_step_does_not_increase_loss() {
        let mut rng = seed::rng(6);
        for _ in 0..100 {
            let beta = rng.random_range(1e-3..0.1);
            let mut st = AdvisorState::new(4, 6, rng.random_range(0.0..1.0), beta).unwrap();
            st.set_matrix(randn((4, 6), &mut rng));
            // keep |phi|^2 modest so beta |phi|^2 < 2
            let phi = pos(6, &mut rng) * 0.5;
            let v = randv(4, &mut rng);
            let before = kaa_loss(&st, &phi, &v);
            st.update(phi.view().insert_axis(Axis(0)), v.view().insert_axis(Axis(0))).unwrap();
            assert!(kaa_loss(&st, &phi, &v) <= before + 1e-12);
        }
    }

    #[test]
    fn retains_earlier_population() {
        let mut rng = seed::rng(7);
        let (d, m) = (4, 10);
        let mut st = AdvisorState::new(d, m, 0.7, 0.7).unwrap();
        let mk = |rng: &mut rand_chacha::ChaCha8Rng, shift: f64| {
            let phi = Array2::from_shape_simple_fn((16, m), || rng.random_range(0.0..0.3))
                + Array2::from_shape_fn((16, m), |(_, j)| if (j as f64) < shift { 0.3 } else { 0.0 });
            (phi, randn((16, d), rng))
        };
        let (pa, va) = mk(&mut rng, 5.0);
        let (pb, vb) = mk(&mut rng, 0.0);
        let zero = AdvisorState::new(d, m, 0.7, 0.7).unwrap();
        let loss_a = |s: &AdvisorState| -> f64 {
            (0..16).map(|i| s.loss(pa.row(i), va.row(i))).sum::<f64>()
        };
        for _ in 0..20 {
            st.update(pa.view(), va.view()).unwrap();
            st.update(pb.view(), vb.view()).unwrap();
        }
        assert!(loss_a(&st) < loss_a(&zero));
    }
}

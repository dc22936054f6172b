//! Closed-form expected kernel of a random attention layer.
//!
//! With i.i.d. zero-mean projections and softmax linearized around uniform
//! weights, `E[O Oᵀ] ≈ C0·11ᵀ + C1·XXᵀ` where
//!
//! ```text
//! C0 = d_k σ_V² / T² · Σ_{p,q} x_p·x_q
//! C1 = d_k σ_V² σ_Q² σ_K² / T² · Σ_{p,q} ((x_p − μ)·(x_q − μ)) (x_p·x_q)
//! ```
//!
//! All double sums use compensated summation.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::Serialize;

use crate::attention::FeatureSequence;
use crate::error::{Error, Result};
use crate::sum::kahan_sum;

/// First-order softmax: `a_ip ≈ 1/T + (s_ip − s̄_i)/T`.
pub fn linearized_softmax(s: &Array2<f64>) -> Array2<f64> {
    let t = s.ncols() as f64;
    let mut out = s.clone();
    for mut row in out.outer_iter_mut() {
        let mean = kahan_sum(row.iter().copied()) / t;
        row.mapv_inplace(|v| (1.0 + (v - mean)) / t);
    }
    out
}

fn gram(x: ArrayView2<f64>) -> Array2<f64> {
    let t = x.nrows();
    Array2::from_shape_fn((t, t), |(p, q)| {
        kahan_sum(x.row(p).iter().zip(x.row(q)).map(|(a, b)| a * b))
    })
}

/// Row mean `μ = (1/T) Σ_t x_t`.
pub fn row_mean(x: ArrayView2<f64>) -> Array1<f64> {
    let t = x.nrows() as f64;
    Array1::from_shape_fn(x.ncols(), |c| kahan_sum(x.column(c).iter().copied()) / t)
}

fn centered(x: ArrayView2<f64>) -> Array2<f64> {
    let mu = row_mean(x);
    &x - &mu.insert_axis(Axis(0))
}

/// Analytic logit moments for one input sequence.
#[derive(Debug, Clone)]
pub struct LogitStats {
    /// Row means `s̄_i` of an explicit score matrix, when one was supplied.
    pub s_bar: Option<Vec<f64>>,
    gram: Array2<f64>,
    centered_gram: Array2<f64>,
    sigma_qk: f64,
}

impl LogitStats {
    pub fn new(x: &FeatureSequence, sigma_q2: f64, sigma_k2: f64) -> Self {
        LogitStats {
            s_bar: None,
            gram: gram(x.view()),
            centered_gram: gram(centered(x.view()).view()),
            sigma_qk: sigma_q2 * sigma_k2,
        }
    }

    /// Attaches `s̄_i = (1/T) Σ_t s_it` computed from a score matrix.
    pub fn with_scores(mut self, s: &Array2<f64>) -> Result<Self> {
        let t = self.gram.nrows();
        if s.dim() != (t, t) {
            return Err(Error::shape(format!("scores {:?} for T = {t}", s.dim())));
        }
        self.s_bar = Some(
            s.outer_iter()
                .map(|r| kahan_sum(r.iter().copied()) / t as f64)
                .collect(),
        );
        Ok(self)
    }

    fn check(&self, idx: [usize; 4]) -> Result<()> {
        let t = self.gram.nrows();
        if let Some(bad) = idx.iter().find(|&&i| i >= t) {
            return Err(Error::invalid(format!("index {bad} out of range for T = {t}")));
        }
        Ok(())
    }

    /// `E[s_ip s_jq] = σ_Q²σ_K² (x_i·x_j)(x_p·x_q)`.
    pub fn second_moment(&self, i: usize, p: usize, j: usize, q: usize) -> Result<f64> {
        self.check([i, p, j, q])?;
        Ok(self.sigma_qk * self.gram[[i, j]] * self.gram[[p, q]])
    }

    /// `E[(s_ip − s̄_i)(s_jq − s̄_j)] = σ_Q²σ_K² (x_i·x_j)((x_p − μ)·(x_q − μ))`.
    pub fn centered_cov(&self, i: usize, p: usize, j: usize, q: usize) -> Result<f64> {
        self.check([i, p, j, q])?;
        Ok(self.sigma_qk * self.gram[[i, j]] * self.centered_gram[[p, q]])
    }
}

pub fn logit_second_moment(
    x: &FeatureSequence,
    (i, p, j, q): (usize, usize, usize, usize),
    sigma_q2: f64,
    sigma_k2: f64,
) -> Result<f64> {
    LogitStats::new(x, sigma_q2, sigma_k2).second_moment(i, p, j, q)
}

pub fn centered_logit_cov(
    x: &FeatureSequence,
    (i, p, j, q): (usize, usize, usize, usize),
    sigma_q2: f64,
    sigma_k2: f64,
) -> Result<f64> {
    LogitStats::new(x, sigma_q2, sigma_k2).centered_cov(i, p, j, q)
}

/// `(C0, C1)` from the general (uncentered) double sums.
pub fn rapk_coefficients(
    x: &FeatureSequence,
    d_k: usize,
    sigma_q2: f64,
    sigma_k2: f64,
    sigma_v2: f64,
) -> (f64, f64) {
    let t = x.t_len() as f64;
    let g = gram(x.view());
    let gc = gram(centered(x.view()).view());
    let base = d_k as f64 * sigma_v2 / (t * t);
    let c0 = base * kahan_sum(g.iter().copied());
    let c1 = base * sigma_q2 * sigma_k2 * kahan_sum(gc.iter().zip(&g).map(|(a, b)| a * b));
    (c0, c1)
}

/// `C1` via `‖XXᵀ‖_F²`, exact only when the rows of `X` have zero mean.
pub fn c1_centered(x: &FeatureSequence, d_k: usize, sigma_q2: f64, sigma_k2: f64, sigma_v2: f64) -> f64 {
    let t = x.t_len() as f64;
    let g = gram(x.view());
    d_k as f64 * sigma_v2 * sigma_q2 * sigma_k2 / (t * t) * kahan_sum(g.iter().map(|v| v * v))
}

/// `K_ij = c0 + c1·(x_i·x_j)`.
pub fn rapk_kernel(x: &FeatureSequence, c0: f64, c1: f64) -> Array2<f64> {
    gram(x.view()).mapv(|g| c0 + c1 * g)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RapkResult {
    pub c0: f64,
    pub c1: f64,
    #[serde(serialize_with = "crate::harness::io::serialize_matrix")]
    pub kernel: Array2<f64>,
    pub mu: Vec<f64>,
    pub t_len: usize,
    pub d: usize,
    pub d_k: usize,
    pub sigma_q2: f64,
    pub sigma_k2: f64,
    pub sigma_v2: f64,
}

/// Coefficients and theoretical kernel in one call.
pub fn rapk_expectation(
    x: &FeatureSequence,
    d_k: usize,
    sigma_q2: f64,
    sigma_k2: f64,
    sigma_v2: f64,
) -> RapkResult {
    let (c0, c1) = rapk_coefficients(x, d_k, sigma_q2, sigma_k2, sigma_v2);
    RapkResult {
        c0,
        c1,
        kernel: rapk_kernel(x, c0, c1),
        mu: row_mean(x.view()).to_vec(),
        t_len: x.t_len(),
        d: x.dim(),
        d_k,
        sigma_q2,
        sigma_k2,
        sigma_v2,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::softmax_rows;
    use ndarray::array;
    use proptest::prelude::*;

    fn seq(a: Array2<f64>) -> FeatureSequence {
        FeatureSequence::new(a).unwrap()
    }

    fn e1e2() -> FeatureSequence {
        seq(Array2::<f64>::eye(2))
    }

    /// Nested-loop oracle for both coefficients, written straight from the
    /// double-sum definitions.
    fn naive_coefficients(x: &Array2<f64>, d_k: usize, sq: f64, sk: f64, sv: f64) -> (f64, f64) {
        let (t, d) = x.dim();
        let mut mu = vec![0.0; d];
        for p in 0..t {
            for c in 0..d {
                mu[c] += x[[p, c]] / t as f64;
            }
        }
        let (mut s0, mut s1) = (0.0, 0.0);
        for p in 0..t {
            for q in 0..t {
                let mut dot = 0.0;
                let mut cdot = 0.0;
                for c in 0..d {
                    dot += x[[p, c]] * x[[q, c]];
                    cdot += (x[[p, c]] - mu[c]) * (x[[q, c]] - mu[c]);
                }
                s0 += dot;
                s1 += cdot * dot;
            }
        }
        let base = d_k as f64 * sv / (t * t) as f64;
        (base * s0, base * sq * sk * s1)
    }

    #[test]
    fn linearized_softmax_examples() {
        let a = linearized_softmax(&Array2::zeros((5, 5)));
        assert!(a.iter().all(|v| (v - 0.2).abs() < 1e-15));
        let a = linearized_softmax(&array![[0.1, -0.1]]);
        assert!((a[[0, 0]] - 0.55).abs() < 1e-15);
        assert!((a[[0, 1]] - 0.45).abs() < 1e-15);
    }

    #[test]
    fn linearization_error_is_second_order() {
        let base = array![[0.3, -1.2, 0.8, 0.1], [1.0, 0.0, -0.5, 2.0], [-0.7, 0.4, 0.9, -1.1], [0.2, 0.2, -2.0, 1.5]];
        let dev = |eps: f64| {
            let s = &base * eps;
            let exact = softmax_rows(&s);
            exact
                .weights()
                .iter()
                .zip(linearized_softmax(&s).iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        };
        let ratio = dev(1e-1) / dev(1e-2);
        assert!((50.0..=200.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn second_moment_examples() {
        let x = e1e2();
        assert_eq!(logit_second_moment(&x, (0, 0, 0, 0), 1.0, 1.0).unwrap(), 1.0);
        assert_eq!(logit_second_moment(&x, (0, 1, 1, 0), 1.0, 1.0).unwrap(), 0.0);
        let x = seq(array![[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(logit_second_moment(&x, (0, 1, 1, 0), 0.0, 2.0).unwrap(), 0.0);
        assert!(logit_second_moment(&x, (0, 2, 0, 0), 1.0, 1.0).is_err());
    }

    #[test]
    fn centered_cov_examples() {
        let same = seq(array![[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]]);
        for idx in [(0, 1, 2, 0), (1, 1, 1, 1), (2, 0, 1, 2)] {
            assert_eq!(centered_logit_cov(&same, idx, 1.0, 1.0).unwrap(), 0.0);
        }
        let v = centered_logit_cov(&e1e2(), (0, 0, 0, 0), 1.0, 1.0).unwrap();
        assert!((v - 0.5).abs() < 1e-15);
        let x = seq(array![[1.0, -2.0], [0.5, 3.0], [2.0, 0.0]]);
        let a = 1.7;
        let base = centered_logit_cov(&x, (0, 1, 2, 0), 1.0, 1.0).unwrap();
        let scaled = centered_logit_cov(&seq(x.data() * a), (0, 1, 2, 0), 1.0, 1.0).unwrap();
        assert!((scaled - base * a.powi(4)).abs() < 1e-12 * scaled.abs().max(1.0));
        assert!(centered_logit_cov(&x, (3, 0, 0, 0), 1.0, 1.0).is_err());
    }

    #[test]
    fn logit_stats_row_means() {
        let x = e1e2();
        let s = array![[1.0, 3.0], [-2.0, 0.0]];
        let stats = LogitStats::new(&x, 1.0, 1.0).with_scores(&s).unwrap();
        assert_eq!(stats.s_bar.unwrap(), vec![2.0, -1.0]);
        assert!(LogitStats::new(&x, 1.0, 1.0).with_scores(&Array2::zeros((3, 3))).is_err());
    }

    #[test]
    fn coefficient_fixtures() {
        assert_eq!(rapk_coefficients(&seq(Array2::zeros((3, 2))), 4, 1.0, 1.0, 1.0), (0.0, 0.0));
        let (c0, c1) = rapk_coefficients(&e1e2(), 2, 1.0, 1.0, 1.0);
        assert!((c0 - 1.0).abs() < 1e-12 && (c1 - 0.5).abs() < 1e-12);
        let x = seq(array![[1.0, 0.0], [-1.0, 0.0]]);
        let (c0, c1) = rapk_coefficients(&x, 1, 1.0, 1.0, 1.0);
        assert!(c0.abs() < 1e-12 && (c1 - 1.0).abs() < 1e-12);
        assert!((c1_centered(&x, 1, 1.0, 1.0, 1.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kernel_fixtures() {
        let x = seq(array![[1.0, 2.0], [0.0, -1.0], [3.0, 1.0]]);
        assert_eq!(rapk_kernel(&x, 1.0, 0.0), Array2::<f64>::ones((3, 3)));
        assert_eq!(rapk_kernel(&e1e2(), 0.0, 1.0), Array2::<f64>::eye(2));
        assert_eq!(rapk_kernel(&e1e2(), 1.0, 0.5), array![[1.5, 1.0], [1.0, 1.5]]);
        let r = rapk_expectation(&e1e2(), 2, 1.0, 1.0, 1.0);
        assert_eq!(r.kernel, array![[1.5, 1.0], [1.0, 1.5]]);
        assert_eq!(r.mu, vec![0.5, 0.5]);
    }

    fn small_matrix() -> impl Strategy<Value = Array2<f64>> {
        (1usize..=4, 1usize..=3).prop_flat_map(|(t, d)| {
            proptest::collection::vec(-3.0f64..3.0, t * d)
                .prop_map(move |v| Array2::from_shape_vec((t, d), v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn matches_nested_loop_oracle(x in small_matrix(), d_k in 1usize..64, sq in 0.0f64..2.0, sk in 0.0f64..2.0, sv in 0.0f64..2.0) {
            let (c0, c1) = rapk_coefficients(&seq(x.clone()), d_k, sq, sk, sv);
            let (n0, n1) = naive_coefficients(&x, d_k, sq, sk, sv);
            prop_assert!((c0 - n0).abs() <= 1e-12 * n0.abs().max(1.0));
            prop_assert!((c1 - n1).abs() <= 1e-12 * n1.abs().max(1.0));
        }

        #[test]
        fn c0_nonnegative(x in small_matrix()) {
            let (c0, c1) = rapk_coefficients(&seq(x), 8, 0.5, 0.5, 0.5);
            prop_assert!(c0 >= -1e-12);
            prop_assert!(c1 >= -1e-12);
        }

        #[test]
        fn linearized_rows_sum_to_one(v in proptest::collection::vec(-5.0f64..5.0, 9)) {
            let s = Array2::from_shape_vec((3, 3), v).unwrap();
            for row in linearized_softmax(&s).outer_iter() {
                prop_assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn scale_covariance(x in small_matrix(), alpha in 0.2f64..3.0) {
            let base = seq(x.clone());
            let scaled = seq(&x * alpha);
            let (c0, c1) = rapk_coefficients(&base, 16, 0.3, 0.7, 1.1);
            let (s0, s1) = rapk_coefficients(&scaled, 16, 0.3, 0.7, 1.1);
            prop_assert!((s0 - c0 * alpha.powi(2)).abs() <= 1e-9 * s0.abs().max(1e-9));
            prop_assert!((s1 - c1 * alpha.powi(4)).abs() <= 1e-9 * s1.abs().max(1e-9));
            let k = rapk_kernel(&scaled, s0, s1);
            let g = gram(base.view());
            for ((i, j), v) in k.indexed_iter() {
                let expect = c0 * alpha.powi(2) + c1 * alpha.powi(6) * g[[i, j]];
                prop_assert!((v - expect).abs() <= 1e-9 * expect.abs().max(1e-9));
            }
        }
    }
}

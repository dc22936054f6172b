//! Monte Carlo estimates of the random-attention kernel and logit
//! statistics, checked against the closed form.

use ndarray::{Array2, Zip};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attention::{layer_norm_rows, single_head_kernel, FeatureSequence};
use crate::error::{Error, Result};
use crate::init::{analytic_variance, init_matrix, make_projection_set, InitScheme};
use crate::metrics::pearson;
use crate::par;
use crate::rapk::rapk_expectation;
use crate::rng::{derive_seed, rng_from_seed};
use crate::sum::KahanSum;

/// Trials per accumulation block. Blocks are summed serially inside and
/// combined in block order, so the estimate does not depend on threads.
pub const TRIAL_BLOCK: usize = 100;

/// |s| below this counts as "near zero".
pub const LOGIT_EPS: f64 = 0.1;

fn blocks(trials: usize) -> Vec<(usize, usize)> {
    crate::smoothers::window_partition(trials, TRIAL_BLOCK)
}

/// Per-block sums of trial kernels, in block order.
fn kernel_block_sums(
    x: &FeatureSequence,
    scheme: InitScheme,
    d_k: usize,
    trials: usize,
    seed: u64,
) -> Result<Vec<(Array2<f64>, usize)>> {
    if trials == 0 {
        return Err(Error::invalid("trials must be at least 1"));
    }
    let t = x.t_len();
    let bl = blocks(trials);
    par::try_map_indexed(bl.len(), |b| {
        let (start, end) = bl[b];
        let mut acc = Array2::<f64>::zeros((t, t));
        for trial in start..end {
            let proj = make_projection_set(x.dim(), d_k, scheme, derive_seed(seed, trial as u64))?;
            acc += &single_head_kernel(x.view(), &proj)?;
        }
        Ok((acc, end - start))
    })
}

/// Mean of `O Oᵀ` over `trials` independent single-head attention draws
/// using the exact softmax.
pub fn monte_carlo_kernel(
    x: &FeatureSequence,
    scheme: InitScheme,
    d_k: usize,
    trials: usize,
    seed: u64,
) -> Result<Array2<f64>> {
    let sums = kernel_block_sums(x, scheme, d_k, trials, seed)?;
    Ok(ordered_mean(&sums, x.t_len()))
}

fn ordered_mean(sums: &[(Array2<f64>, usize)], t: usize) -> Array2<f64> {
    let mut total = Array2::<f64>::zeros((t, t));
    let mut n = 0;
    for (s, c) in sums {
        total += s;
        n += c;
    }
    total / n as f64
}

pub fn kernel_mse(k_emp: &Array2<f64>, k_th: &Array2<f64>) -> Result<f64> {
    if k_emp.dim() != k_th.dim() {
        return Err(Error::shape(format!("{:?} vs {:?}", k_emp.dim(), k_th.dim())));
    }
    let mut s = KahanSum::default();
    Zip::from(k_emp).and(k_th).for_each(|a, b| s.add((a - b) * (a - b)));
    Ok(s.value() / k_emp.len() as f64)
}

pub fn kernel_pearson(k_emp: &Array2<f64>, k_th: &Array2<f64>) -> Result<f64> {
    if k_emp.dim() != k_th.dim() {
        return Err(Error::shape(format!("{:?} vs {:?}", k_emp.dim(), k_th.dim())));
    }
    let a: Vec<f64> = k_emp.iter().copied().collect();
    let b: Vec<f64> = k_th.iter().copied().collect();
    pearson(&a, &b)
}

/// Closed-form kernel for `x` under the nominal variances of `scheme`.
pub fn theoretical_kernel(x: &FeatureSequence, scheme: InitScheme, d_k: usize) -> Result<Array2<f64>> {
    let s2 = analytic_variance(scheme, x.dim(), d_k)?;
    Ok(rapk_expectation(x, d_k, s2, s2, s2).kernel)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelCurvePoint {
    pub d_k: usize,
    /// Trials accumulated so far.
    pub trial_block: usize,
    pub mse: f64,
    pub pearson: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelValidationReport {
    pub scheme: InitScheme,
    pub d_k_grid: Vec<usize>,
    pub mse_per_dk: Vec<f64>,
    pub pearson_per_dk: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
    /// Running estimates after each trial block, averaged over sequences.
    pub curve: Vec<KernelCurvePoint>,
}

impl KernelValidationReport {
    /// Long-format table: `d_k, trial_block, mse, pearson`.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> std::result::Result<(), csv::Error> {
        let mut out = csv::Writer::from_writer(w);
        for p in &self.curve {
            out.serialize(p)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// MSE and Pearson r between Monte Carlo and closed-form kernels across a
/// `d_k` grid, averaged over `x_set`.
pub fn dk_sweep(
    x_set: &[FeatureSequence],
    scheme: InitScheme,
    d_k_grid: &[usize],
    trials: usize,
    seed: u64,
) -> Result<KernelValidationReport> {
    if d_k_grid.is_empty() || x_set.is_empty() {
        return Err(Error::invalid("d_k grid and sequence set must be nonempty"));
    }
    if d_k_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("d_k grid must be strictly ascending"));
    }
    let n_blocks = blocks(trials.max(1)).len();
    let mut mse_per_dk = Vec::new();
    let mut pearson_per_dk = Vec::new();
    let mut curve = Vec::new();
    for &d_k in d_k_grid {
        let mut mse_curve = vec![0.0; n_blocks];
        let mut r_curve = vec![0.0; n_blocks];
        for (xi, x) in x_set.iter().enumerate() {
            let sums = kernel_block_sums(x, scheme, d_k, trials, derive_seed(seed, xi as u64))?;
            let k_th = theoretical_kernel(x, scheme, d_k)?;
            for b in 0..n_blocks {
                let k = ordered_mean(&sums[..=b], x.t_len());
                mse_curve[b] += kernel_mse(&k, &k_th)?;
                r_curve[b] += kernel_pearson(&k, &k_th)?;
            }
        }
        let n = x_set.len() as f64;
        let mut done = 0;
        for (b, (start, end)) in blocks(trials).into_iter().enumerate() {
            done += end - start;
            curve.push(KernelCurvePoint {
                d_k,
                trial_block: done,
                mse: mse_curve[b] / n,
                pearson: r_curve[b] / n,
            });
            debug_assert!(start < end);
        }
        mse_per_dk.push(mse_curve[n_blocks - 1] / n);
        pearson_per_dk.push(r_curve[n_blocks - 1] / n);
    }
    Ok(KernelValidationReport {
        scheme,
        d_k_grid: d_k_grid.to_vec(),
        mse_per_dk,
        pearson_per_dk,
        trials,
        seed,
        curve,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitConcentrationReport {
    pub scheme: InitScheme,
    pub d_k: usize,
    pub with_layernorm: bool,
    pub empirical_mean: f64,
    pub empirical_std: f64,
    /// Root-mean-square of `σ_Q σ_K ‖x_i‖ ‖x_p‖` over all pairs, which is the
    /// pooled standard deviation the logits should show.
    pub analytic_std: f64,
    pub frac_within_eps: f64,
    /// Largest relative gap between a pair's empirical and analytic std.
    pub max_pair_rel_error: f64,
    pub trials: usize,
}

#[derive(Clone)]
struct LogitAcc {
    sum: KahanSum,
    sum_sq: KahanSum,
    near_zero: usize,
    pair_sq: Array2<f64>,
}

impl LogitAcc {
    fn new(t: usize) -> Self {
        LogitAcc {
            sum: KahanSum::default(),
            sum_sq: KahanSum::default(),
            near_zero: 0,
            pair_sq: Array2::zeros((t, t)),
        }
    }

    fn merge(&mut self, o: &LogitAcc) {
        self.sum.add(o.sum.value());
        self.sum_sq.add(o.sum_sq.value());
        self.near_zero += o.near_zero;
        self.pair_sq += &o.pair_sq;
    }
}

/// Moments of the pre-softmax logits `s_ip` over fresh `(W_Q, W_K)` draws.
pub fn logit_concentration(
    x: &FeatureSequence,
    scheme: InitScheme,
    d_k: usize,
    with_layernorm: bool,
    trials: usize,
    seed: u64,
) -> Result<LogitConcentrationReport> {
    if trials == 0 {
        return Err(Error::invalid("trials must be at least 1"));
    }
    let xs = if with_layernorm {
        layer_norm_rows(x.view())
    } else {
        x.data().clone()
    };
    let (t, d) = xs.dim();
    let sigma2 = analytic_variance(scheme, d, d_k)?;
    let scale = 1.0 / (d_k as f64).sqrt();
    let bl = blocks(trials);
    let parts = par::try_map_indexed(bl.len(), |b| {
        let mut acc = LogitAcc::new(t);
        for trial in bl[b].0..bl[b].1 {
            let ts = derive_seed(seed, trial as u64);
            let w_q = init_matrix(d, d_k, scheme, derive_seed(ts, 0))?;
            let w_k = init_matrix(d, d_k, scheme, derive_seed(ts, 1))?;
            let s = xs.dot(&w_q).dot(&xs.dot(&w_k).t()) * scale;
            for ((i, p), &v) in s.indexed_iter() {
                acc.sum.add(v);
                acc.sum_sq.add(v * v);
                acc.near_zero += usize::from(v.abs() < LOGIT_EPS);
                acc.pair_sq[[i, p]] += v * v;
            }
        }
        Ok::<_, Error>(acc)
    })?;
    let mut acc = LogitAcc::new(t);
    for p in &parts {
        acc.merge(p);
    }

    let n = (trials * t * t) as f64;
    let mean = acc.sum.value() / n;
    let var = (acc.sum_sq.value() / n - mean * mean).max(0.0);
    let norms2: Vec<f64> = xs.outer_iter().map(|r| r.dot(&r)).collect();
    let mut analytic_var = KahanSum::default();
    let mut max_rel = 0.0f64;
    for i in 0..t {
        for p in 0..t {
            let a = sigma2 * sigma2 * norms2[i] * norms2[p];
            analytic_var.add(a);
            if a > 0.0 {
                let emp = (acc.pair_sq[[i, p]] / trials as f64).sqrt();
                max_rel = max_rel.max((emp / a.sqrt() - 1.0).abs());
            }
        }
    }
    Ok(LogitConcentrationReport {
        scheme,
        d_k,
        with_layernorm,
        empirical_mean: mean,
        empirical_std: var.sqrt(),
        analytic_std: (analytic_var.value() / (t * t) as f64).sqrt(),
        frac_within_eps: acc.near_zero as f64 / n,
        max_pair_rel_error: max_rel,
        trials,
    })
}

/// `t/2` random unit vectors and their negatives in shuffled order, so the
/// rows are unit-norm and their mean is exactly zero.
pub fn centered_unit_sequence(t: usize, d: usize, seed: u64) -> Result<FeatureSequence> {
    if t < 2 || !t.is_multiple_of(2) || d == 0 {
        return Err(Error::invalid(format!("need an even T >= 2 and d >= 1, got T = {t}, d = {d}")));
    }
    let mut rng = rng_from_seed(seed);
    let mut rows = Vec::with_capacity(t);
    for _ in 0..t / 2 {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.iter_mut().for_each(|a| *a /= norm);
        rows.push(v.iter().map(|a| -a).collect::<Vec<f64>>());
        rows.push(v);
    }
    rows.shuffle(&mut rng);
    FeatureSequence::from_rows(&rows)
}

/// Rows `0.5 + s_i z_i` with `z_i` standard normal and `s_i` uniform in
/// `[1, 4]`: off-centre and with uneven norms.
pub fn uneven_sequence(t: usize, d: usize, seed: u64) -> Result<FeatureSequence> {
    let mut rng = rng_from_seed(seed);
    let mut x = Array2::<f64>::zeros((t, d));
    for mut row in x.outer_iter_mut() {
        let s = rng.random_range(1.0..=4.0);
        row.iter_mut().for_each(|v| *v = 0.5 + s * rng.sample::<f64, _>(StandardNormal));
    }
    FeatureSequence::new(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn seq(a: Array2<f64>) -> FeatureSequence {
        FeatureSequence::new(a).unwrap()
    }

    const XU: InitScheme = InitScheme::XAVIER_UNIFORM;

    #[test]
    fn mse_examples() {
        let a = array![[1.0, 0.0], [0.0, 1.0]];
        let b = array![[1.0, 1.0], [1.0, 1.0]];
        assert_eq!(kernel_mse(&a, &a).unwrap(), 0.0);
        assert_eq!(kernel_mse(&(&a + 1.0), &a).unwrap(), 1.0);
        assert_eq!(kernel_mse(&a, &b).unwrap(), 0.5);
        assert!(kernel_mse(&a, &Array2::zeros((3, 3))).is_err());
    }

    #[test]
    fn pearson_examples() {
        let k = array![[1.0, 2.0], [0.5, -3.0]];
        assert!((kernel_pearson(&(&k * 2.0 + 3.0), &k).unwrap() - 1.0).abs() < 1e-12);
        assert!((kernel_pearson(&(-&k), &k).unwrap() + 1.0).abs() < 1e-12);
        assert!(matches!(
            kernel_pearson(&Array2::<f64>::ones((2, 2)), &k),
            Err(Error::UndefinedCorrelation(_))
        ));
    }

    #[test]
    fn pearson_of_independent_noise_is_small() {
        let mut rng = crate::rng::rng_from_seed(5);
        let mut big = 0;
        for _ in 0..100 {
            let a = Array2::from_shape_fn((32, 32), |_| rng.sample::<f64, _>(StandardNormal));
            let b = Array2::from_shape_fn((32, 32), |_| rng.sample::<f64, _>(StandardNormal));
            big += usize::from(kernel_pearson(&a, &b).unwrap().abs() >= 0.3);
        }
        assert_eq!(big, 0);
    }

    #[test]
    fn single_trial_is_one_forward_pass() {
        let x = seq(Array2::from_shape_fn((4, 6), |(i, j)| ((i + 2 * j) % 5) as f64 - 2.0));
        let k = monte_carlo_kernel(&x, XU, 8, 1, 3).unwrap();
        let proj = make_projection_set(6, 8, XU, derive_seed(3, 0)).unwrap();
        assert_eq!(k, single_head_kernel(x.view(), &proj).unwrap());
        assert!(monte_carlo_kernel(&seq(Array2::zeros((3, 6))), XU, 8, 17, 3)
            .unwrap()
            .iter()
            .all(|v| *v == 0.0));
        assert!(monte_carlo_kernel(&x, XU, 8, 0, 3).is_err());
    }

    #[test]
    fn monte_carlo_matches_closed_form_on_orthonormal_rows() {
        // Uncentered unit rows leave only a faint similarity term on top of
        // the constant one; 1000 trials give r of roughly 0.6 to 0.9, so the
        // estimate is given more trials here.
        let x = seq(Array2::from_shape_fn((4, 16), |(i, j)| if i == j { 1.0 } else { 0.0 }));
        let k = monte_carlo_kernel(&x, XU, 1024, 20_000, 11).unwrap();
        let th = theoretical_kernel(&x, XU, 1024).unwrap();
        assert!(kernel_pearson(&k, &th).unwrap() >= 0.9);
    }

    #[test]
    fn accumulation_is_order_independent() {
        let x = seq(Array2::from_shape_fn((5, 4), |(i, j)| (i as f64 - j as f64) * 0.3));
        let trials = 250;
        let par = monte_carlo_kernel(&x, XU, 16, trials, 8).unwrap();
        let mut serial = Array2::<f64>::zeros((5, 5));
        for trial in (0..trials).rev() {
            let proj = make_projection_set(4, 16, XU, derive_seed(8, trial as u64)).unwrap();
            serial += &single_head_kernel(x.view(), &proj).unwrap();
        }
        serial /= trials as f64;
        Zip::from(&par).and(&serial).for_each(|a, b| assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs())));
        let one = crate::par::with_jobs(1, || monte_carlo_kernel(&x, XU, 16, trials, 8).unwrap());
        assert_eq!(one, par);
    }

    #[test]
    fn sweep_shapes_and_csv() {
        let x = seq(Array2::from_shape_fn((4, 4), |(i, j)| if i == j { 1.0 } else { 0.1 }));
        let r = dk_sweep(&[x], XU, &[8], 250, 1).unwrap();
        assert_eq!(r.mse_per_dk.len(), 1);
        assert_eq!(r.curve.iter().map(|p| p.trial_block).collect::<Vec<_>>(), vec![100, 200, 250]);
        assert_eq!(r.curve.last().unwrap().mse, r.mse_per_dk[0]);
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("d_k,trial_block,mse,pearson\n"));
        assert_eq!(text.lines().count(), 4);
        assert!(dk_sweep(&[], XU, &[8], 10, 1).is_err());
        let y = seq(Array2::<f64>::eye(3));
        assert!(dk_sweep(&[y], XU, &[64, 16], 10, 1).is_err());
    }

    #[test]
    fn generated_inputs() {
        let x = centered_unit_sequence(10, 16, 3).unwrap();
        for row in x.data().outer_iter() {
            assert!((row.dot(&row) - 1.0).abs() < 1e-12);
        }
        assert!(crate::rapk::row_mean(x.view()).iter().all(|m| m.abs() < 1e-15));
        assert!(centered_unit_sequence(7, 16, 3).is_err());
        assert_eq!(uneven_sequence(6, 8, 1).unwrap().data().dim(), (6, 8));
    }

    #[test]
    fn logit_report_examples() {
        let z = logit_concentration(&seq(Array2::zeros((3, 4))), XU, 8, false, 100, 0).unwrap();
        assert_eq!(z.frac_within_eps, 1.0);
        assert_eq!(z.empirical_std, 0.0);

        // unit-norm rows with unit-variance weights: every pair has std 1
        let x = seq(Array2::<f64>::eye(4));
        let r = logit_concentration(&x, InitScheme::normal(1.0), 64, false, 2000, 2).unwrap();
        assert!((r.analytic_std - 1.0).abs() < 1e-12);
        assert!((r.empirical_std - 1.0).abs() < 0.1);
        assert!(r.max_pair_rel_error < 0.1);
        assert!((0.0..=1.0).contains(&r.frac_within_eps));
    }

    #[test]
    fn wider_heads_shrink_logits_under_xavier() {
        let a = analytic_variance(XU, 64, 1024).unwrap();
        let b = analytic_variance(XU, 64, 32).unwrap();
        assert!(a < b);
        let x = seq(Array2::from_shape_fn((6, 64), |(i, j)| ((i * 7 + j) % 9) as f64 / 9.0 - 0.4));
        let wide = logit_concentration(&x, XU, 1024, false, 200, 4).unwrap();
        let narrow = logit_concentration(&x, XU, 32, false, 200, 4).unwrap();
        assert!(wide.empirical_std < narrow.empirical_std);
        assert!((wide.empirical_std / wide.analytic_std - 1.0).abs() < 0.1);
    }
}

//! Seeded random weight matrices.
//!
//! Scheme names follow the usual framework spellings, e.g. `xavier_uniform`,
//! `kaiming_uniform_relu`, `uniform_0.1`, `normal_0.02`, `trunc_normal_0.02`.
//! A numeric suffix sets the bound (uniform) or standard deviation (normal).

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed, Rng};

const ORTHO_ATTEMPTS: usize = 3;
const TRUNC_CUTOFF: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InitKind {
    XavierUniform,
    XavierNormal,
    /// Fan-in mode with ReLU gain √2.
    KaimingUniform,
    /// Fan-in mode with ReLU gain √2.
    KaimingNormal,
    Orthogonal,
    UniformBounded,
    NormalStd,
    /// Normal truncated at ±2σ by resampling.
    TruncNormalStd,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitScheme {
    pub kind: InitKind,
    /// Bound for `UniformBounded`, standard deviation for the normal kinds,
    /// unused otherwise.
    pub scale: f64,
}

impl InitScheme {
    pub const XAVIER_UNIFORM: InitScheme = InitScheme::new(InitKind::XavierUniform);

    pub const fn new(kind: InitKind) -> Self {
        InitScheme { kind, scale: 0.0 }
    }

    pub fn uniform(bound: f64) -> Self {
        InitScheme {
            kind: InitKind::UniformBounded,
            scale: bound,
        }
    }

    pub fn normal(std: f64) -> Self {
        InitScheme {
            kind: InitKind::NormalStd,
            scale: std,
        }
    }

    pub fn trunc_normal(std: f64) -> Self {
        InitScheme {
            kind: InitKind::TruncNormalStd,
            scale: std,
        }
    }

    fn uses_scale(&self) -> bool {
        matches!(
            self.kind,
            InitKind::UniformBounded | InitKind::NormalStd | InitKind::TruncNormalStd
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.uses_scale() && !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::invalid(format!(
                "scheme {self} needs a positive finite scale, got {}",
                self.scale
            )));
        }
        Ok(())
    }

    /// The eight schemes swept by the initialization sensitivity experiment.
    pub fn sweep_set() -> Vec<InitScheme> {
        vec![
            InitScheme::new(InitKind::XavierUniform),
            InitScheme::new(InitKind::KaimingUniform),
            InitScheme::uniform(0.1),
            InitScheme::new(InitKind::Orthogonal),
            InitScheme::new(InitKind::XavierNormal),
            InitScheme::new(InitKind::KaimingNormal),
            InitScheme::normal(0.02),
            InitScheme::trunc_normal(0.02),
        ]
    }
}

impl fmt::Display for InitScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            InitKind::XavierUniform => f.write_str("xavier_uniform"),
            InitKind::XavierNormal => f.write_str("xavier_normal"),
            InitKind::KaimingUniform => f.write_str("kaiming_uniform_relu"),
            InitKind::KaimingNormal => f.write_str("kaiming_normal_relu"),
            InitKind::Orthogonal => f.write_str("orthogonal"),
            InitKind::UniformBounded => write!(f, "uniform_{}", self.scale),
            InitKind::NormalStd => write!(f, "normal_{}", self.scale),
            InitKind::TruncNormalStd => write!(f, "trunc_normal_{}", self.scale),
        }
    }
}

impl FromStr for InitScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let unknown = || Error::UnknownName {
            what: "init scheme",
            value: s.to_string(),
        };
        let fixed = match s {
            "xavier_uniform" => Some(InitKind::XavierUniform),
            "xavier_normal" => Some(InitKind::XavierNormal),
            "kaiming_uniform_relu" | "kaiming_uniform" => Some(InitKind::KaimingUniform),
            "kaiming_normal_relu" | "kaiming_normal" => Some(InitKind::KaimingNormal),
            "orthogonal" => Some(InitKind::Orthogonal),
            _ => None,
        };
        if let Some(kind) = fixed {
            return Ok(InitScheme::new(kind));
        }
        // trunc_normal must be tried before normal
        let (kind, rest) = if let Some(rest) = s.strip_prefix("trunc_normal_") {
            (InitKind::TruncNormalStd, rest)
        } else if let Some(rest) = s.strip_prefix("normal_") {
            (InitKind::NormalStd, rest)
        } else if let Some(rest) = s.strip_prefix("uniform_") {
            (InitKind::UniformBounded, rest)
        } else {
            return Err(unknown());
        };
        let scale: f64 = rest.parse().map_err(|_| unknown())?;
        let scheme = InitScheme { kind, scale };
        scheme.validate()?;
        Ok(scheme)
    }
}

impl Serialize for InitScheme {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for InitScheme {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

fn standard_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + statrs::function::erf::erf(x / std::f64::consts::SQRT_2))
}

fn standard_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Per-element variance a scheme targets for a `rows × cols` matrix
/// (rows = fan-in).
pub fn analytic_variance(scheme: InitScheme, rows: usize, cols: usize) -> Result<f64> {
    check_shape(rows, cols)?;
    scheme.validate()?;
    let (r, c) = (rows as f64, cols as f64);
    Ok(match scheme.kind {
        InitKind::XavierUniform | InitKind::XavierNormal => 2.0 / (r + c),
        InitKind::KaimingUniform | InitKind::KaimingNormal => 2.0 / r,
        // unit-norm columns (or rows) spread over the longer side
        InitKind::Orthogonal => 1.0 / r.max(c),
        InitKind::UniformBounded => scheme.scale * scheme.scale / 3.0,
        InitKind::NormalStd => scheme.scale * scheme.scale,
        InitKind::TruncNormalStd => {
            let b = TRUNC_CUTOFF;
            let mass = 2.0 * standard_normal_cdf(b) - 1.0;
            scheme.scale * scheme.scale * (1.0 - 2.0 * b * standard_normal_pdf(b) / mass)
        }
    })
}

fn check_shape(rows: usize, cols: usize) -> Result<()> {
    if rows == 0 || cols == 0 {
        return Err(Error::invalid(format!(
            "matrix dimensions must be positive, got {rows}x{cols}"
        )));
    }
    Ok(())
}

fn fill_uniform(rows: usize, cols: usize, bound: f64, rng: &mut Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..=bound))
}

fn fill_normal(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = StandardNormal.sample(rng);
        std * z
    })
}

fn fill_trunc_normal(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= TRUNC_CUTOFF {
            break std * z;
        }
    })
}

/// Orthonormalizes the columns of a tall matrix in place with two passes of
/// modified Gram-Schmidt. Returns `false` if a column collapses.
fn orthonormalize_columns(m: &mut Array2<f64>) -> bool {
    let cols = m.ncols();
    for j in 0..cols {
        let original = m.column(j).dot(&m.column(j)).sqrt();
        if original == 0.0 {
            return false;
        }
        // two passes; dividing by the positive norm keeps diag(R) > 0
        for _ in 0..2 {
            for k in 0..j {
                let proj = m.column(k).dot(&m.column(j));
                let qk = m.column(k).to_owned();
                m.column_mut(j).scaled_add(-proj, &qk);
            }
            let norm = m.column(j).dot(&m.column(j)).sqrt();
            if norm <= 1e-10 * original {
                return false;
            }
            m.column_mut(j).mapv_inplace(|v| v / norm);
        }
    }
    true
}

fn orthogonal(rows: usize, cols: usize, seed: u64) -> Result<Array2<f64>> {
    let tall = rows >= cols;
    let (r, c) = if tall { (rows, cols) } else { (cols, rows) };
    for attempt in 0..ORTHO_ATTEMPTS {
        let s = if attempt == 0 {
            seed
        } else {
            derive_seed(seed, attempt as u64)
        };
        let mut m = fill_normal(r, c, 1.0, &mut rng_from_seed(s));
        if orthonormalize_columns(&mut m) {
            return Ok(if tall { m } else { m.reversed_axes() });
        }
    }
    Err(Error::DegenerateFactorization {
        attempts: ORTHO_ATTEMPTS,
    })
}

/// Fills a `rows × cols` matrix according to `scheme`. Identical arguments
/// give bit-identical output.
pub fn init_matrix(rows: usize, cols: usize, scheme: InitScheme, seed: u64) -> Result<Array2<f64>> {
    check_shape(rows, cols)?;
    scheme.validate()?;
    let (r, c) = (rows as f64, cols as f64);
    let mut rng = rng_from_seed(seed);
    Ok(match scheme.kind {
        InitKind::XavierUniform => fill_uniform(rows, cols, (6.0 / (r + c)).sqrt(), &mut rng),
        InitKind::XavierNormal => fill_normal(rows, cols, (2.0 / (r + c)).sqrt(), &mut rng),
        InitKind::KaimingUniform => fill_uniform(rows, cols, (6.0 / r).sqrt(), &mut rng),
        InitKind::KaimingNormal => fill_normal(rows, cols, (2.0 / r).sqrt(), &mut rng),
        InitKind::Orthogonal => orthogonal(rows, cols, seed)?,
        InitKind::UniformBounded => fill_uniform(rows, cols, scheme.scale, &mut rng),
        InitKind::NormalStd => fill_normal(rows, cols, scheme.scale, &mut rng),
        InitKind::TruncNormalStd => fill_trunc_normal(rows, cols, scheme.scale, &mut rng),
    })
}

/// Query/key/value projections for one attention head.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSet {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub sigma_q2: f64,
    pub sigma_k2: f64,
    pub sigma_v2: f64,
    pub d: usize,
    pub d_k: usize,
    pub seed: u64,
}

impl ProjectionSet {
    /// Builds a set from explicit matrices; the nominal variances are taken
    /// as given.
    pub fn from_matrices(
        w_q: Array2<f64>,
        w_k: Array2<f64>,
        w_v: Array2<f64>,
        sigmas: (f64, f64, f64),
    ) -> Result<Self> {
        let dim = w_q.dim();
        if w_k.dim() != dim || w_v.dim() != dim {
            return Err(Error::shape(format!(
                "projection shapes differ: {:?} {:?} {:?}",
                w_q.dim(),
                w_k.dim(),
                w_v.dim()
            )));
        }
        Ok(ProjectionSet {
            w_q,
            w_k,
            w_v,
            sigma_q2: sigmas.0,
            sigma_k2: sigmas.1,
            sigma_v2: sigmas.2,
            d: dim.0,
            d_k: dim.1,
            seed: 0,
        })
    }
}

pub fn make_projection_set(d: usize, d_k: usize, scheme: InitScheme, seed: u64) -> Result<ProjectionSet> {
    let sigma2 = analytic_variance(scheme, d, d_k)?;
    Ok(ProjectionSet {
        w_q: init_matrix(d, d_k, scheme, derive_seed(seed, 0))?,
        w_k: init_matrix(d, d_k, scheme, derive_seed(seed, 1))?,
        w_v: init_matrix(d, d_k, scheme, derive_seed(seed, 2))?,
        sigma_q2: sigma2,
        sigma_k2: sigma2,
        sigma_v2: sigma2,
        d,
        d_k,
        seed,
    })
}

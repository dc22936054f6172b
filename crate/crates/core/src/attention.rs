//! Forward pass of an untrained multi-head self-attention encoder.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::{init_matrix, make_projection_set, InitScheme, ProjectionSet};
use crate::rng::derive_seed;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `T × d` matrix of epoch representations, one row per epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    data: Array2<f64>,
}

impl FeatureSequence {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::invalid(format!(
                "feature sequence must be non-empty, got {:?}",
                data.dim()
            )));
        }
        if let Some(((r, c), _)) = data.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite feature at ({r}, {c})")));
        }
        Ok(FeatureSequence { data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::shape("ragged feature rows"));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let data = Array2::from_shape_vec((rows.len(), d), flat)
            .map_err(|e| Error::shape(e.to_string()))?;
        FeatureSequence::new(data)
    }

    pub fn t_len(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.data
    }

    /// Rows `start..end` as a new sequence.
    pub fn slice_rows(&self, start: usize, end: usize) -> FeatureSequence {
        FeatureSequence {
            data: self.data.slice(s![start..end, ..]).to_owned(),
        }
    }

    /// Row-stacks sequences that share a feature width.
    pub fn concat(parts: &[FeatureSequence]) -> Result<Self> {
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        let data = concatenate(Axis(0), &views).map_err(|e| Error::shape(e.to_string()))?;
        FeatureSequence::new(data)
    }
}

/// Row-stochastic `T × T` attention weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMatrix(Array2<f64>);

impl AttentionMatrix {
    pub fn weights(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    /// Wraps a matrix after checking nonnegativity and unit row sums.
    pub fn from_weights(w: Array2<f64>) -> Result<Self> {
        if w.nrows() != w.ncols() {
            return Err(Error::shape(format!("attention must be square, got {:?}", w.dim())));
        }
        for (i, row) in w.outer_iter().enumerate() {
            if row.iter().any(|v| *v < 0.0) || (row.sum() - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!("row {i} is not a probability vector")));
            }
        }
        Ok(AttentionMatrix(w))
    }
}

/// Scaled logits `S = (X W_Q)(X W_K)ᵀ / √d_k`.
pub fn attention_scores(x: &FeatureSequence, proj: &ProjectionSet) -> Result<Array2<f64>> {
    scores_view(x.view(), &proj.w_q, &proj.w_k)
}

fn scores_view(x: ArrayView2<f64>, w_q: &Array2<f64>, w_k: &Array2<f64>) -> Result<Array2<f64>> {
    if w_q.nrows() != x.ncols() || w_k.nrows() != x.ncols() {
        return Err(Error::shape(format!(
            "features have width {}, projections expect {}",
            x.ncols(),
            w_q.nrows()
        )));
    }
    let q = x.dot(w_q);
    let k = x.dot(w_k);
    let scale = 1.0 / (w_q.ncols() as f64).sqrt();
    Ok(q.dot(&k.t()) * scale)
}

/// Numerically stable row softmax.
pub fn softmax_rows(s: &Array2<f64>) -> AttentionMatrix {
    let mut out = s.clone();
    for mut row in out.outer_iter_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    AttentionMatrix(out)
}

/// `O = A · (X · W_V)`.
pub fn attention_apply(a: &AttentionMatrix, x: &FeatureSequence, w_v: &Array2<f64>) -> Result<Array2<f64>> {
    apply_view(a.weights(), x.view(), w_v)
}

fn apply_view(a: &Array2<f64>, x: ArrayView2<f64>, w_v: &Array2<f64>) -> Result<Array2<f64>> {
    if a.ncols() != x.nrows() || w_v.nrows() != x.ncols() {
        return Err(Error::shape(format!(
            "attention {:?}, features {:?}, value projection {:?}",
            a.dim(),
            x.dim(),
            w_v.dim()
        )));
    }
    Ok(a.dot(&x.dot(w_v)))
}

/// Gram matrix `O Oᵀ` of attention outputs.
pub fn empirical_kernel(o: ArrayView2<f64>) -> Array2<f64> {
    let k = o.dot(&o.t());
    // symmetrize exactly; the product is symmetric up to rounding
    (&k + &k.t()) * 0.5
}

/// One attention sublayer: scores → softmax → apply → `O Oᵀ`.
pub fn single_head_kernel(x: ArrayView2<f64>, proj: &ProjectionSet) -> Result<Array2<f64>> {
    let s = scores_view(x, &proj.w_q, &proj.w_k)?;
    let a = softmax_rows(&s);
    let o = apply_view(a.weights(), x, &proj.w_v)?;
    Ok(empirical_kernel(o.view()))
}

/// Per-row layer normalization with unit affine parameters.
pub fn layer_norm_rows(x: ArrayView2<f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    let width = x.ncols() as f64;
    for mut row in out.outer_iter_mut() {
        let mean = row.sum() / width;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / width;
        let denom = (var + LAYER_NORM_EPS).sqrt();
        row.mapv_inplace(|v| (v - mean) / denom);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub n_heads: usize,
    pub n_layers: usize,
    /// Total projection width; split across heads when the output linear is on.
    pub d_k: usize,
    pub use_attention: bool,
    pub use_output_linear: bool,
    pub use_ffn: bool,
    pub use_layernorm: bool,
    pub use_residual: bool,
    pub use_positional: bool,
    pub window_w: usize,
    pub init: InitScheme,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            n_heads: 8,
            n_layers: 1,
            d_k: 512,
            use_attention: true,
            use_output_linear: true,
            use_ffn: false,
            use_layernorm: true,
            use_residual: true,
            use_positional: false,
            window_w: 10,
            init: InitScheme::XAVIER_UNIFORM,
            seed: 111,
        }
    }
}

/// Named component subsets for ablation runs.
pub const COMPONENT_PRESETS: [&str; 8] = [
    "none",
    "ffn",
    "layernorm",
    "attention_no_linear",
    "attention",
    "attention_ffn",
    "attention_layernorm",
    "full",
];

impl EncoderConfig {
    pub fn identity() -> Self {
        EncoderConfig {
            use_attention: false,
            use_output_linear: false,
            use_ffn: false,
            use_layernorm: false,
            use_residual: false,
            use_positional: false,
            ..EncoderConfig::default()
        }
    }

    pub fn attention_only() -> Self {
        EncoderConfig {
            use_attention: true,
            ..EncoderConfig::identity()
        }
    }

    /// Applies one of [`COMPONENT_PRESETS`]. Residual connections are kept
    /// wherever a projection back to the input width exists.
    pub fn with_components(&self, preset: &str) -> Result<Self> {
        let base = EncoderConfig {
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            d_k: self.d_k,
            window_w: self.window_w,
            init: self.init,
            seed: self.seed,
            use_positional: self.use_positional,
            ..EncoderConfig::identity()
        };
        let (attn, linear, ffn, ln) = match preset {
            "none" => (false, false, false, false),
            "ffn" => (false, false, true, false),
            "layernorm" => (false, false, false, true),
            "attention_no_linear" => (true, false, false, false),
            "attention" => (true, true, false, false),
            "attention_ffn" => (true, true, true, false),
            "attention_layernorm" => (true, true, false, true),
            "full" => (true, true, true, true),
            other => {
                return Err(Error::UnknownName {
                    what: "component preset",
                    value: other.to_string(),
                })
            }
        };
        Ok(EncoderConfig {
            use_attention: attn,
            use_output_linear: linear,
            use_ffn: ffn,
            use_layernorm: ln,
            use_residual: linear || (ffn && !attn),
            ..base
        })
    }

    fn head_width(&self) -> usize {
        if self.use_output_linear {
            self.d_k / self.n_heads
        } else {
            self.d_k
        }
    }

    /// Checks the configuration against an input width `d`.
    pub fn validate(&self, d: usize) -> Result<()> {
        if self.n_heads == 0 || self.n_layers == 0 || self.window_w == 0 || self.d_k == 0 || d == 0 {
            return Err(Error::invalid(
                "n_heads, n_layers, window_w, d_k and feature width must be positive",
            ));
        }
        self.init.validate()?;
        if self.use_attention {
            if self.use_output_linear && !self.d_k.is_multiple_of(self.n_heads) {
                return Err(Error::invalid(format!(
                    "d_k = {} is not divisible by n_heads = {}",
                    self.d_k, self.n_heads
                )));
            }
            if !self.use_output_linear && self.use_residual && self.d_k != d {
                return Err(Error::invalid(format!(
                    "residual without output linear needs d_k == d ({} != {d})",
                    self.d_k
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    heads: Vec<ProjectionSet>,
    w_o: Option<Array2<f64>>,
    ffn: Option<(Array2<f64>, Array2<f64>)>,
}

/// Encoder with its random weights drawn once and then frozen.
#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: EncoderConfig,
    d: usize,
    positional: Option<Array2<f64>>,
    layers: Vec<EncoderLayer>,
}

impl Encoder {
    /// Draws every weight from `cfg.seed` for inputs of width `d`.
    pub fn new(cfg: &EncoderConfig, d: usize) -> Result<Self> {
        cfg.validate(d)?;
        let positional = if cfg.use_positional {
            Some(init_matrix(cfg.window_w, d, cfg.init, derive_seed(cfg.seed, 0x706f73))?)
        } else {
            None
        };
        let mut layers = Vec::with_capacity(cfg.n_layers);
        let mut width = d;
        for l in 0..cfg.n_layers {
            let layer_seed = derive_seed(cfg.seed, l as u64 + 1);
            let mut out_width = width;
            let (heads, w_o) = if cfg.use_attention {
                let hw = cfg.head_width();
                let heads = (0..cfg.n_heads)
                    .map(|h| make_projection_set(width, hw, cfg.init, derive_seed(layer_seed, h as u64)))
                    .collect::<Result<Vec<_>>>()?;
                let w_o = if cfg.use_output_linear {
                    Some(init_matrix(cfg.d_k, width, cfg.init, derive_seed(layer_seed, 1000))?)
                } else {
                    out_width = cfg.d_k;
                    None
                };
                (heads, w_o)
            } else {
                (Vec::new(), None)
            };
            if cfg.use_residual && out_width != width {
                return Err(Error::invalid(format!(
                    "layer {l}: residual needs matching widths ({width} -> {out_width})"
                )));
            }
            width = out_width;
            let ffn = if cfg.use_ffn {
                Some((
                    init_matrix(width, 4 * width, cfg.init, derive_seed(layer_seed, 1001))?,
                    init_matrix(4 * width, width, cfg.init, derive_seed(layer_seed, 1002))?,
                ))
            } else {
                None
            };
            layers.push(EncoderLayer { heads, w_o, ffn });
        }
        Ok(Encoder {
            cfg: cfg.clone(),
            d,
            positional,
            layers,
        })
    }

    /// Single-layer attention-only encoder over explicit head projections.
    /// Heads are averaged, there is no output linear.
    pub fn from_heads(heads: Vec<ProjectionSet>) -> Result<Self> {
        let first = heads
            .first()
            .ok_or_else(|| Error::invalid("at least one head is required"))?;
        let (d, d_k) = (first.d, first.d_k);
        if heads.iter().any(|h| h.d != d || h.d_k != d_k) {
            return Err(Error::shape("heads must share one projection shape"));
        }
        let cfg = EncoderConfig {
            n_heads: heads.len(),
            d_k,
            ..EncoderConfig::attention_only()
        };
        Ok(Encoder {
            cfg,
            d,
            positional: None,
            layers: vec![EncoderLayer {
                heads,
                w_o: None,
                ffn: None,
            }],
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Input width the weights were drawn for.
    pub fn input_dim(&self) -> usize {
        self.d
    }

    fn multi_head(&self, layer: &EncoderLayer, h: ArrayView2<f64>) -> Result<Array2<f64>> {
        let outs = layer
            .heads
            .iter()
            .map(|p| {
                let s = scores_view(h, &p.w_q, &p.w_k)?;
                apply_view(softmax_rows(&s).weights(), h, &p.w_v)
            })
            .collect::<Result<Vec<_>>>()?;
        match &layer.w_o {
            Some(w_o) => {
                let views: Vec<_> = outs.iter().map(|o| o.view()).collect();
                let cat = concatenate(Axis(1), &views).map_err(|e| Error::shape(e.to_string()))?;
                Ok(cat.dot(w_o))
            }
            None => {
                let mut acc = outs[0].clone();
                for o in &outs[1..] {
                    acc += o;
                }
                Ok(acc / outs.len() as f64)
            }
        }
    }

    /// Runs the encoder on one window of at most `window_w` epochs.
    pub fn forward(&self, x: &FeatureSequence) -> Result<FeatureSequence> {
        if x.dim() != self.d {
            return Err(Error::shape(format!(
                "encoder expects width {}, got {}",
                self.d,
                x.dim()
            )));
        }
        let t = x.t_len();
        let mut h = x.data().clone();
        if let Some(pos) = &self.positional {
            if t > pos.nrows() {
                return Err(Error::shape(format!(
                    "window of {t} epochs exceeds positional table of {}",
                    pos.nrows()
                )));
            }
            h += &pos.slice(s![..t, ..]);
        }
        let cfg = &self.cfg;
        for layer in &self.layers {
            if cfg.use_attention {
                let a = self.multi_head(layer, h.view())?;
                h = if cfg.use_residual { h + a } else { a };
            }
            if cfg.use_layernorm {
                h = layer_norm_rows(h.view());
            }
            if let Some((w1, w2)) = &layer.ffn {
                let f = h.dot(w1).mapv(|v| v.max(0.0)).dot(w2);
                h = if cfg.use_residual { h + f } else { f };
                if cfg.use_layernorm {
                    h = layer_norm_rows(h.view());
                }
            }
        }
        FeatureSequence::new(h)
    }
}

/// Draws an encoder from `cfg` and applies it to `x`.
pub fn encoder_forward(x: &FeatureSequence, cfg: &EncoderConfig) -> Result<FeatureSequence> {
    if x.t_len() > cfg.window_w {
        return Err(Error::shape(format!(
            "sequence of {} epochs exceeds window_w = {}; window it first",
            x.t_len(),
            cfg.window_w
        )));
    }
    Encoder::new(cfg, x.dim())?.forward(x)
}

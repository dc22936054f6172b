//! Sequence smoothers: sliding moving average and majority filter, blocked
//! uniform attention, and the frozen random Transformer. Plus the
//! nearest-centroid head used to turn features into stage labels.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::attention::{Encoder, EncoderConfig, FeatureSequence};
use crate::error::{Error, Result};
use crate::par;

/// Hypnogram: one stage label in `0..n_classes` per epoch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageSequence {
    labels: Vec<usize>,
    n_classes: usize,
}

impl StageSequence {
    pub fn new(labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if n_classes == 0 {
            return Err(Error::invalid("n_classes must be positive"));
        }
        if let Some((i, l)) = labels.iter().enumerate().find(|(_, &l)| l >= n_classes) {
            return Err(Error::invalid(format!(
                "label {l} at position {i} outside 0..{n_classes}"
            )));
        }
        Ok(StageSequence { labels, n_classes })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn concat(parts: &[StageSequence]) -> Result<Self> {
        let c = parts.first().map_or(1, |p| p.n_classes);
        if parts.iter().any(|p| p.n_classes != c) {
            return Err(Error::shape("class counts differ"));
        }
        Ok(StageSequence {
            labels: parts.iter().flat_map(|p| p.labels.iter().copied()).collect(),
            n_classes: c,
        })
    }
}

/// Per-epoch class probabilities, `T × C`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbSequence {
    probs: Array2<f64>,
}

impl ProbSequence {
    pub fn new(probs: Array2<f64>) -> Result<Self> {
        if probs.ncols() == 0 {
            return Err(Error::invalid("probability rows need at least one class"));
        }
        for (t, row) in probs.outer_iter().enumerate() {
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) || (row.sum() - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(format!("row {t} is not a probability vector")));
            }
        }
        Ok(ProbSequence { probs })
    }

    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }

    pub fn t_len(&self) -> usize {
        self.probs.nrows()
    }

    pub fn n_classes(&self) -> usize {
        self.probs.ncols()
    }

    /// Row argmax with the smallest index winning ties.
    pub fn argmax(&self) -> StageSequence {
        let labels = self.probs.outer_iter().map(|r| argmax(r.iter().copied())).collect();
        StageSequence {
            labels,
            n_classes: self.n_classes(),
        }
    }
}

fn argmax(it: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in it.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SmootherKind {
    None,
    MovingAverage,
    Median,
    FixedAttention,
    RandomTransformer,
}

impl SmootherKind {
    pub const ALL: [SmootherKind; 5] = [
        SmootherKind::None,
        SmootherKind::MovingAverage,
        SmootherKind::Median,
        SmootherKind::FixedAttention,
        SmootherKind::RandomTransformer,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            SmootherKind::None => "none",
            SmootherKind::MovingAverage => "moving_average",
            SmootherKind::Median => "median",
            SmootherKind::FixedAttention => "fixed_attention",
            SmootherKind::RandomTransformer => "random_transformer",
        }
    }

    /// Smoothers that act on features and need their own classifier fit.
    pub fn on_features(&self) -> bool {
        matches!(self, SmootherKind::FixedAttention | SmootherKind::RandomTransformer)
    }
}

impl fmt::Display for SmootherKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SmootherKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SmootherKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownName {
                what: "smoother",
                value: s.to_string(),
            })
    }
}

impl Serialize for SmootherKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for SmootherKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// How the "median" baseline treats categorical labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MedianMode {
    /// Most frequent label in the window.
    #[default]
    Modal,
    /// Lower median of the integer label values.
    Integer,
}

/// Consecutive non-overlapping `[start, end)` windows covering `0..t_len`.
pub fn window_partition(t_len: usize, w: usize) -> Vec<(usize, usize)> {
    let w = w.max(1);
    (0..t_len)
        .step_by(w)
        .map(|start| (start, (start + w).min(t_len)))
        .collect()
}

fn centered_range(t: usize, t_len: usize, w: usize) -> (usize, usize) {
    let half = w / 2;
    (t.saturating_sub(half), (t + half + 1).min(t_len))
}

/// Centered sliding mean of probability rows, truncated at the edges, then
/// argmax.
pub fn moving_average_smooth(p: &ProbSequence, w: usize) -> Result<StageSequence> {
    if w == 0 {
        return Err(Error::invalid("window must be at least 1"));
    }
    let t_len = p.t_len();
    let labels = (0..t_len)
        .map(|t| {
            let (lo, hi) = centered_range(t, t_len, w);
            let mean = p
                .probs()
                .slice(ndarray::s![lo..hi, ..])
                .sum_axis(Axis(0));
            argmax(mean.iter().copied())
        })
        .collect();
    StageSequence::new(labels, p.n_classes())
}

/// Centered sliding modal filter. Ties keep the centre label if it is among
/// the modes, otherwise the smallest tied label.
pub fn majority_filter_smooth(s: &StageSequence, w: usize) -> Result<StageSequence> {
    smooth_labels(s, w, MedianMode::Modal)
}

pub fn smooth_labels(s: &StageSequence, w: usize, mode: MedianMode) -> Result<StageSequence> {
    if w == 0 {
        return Err(Error::invalid("window must be at least 1"));
    }
    let labels = s.labels();
    let c = s.n_classes();
    let out = (0..labels.len())
        .map(|t| {
            let (lo, hi) = centered_range(t, labels.len(), w);
            let window = &labels[lo..hi];
            match mode {
                MedianMode::Modal => {
                    let mut counts = vec![0usize; c];
                    for &l in window {
                        counts[l] += 1;
                    }
                    let top = *counts.iter().max().unwrap_or(&0);
                    if counts[labels[t]] == top {
                        labels[t]
                    } else {
                        counts.iter().position(|&n| n == top).unwrap_or(labels[t])
                    }
                }
                MedianMode::Integer => {
                    let mut sorted = window.to_vec();
                    sorted.sort_unstable();
                    sorted[(sorted.len() - 1) / 2]
                }
            }
        })
        .collect();
    StageSequence::new(out, c)
}

/// Replaces every row by the mean of its non-overlapping window.
pub fn fixed_attention_smooth(x: &FeatureSequence, w: usize) -> Result<FeatureSequence> {
    if w == 0 {
        return Err(Error::invalid("window must be at least 1"));
    }
    let mut out = x.data().clone();
    for (start, end) in window_partition(x.t_len(), w) {
        let mean: Array1<f64> = x
            .data()
            .slice(ndarray::s![start..end, ..])
            .mean_axis(Axis(0))
            .expect("window is non-empty");
        for mut row in out.slice_mut(ndarray::s![start..end, ..]).outer_iter_mut() {
            row.assign(&mean);
        }
    }
    FeatureSequence::new(out)
}

/// Applies one frozen encoder to each non-overlapping window of
/// `encoder.config().window_w` epochs. Windows are independent and may run
/// concurrently; the output keeps epoch order.
pub fn random_transformer_smooth_with(encoder: &Encoder, x: &FeatureSequence) -> Result<FeatureSequence> {
    let windows = window_partition(x.t_len(), encoder.config().window_w);
    let parts = par::try_map_indexed(windows.len(), |i| {
        let (start, end) = windows[i];
        encoder.forward(&x.slice_rows(start, end))
    })?;
    FeatureSequence::concat(&parts)
}

/// Draws the encoder from `cfg.seed` once and smooths `x` window by window.
pub fn random_transformer_smooth(x: &FeatureSequence, cfg: &EncoderConfig) -> Result<FeatureSequence> {
    let encoder = Encoder::new(cfg, x.dim())?;
    random_transformer_smooth_with(&encoder, x)
}

/// Class-mean centroids; every class must be present at fit time.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidClassifier {
    pub centroids: Array2<f64>,
    pub class_counts: Vec<usize>,
}

pub fn fit_centroids(x: &FeatureSequence, y: &StageSequence, c: usize) -> Result<CentroidClassifier> {
    if x.t_len() != y.len() {
        return Err(Error::shape(format!(
            "{} feature rows but {} labels",
            x.t_len(),
            y.len()
        )));
    }
    if c == 0 || y.n_classes() > c {
        return Err(Error::invalid(format!(
            "labels span {} classes but C = {c}",
            y.n_classes()
        )));
    }
    let mut sums = Array2::<f64>::zeros((c, x.dim()));
    let mut counts = vec![0usize; c];
    for (row, &l) in x.data().outer_iter().zip(y.labels()) {
        sums.row_mut(l).scaled_add(1.0, &row);
        counts[l] += 1;
    }
    if let Some(class) = counts.iter().position(|&n| n == 0) {
        return Err(Error::MissingClass { class });
    }
    for (mut row, &n) in sums.outer_iter_mut().zip(&counts) {
        row.mapv_inplace(|v| v / n as f64);
    }
    Ok(CentroidClassifier {
        centroids: sums,
        class_counts: counts,
    })
}

/// Nearest centroid by Euclidean distance; ties go to the smallest class.
pub fn classify(x: &FeatureSequence, clf: &CentroidClassifier) -> Result<StageSequence> {
    if x.dim() != clf.centroids.ncols() {
        return Err(Error::shape(format!(
            "features have width {}, centroids {}",
            x.dim(),
            clf.centroids.ncols()
        )));
    }
    let labels = x
        .data()
        .outer_iter()
        .map(|row| {
            let mut best = (0, f64::INFINITY);
            for (k, c) in clf.centroids.outer_iter().enumerate() {
                let d2: f64 = row.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
                if d2 < best.1 {
                    best = (k, d2);
                }
            }
            best.0
        })
        .collect();
    StageSequence::new(labels, clf.centroids.nrows())
}

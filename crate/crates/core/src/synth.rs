//! Synthetic hypnograms, class-conditional features and noisy per-epoch
//! probabilities.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attention::FeatureSequence;
use crate::error::{Error, Result};
use crate::par;
use crate::rng::{derive_seed, rng_from_seed};
use crate::smoothers::{ProbSequence, StageSequence};

/// Probability mass assigned to the perceived class in a noisy row.
pub const PROB_CONFIDENCE: f64 = 0.8;

const SPLIT_STREAM: u64 = 0x0073_706c_6974;

/// How the non-diagonal transition mass is spread.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OffDiag {
    #[default]
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub t_len: usize,
    pub n_subjects: usize,
    pub self_prob: f64,
    pub off_diag: OffDiag,
    pub feat_dim: usize,
    pub class_sep: f64,
    pub noise_std: f64,
    pub label_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_classes: 5,
            t_len: 1000,
            n_subjects: 20,
            self_prob: 0.92,
            off_diag: OffDiag::Uniform,
            feat_dim: 128,
            class_sep: 1.0,
            noise_std: 0.25,
            label_noise: 0.3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if self.n_classes < 2 {
            return Err(Error::invalid("n_classes must be at least 2"));
        }
        if self.t_len < 2 {
            return Err(Error::invalid("t_len must be at least 2"));
        }
        if !unit(self.self_prob) || !unit(self.label_noise) {
            return Err(Error::invalid("self_prob and label_noise must lie in [0, 1]"));
        }
        if !(self.class_sep >= 0.0 && self.class_sep.is_finite()) {
            return Err(Error::invalid("class_sep must be finite and non-negative"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::invalid("noise_std must be finite and non-negative"));
        }
        if self.feat_dim < self.n_classes {
            return Err(Error::invalid(format!(
                "feat_dim {} is smaller than n_classes {}",
                self.feat_dim, self.n_classes
            )));
        }
        Ok(())
    }

    pub fn subject_seed(&self, subject: usize) -> u64 {
        derive_seed(self.seed, subject as u64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub features: FeatureSequence,
    pub labels: StageSequence,
    pub probs: Option<ProbSequence>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub n_classes: usize,
    pub feat_dim: usize,
    pub subjects: Vec<Subject>,
    /// Generator settings, when the data came from [`generate_dataset`].
    pub config: Option<SynthConfig>,
}

impl SynthDataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Subject> {
        self.subjects.iter().filter(move |s| s.split == split)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.subjects.iter().enumerate() {
            let t = s.labels.len();
            if s.features.t_len() != t || s.probs.as_ref().is_some_and(|p| p.t_len() != t) {
                return Err(Error::shape(format!("subject {i} has inconsistent lengths")));
            }
            if s.features.dim() != self.feat_dim || s.labels.n_classes() != self.n_classes {
                return Err(Error::shape(format!("subject {i} disagrees with dataset shape")));
            }
            if s.probs.as_ref().is_some_and(|p| p.n_classes() != self.n_classes) {
                return Err(Error::shape(format!("subject {i} has the wrong number of prob columns")));
            }
        }
        for split in [Split::Train, Split::Test] {
            if self.split(split).next().is_none() {
                return Err(Error::invalid(format!("dataset has no {split:?} subjects")));
            }
        }
        Ok(())
    }
}

fn other_class(rng: &mut impl rand::Rng, c: usize, n: usize) -> usize {
    (c + 1 + rng.random_range(0..n - 1)) % n
}

/// First-order Markov chain with uniform initial state and uniform
/// off-diagonal moves.
pub fn gen_hypnogram(cfg: &SynthConfig, subject_seed: u64) -> Result<StageSequence> {
    cfg.validate()?;
    let mut rng = rng_from_seed(derive_seed(subject_seed, 0));
    let c = cfg.n_classes;
    let mut labels = Vec::with_capacity(cfg.t_len);
    let mut cur = rng.random_range(0..c);
    labels.push(cur);
    for _ in 1..cfg.t_len {
        if rng.random::<f64>() >= cfg.self_prob {
            cur = other_class(&mut rng, cur, c);
        }
        labels.push(cur);
    }
    StageSequence::new(labels, c)
}

/// Gaussian features around `class_sep · e_label`.
pub fn gen_features(labels: &StageSequence, cfg: &SynthConfig, subject_seed: u64) -> Result<FeatureSequence> {
    if cfg.feat_dim < labels.n_classes() {
        return Err(Error::invalid(format!(
            "feat_dim {} cannot hold {} orthogonal class means",
            cfg.feat_dim,
            labels.n_classes()
        )));
    }
    let mut rng = rng_from_seed(derive_seed(subject_seed, 2));
    let mut x = Array2::<f64>::zeros((labels.len(), cfg.feat_dim));
    for (mut row, &l) in x.outer_iter_mut().zip(labels.labels()) {
        for v in row.iter_mut() {
            *v = cfg.noise_std * rng.sample::<f64, _>(StandardNormal);
        }
        row[l] += cfg.class_sep;
    }
    FeatureSequence::new(x)
}

/// Confident rows on the true class, or with probability `label_noise` on a
/// uniformly drawn wrong class.
pub fn gen_noisy_probs(labels: &StageSequence, label_noise: f64, c: usize, subject_seed: u64) -> Result<ProbSequence> {
    if !(0.0..=1.0).contains(&label_noise) {
        return Err(Error::invalid("label_noise must lie in [0, 1]"));
    }
    if c < 2 || labels.n_classes() > c {
        return Err(Error::invalid(format!("cannot spread labels over {c} classes")));
    }
    let mut rng = rng_from_seed(derive_seed(subject_seed, 1));
    let rest = (1.0 - PROB_CONFIDENCE) / (c - 1) as f64;
    let mut p = Array2::from_elem((labels.len(), c), rest);
    for (t, &l) in labels.labels().iter().enumerate() {
        let k = if rng.random::<f64>() < label_noise {
            other_class(&mut rng, l, c)
        } else {
            l
        };
        p[[t, k]] = PROB_CONFIDENCE;
    }
    ProbSequence::new(p)
}

/// Rounded split sizes, each at least one.
pub fn split_counts(n_subjects: usize, ratios: (f64, f64, f64)) -> Result<[usize; 3]> {
    let r = [ratios.0, ratios.1, ratios.2];
    if r.iter().any(|&v| v.is_nan() || v <= 0.0) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid("split ratios must be positive and sum to 1"));
    }
    if n_subjects < 3 {
        return Err(Error::invalid(format!(
            "need at least 3 subjects to split, got {n_subjects}"
        )));
    }
    let mut counts = r.map(|v| ((n_subjects as f64 * v).round() as usize).max(1));
    while counts.iter().sum::<usize>() != n_subjects {
        let total: usize = counts.iter().sum();
        let largest = (0..3).max_by_key(|&i| (counts[i], usize::MAX - i)).unwrap();
        if total > n_subjects {
            counts[largest] -= 1;
        } else {
            counts[largest] += 1;
        }
    }
    Ok(counts)
}

/// Deterministic shuffled assignment of subjects to splits.
pub fn split_subjects(n_subjects: usize, ratios: (f64, f64, f64), seed: u64) -> Result<Vec<Split>> {
    let [n_train, n_val, _] = split_counts(n_subjects, ratios)?;
    let mut order: Vec<usize> = (0..n_subjects).collect();
    order.shuffle(&mut rng_from_seed(derive_seed(seed, SPLIT_STREAM)));
    let mut out = vec![Split::Test; n_subjects];
    for (rank, &s) in order.iter().enumerate() {
        out[s] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(out)
}

/// Builds every subject. The noisy probabilities play the role of an epoch
/// encoder's output, and the features are drawn around the class that
/// encoder perceived, so features and probabilities share the same errors.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let splits = split_subjects(cfg.n_subjects, (0.8, 0.1, 0.1), cfg.seed)?;
    let subjects = par::try_map_indexed(cfg.n_subjects, |i| {
        let seed = cfg.subject_seed(i);
        let labels = gen_hypnogram(cfg, seed)?;
        let probs = gen_noisy_probs(&labels, cfg.label_noise, cfg.n_classes, seed)?;
        let features = gen_features(&probs.argmax(), cfg, seed)?;
        Ok::<_, Error>(Subject {
            features,
            labels,
            probs: Some(probs),
            split: splits[i],
        })
    })?;
    Ok(SynthDataset {
        n_classes: cfg.n_classes,
        feat_dim: cfg.feat_dim,
        subjects,
        config: Some(cfg.clone()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{accuracy, wte};
    use crate::smoothers::{classify, fit_centroids};

    fn cfg(c: usize, t: usize, self_prob: f64) -> SynthConfig {
        SynthConfig {
            n_classes: c,
            t_len: t,
            self_prob,
            feat_dim: c.max(5),
            ..SynthConfig::default()
        }
    }

    fn stay_rate(s: &StageSequence) -> f64 {
        let l = s.labels();
        l.windows(2).filter(|w| w[0] == w[1]).count() as f64 / (l.len() - 1) as f64
    }

    #[test]
    fn hypnogram_extremes() {
        let s = gen_hypnogram(&cfg(5, 200, 1.0), 3).unwrap();
        assert!(s.labels().iter().all(|&l| l == s.labels()[0]));
        let s = gen_hypnogram(&cfg(2, 200, 0.0), 3).unwrap();
        assert!(s.labels().windows(2).all(|w| w[0] != w[1]));
    }

    #[test]
    fn hypnogram_stay_rate() {
        let s = gen_hypnogram(&cfg(5, 100_000, 0.9), 42).unwrap();
        assert!((stay_rate(&s) - 0.9).abs() < 0.01);
    }

    #[test]
    fn wte_falls_with_inertia() {
        let w: Vec<f64> = [0.5, 0.8, 0.95]
            .iter()
            .map(|&p| wte(&gen_hypnogram(&cfg(5, 10_000, p), 9).unwrap()).unwrap())
            .collect();
        assert!(w[0] > w[1] && w[1] > w[2], "{w:?}");
    }

    #[test]
    fn noisy_probs_rates() {
        let labels = gen_hypnogram(&cfg(5, 1000, 0.9), 1).unwrap();
        assert_eq!(gen_noisy_probs(&labels, 0.0, 5, 1).unwrap().argmax(), labels);
        let flipped = gen_noisy_probs(&labels, 1.0, 5, 1).unwrap().argmax();
        assert!(flipped.labels().iter().zip(labels.labels()).all(|(a, b)| a != b));

        let labels = gen_hypnogram(&cfg(5, 100_000, 0.9), 2).unwrap();
        let p = gen_noisy_probs(&labels, 0.3, 5, 2).unwrap();
        let acc = accuracy(&p.argmax(), &labels).unwrap();
        let stderr = (0.3f64 * 0.7 / 100_000.0).sqrt();
        assert!((acc - 0.7).abs() < 0.01 && (acc - 0.7).abs() < 3.0 * stderr, "{acc}");
        for row in p.probs().outer_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    fn centroid_accuracy(c: &SynthConfig, seed: u64) -> f64 {
        let train = gen_hypnogram(c, seed).unwrap();
        let test = gen_hypnogram(c, seed + 1).unwrap();
        let clf = fit_centroids(&gen_features(&train, c, seed).unwrap(), &train, c.n_classes).unwrap();
        let pred = classify(&gen_features(&test, c, seed + 1).unwrap(), &clf).unwrap();
        accuracy(&pred, &test).unwrap()
    }

    #[test]
    fn feature_separation() {
        let exact = SynthConfig { noise_std: 0.0, ..cfg(5, 500, 0.9) };
        assert_eq!(centroid_accuracy(&exact, 4), 1.0);

        let blind = SynthConfig { class_sep: 0.0, noise_std: 1.0, ..cfg(5, 10_000, 0.2) };
        assert!((centroid_accuracy(&blind, 5) - 0.2).abs() < 0.05);

        let clear = SynthConfig { class_sep: 1.0, noise_std: 0.25, ..cfg(5, 5_000, 0.9) };
        assert!(centroid_accuracy(&clear, 6) > 0.95);

        let narrow = SynthConfig { feat_dim: 3, ..cfg(5, 10, 0.9) };
        assert!(gen_features(&gen_hypnogram(&cfg(5, 10, 0.9), 0).unwrap(), &narrow, 0).is_err());
    }

    #[test]
    fn split_sizes() {
        let count = |v: &[Split], s| v.iter().filter(|&&x| x == s).count();
        for (n, want) in [(10, [8, 1, 1]), (20, [16, 2, 2]), (3, [1, 1, 1])] {
            let v = split_subjects(n, (0.8, 0.1, 0.1), 7).unwrap();
            assert_eq!([count(&v, Split::Train), count(&v, Split::Val), count(&v, Split::Test)], want);
        }
        assert_eq!(
            split_subjects(20, (0.8, 0.1, 0.1), 7).unwrap(),
            split_subjects(20, (0.8, 0.1, 0.1), 7).unwrap()
        );
        assert!(split_subjects(2, (0.8, 0.1, 0.1), 7).is_err());
        assert!(split_subjects(10, (0.8, 0.1, 0.2), 7).is_err());
    }

    #[test]
    fn dataset_is_deterministic_and_consistent() {
        let c = SynthConfig { t_len: 50, n_subjects: 5, feat_dim: 8, ..SynthConfig::default() };
        let a = generate_dataset(&c).unwrap();
        assert_eq!(a, generate_dataset(&c).unwrap());
        a.validate().unwrap();
        assert_eq!(a.subjects.len(), 5);
        let other = generate_dataset(&SynthConfig { seed: 1, ..c }).unwrap();
        assert_ne!(a.subjects[0].labels, other.subjects[0].labels);
    }
}

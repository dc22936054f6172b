//! Experiment orchestration: run configuration, the evaluation pipeline,
//! parameter sweeps and the metric/accuracy correlation study.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{EncoderConfig, FeatureSequence};
use crate::error::{Error, Result};
use crate::init::InitScheme;
use crate::metrics::{accuracy, f1_scores, lsii_terms, mean_or_none, pearson, wte, EvalReport};
use crate::par;
use crate::smoothers::{
    classify, fit_centroids, fixed_attention_smooth, moving_average_smooth, random_transformer_smooth_with,
    smooth_labels, CentroidClassifier, MedianMode, SmootherKind, StageSequence,
};
use crate::synth::{generate_dataset, Split, SynthConfig, SynthDataset};
use crate::Encoder;

pub mod io;

pub const DEFAULT_SEEDS: [u64; 5] = [111, 222, 333, 444, 555];

/// Where the data comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Dir(PathBuf),
    Synth(SynthConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub synth: Option<SynthConfig>,
    pub smoother: SmootherKind,
    /// Smoothing window for every smoother, and the LSII window. It also
    /// sets the encoder's `window_w` on resolution.
    pub window: usize,
    pub median_mode: MedianMode,
    pub encoder: EncoderConfig,
    pub seeds: Vec<u64>,
    /// Output directory. Not part of the digest.
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: None,
            synth: None,
            smoother: SmootherKind::RandomTransformer,
            window: 10,
            median_mode: MedianMode::Modal,
            encoder: EncoderConfig::default(),
            seeds: DEFAULT_SEEDS.to_vec(),
            out: None,
        }
    }
}

impl RunConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        io::read_json(path)
    }

    /// Fills in the default synthetic source when no source is given and
    /// ties the encoder window to `window`.
    pub fn resolved(&self) -> Result<Self> {
        let mut cfg = self.clone();
        if cfg.dataset.is_none() && cfg.synth.is_none() {
            cfg.synth = Some(SynthConfig::default());
        }
        cfg.encoder.window_w = cfg.window;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset.is_some() == self.synth.is_some() {
            return Err(Error::invalid("exactly one of `dataset` and `synth` must be set"));
        }
        if self.seeds.is_empty() {
            return Err(Error::invalid("seed list must be nonempty"));
        }
        if self.window == 0 {
            return Err(Error::invalid("window must be at least 1"));
        }
        if let Some(s) = &self.synth {
            s.validate()?;
        }
        Ok(())
    }

    pub fn source(&self) -> Result<DataSource> {
        match (&self.dataset, &self.synth) {
            (Some(p), None) => Ok(DataSource::Dir(p.clone())),
            (None, Some(s)) => Ok(DataSource::Synth(s.clone())),
            _ => Err(Error::invalid("exactly one of `dataset` and `synth` must be set")),
        }
    }

    /// Hex SHA-256 of the resolved config as compact JSON, output path
    /// excluded.
    pub fn digest(&self) -> Result<String> {
        let mut c = self.resolved()?;
        c.out = None;
        let bytes = serde_json::to_vec(&c).map_err(|e| Error::invalid(e.to_string()))?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }
}

pub fn load_source(src: &DataSource) -> Result<SynthDataset> {
    match src {
        DataSource::Dir(p) => io::load_dataset(p),
        DataSource::Synth(s) => generate_dataset(s),
    }
}

/// Dataset plus the unsmoothed classifier and its test predictions, which
/// every smoother is compared against.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub dataset: SynthDataset,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub base_clf: CentroidClassifier,
    /// Per test subject, in `test` order.
    pub base_preds: Vec<StageSequence>,
}

fn stack(parts: Vec<FeatureSequence>) -> Result<FeatureSequence> {
    FeatureSequence::concat(&parts)
}

pub fn prepare(dataset: SynthDataset) -> Result<Prepared> {
    dataset.validate()?;
    let idx = |s: Split| -> Vec<usize> {
        (0..dataset.subjects.len())
            .filter(|&i| dataset.subjects[i].split == s)
            .collect()
    };
    let (train, test) = (idx(Split::Train), idx(Split::Test));
    let c = dataset.n_classes;
    let x = stack(train.iter().map(|&i| dataset.subjects[i].features.clone()).collect())?;
    let y = StageSequence::concat(&train.iter().map(|&i| dataset.subjects[i].labels.clone()).collect::<Vec<_>>())?;
    let base_clf = fit_centroids(&x, &y, c)?;
    let base_preds = test
        .iter()
        .map(|&i| classify(&dataset.subjects[i].features, &base_clf))
        .collect::<Result<Vec<_>>>()?;
    Ok(Prepared {
        dataset,
        train,
        test,
        base_clf,
        base_preds,
    })
}

/// Settings of one evaluation point.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSpec {
    pub smoother: SmootherKind,
    pub window: usize,
    pub median_mode: MedianMode,
    pub encoder: EncoderConfig,
    pub seed: u64,
}

impl EvalSpec {
    pub fn from_config(cfg: &RunConfig, seed: u64) -> Self {
        EvalSpec {
            smoother: cfg.smoother,
            window: cfg.window,
            median_mode: cfg.median_mode,
            encoder: EncoderConfig {
                window_w: cfg.window,
                seed,
                ..cfg.encoder.clone()
            },
            seed,
        }
    }
}

fn smooth_features(
    prep: &Prepared,
    subjects: &[usize],
    f: impl Fn(&FeatureSequence) -> Result<FeatureSequence> + Sync + Send,
) -> Result<Vec<FeatureSequence>> {
    par::try_map_indexed(subjects.len(), |k| f(&prep.dataset.subjects[subjects[k]].features))
}

fn feature_path_preds(
    prep: &Prepared,
    f: impl Fn(&FeatureSequence) -> Result<FeatureSequence> + Sync + Send,
) -> Result<Vec<StageSequence>> {
    let ds = &prep.dataset;
    let train_x = stack(smooth_features(prep, &prep.train, &f)?)?;
    let train_y = StageSequence::concat(&prep.train.iter().map(|&i| ds.subjects[i].labels.clone()).collect::<Vec<_>>())?;
    let clf = fit_centroids(&train_x, &train_y, ds.n_classes)?;
    smooth_features(prep, &prep.test, &f)?
        .iter()
        .map(|x| classify(x, &clf))
        .collect()
}

/// Smoothed test predictions, one sequence per test subject.
pub fn smoothed_predictions(prep: &Prepared, spec: &EvalSpec) -> Result<Vec<StageSequence>> {
    let w = spec.window;
    match spec.smoother {
        SmootherKind::None => Ok(prep.base_preds.clone()),
        SmootherKind::Median => prep
            .base_preds
            .iter()
            .map(|s| smooth_labels(s, w, spec.median_mode))
            .collect(),
        SmootherKind::MovingAverage => prep
            .test
            .iter()
            .map(|&i| {
                let p = prep.dataset.subjects[i].probs.as_ref().ok_or_else(|| {
                    Error::invalid(format!("moving_average needs probabilities, subject {i} has none"))
                })?;
                moving_average_smooth(p, w)
            })
            .collect(),
        SmootherKind::FixedAttention => feature_path_preds(prep, |x| fixed_attention_smooth(x, w)),
        SmootherKind::RandomTransformer => {
            let enc_cfg = EncoderConfig {
                window_w: w,
                ..spec.encoder.clone()
            };
            let encoder = Encoder::new(&enc_cfg, prep.dataset.feat_dim)?;
            feature_path_preds(prep, |x| random_transformer_smooth_with(&encoder, x))
        }
    }
}

/// Metrics of one evaluation point on the test split. Accuracy and F1 pool
/// all test epochs, WTE is averaged over subjects and LSII pools the
/// corrected epochs of all subjects.
pub fn evaluate(prep: &Prepared, spec: &EvalSpec, config_digest: &str) -> Result<EvalReport> {
    let preds = smoothed_predictions(prep, spec)?;
    let ds = &prep.dataset;
    let truth = StageSequence::concat(&prep.test.iter().map(|&i| ds.subjects[i].labels.clone()).collect::<Vec<_>>())?;
    let pooled = StageSequence::concat(&preds)?;
    let (per_class_f1, weighted) = f1_scores(&pooled, &truth, ds.n_classes)?;
    let wtes = preds.iter().map(wte).collect::<Result<Vec<_>>>()?;
    // a window of one has no neighbours, so there is nothing to agree with
    let mut terms = Vec::new();
    if spec.window >= 2 {
        for (none, corr) in prep.base_preds.iter().zip(&preds) {
            terms.extend(lsii_terms(none, corr, spec.window)?);
        }
    }
    Ok(EvalReport {
        smoother: spec.smoother.to_string(),
        seed: spec.seed,
        accuracy: accuracy(&pooled, &truth)?,
        weighted_f1: weighted,
        wte: wtes.iter().sum::<f64>() / wtes.len() as f64,
        lsii: if spec.smoother == SmootherKind::None {
            None
        } else {
            mean_or_none(&terms)
        },
        per_class_f1,
        config_digest: config_digest.to_string(),
    })
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(v: &[f64]) -> Option<MeanStd> {
        if v.is_empty() {
            return None;
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        Some(MeanStd { mean, std: var.sqrt() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n_seeds: usize,
    pub accuracy: MeanStd,
    pub weighted_f1: MeanStd,
    pub wte: MeanStd,
    pub lsii: Option<MeanStd>,
}

impl Aggregate {
    pub fn of(reports: &[EvalReport]) -> Result<Aggregate> {
        let col = |f: fn(&EvalReport) -> f64| -> Option<MeanStd> {
            MeanStd::of(&reports.iter().map(f).collect::<Vec<_>>())
        };
        let empty = || Error::invalid("no reports to aggregate");
        let lsii: Vec<f64> = reports.iter().filter_map(|r| r.lsii).collect();
        Ok(Aggregate {
            n_seeds: reports.len(),
            accuracy: col(|r| r.accuracy).ok_or_else(empty)?,
            weighted_f1: col(|r| r.weighted_f1).ok_or_else(empty)?,
            wte: col(|r| r.wte).ok_or_else(empty)?,
            lsii: MeanStd::of(&lsii),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub config: RunConfig,
    pub config_digest: String,
    pub baseline: Vec<EvalReport>,
    pub runs: Vec<EvalReport>,
    pub baseline_summary: Aggregate,
    pub summary: Aggregate,
}

pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineReport> {
    let cfg = cfg.resolved()?;
    let prep = prepare(load_source(&cfg.source()?)?)?;
    run_pipeline_prepared(&cfg, &prep)
}

/// [`run_pipeline`] on data that is already loaded.
pub fn run_pipeline_prepared(cfg: &RunConfig, prep: &Prepared) -> Result<PipelineReport> {
    let cfg = cfg.resolved()?;
    let digest = cfg.digest()?;
    let pairs = par::try_map_indexed(cfg.seeds.len(), |k| {
        let spec = EvalSpec::from_config(&cfg, cfg.seeds[k]);
        let base = EvalSpec {
            smoother: SmootherKind::None,
            ..spec.clone()
        };
        Ok::<_, Error>((evaluate(prep, &base, &digest)?, evaluate(prep, &spec, &digest)?))
    })?;
    let (baseline, runs): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    Ok(PipelineReport {
        baseline_summary: Aggregate::of(&baseline)?,
        summary: Aggregate::of(&runs)?,
        config: cfg,
        config_digest: digest,
        baseline,
        runs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SweepAxis {
    Window,
    Dk,
    Init,
    HeadsLayers,
    Components,
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::Window => "window",
            SweepAxis::Dk => "dk",
            SweepAxis::Init => "init",
            SweepAxis::HeadsLayers => "heads",
            SweepAxis::Components => "components",
        }
    }

    fn numeric(&self) -> bool {
        matches!(self, SweepAxis::Window | SweepAxis::Dk)
    }

    /// `base` with this axis set to `value`. Heads values are `H` or `HxL`
    /// (heads by layers).
    pub fn apply(&self, base: &RunConfig, value: &str) -> Result<RunConfig> {
        let bad = || Error::invalid(format!("bad {} value `{value}`", self.name()));
        let int = |s: &str| s.trim().parse::<usize>().map_err(|_| bad());
        let mut cfg = base.clone();
        match self {
            SweepAxis::Window => cfg.window = int(value)?,
            SweepAxis::Dk => cfg.encoder.d_k = int(value)?,
            SweepAxis::Init => cfg.encoder.init = value.parse::<InitScheme>()?,
            SweepAxis::HeadsLayers => match value.split_once('x') {
                Some((h, l)) => {
                    cfg.encoder.n_heads = int(h)?;
                    cfg.encoder.n_layers = int(l)?;
                }
                None => cfg.encoder.n_heads = int(value)?,
            },
            SweepAxis::Components => cfg.encoder = cfg.encoder.with_components(value)?,
        }
        Ok(cfg)
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "window" => SweepAxis::Window,
            "dk" | "d_k" => SweepAxis::Dk,
            "init" => SweepAxis::Init,
            "heads" | "heads_layers" => SweepAxis::HeadsLayers,
            "components" => SweepAxis::Components,
            _ => {
                return Err(Error::UnknownName {
                    what: "sweep axis",
                    value: s.to_string(),
                })
            }
        })
    }
}

impl Serialize for SweepAxis {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for SweepAxis {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub grid: Vec<String>,
    pub base: RunConfig,
    /// Smoothers to run at every grid point; empty means `base.smoother`.
    #[serde(default)]
    pub smoothers: Vec<SmootherKind>,
}

impl SweepSpec {
    fn smoother_list(&self) -> Vec<SmootherKind> {
        if self.smoothers.is_empty() {
            vec![self.base.smoother]
        } else {
            self.smoothers.clone()
        }
    }

    /// Grid values in output order: ascending for numeric axes.
    fn ordered_grid(&self) -> Result<Vec<String>> {
        if self.grid.is_empty() {
            return Err(Error::invalid("sweep grid must be nonempty"));
        }
        let mut g = self.grid.clone();
        if self.axis.numeric() {
            let mut keyed = g
                .iter()
                .map(|v| Ok((v.trim().parse::<usize>().map_err(|_| Error::invalid(format!("bad {} value `{v}`", self.axis)))?, v.clone())))
                .collect::<Result<Vec<_>>>()?;
            keyed.sort();
            g = keyed.into_iter().map(|(_, v)| v).collect();
        }
        Ok(g)
    }
}

/// One line of a sweep table. `seed` is a seed number, `mean` or `std`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: String,
    pub smoother: String,
    pub seed: String,
    pub acc: f64,
    pub weighted_f1: f64,
    pub wte: f64,
    pub lsii: Option<f64>,
}

impl SweepRow {
    pub fn is_seed_row(&self) -> bool {
        self.seed.parse::<u64>().is_ok()
    }
}

pub fn run_sweep(spec: &SweepSpec) -> Result<Vec<SweepRow>> {
    let base = spec.base.resolved()?;
    let prep = prepare(load_source(&base.source()?)?)?;
    run_sweep_prepared(spec, &prep)
}

/// Per grid value and smoother: one row per seed (ascending), then the
/// mean and std rows.
pub fn run_sweep_prepared(spec: &SweepSpec, prep: &Prepared) -> Result<Vec<SweepRow>> {
    let grid = spec.ordered_grid()?;
    let smoothers = spec.smoother_list();
    let mut points = Vec::new();
    for value in &grid {
        let cfg = spec.axis.apply(&spec.base, value)?.resolved()?;
        let digest = cfg.digest()?;
        let mut seeds = cfg.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        for &smoother in &smoothers {
            let cfg = RunConfig { smoother, ..cfg.clone() };
            for &seed in &seeds {
                points.push((value.clone(), EvalSpec::from_config(&cfg, seed), digest.clone()));
            }
        }
    }
    let reports = par::try_map_indexed(points.len(), |k| evaluate(prep, &points[k].1, &points[k].2))?;

    let mut rows = Vec::with_capacity(points.len() * 2);
    let mut k = 0;
    while k < points.len() {
        let (value, spec0, _) = &points[k];
        let mut group = Vec::new();
        while k < points.len() && points[k].0 == *value && points[k].1.smoother == spec0.smoother {
            group.push(&reports[k]);
            k += 1;
        }
        let row = |seed: String, acc, f1, w, l| SweepRow {
            axis: spec.axis.to_string(),
            value: value.clone(),
            smoother: spec0.smoother.to_string(),
            seed,
            acc,
            weighted_f1: f1,
            wte: w,
            lsii: l,
        };
        for r in &group {
            rows.push(row(r.seed.to_string(), r.accuracy, r.weighted_f1, r.wte, r.lsii));
        }
        let owned: Vec<EvalReport> = group.iter().map(|r| (*r).clone()).collect();
        let agg = Aggregate::of(&owned)?;
        rows.push(row(
            "mean".into(),
            agg.accuracy.mean,
            agg.weighted_f1.mean,
            agg.wte.mean,
            agg.lsii.map(|m| m.mean),
        ));
        rows.push(row(
            "std".into(),
            agg.accuracy.std,
            agg.weighted_f1.std,
            agg.wte.std,
            agg.lsii.map(|m| m.std),
        ));
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub r_lsii_acc: f64,
    pub r_wte_acc: f64,
    pub n_rows: usize,
}

/// Pearson r of LSII and of WTE against accuracy over per-seed rows.
pub fn correlation_from_rows(rows: &[SweepRow], smoother: Option<SmootherKind>) -> Result<CorrelationReport> {
    let keep: Vec<&SweepRow> = rows
        .iter()
        .filter(|r| r.is_seed_row())
        .filter(|r| smoother.is_none_or(|s| r.smoother == s.name()))
        .filter(|r| r.acc.is_finite() && r.wte.is_finite() && r.lsii.is_some_and(f64::is_finite))
        .collect();
    if keep.len() < 3 {
        return Err(Error::UndefinedCorrelation(format!(
            "need at least 3 rows with finite metrics, got {}",
            keep.len()
        )));
    }
    let acc: Vec<f64> = keep.iter().map(|r| r.acc).collect();
    let lsii: Vec<f64> = keep.iter().map(|r| r.lsii.unwrap_or(f64::NAN)).collect();
    let wte: Vec<f64> = keep.iter().map(|r| r.wte).collect();
    Ok(CorrelationReport {
        r_lsii_acc: pearson(&lsii, &acc)?,
        r_wte_acc: pearson(&wte, &acc)?,
        n_rows: keep.len(),
    })
}

pub fn correlation_study(sweep_csv: &Path, smoother: Option<SmootherKind>) -> Result<CorrelationReport> {
    correlation_from_rows(&io::read_sweep_csv(sweep_csv)?, smoother)
}

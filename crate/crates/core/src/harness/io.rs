//! On-disk formats: dataset directories, label CSVs, sweep tables and JSON
//! reports.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::ser::SerializeSeq;
use serde::{Deserialize, Serialize, Serializer};

use crate::attention::FeatureSequence;
use crate::error::{Error, Result};
use crate::harness::SweepRow;
use crate::smoothers::{ProbSequence, StageSequence};
use crate::synth::{Split, Subject, SynthConfig, SynthDataset};

pub const MANIFEST: &str = "manifest.json";
pub const FEATURES: &str = "features.csv";
pub const LABELS: &str = "labels.csv";
pub const PROBS: &str = "probs.csv";

/// Serializes a matrix as a list of rows.
pub fn serialize_matrix<S: Serializer>(m: &Array2<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    let mut seq = s.serialize_seq(Some(m.nrows()))?;
    for row in m.outer_iter() {
        seq.serialize_element(&row.to_vec())?;
    }
    seq.end()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub n_classes: usize,
    pub feat_dim: usize,
    #[serde(default)]
    pub synth: Option<SynthConfig>,
    pub subjects: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Subdirectory holding this subject's CSVs.
    pub dir: String,
    pub split: Split,
    pub t_len: usize,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        if let csv::ErrorKind::Io(source) = e.into_kind() {
            return Error::io(path, source);
        }
        unreachable!("checked above");
    }
    Error::Csv {
        path: path.to_path_buf(),
        source: e,
    }
}

fn writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| csv_err(path, e))
}

fn malformed(path: &Path, row: usize, message: impl Into<String>) -> Error {
    Error::Malformed {
        path: path.to_path_buf(),
        row,
        message: message.into(),
    }
}

/// Writes `m` with header `{prefix}0..{prefix}{n-1}`.
pub fn write_matrix_csv(path: &Path, prefix: &str, m: &Array2<f64>) -> Result<()> {
    let mut w = writer(path)?;
    let header: Vec<String> = (0..m.ncols()).map(|j| format!("{prefix}{j}")).collect();
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for row in m.outer_iter() {
        w.write_record(row.iter().map(|v| v.to_string())).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn open_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_err(path, e))
}

/// Reads a numeric matrix whose header must be `{prefix}0..`. Rows are
/// counted from 1 after the header in error messages.
pub fn read_matrix_csv(path: &Path, prefix: &str, cols: Option<usize>) -> Result<Array2<f64>> {
    let mut r = open_reader(path)?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    let n = cols.unwrap_or(header.len());
    let want: Vec<String> = (0..n).map(|j| format!("{prefix}{j}")).collect();
    if header.iter().ne(want.iter().map(String::as_str)) {
        return Err(malformed(
            path,
            0,
            format!("expected header {}, found {}", want.join(","), header.iter().collect::<Vec<_>>().join(",")),
        ));
    }
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| malformed(path, i + 1, e.to_string()))?;
        if rec.len() != n {
            return Err(malformed(path, i + 1, format!("expected {n} cells, found {}", rec.len())));
        }
        for cell in rec.iter() {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| malformed(path, i + 1, format!("non-numeric cell `{cell}`")))?;
            if !v.is_finite() {
                return Err(malformed(path, i + 1, format!("non-finite cell `{cell}`")));
            }
            data.push(v);
        }
        rows += 1;
    }
    Array2::from_shape_vec((rows, n), data).map_err(|e| malformed(path, rows, e.to_string()))
}

pub fn write_labels_csv(path: &Path, s: &StageSequence) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["stage"]).map_err(|e| csv_err(path, e))?;
    for l in s.labels() {
        w.write_record([l.to_string()]).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a single `stage` column of labels in `0..c`.
pub fn read_labels_csv(path: &Path, c: usize) -> Result<StageSequence> {
    let mut r = open_reader(path)?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.len() != 1 || &header[0] != "stage" {
        return Err(malformed(path, 0, "expected a single `stage` column"));
    }
    let mut labels = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| malformed(path, i + 1, e.to_string()))?;
        let cell = rec.get(0).unwrap_or("").trim();
        let l: usize = cell
            .parse()
            .map_err(|_| malformed(path, i + 1, format!("non-integer label `{cell}`")))?;
        if l >= c {
            return Err(malformed(path, i + 1, format!("label {l} outside 0..{c}")));
        }
        labels.push(l);
    }
    if labels.is_empty() {
        return Err(malformed(path, 1, "no labels"));
    }
    StageSequence::new(labels, c)
}

fn subject_dir(i: usize) -> String {
    format!("subject_{i:03}")
}

/// Writes a dataset directory: `manifest.json` and one subdirectory of
/// CSVs per subject.
pub fn write_dataset(ds: &SynthDataset, dir: &Path) -> Result<()> {
    ds.validate()?;
    create_dir(dir)?;
    let mut entries = Vec::with_capacity(ds.subjects.len());
    for (i, s) in ds.subjects.iter().enumerate() {
        let name = subject_dir(i);
        let sub = dir.join(&name);
        create_dir(&sub)?;
        write_matrix_csv(&sub.join(FEATURES), "f", s.features.data())?;
        write_labels_csv(&sub.join(LABELS), &s.labels)?;
        match &s.probs {
            Some(p) => write_matrix_csv(&sub.join(PROBS), "p", p.probs())?,
            None => {
                let stale = sub.join(PROBS);
                if stale.exists() {
                    fs::remove_file(&stale).map_err(|e| Error::io(&stale, e))?;
                }
            }
        }
        entries.push(ManifestEntry {
            dir: name,
            split: s.split,
            t_len: s.labels.len(),
        });
    }
    write_json(
        &dir.join(MANIFEST),
        &Manifest {
            n_classes: ds.n_classes,
            feat_dim: ds.feat_dim,
            synth: ds.config.clone(),
            subjects: entries,
        },
    )
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::io(
            &path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "missing file"),
        ))
    }
}

fn check_rows(path: &Path, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(malformed(path, got.min(want) + 1, format!("has {got} rows, expected {want}")));
    }
    Ok(())
}

/// Loads a directory written by [`write_dataset`]. `probs.csv` is optional
/// per subject; everything else must be present and consistent.
pub fn load_dataset(dir: &Path) -> Result<SynthDataset> {
    let manifest: Manifest = read_json(&require(dir.join(MANIFEST))?)?;
    let c = manifest.n_classes;
    let mut subjects = Vec::with_capacity(manifest.subjects.len());
    for e in &manifest.subjects {
        let sub = dir.join(&e.dir);
        let fpath = require(sub.join(FEATURES))?;
        let lpath = require(sub.join(LABELS))?;
        let x = read_matrix_csv(&fpath, "f", Some(manifest.feat_dim))?;
        check_rows(&fpath, x.nrows(), e.t_len)?;
        let labels = read_labels_csv(&lpath, c)?;
        check_rows(&lpath, labels.len(), e.t_len)?;
        let ppath = sub.join(PROBS);
        let probs = if ppath.is_file() {
            let p = read_matrix_csv(&ppath, "p", Some(c))?;
            check_rows(&ppath, p.nrows(), e.t_len)?;
            Some(ProbSequence::new(p).map_err(|err| malformed(&ppath, 0, err.to_string()))?)
        } else {
            None
        };
        subjects.push(Subject {
            features: FeatureSequence::new(x).map_err(|err| malformed(&fpath, 0, err.to_string()))?,
            labels,
            probs,
            split: e.split,
        });
    }
    let ds = SynthDataset {
        n_classes: c,
        feat_dim: manifest.feat_dim,
        subjects,
        config: manifest.synth,
    };
    ds.validate()?;
    Ok(ds)
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = writer(path)?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_sweep_csv(path: &Path) -> Result<Vec<SweepRow>> {
    let mut r = open_reader(path)?;
    r.deserialize()
        .enumerate()
        .map(|(i, rec)| rec.map_err(|e| malformed(path, i + 1, e.to_string())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate_dataset;

    fn tiny() -> SynthDataset {
        generate_dataset(&SynthConfig {
            t_len: 12,
            n_subjects: 4,
            feat_dim: 6,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny();
        write_dataset(&ds, dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);
        let header = fs::read_to_string(dir.path().join("subject_000").join(FEATURES)).unwrap();
        assert!(header.starts_with("f0,f1,f2,f3,f4,f5\n"));
    }

    #[test]
    fn out_of_range_label_names_row() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&tiny(), dir.path()).unwrap();
        let lp = dir.path().join("subject_001").join(LABELS);
        let mut lines: Vec<String> = fs::read_to_string(&lp).unwrap().lines().map(String::from).collect();
        lines[3] = "5".into();
        fs::write(&lp, lines.join("\n") + "\n").unwrap();
        match load_dataset(dir.path()) {
            Err(Error::Malformed { path, row, .. }) => {
                assert_eq!(path, lp);
                assert_eq!(row, 3);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_probs_loads_without_them() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&tiny(), dir.path()).unwrap();
        for i in 0..4 {
            fs::remove_file(dir.path().join(subject_dir(i)).join(PROBS)).unwrap();
        }
        let ds = load_dataset(dir.path()).unwrap();
        assert!(ds.subjects.iter().all(|s| s.probs.is_none()));
    }

    #[test]
    fn malformed_inputs_fail() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&tiny(), dir.path()).unwrap();
        let fp = dir.path().join("subject_002").join(FEATURES);
        let text = fs::read_to_string(&fp).unwrap();
        fs::write(&fp, text.replacen("f5", "g5", 1)).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Malformed { row: 0, .. })));

        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[2] = lines[2].replacen(|c: char| c.is_ascii_digit(), "x", 1);
        fs::write(&fp, lines.join("\n") + "\n").unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Malformed { row: 2, .. })));

        lines.truncate(5);
        fs::write(&fp, text.lines().take(5).collect::<Vec<_>>().join("\n") + "\n").unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Malformed { .. })));

        fs::remove_file(dir.path().join(subject_dir(2)).join(LABELS)).unwrap();
        assert!(load_dataset(dir.path()).unwrap_err().is_io());
    }

    #[test]
    fn sweep_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        let rows = vec![
            SweepRow {
                axis: "window".into(),
                value: "5".into(),
                smoother: "median".into(),
                seed: "111".into(),
                acc: 0.1 + 0.2,
                weighted_f1: 1.0 / 3.0,
                wte: 0.659_167_373_6,
                lsii: None,
            },
            SweepRow {
                seed: "mean".into(),
                lsii: Some(std::f64::consts::PI),
                ..Default::default()
            },
        ];
        write_sweep_csv(&p, &rows).unwrap();
        assert_eq!(read_sweep_csv(&p).unwrap(), rows);
    }

    #[test]
    fn matrix_serializes_as_rows() {
        #[derive(Serialize)]
        struct W {
            #[serde(serialize_with = "serialize_matrix")]
            m: Array2<f64>,
        }
        let s = serde_json::to_string(&W { m: ndarray::array![[1.0, 2.0], [3.0, 4.5]] }).unwrap();
        assert_eq!(s, r#"{"m":[[1.0,2.0],[3.0,4.5]]}"#);
    }
}

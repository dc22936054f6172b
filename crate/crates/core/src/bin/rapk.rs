use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use rapk::harness::{self, io, RunConfig, SweepAxis, SweepSpec};
use rapk::kernel_lab::{centered_unit_sequence, dk_sweep, logit_concentration, uneven_sequence};
use rapk::metrics;
use rapk::rng::derive_seed;
use rapk::{par, Error, InitScheme, Result, SmootherKind};

/// Random attention priors as sequence smoothers: simulation, evaluation,
/// sweeps and kernel diagnostics.
#[derive(Parser)]
#[command(name = "rapk", version)]
struct Cli {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Comma-separated seeds.
    #[arg(long, global = true, value_delimiter = ',')]
    seed: Vec<u64>,
    /// Output directory. Reports go to stdout when omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Default)]
struct SynthFlags {
    #[arg(long)]
    n_classes: Option<usize>,
    #[arg(long)]
    t_len: Option<usize>,
    #[arg(long)]
    n_subjects: Option<usize>,
    #[arg(long)]
    feat_dim: Option<usize>,
    #[arg(long)]
    self_prob: Option<f64>,
    #[arg(long)]
    label_noise: Option<f64>,
    #[arg(long)]
    noise_std: Option<f64>,
    #[arg(long)]
    class_sep: Option<f64>,
    #[arg(long)]
    data_seed: Option<u64>,
}

#[derive(Args)]
struct RunFlags {
    /// Dataset directory written by `simulate`.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    smoother: Option<SmootherKind>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    d_k: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    init: Option<InitScheme>,
    #[command(flatten)]
    synth: SynthFlags,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic dataset directory.
    Simulate {
        #[command(flatten)]
        synth: SynthFlags,
    },
    /// Evaluate one smoother against the unsmoothed baseline.
    SmoothEval {
        #[command(flatten)]
        run: RunFlags,
    },
    /// Sweep one axis and write a CSV table.
    Sweep {
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',', required = true)]
        grid: Vec<String>,
        /// Smoothers to run at each point; defaults to the configured one.
        #[arg(long, value_delimiter = ',')]
        smoothers: Vec<SmootherKind>,
        #[command(flatten)]
        run: RunFlags,
    },
    /// Compare Monte Carlo and closed-form kernels over a d_k grid.
    KernelValidate {
        #[arg(long, default_value_t = 10)]
        t_len: usize,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 3)]
        sequences: usize,
        #[arg(long, value_delimiter = ',', default_value = "16,64,256,1024")]
        grid: Vec<usize>,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value = "xavier_uniform")]
        init: InitScheme,
    },
    /// Pre-softmax logit statistics.
    LogitStats {
        #[arg(long, default_value_t = 10)]
        t_len: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 512)]
        d_k: usize,
        #[arg(long)]
        layernorm: bool,
        #[arg(long, default_value_t = 2000)]
        trials: usize,
        #[arg(long, default_value = "xavier_uniform")]
        init: InitScheme,
    },
    /// WTE, LSII and accuracy of label CSVs (single `stage` column).
    Metrics {
        #[arg(long)]
        pred: PathBuf,
        /// Unsmoothed predictions, for LSII.
        #[arg(long)]
        none: Option<PathBuf>,
        /// Ground truth, for accuracy and F1.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        classes: usize,
        #[arg(long, default_value_t = 10)]
        window: usize,
    },
    /// Correlate LSII and WTE with accuracy across a sweep CSV.
    Correlate {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        smoother: Option<SmootherKind>,
    },
}

fn base_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_json_file(p)?,
        None => RunConfig::default(),
    };
    if !cli.seed.is_empty() {
        cfg.seeds = cli.seed.clone();
    }
    if cli.out.is_some() {
        cfg.out = cli.out.clone();
    }
    Ok(cfg)
}

fn apply_synth(cfg: &mut RunConfig, f: &SynthFlags) {
    let any = f.n_classes.is_some()
        || f.t_len.is_some()
        || f.n_subjects.is_some()
        || f.feat_dim.is_some()
        || f.self_prob.is_some()
        || f.label_noise.is_some()
        || f.noise_std.is_some()
        || f.class_sep.is_some()
        || f.data_seed.is_some();
    if !any {
        return;
    }
    let s = cfg.synth.get_or_insert_with(Default::default);
    macro_rules! set {
        ($($field:ident),*) => { $(if let Some(v) = f.$field { s.$field = v; })* };
    }
    set!(n_classes, t_len, n_subjects, feat_dim, self_prob, label_noise, noise_std, class_sep);
    if let Some(v) = f.data_seed {
        s.seed = v;
    }
}

fn apply_run(cfg: &mut RunConfig, f: &RunFlags) {
    if let Some(d) = &f.dataset {
        cfg.dataset = Some(d.clone());
        cfg.synth = None;
    }
    apply_synth(cfg, &f.synth);
    if let Some(v) = f.smoother {
        cfg.smoother = v;
    }
    if let Some(v) = f.window {
        cfg.window = v;
    }
    if let Some(v) = f.d_k {
        cfg.encoder.d_k = v;
    }
    if let Some(v) = f.heads {
        cfg.encoder.n_heads = v;
    }
    if let Some(v) = f.layers {
        cfg.encoder.n_layers = v;
    }
    if let Some(v) = f.init {
        cfg.encoder.init = v;
    }
}

fn first_seed(cli: &Cli, fallback: u64) -> u64 {
    cli.seed.first().copied().unwrap_or(fallback)
}

fn emit_json<T: Serialize>(out: Option<&Path>, name: &str, value: &T) -> Result<()> {
    match out {
        Some(dir) => {
            ensure_dir(dir)?;
            io::write_json(&dir.join(name), value)
        }
        None => {
            let text = serde_json::to_string_pretty(value).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            println!("{text}");
            Ok(())
        }
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

#[derive(Serialize)]
struct LabelMetrics {
    n_epochs: usize,
    wte: f64,
    lsii: Option<f64>,
    accuracy: Option<f64>,
    weighted_f1: Option<f64>,
}

fn run(cli: &Cli) -> Result<()> {
    let out = cli.out.as_deref();
    match &cli.cmd {
        Cmd::Simulate { synth } => {
            let mut cfg = base_config(cli)?;
            cfg.dataset = None;
            apply_synth(&mut cfg, synth);
            let mut s = cfg.synth.clone().unwrap_or_default();
            if synth.data_seed.is_none() && !cli.seed.is_empty() {
                s.seed = cli.seed[0];
            }
            let dir = out.ok_or_else(|| Error::InvalidArgument("simulate needs --out".into()))?;
            let ds = rapk::synth::generate_dataset(&s)?;
            io::write_dataset(&ds, dir)?;
            eprintln!("wrote {} subjects to {}", ds.subjects.len(), dir.display());
        }
        Cmd::SmoothEval { run } => {
            let mut cfg = base_config(cli)?;
            apply_run(&mut cfg, run);
            let report = harness::run_pipeline(&cfg)?;
            emit_json(out, "report.json", &report)?;
        }
        Cmd::Sweep { axis, grid, smoothers, run } => {
            let mut cfg = base_config(cli)?;
            apply_run(&mut cfg, run);
            let spec = SweepSpec {
                axis: *axis,
                grid: grid.clone(),
                base: cfg,
                smoothers: smoothers.clone(),
            };
            let rows = harness::run_sweep(&spec)?;
            match out {
                Some(dir) => {
                    ensure_dir(dir)?;
                    io::write_sweep_csv(&dir.join(format!("sweep_{axis}.csv")), &rows)?;
                    io::write_json(&dir.join(format!("sweep_{axis}.json")), &spec)?;
                }
                None => {
                    let mut w = csv::Writer::from_writer(std::io::stdout());
                    for r in &rows {
                        w.serialize(r).map_err(|e| Error::InvalidArgument(e.to_string()))?;
                    }
                    w.flush().map_err(|e| Error::Io { path: "<stdout>".into(), source: e })?;
                }
            }
        }
        Cmd::KernelValidate { t_len, dim, sequences, grid, trials, init } => {
            let seed = first_seed(cli, 0);
            let xs = (0..*sequences)
                .map(|i| centered_unit_sequence(*t_len, *dim, derive_seed(seed, 1 << 32 | i as u64)))
                .collect::<Result<Vec<_>>>()?;
            let report = dk_sweep(&xs, *init, grid, *trials, seed)?;
            emit_json(out, "kernel_validation.json", &report)?;
            if let Some(dir) = out {
                let path = dir.join("kernel_validation.csv");
                let file = std::fs::File::create(&path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
                report.write_csv(file).map_err(|e| Error::Csv { path, source: e })?;
            }
        }
        Cmd::LogitStats { t_len, dim, d_k, layernorm, trials, init } => {
            let seed = first_seed(cli, 0);
            let x = uneven_sequence(*t_len, *dim, derive_seed(seed, 1 << 32))?;
            let report = logit_concentration(&x, *init, *d_k, *layernorm, *trials, seed)?;
            emit_json(out, "logit_stats.json", &report)?;
        }
        Cmd::Metrics { pred, none, truth, classes, window } => {
            let p = io::read_labels_csv(pred, *classes)?;
            let lsii = match none {
                Some(n) => {
                    let n = io::read_labels_csv(n, *classes)?;
                    metrics::lsii(&n, &p, &n, *window)?
                }
                None => None,
            };
            let (accuracy, weighted_f1) = match truth {
                Some(t) => {
                    let t = io::read_labels_csv(t, *classes)?;
                    (Some(metrics::accuracy(&p, &t)?), Some(metrics::weighted_f1(&p, &t, *classes)?))
                }
                None => (None, None),
            };
            let report = LabelMetrics {
                n_epochs: p.len(),
                wte: metrics::wte(&p)?,
                lsii,
                accuracy,
                weighted_f1,
            };
            emit_json(out, "metrics.json", &report)?;
        }
        Cmd::Correlate { csv, smoother } => {
            let report = harness::correlation_study(csv, *smoother)?;
            emit_json(out, "correlation.json", &report)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match par::with_jobs(cli.jobs, || run(&cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}

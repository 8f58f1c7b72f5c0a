//! Run directories: manifest, resolved config, metrics, checkpoints, sweeps
//! and a summary.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use cossl_core::eval::{self, PcMode, SweepTable};
use cossl_core::nn::Checkpoint;
use cossl_core::train::{self, EpochMetrics, EvalModel, TrainData, TrainOutcome};
use cossl_core::{Ablation, Mode, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::config_io;

pub const MANIFEST: &str = "manifest.json";
pub const CONFIG: &str = "config.toml";
pub const METRICS: &str = "metrics.csv";
pub const MODEL: &str = "model.ckpt";
pub const STATE: &str = "state.ckpt";
pub const SWEEP: &str = "sweep.csv";
pub const SWEEP_KNOWN: &str = "sweep_known.csv";
pub const SUMMARY: &str = "summary.json";

/// Classes reported as the tail in summaries (the last three).
pub const TAIL_CLASSES: usize = 3;

pub fn build_id() -> String {
    let base = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));
    match option_env!("COSSL_BUILD_ID") {
        Some(id) => format!("{base} ({id})"),
        None => base.to_string(),
    }
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub build: String,
    pub mode: Mode,
    pub seed: u64,
    /// The resolved configuration, every field spelled out.
    pub config: TrainConfig,
    /// Model checkpoint the run started from, for classifier retraining.
    pub source_checkpoint: Option<PathBuf>,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub status: String,
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: Mode,
    pub seed: u64,
    pub epochs: usize,
    pub tail_epochs: usize,
    pub avg_class_recall: f64,
    pub tail_recall: f64,
    pub per_class_recall: Vec<f64>,
    pub final_uniform_acc: f64,
    pub sweep_mean_acc: Option<f64>,
    pub sweep_known_mean_acc: Option<f64>,
}

/// An output directory being filled by one run.
pub struct RunDir {
    pub path: PathBuf,
    manifest: RunManifest,
}

impl RunDir {
    /// Creates the directory and writes the manifest and config before any
    /// training happens.
    pub fn create(path: &Path, cfg: &TrainConfig, source_checkpoint: Option<&Path>) -> Result<Self> {
        fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))?;
        fs::write(path.join(CONFIG), config_io::to_toml(cfg)?)?;
        let dir = Self {
            path: path.to_path_buf(),
            manifest: RunManifest {
                build: build_id(),
                mode: cfg.cossl.mode,
                seed: cfg.cossl.seed,
                config: cfg.clone(),
                source_checkpoint: source_checkpoint.map(Path::to_path_buf),
                started_unix: unix_now(),
                finished_unix: None,
                status: "running".into(),
                outputs: vec![CONFIG.into()],
            },
        };
        dir.write_manifest()?;
        Ok(dir)
    }

    fn write_manifest(&self) -> Result<()> {
        let f = File::create(self.path.join(MANIFEST))?;
        serde_json::to_writer_pretty(BufWriter::new(f), &self.manifest)?;
        Ok(())
    }

    fn record(&mut self, name: &str) {
        if !self.manifest.outputs.iter().any(|o| o == name) {
            self.manifest.outputs.push(name.into());
        }
    }

    pub fn finish(&mut self, status: &str) -> Result<()> {
        self.manifest.finished_unix = Some(unix_now());
        self.manifest.status = status.into();
        self.write_manifest()
    }
}

/// Streams history rows to `metrics.csv` as epochs complete.
struct MetricsSink {
    out: BufWriter<File>,
    quiet: bool,
    total_epochs: u64,
    error: Option<std::io::Error>,
}

impl MetricsSink {
    fn new(path: &Path, quiet: bool, total_epochs: u64) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        train::write_metrics_header(&mut out)?;
        out.flush()?;
        Ok(Self {
            out,
            quiet,
            total_epochs,
            error: None,
        })
    }

    fn push(&mut self, row: &EpochMetrics) {
        self.error = self
            .error
            .take()
            .or_else(|| train::write_metrics_row(row, &mut self.out).and_then(|_| self.out.flush()).err());
        if !self.quiet {
            eprintln!(
                "epoch {:>4}/{}  acc {:.4}  avg class recall {:.4}",
                row.epoch, self.total_epochs, row.eval.overall_accuracy, row.eval.averaged_class_recall
            );
        }
    }

    fn finish(self) -> Result<()> {
        match self.error {
            Some(e) => Err(e).context("writing metrics.csv"),
            None => Ok(()),
        }
    }
}

fn write_checkpoint(path: &Path, c: &Checkpoint) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    c.write(&mut out)?;
    out.flush()?;
    Ok(())
}

pub fn read_model(path: &Path) -> Result<EvalModel> {
    let f = File::open(path).with_context(|| format!("opening checkpoint {}", path.display()))?;
    let c = Checkpoint::read(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))?;
    Ok(EvalModel::from_checkpoint(&c)?)
}

fn sweep_tables(cfg: &TrainConfig, data: &TrainData, model: &EvalModel) -> Result<(SweepTable, SweepTable)> {
    let run = |mode| {
        eval::shifted_sweep(
            &model.encoder,
            &model.head,
            &data.holdout,
            &cfg.eval.sweep_gammas,
            cfg.eval.sweep_cap,
            &model.training_prior,
            mode,
            cfg.cossl.seed,
        )
    };
    Ok((
        run(PcMode::Unknown {
            uniform_pc: cfg.eval.pc_unknown_uniform,
        })?,
        run(PcMode::Known)?,
    ))
}

/// Writes `sweep.csv` (test prior unknown) and `sweep_known.csv` (true
/// prior compensated) into `dir`.
pub fn write_sweeps(dir: &Path, cfg: &TrainConfig, data: &TrainData, model: &EvalModel) -> Result<(f64, f64)> {
    let (unknown, known) = sweep_tables(cfg, data, model)?;
    unknown.write_csv(BufWriter::new(File::create(dir.join(SWEEP))?))?;
    known.write_csv(BufWriter::new(File::create(dir.join(SWEEP_KNOWN))?))?;
    Ok((unknown.mean.overall_accuracy, known.mean.overall_accuracy))
}

fn summarize(cfg: &TrainConfig, outcome: &TrainOutcome, sweeps: Option<(f64, f64)>) -> RunSummary {
    let k = outcome.final_per_class_recall.len();
    let tail: Vec<usize> = (k.saturating_sub(TAIL_CLASSES)..k).collect();
    RunSummary {
        mode: cfg.cossl.mode,
        seed: cfg.cossl.seed,
        epochs: outcome.history.len(),
        tail_epochs: cfg.eval.tail_epochs.min(outcome.history.len()),
        avg_class_recall: outcome.final_avg_class_recall,
        tail_recall: outcome.tail_recall(&tail),
        per_class_recall: outcome.final_per_class_recall.clone(),
        final_uniform_acc: outcome.history.last().map_or(0.0, |h| h.eval.overall_accuracy),
        sweep_mean_acc: sweeps.map(|s| s.0),
        sweep_known_mean_acc: sweeps.map(|s| s.1),
    }
}

pub fn read_summary(dir: &Path) -> Result<RunSummary> {
    let path = dir.join(SUMMARY);
    let f = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
    serde_json::from_reader(BufReader::new(f)).with_context(|| format!("parsing {}", path.display()))
}

/// Options shared by every command that trains.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub quiet: bool,
    /// Starting model for classifier retraining; required in `crt` mode.
    pub checkpoint: Option<PathBuf>,
}

/// Trains per `cfg` into `dir` and returns the summary.
///
/// In `crt` mode the encoder comes from `opts.checkpoint` and only the
/// classifier retraining stage runs.
pub fn execute(cfg: &TrainConfig, dir: &Path, opts: &RunOptions) -> Result<RunSummary> {
    if cfg.cossl.mode == Mode::Crt && opts.checkpoint.is_none() {
        bail!("crt mode needs --checkpoint with a trained model");
    }
    let mut run = RunDir::create(dir, cfg, opts.checkpoint.as_deref())?;
    let result = execute_inner(cfg, &mut run, opts);
    run.finish(match &result {
        Ok(_) => "completed",
        Err(_) => "failed",
    })?;
    result
}

fn execute_inner(cfg: &TrainConfig, run: &mut RunDir, opts: &RunOptions) -> Result<RunSummary> {
    let data = TrainData::synthetic(cfg)?;
    let epochs = match cfg.cossl.mode {
        Mode::Crt => cfg.cossl.crt_epochs,
        _ => cfg.epochs(),
    };
    let mut sink = MetricsSink::new(&run.path.join(METRICS), opts.quiet, epochs)?;
    run.record(METRICS);
    let outcome = match cfg.cossl.mode {
        Mode::Crt => {
            let source = read_model(opts.checkpoint.as_deref().expect("checked by caller"))?;
            retrain_from(cfg, &data, source, |row| sink.push(row))?
        }
        _ => {
            let outcome = train::train(cfg, &data, |row| sink.push(row))?;
            write_checkpoint(&run.path.join(STATE), &outcome.state.to_checkpoint(cfg.cossl.mode))?;
            run.record(STATE);
            outcome
        }
    };
    sink.finish()?;
    write_checkpoint(&run.path.join(MODEL), &outcome.model.to_checkpoint())?;
    run.record(MODEL);

    let sweeps = if cfg.eval.sweep {
        let s = write_sweeps(&run.path, cfg, &data, &outcome.model)?;
        run.record(SWEEP);
        run.record(SWEEP_KNOWN);
        Some(s)
    } else {
        None
    };
    let summary = summarize(cfg, &outcome, sweeps);
    let f = File::create(run.path.join(SUMMARY))?;
    serde_json::to_writer_pretty(BufWriter::new(f), &summary)?;
    run.record(SUMMARY);
    Ok(summary)
}

/// Classifier retraining on the frozen encoder of `source`.
fn retrain_from(
    cfg: &TrainConfig,
    data: &TrainData,
    source: EvalModel,
    on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    let base = TrainOutcome {
        model: source,
        history: Vec::new(),
        state: train::Trainer::new(cfg, data)?.init_state()?,
        final_avg_class_recall: f64::NAN,
        final_per_class_recall: Vec::new(),
    };
    Ok(train::crt_stage(cfg, data, base, on_epoch)?)
}

/// Runs a sweep for an existing run directory and writes the CSVs there.
pub fn sweep_run_dir(dir: &Path, overrides: &[String]) -> Result<(f64, f64)> {
    let cfg = config_io::resolve(Some(&dir.join(CONFIG)), overrides)?;
    let data = TrainData::synthetic(&cfg)?;
    let model = read_model(&dir.join(MODEL))?;
    write_sweeps(dir, &cfg, &data, &model)
}

/// Runs CoSSL and each requested ablation into sibling directories under
/// `root`. Returns `(label, summary)` pairs, the baseline first.
pub fn ablate(cfg: &TrainConfig, root: &Path, ablations: &[Ablation], opts: &RunOptions) -> Result<Vec<(String, RunSummary)>> {
    let mut base = cfg.clone();
    base.cossl.mode = Mode::Cossl;
    let mut out = vec![("cossl".to_string(), execute(&base, &root.join("cossl"), opts)?)];
    for &a in ablations {
        let mut c = base.clone();
        c.apply_ablation(a);
        let label = format!("ablate_{}", a.tag());
        let s = execute(&c, &root.join(&label), opts)?;
        out.push((label, s));
    }
    Ok(out)
}

// SPDX-License-Identifier: Apache-2.0

//! `apb-triage` command line: `gen`, `train`, `eval`, `diagnose`, `inspect`.
//!
//! Every artifact is written to a temporary file and renamed into place, so
//! a failed run never leaves a half-written output behind.

use std::fs;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use thiserror::Error;

use crate::apb::{self, ApbError, Label, ReportClass, Sample, SignalMap};
use crate::cascade::{self, task_spec, CascadeError, CascadeModel, STAGES};
use crate::eval::{self, ConfusionMatrix, CvSummary, EvalError, MetricsReport};
use crate::faultgen::{self, Dataset, FaultGenError, GenSpec, LabelCounts, DEFAULT_PERIOD};
use crate::forest::{self, FeatureLayout, FeatureMatrix, ForestError, Hyperparams, Task};
use crate::vcd::{self, VcdError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {source}")]
    Vcd {
        path: PathBuf,
        #[source]
        source: VcdError,
    },
    #[error("{path}: {source}")]
    Apb {
        path: PathBuf,
        #[source]
        source: ApbError,
    },
    #[error(transparent)]
    FaultGen(#[from] FaultGenError),
    #[error(transparent)]
    Forest(#[from] ForestError),
    #[error(transparent)]
    Cascade(#[from] CascadeError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("signal map {path}: {detail}")]
    SignalMap { path: PathBuf, detail: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io { .. } => 3,
            CliError::Vcd { .. } => 10,
            CliError::Apb { .. } => 11,
            CliError::FaultGen(_) => 12,
            CliError::Forest(_) => 13,
            CliError::Cascade(_) => 14,
            CliError::Eval(_) => 15,
            CliError::SignalMap { .. } => 16,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "apb-triage",
    version,
    about = "APB bus-fault triage from VCD waveforms"
)]
struct Cli {
    /// Worker threads for training and batch diagnosis (outputs do not
    /// depend on it).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ReportFormat {
    Text,
    Json,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum LayoutArg {
    /// 640 raw bits per field
    Raw,
    /// raw bits plus per-column and per-pair statistics
    Stats,
}

impl From<LayoutArg> for FeatureLayout {
    fn from(l: LayoutArg) -> Self {
        match l {
            LayoutArg::Raw => FeatureLayout::RawBits,
            LayoutArg::Stats => FeatureLayout::BitsWithPairStats,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StageArg {
    Oor,
    Addr,
    D0,
    D1,
}

impl From<StageArg> for Task {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Oor => Task::Oor,
            StageArg::Addr => Task::Addr,
            StageArg::D0 => Task::D0,
            StageArg::D1 => Task::D1,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a labeled dataset (JSON-Lines), optionally with one VCD per sample.
    Gen {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Samples for every label unless overridden per label.
        #[arg(long, default_value_t = 0)]
        per_label: usize,
        #[arg(long)]
        no_error: Option<usize>,
        #[arg(long)]
        out_of_range: Option<usize>,
        #[arg(long)]
        address_error: Option<usize>,
        #[arg(long)]
        data_error_0: Option<usize>,
        #[arg(long)]
        data_error_1: Option<usize>,
        #[arg(long, default_value_t = 0.0)]
        read_fraction: f64,
        #[arg(long)]
        out: PathBuf,
        /// Also write `sample_NNNNNN.vcd` per sample plus `map.json` here.
        #[arg(long)]
        vcd_dir: Option<PathBuf>,
    },
    /// Train the cascade bundle (or one stage with --stage).
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        stage: Option<StageArg>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        trees: usize,
        #[arg(long, value_enum, default_value_t = LayoutArg::Stats)]
        layout: LayoutArg,
    },
    /// Score a bundle on a dataset: per-stage and cascade metrics.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Run stratified k-fold CV per stage with the bundle's hyperparameters.
        #[arg(long)]
        cv: Option<usize>,
        #[arg(long, default_value_t = 42)]
        cv_seed: u64,
        #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
        format: ReportFormat,
        /// Write the report here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Label every 20-transaction window of one or more VCD files.
    Diagnose {
        #[arg(long)]
        vcd: Vec<PathBuf>,
        /// Diagnose every `.vcd` file in this directory, in name order.
        #[arg(long)]
        vcd_dir: Option<PathBuf>,
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
    /// List the APB transfers found in a VCD file.
    Inspect {
        #[arg(long)]
        vcd: PathBuf,
        #[arg(long)]
        map: PathBuf,
    },
}

/// Entry point used by the binary. Returns the process exit status.
pub fn run_cli(argv: &[String], stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(stdout, "{e}");
                    0
                }
                _ => {
                    let _ = write!(stderr, "{e}");
                    2
                }
            };
        }
    };
    let jobs = cli.jobs;
    let result = crate::with_jobs(jobs, || {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let r = dispatch(cli.command, &mut out, &mut err);
        (r, out, err)
    });
    let (result, out, err) = result;
    let _ = stdout.write_all(&out);
    let _ = stderr.write_all(&err);
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command, out: &mut Vec<u8>, err: &mut Vec<u8>) -> Result<(), CliError> {
    match cmd {
        Command::Gen {
            seed,
            per_label,
            no_error,
            out_of_range,
            address_error,
            data_error_0,
            data_error_1,
            read_fraction,
            out: path,
            vcd_dir,
        } => {
            let mut counts = LabelCounts::uniform(per_label);
            for (label, n) in [
                (Label::NoError, no_error),
                (Label::OutOfRangeError, out_of_range),
                (Label::AddressError, address_error),
                (Label::DataError0, data_error_0),
                (Label::DataError1, data_error_1),
            ] {
                if let Some(n) = n {
                    counts.set(label, n);
                }
            }
            let mut spec = GenSpec::new(counts, seed);
            spec.read_fraction = read_fraction;
            let ds = faultgen::generate_dataset(&spec)?;
            write_atomic(&path, &ds.to_jsonl_bytes())?;
            if let Some(dir) = vcd_dir {
                write_vcd_dir(&ds, &dir)?;
            }
            let _ = writeln!(
                out,
                "wrote {} samples to {}",
                ds.samples.len(),
                path.display()
            );
            Ok(())
        }
        Command::Train {
            data,
            out: path,
            stage,
            seed,
            trees,
            layout,
        } => {
            let ds = read_dataset(&data)?;
            let hp = Hyperparams {
                tree_count: trees,
                base_seed: seed,
                ..Hyperparams::default()
            };
            let bytes = match stage {
                Some(stage) => {
                    let f = cascade::train_stage(&ds.samples, stage.into(), &hp, layout.into())?;
                    forest::save_forest(&f)
                }
                None => {
                    let m = cascade::train_cascade_with_layout(&ds.samples, &hp, layout.into())?;
                    cascade::save_cascade(&m)
                }
            };
            write_atomic(&path, &bytes)?;
            let _ = writeln!(out, "wrote model to {}", path.display());
            Ok(())
        }
        Command::Eval {
            data,
            model,
            cv,
            cv_seed,
            format,
            out: path,
        } => {
            let ds = read_dataset(&data)?;
            let m = read_cascade(&model)?;
            let name = data
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            let report = evaluate(&ds, &m, &name, cv.map(|k| (k, cv_seed)))?;
            let text = match format {
                ReportFormat::Text => report.to_text(),
                ReportFormat::Json => {
                    let mut s = serde_json::to_string_pretty(&report).expect("report serializes");
                    s.push('\n');
                    s
                }
            };
            match path {
                Some(p) => write_atomic(&p, text.as_bytes())?,
                None => out.extend_from_slice(text.as_bytes()),
            }
            Ok(())
        }
        Command::Diagnose {
            vcd,
            vcd_dir,
            map,
            model,
        } => {
            let mut files = vcd;
            if let Some(dir) = vcd_dir {
                files.extend(list_vcd_files(&dir)?);
            }
            if files.is_empty() {
                return Err(CliError::Usage("diagnose needs --vcd or --vcd-dir".into()));
            }
            let map = read_signal_map(&map)?;
            let m = read_cascade(&model)?;
            let prefix = files.len() > 1;
            for f in &files {
                let samples = load_windows(f, &map, err)?;
                let labels = m.diagnose_batch(&samples);
                for (i, l) in labels.iter().enumerate() {
                    if prefix {
                        let _ = writeln!(out, "{} window {i}: {l}", f.display());
                    } else {
                        let _ = writeln!(out, "window {i}: {l}");
                    }
                }
            }
            Ok(())
        }
        Command::Inspect { vcd, map } => {
            let map = read_signal_map(&map)?;
            let doc = read_vcd(&vcd)?;
            let txns = apb::extract_transactions(&doc, &map).map_err(|source| CliError::Apb {
                path: vcd.clone(),
                source,
            })?;
            for t in txns {
                let _ = writeln!(out, "{t}");
            }
            Ok(())
        }
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(path))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        tmp.as_file()
            .set_permissions(fs::Permissions::from_mode(0o644))
            .map_err(io_err(path))?;
    }
    tmp.persist(path).map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

pub fn sample_vcd_name(index: usize) -> String {
    format!("sample_{index:06}.vcd")
}

fn write_vcd_dir(ds: &Dataset, dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let map = SignalMap::default();
    write_atomic(&dir.join("map.json"), map.to_json().as_bytes())?;
    for (i, s) in ds.samples.iter().enumerate() {
        let path = dir.join(sample_vcd_name(i));
        let doc = apb::synth_waveform(&s.transactions, &map, DEFAULT_PERIOD).map_err(|source| {
            CliError::Apb {
                path: path.clone(),
                source,
            }
        })?;
        write_atomic(&path, vcd::emit_vcd(&doc).as_bytes())?;
    }
    Ok(())
}

fn list_vcd_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "vcd"))
        .collect();
    files.sort();
    Ok(files)
}

fn read_dataset(path: &Path) -> Result<Dataset, CliError> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    Ok(Dataset::read_jsonl(BufReader::new(f))?)
}

fn read_cascade(path: &Path) -> Result<CascadeModel, CliError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(cascade::load_cascade(&bytes)?)
}

fn read_signal_map(path: &Path) -> Result<SignalMap, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    SignalMap::from_json(&text).map_err(|e| CliError::SignalMap {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

fn read_vcd(path: &Path) -> Result<vcd::VcdDocument, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    vcd::parse_vcd(&text).map_err(|source| CliError::Vcd {
        path: path.to_path_buf(),
        source,
    })
}

/// Parses, extracts and windows one VCD file; a short tail is reported on
/// `warn`.
pub fn load_windows(
    path: &Path,
    map: &SignalMap,
    warn: &mut dyn Write,
) -> Result<Vec<Sample>, CliError> {
    let doc = read_vcd(path)?;
    let txns = apb::extract_transactions(&doc, map).map_err(|source| CliError::Apb {
        path: path.to_path_buf(),
        source,
    })?;
    let w = apb::group_samples(&txns);
    if let Some(tail) = w.short_tail {
        let _ = writeln!(warn, "warning: {}: {tail}", path.display());
    }
    Ok(w.samples)
}

#[derive(Debug, Clone, Serialize)]
pub struct StageReport {
    pub stage: String,
    pub positive: String,
    pub negatives: Vec<String>,
    pub samples: usize,
    pub confusion: ConfusionMatrix,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct CascadeReport {
    pub confusion: ConfusionMatrix,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub dataset: String,
    pub samples: usize,
    pub stages: Vec<StageReport>,
    pub cascade_fine: CascadeReport,
    pub cascade_merged: CascadeReport,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        use std::fmt::Write as _;
        let _ = writeln!(s, "dataset {} ({} samples)\n", self.dataset, self.samples);
        for st in &self.stages {
            let _ = writeln!(
                s,
                "== stage {} ({} vs {}; {} samples)",
                st.stage,
                st.positive,
                st.negatives.join("+"),
                st.samples
            );
            let _ = writeln!(s, "{}{}", st.confusion, st.metrics);
        }
        let _ = writeln!(s, "== cascade (fine labels)");
        let _ = writeln!(
            s,
            "{}{}",
            self.cascade_fine.confusion, self.cascade_fine.metrics
        );
        let _ = writeln!(s, "== cascade (data_error merged)");
        let _ = write!(
            s,
            "{}{}",
            self.cascade_merged.confusion, self.cascade_merged.metrics
        );
        s
    }
}

/// Scores one stage on its slice of `samples`: binary confusion matrix
/// (positive first), metrics and AUC when both classes are present.
pub fn evaluate_stage(
    m: &CascadeModel,
    task: Task,
    samples: &[Sample],
) -> Result<StageReport, CliError> {
    let spec = task_spec(task);
    let (idx, y) = spec.select(samples);
    let forest = m.stage(task);
    let scores: Vec<f64> = {
        use rayon::prelude::*;
        idx.par_iter()
            .map(|&i| m.stage_score(task, &samples[i]))
            .collect()
    };
    let pred: Vec<bool> = scores.iter().map(|&p| p >= forest.threshold).collect();
    let cm = eval::confusion_matrix(&y, &pred, &[true, false])?;
    let mut cm = cm;
    cm.classes = vec![spec.positive.to_string(), format!("non_{}", spec.positive)];
    let mut metrics = eval::prf_metrics(&cm);
    metrics.auc = eval::roc_auc(&scores, &y).ok();
    Ok(StageReport {
        stage: task.name().to_string(),
        positive: spec.positive.to_string(),
        negatives: spec.negatives.iter().map(|l| l.to_string()).collect(),
        samples: idx.len(),
        confusion: cm,
        metrics,
    })
}

/// Stratified k-fold accuracy of one stage retrained with `hp` on each fold.
pub fn cross_validate_stage(
    samples: &[Sample],
    task: Task,
    hp: &Hyperparams,
    layout: FeatureLayout,
    k: usize,
    seed: u64,
) -> Result<CvSummary, CliError> {
    let spec = task_spec(task);
    let (idx, y) = spec.select(samples);
    let x = spec.features(samples, &idx, layout);
    let mut failure = None;
    let summary = eval::kfold_cv(&y, k, seed, |train, val| {
        let rows: Vec<_> = train.iter().map(|&i| x[i].clone()).collect();
        let ty: Vec<bool> = train.iter().map(|&i| y[i]).collect();
        let trained = FeatureMatrix::from_rows(&rows)
            .and_then(|mx| forest::train_forest_matrix(&mx, &ty, hp));
        match trained {
            Ok(f) => {
                let hits = val
                    .iter()
                    .filter(|&&i| f.classify(x[i].as_slice()).unwrap() == y[i])
                    .count();
                hits as f64 / val.len() as f64
            }
            Err(e) => {
                failure.get_or_insert(e);
                f64::NAN
            }
        }
    })?;
    match failure {
        Some(e) => Err(e.into()),
        None => Ok(summary),
    }
}

pub fn evaluate(
    ds: &Dataset,
    m: &CascadeModel,
    dataset_name: &str,
    cv: Option<(usize, u64)>,
) -> Result<EvalReport, CliError> {
    let mut stages = Vec::new();
    for task in STAGES {
        let mut r = evaluate_stage(m, task, &ds.samples)?;
        if let Some((k, seed)) = cv {
            let hp = m.stage(task).hyperparams.clone();
            r.metrics.cv = Some(cross_validate_stage(
                &ds.samples,
                task,
                &hp,
                m.layout,
                k,
                seed,
            )?);
        }
        stages.push(r);
    }

    let labeled: Vec<&Sample> = ds.samples.iter().filter(|s| s.label.is_some()).collect();
    let truth: Vec<Label> = labeled.iter().map(|s| s.label.unwrap()).collect();
    let owned: Vec<Sample> = labeled.into_iter().cloned().collect();
    let pred = m.diagnose_batch(&owned);

    let fine_classes = [
        Label::OutOfRangeError,
        Label::AddressError,
        Label::DataError0,
        Label::DataError1,
        Label::NoError,
    ];
    let fine = eval::confusion_matrix(&truth, &pred, &fine_classes)?;
    let merged_truth: Vec<ReportClass> = truth.iter().map(|l| l.merged()).collect();
    let merged_pred: Vec<ReportClass> = pred.iter().map(|l| l.merged()).collect();
    let merged = eval::confusion_matrix(&merged_truth, &merged_pred, &ReportClass::ALL)?;

    Ok(EvalReport {
        dataset: dataset_name.to_string(),
        samples: ds.samples.len(),
        stages,
        cascade_fine: CascadeReport {
            metrics: eval::prf_metrics(&fine),
            confusion: fine,
        },
        cascade_merged: CascadeReport {
            metrics: eval::prf_metrics(&merged),
            confusion: merged,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(args: &[&str]) -> (i32, String, String) {
        let argv: Vec<String> = std::iter::once("apb-triage")
            .chain(args.iter().copied())
            .map(String::from)
            .collect();
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run_cli(&argv, &mut out, &mut err);
        (
            code,
            String::from_utf8(out).unwrap(),
            String::from_utf8(err).unwrap(),
        )
    }

    #[test]
    fn usage_errors_exit_2() {
        let (code, _, err) = run(&["gen"]);
        assert_eq!(code, 2);
        assert!(err.contains("--out"));
        let (code, out, _) = run(&["--help"]);
        assert_eq!(code, 0);
        assert!(out.contains("diagnose"));
    }

    #[test]
    fn missing_input_is_io_error() {
        let (code, _, err) = run(&[
            "inspect",
            "--vcd",
            "/nonexistent.vcd",
            "--map",
            "/nonexistent.json",
        ]);
        assert_eq!(code, 3);
        assert_eq!(err.lines().count(), 1);
        assert!(err.starts_with("error: "));
    }

    #[test]
    fn empty_spec_is_faultgen_error() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("ds.jsonl");
        let (code, _, _) = run(&["gen", "--out", out.to_str().unwrap()]);
        assert_eq!(code, 12);
        assert!(!out.exists());
    }
}

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use capenext::harness::{
    dataset_for, eval_checkpoint, gradcheck_module, load_dataset, parse_thresholds, run_ablation, run_noise_suite,
    save_dataset, synth_dataset, train_experiment, write_metrics_csv, ExperimentConfig, NoiseKind, NoiseSpec,
    GRADCHECK_MODULES,
};
use capenext::training::{write_history_csv, Checkpoint, StepRecord};
use capenext::{Error, Result};
use clap::{Parser, Subcommand, ValueEnum};

const DEFAULT_THRESHOLDS: &str = "0.05,0.1,0.15,0.2,0.25";

#[derive(Parser)]
#[command(name = "capenext", version, about = "Category-agnostic keypoint matching on synthetic shape scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 14)]
        categories: usize,
        #[arg(long, default_value_t = 1)]
        instances: usize,
    },
    /// Train from a key=value config; writes checkpoint.bin and history.csv into OUT.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Print a progress line every N steps (0 disables).
        #[arg(long, default_value_t = 100)]
        log_every: usize,
    },
    /// Evaluate a checkpoint on every split its config defines.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory; regenerated from the checkpoint's config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated PCK thresholds; empty for a loss-only row.
        #[arg(long, default_value = DEFAULT_THRESHOLDS)]
        thresholds: String,
        /// Metrics CSV path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "model")]
        id: String,
    },
    /// Train and score the full model and its three ablations.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = DEFAULT_THRESHOLDS)]
        thresholds: String,
        /// Directory for ablation.csv and one checkpoint per variant; stdout CSV when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare clean and perturbed prompts on a trained checkpoint.
    Noise {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long)]
        rate: f64,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = DEFAULT_THRESHOLDS)]
        thresholds: String,
        /// Directory for metrics.csv and summary.csv; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// One block name, or every block when omitted.
        #[arg(long)]
        module: Option<String>,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Class,
    Typo,
}

impl From<Kind> for NoiseKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Class => NoiseKind::ClassSubstitute,
            Kind::Typo => NoiseKind::Typo,
        }
    }
}

fn read_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    ExperimentConfig::parse(&text)
}

fn progress(log_every: usize, start: Instant) -> impl FnMut(&str, &StepRecord) {
    move |label, r| {
        if log_every > 0 && r.step % log_every == 0 {
            eprintln!(
                "{label}step {:>5}  total {:.6}  heatmap {:.6}  offset {:.6}  lr {:.1e}  {:.1}s",
                r.step,
                r.total,
                r.heatmap_loss,
                r.offset_loss,
                r.lr,
                start.elapsed().as_secs_f64()
            );
        }
    }
}

/// Runs `write` against `path`, or stdout when `path` is `None`.
fn with_output(path: Option<&Path>, write: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    match path {
        Some(p) => {
            let mut f = BufWriter::new(File::create(p)?);
            write(&mut f)?;
            f.flush()?;
        }
        None => {
            let stdout = io::stdout();
            let mut lock = stdout.lock();
            write(&mut lock)?;
        }
    }
    Ok(())
}

/// Attaches the path to bare I/O errors.
fn at_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Io(io) => Error::Input(format!("{}: {io}", path.display())),
        other => other,
    })
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    at_path(path, Checkpoint::load(path))
}

fn dataset_arg(data: Option<&Path>, ckpt: &Checkpoint) -> Result<capenext::harness::Dataset> {
    match data {
        Some(dir) => at_path(dir, load_dataset(dir)),
        None => dataset_for(&ExperimentConfig::parse(&ckpt.metadata)?),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { seed, out, categories, instances } => {
            let ds = synth_dataset(seed, categories, instances)?;
            save_dataset(&ds, &out)?;
            println!("wrote {} samples over {} categories to {}", ds.samples.len(), categories, out.display());
        }
        Command::Train { config, out, log_every } => {
            let config = read_config(&config)?;
            let ds = dataset_for(&config)?;
            let mut log = progress(log_every, Instant::now());
            let trained = train_experiment(&config, &ds, |r| log("", r))?;
            fs::create_dir_all(&out)?;
            trained.checkpoint.save(&out.join("checkpoint.bin"))?;
            with_output(Some(&out.join("history.csv")), |w| write_history_csv(&trained.history, w))?;
            if let (Some(first), Some(last)) = (trained.history.first(), trained.history.last()) {
                println!(
                    "trained {} steps: total loss {:.6} -> {:.6}; checkpoint at {}",
                    trained.history.len(),
                    first.total,
                    last.total,
                    out.join("checkpoint.bin").display()
                );
            }
        }
        Command::Eval { ckpt, data, thresholds, out, id } => {
            let thresholds = parse_thresholds(&thresholds)?;
            let ckpt = load_checkpoint(&ckpt)?;
            let ds = dataset_arg(data.as_deref(), &ckpt)?;
            let rows = eval_checkpoint(&ckpt, &ds, &thresholds, &id)?;
            with_output(out.as_deref(), |w| write_metrics_csv(&rows, w))?;
        }
        Command::Ablate { config, thresholds, out } => {
            let thresholds = parse_thresholds(&thresholds)?;
            let config = read_config(&config)?;
            let mut log = progress(config.train.steps.div_ceil(5).max(1), Instant::now());
            let runs = run_ablation(&config, &thresholds, |label, r| log(&format!("[{label}] "), r))?;
            let rows: Vec<_> = runs.iter().map(|r| r.row.clone()).collect();
            if let Some(dir) = &out {
                fs::create_dir_all(dir)?;
                for r in &runs {
                    r.checkpoint.save(&dir.join(format!("{}.ckpt", r.label)))?;
                }
            }
            with_output(out.as_ref().map(|d| d.join("ablation.csv")).as_deref(), |w| {
                write_metrics_csv(&rows, w)
            })?;
        }
        Command::Noise { ckpt, kind, rate, data, thresholds, out } => {
            let thresholds = parse_thresholds(&thresholds)?;
            let ckpt = load_checkpoint(&ckpt)?;
            let ds = dataset_arg(data.as_deref(), &ckpt)?;
            let report = run_noise_suite(&ckpt, &ds, NoiseSpec { kind: kind.into(), rate }, &thresholds)?;
            let rows = [report.clean.row.clone(), report.noisy.row.clone()];
            if let Some(dir) = &out {
                fs::create_dir_all(dir)?;
            }
            with_output(out.as_ref().map(|d| d.join("metrics.csv")).as_deref(), |w| {
                write_metrics_csv(&rows, w)
            })?;
            with_output(out.as_ref().map(|d| d.join("summary.csv")).as_deref(), |w| {
                report.write_summary_csv(w)
            })?;
        }
        Command::Gradcheck { module, tol } => {
            let modules: Vec<&str> = match &module {
                Some(m) => vec![m.as_str()],
                None => GRADCHECK_MODULES.to_vec(),
            };
            let mut failed = Vec::new();
            for name in modules {
                let start = Instant::now();
                let report = gradcheck_module(name, tol)?;
                let worst = report.worst().map(|(p, _)| p.to_owned()).unwrap_or_default();
                println!(
                    "{:<16} {}  max_rel_error {:.3e}  worst {}  {:.2}s",
                    name,
                    if report.passed { "pass" } else { "FAIL" },
                    report.max_rel_error(),
                    worst,
                    start.elapsed().as_secs_f64()
                );
                if !report.passed {
                    failed.push(name);
                }
            }
            if !failed.is_empty() {
                return Err(Error::Contract(format!("gradient check failed for {}", failed.join(", "))));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

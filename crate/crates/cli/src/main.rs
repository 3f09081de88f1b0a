//! `nuclass`: data generation, staged training, calibration, evaluation and
//! reporting for the local/global expert classifier.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nuclass::gradcheck::{self, SUITE_CASES};
use nuclass::pipeline::{OutputFormat, Run, RunConfig};
use nuclass::projection::ProjectionMatrix;
use nuclass::{Error, Result};
use serde::Serialize;

#[derive(Parser)]
#[command(
    name = "nuclass",
    version,
    about = "Local/global expert cell classification with a fusion gate"
)]
struct Cli {
    /// JSON run configuration; built-in defaults when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Deployment mode: gate, safe, local or global.
    #[arg(long, global = true)]
    mode: Option<String>,
    /// Cohort name (evaluate) or projection name/path (project).
    #[arg(long, global = true)]
    cohort: Option<String>,
    /// Run directory, overriding `paths.root`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Output format: json, csv or md.
    #[arg(long, global = true)]
    format: Option<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate (or ingest) features and draw the train/val/test split.
    GenData,
    /// Train the local expert.
    TrainLocal,
    /// Train the global expert on top of the local checkpoint.
    TrainGlobal,
    /// Train the fusion gate over both expert checkpoints.
    TrainGate,
    /// Fit path reliabilities and safe-gate thresholds on the validation split.
    CalibrateGate,
    /// Evaluate a deployment mode on one or all cohorts.
    Evaluate,
    /// Project a training-space probability vector onto a cohort's classes.
    Project {
        /// Comma-separated probabilities in training class order.
        #[arg(long, value_delimiter = ',', required = true)]
        probs: Vec<f64>,
    },
    /// Render every evaluation report of the run in one document.
    Report,
    /// Finite-difference check of every differentiable component.
    GradCheck {
        /// Randomized instances per component.
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
}

fn code_of(e: &Error) -> (u8, &'static str) {
    match e {
        Error::Config(_) => (2, "config"),
        Error::Prerequisite(_) => (2, "prerequisite"),
        Error::Data { .. } => (3, "data"),
        Error::Io { .. } => (3, "io"),
        Error::Json(_) => (3, "json"),
        Error::Invalid(_) => (3, "invalid"),
        Error::Dimension(_) => (3, "dimension"),
        Error::Numerical(_) => (4, "numerical"),
    }
}

fn print_json<T: Serialize>(tag: &str, v: &T) -> Result<()> {
    println!("{tag} {}", serde_json::to_string(v)?);
    Ok(())
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("NUCLASS_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::config(format!("NUCLASS_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::config(format!("thread pool: {e}")))
}

/// Probabilities with at least two decimals and no float noise.
fn fmt_prob(v: f64) -> String {
    let s = format!("{v:.12}");
    let s = s.trim_end_matches('0');
    match s.split_once('.') {
        Some((_, frac)) if frac.len() < 2 => format!("{s}{}", "0".repeat(2 - frac.len())),
        Some(_) => s.to_string(),
        None => format!("{s}.00"),
    }
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(m) = &cli.mode {
        cfg.mode = m.parse()?;
    }
    if let Some(o) = &cli.out {
        cfg.paths.root = o.clone();
    }
    let format: Option<OutputFormat> = cli.format.as_deref().map(str::parse).transpose()?;
    let run = Run::new(cfg)?;
    println!("config {}", serde_json::to_string(&run.cfg)?);
    println!("seed {} config_hash {}", run.cfg.seed, run.hash);

    match cli.cmd {
        Cmd::GenData => print_json("data", &run.gen_data()?),
        Cmd::TrainLocal => print_json("stage", &run.train_local()?),
        Cmd::TrainGlobal => print_json("stage", &run.train_global()?),
        Cmd::TrainGate => print_json("stage", &run.train_gate()?),
        Cmd::CalibrateGate => print_json("calibration", &run.calibrate_gate()?.search),
        Cmd::Evaluate => {
            let reports = run.evaluate(run.cfg.mode, cli.cohort.as_deref())?;
            for r in &reports {
                let path = run.cfg.paths.report(&r.cohort, r.mode);
                println!(
                    "evaluated cohort={} mode={} n={} macro_f1={:.4} micro_f1={:.4} report={}",
                    r.cohort,
                    r.mode.name(),
                    r.report.n,
                    r.report.macro_f1,
                    r.report.micro_f1,
                    path.display()
                );
            }
            Ok(())
        }
        Cmd::Project { probs } => {
            let name = cli
                .cohort
                .ok_or_else(|| Error::config("project needs --cohort <projection name or file>"))?;
            let source = run
                .cfg
                .cohorts
                .iter()
                .find(|c| c.name == name)
                .and_then(|c| c.projection.clone())
                .unwrap_or(name);
            let m = ProjectionMatrix::load(&source)?;
            let out = m.project(&probs, true)?;
            match format {
                Some(OutputFormat::Json) => print_json(
                    "projection",
                    &serde_json::json!({
                        "eval_classes": m.eval_classes(),
                        "p_eval": out.p_eval,
                        "dropped_mass": out.dropped_mass,
                    }),
                ),
                Some(f) => Err(Error::config(format!(
                    "project does not support --format {}",
                    f.extension()
                ))),
                None => {
                    let parts: Vec<String> = out.p_eval.iter().map(|&v| fmt_prob(v)).collect();
                    println!("[{}]", parts.join(", "));
                    Ok(())
                }
            }
        }
        Cmd::Report => {
            let (path, text) = run.report(format.unwrap_or(OutputFormat::Md))?;
            print!("{text}");
            println!("written {}", path.display());
            Ok(())
        }
        Cmd::GradCheck { instances } => {
            let cases = gradcheck::suite(instances, run.cfg.seed)?;
            let mut failed = Vec::new();
            for name in SUITE_CASES {
                let of: Vec<_> = cases.iter().filter(|c| c.case == name).collect();
                let max_rel = of.iter().map(|c| c.report.max_relative_error).fold(0.0, f64::max);
                let max_abs = of.iter().map(|c| c.report.max_abs_error).fold(0.0, f64::max);
                let redraws: usize = of.iter().map(|c| c.redraws).sum();
                let ok = of.iter().all(|c| c.report.passed(1e-4));
                if !ok {
                    failed.push(name);
                }
                println!(
                    "gradcheck case={name} instances={} max_rel={max_rel:.3e} max_abs={max_abs:.3e} redraws={redraws} status={}",
                    of.len(),
                    if ok { "PASS" } else { "FAIL" }
                );
            }
            if failed.is_empty() {
                Ok(())
            } else {
                Err(Error::Numerical(format!(
                    "gradient check failed for {}",
                    failed.join(",")
                )))
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, kind) = code_of(&e);
            let reason = e.to_string().replace(['\n', '\r'], " ");
            eprintln!("error code={code} kind={kind} reason={reason}");
            ExitCode::from(code)
        }
    }
}

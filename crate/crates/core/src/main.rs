//! Command-line entry point.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fsddi::config::parse_config;
use fsddi::error::Error;
use fsddi::runner;

/// Exit code distinguishing "method declared not applicable" from a failure.
const EXIT_SKIPPED: u8 = 3;

#[derive(Parser)]
#[command(
    name = "fsddi",
    version,
    about = "Federated segmentation simulator with sample-level domain isolation"
)]
struct Cli {
    /// Worker threads. Reductions are ordered, so any count gives identical
    /// results; 1 keeps the run single-threaded.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the glyph dataset together with its federated split.
    GenerateData {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (default: $FSDDI_OUT/dataset).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the config's root seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run one experiment end to end.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's root seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: the config's `out`, then
        /// $FSDDI_OUT/<run-id>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cluster a persisted split's train samples at a checkpoint.
    Cluster {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset + split directory written by generate-data.
        #[arg(long)]
        split: PathBuf,
        /// Number of clusters to isolate.
        #[arg(long = "M", default_value_t = 2)]
        m: usize,
        /// Fraction of gradient coordinates kept by the shared random prune.
        #[arg(long, default_value_t = 0.01)]
        alpha: f64,
        /// Output directory (default: $FSDDI_OUT/clustering).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Score a checkpoint on a persisted dataset's test split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory written by generate-data.
        #[arg(long)]
        data: PathBuf,
        /// Output directory (default: $FSDDI_OUT/evaluation).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// `--out` wins, then the config's `out`, then $FSDDI_OUT as a root directory
/// that gets `default_name` appended.
fn resolve_out(
    flag: Option<PathBuf>,
    config: Option<PathBuf>,
    default_name: &str,
) -> Result<PathBuf, Error> {
    if let Some(o) = flag {
        return Ok(o);
    }
    if let Some(o) = config {
        return Ok(o);
    }
    match std::env::var_os("FSDDI_OUT") {
        Some(root) => Ok(PathBuf::from(root).join(default_name)),
        None => Err(Error::Config(
            "no output directory: pass --out, set `out` in the config, or set FSDDI_OUT".into(),
        )),
    }
}

fn not_applicable(err: &Error) -> bool {
    let mut cur = err;
    loop {
        match cur {
            Error::NotApplicable(_) => return true,
            Error::Stage { source, .. } => cur = source,
            _ => return false,
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<(), Error> {
    match cmd {
        Cmd::GenerateData { config, out, seed } => {
            let mut cfg = parse_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let out = resolve_out(out, None, "dataset")?;
            let hash = runner::generate_stage(&cfg, &out)?;
            println!("dataset {hash} written to {}", out.display());
            Ok(())
        }
        Cmd::Run { config, seed, out } => {
            let mut cfg = parse_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let run_id = cfg.run_id();
            let out = resolve_out(out, cfg.out.clone(), &run_id)?;
            runner::run_experiment(&cfg, &out)?;
            println!("{run_id} written to {}", out.display());
            Ok(())
        }
        Cmd::Cluster { checkpoint, split, m, alpha, out, seed } => {
            let out = resolve_out(out, None, "clustering")?;
            let report = runner::cluster_stage(&checkpoint, &split, m, alpha, seed, &out)?;
            println!(
                "clustered {} samples into {} clusters, rand index vs domains {:.4}",
                report.assignments.len(),
                report.m,
                report.rand_index_vs_domain
            );
            Ok(())
        }
        Cmd::Evaluate { checkpoint, data, out } => {
            let out = resolve_out(out, None, "evaluation")?;
            let metrics = runner::evaluate_stage(&checkpoint, &data, &out)?;
            println!("test mIoU {:.4}", metrics.miou);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        eprintln!("error: thread pool: {e}");
        return ExitCode::FAILURE;
    }
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if not_applicable(&e) => {
            eprintln!("skipped: {e}");
            ExitCode::from(EXIT_SKIPPED)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

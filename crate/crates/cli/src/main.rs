use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use disentangle_core::error::Result;
use disentangle_core::harness::checks::gradcheck_suite;
use disentangle_core::harness::experiment::{report, run_experiment, ExperimentConfig, Phase};
use disentangle_core::kkt::{oracle_report, RewardVariant};

#[derive(Parser)]
#[command(
    name = "disentangle",
    version,
    about = "Attention-control experiments on a toy denoiser"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the learning stage from a TOML config or a run manifest.
    Learn {
        config: PathBuf,
        /// Output directory [default: runs/<config stem>]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run learning, then box-controlled synthesis.
    Synthesize {
        config: PathBuf,
        /// Output directory [default: runs/<config stem>]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the closed-form and projected-descent optima of the reward and
    /// penalty losses for one pixel per instance.
    Oracle {
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        #[arg(long, value_enum, default_value_t = Variant::Costed)]
        variant: Variant,
    },
    /// Compare every hand-written gradient against central differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Verify a run directory against its manifest and summarize metrics.
    Report { run_dir: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum Variant {
    Costed,
    Free,
}

fn default_out(config: &Path) -> PathBuf {
    let stem = config
        .file_stem()
        .map_or("run".into(), |s| s.to_string_lossy().into_owned());
    Path::new("runs").join(stem)
}

fn run_phase(config: &Path, out: Option<PathBuf>, phase: Phase) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let out = out.unwrap_or_else(|| default_out(config));
    let run = run_experiment(&cfg, phase, &out)?;
    for d in &run.diagnostics {
        eprintln!("note: {d}");
    }
    for r in &run.metrics {
        println!(
            "{:<10} instance {}: leakage_mass {:.6}  mask_iou {:.4}",
            r.phase, r.instance, r.leakage_mass, r.mask_iou
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn dispatch(command: Command) -> Result<bool> {
    match command {
        Command::Learn { config, out } => run_phase(&config, out, Phase::Learn)?,
        Command::Synthesize { config, out } => run_phase(&config, out, Phase::Synthesize)?,
        Command::Oracle { k, alpha, variant } => {
            let variant = match variant {
                Variant::Costed => RewardVariant::Costed,
                Variant::Free => RewardVariant::Free,
            };
            let r = oracle_report(k, alpha, variant)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
        Command::Gradcheck { seed } => {
            let r = gradcheck_suite(seed)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
            return Ok(r.passed);
        }
        Command::Report { run_dir } => print!("{}", report(&run_dir)?),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: gradient check exceeded tolerance");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 2 } else { 1 })
        }
    }
}

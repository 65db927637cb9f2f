//! `geodiff` experiment runner.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | malformed arguments or configuration |
//! | 2 | condition A4 indeterminate (margin within resolution) |
//! | 3 | a diffusion epoch failed, or a window link is not certified |
//! | 4 | any other runtime failure (numerics, I/O) |

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use geodiff::config::RunConfig;
use geodiff::experiment::{
    a4_report, run_diffuse, run_melnikov, run_pipeline, run_shadow, write_atomic, Context, ExperimentError,
};

#[derive(Parser, Debug)]
#[command(name = "geodiff", version, about = "Energy growth experiments for geodesic flows with recurrent forcing")]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Worker threads for grids and sweeps.
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
    /// Overrides the configured seed.
    #[arg(long, global = true, value_name = "S")]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Recurrence profile, homoclinic branches, gain grid and A4 report.
    Melnikov,
    /// Epochs of the scheduling policy with the fitted growth rate.
    Diffuse,
    /// Chain of windows around a schedule and its shadow point.
    Shadow,
    /// All stages in order.
    Pipeline,
}

const EXIT_CONFIG: u8 = 1;
const EXIT_A4: u8 = 2;
const EXIT_LINK: u8 = 3;
const EXIT_RUNTIME: u8 = 4;

fn exit_code(e: &ExperimentError) -> u8 {
    match e {
        ExperimentError::Config(_) => EXIT_CONFIG,
        ExperimentError::A4Indeterminate { .. } => EXIT_A4,
        ExperimentError::Epoch { .. } | ExperimentError::Link { .. } | ExperimentError::Shadow(_) => EXIT_LINK,
        _ => EXIT_RUNTIME,
    }
}

fn load(cli: &Cli) -> Result<RunConfig, ExperimentError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), ExperimentError> {
    let cfg = load(cli)?;
    let out = cfg.out.clone();
    match cli.command {
        Command::Melnikov => {
            let ctx = Context::new(&cfg)?;
            let s = run_melnikov(&cfg, &ctx, &out)?;
            eprintln!(
                "A4 {:?}: margin {:e}, leading branch {:?}, phi* = {:.6}",
                s.a4.status, s.a4.margin, s.a4.leading_branch, s.a4.phi_star
            );
            if !s.holds() {
                return Err(ExperimentError::A4Indeterminate {
                    margin: s.a4.margin,
                    resolution: s.a4.resolution,
                });
            }
        }
        Command::Diffuse => {
            let ctx = Context::new(&cfg)?;
            let report = a4_report(&cfg, &ctx)?;
            let s = run_diffuse(&cfg, &ctx, &report, &out)?;
            for e in &s.epochs {
                eprintln!(
                    "epoch {}: eps {:.5}, {} blocks, H {:.4e} -> {:.4e}, slope {:.4e}",
                    e.index, e.epsilon, e.blocks, e.h_start, e.h_end, e.slope
                );
            }
            eprintln!("fit H >= {:.6e} t + {:.6e}", s.slope_a, s.intercept_b);
        }
        Command::Shadow => {
            let ctx = Context::new(&cfg)?;
            let s = run_shadow(&cfg, &ctx, &out)?;
            eprintln!(
                "{} links, {} windows certified; shadow visits {} (min margin {:?})",
                s.links, s.windows, s.visits, s.min_margin
            );
        }
        Command::Pipeline => {
            let s = run_pipeline(&cfg, &out)?;
            eprintln!(
                "A4 margin {:e}; growth rate {:.6e}; {} windows certified",
                s.melnikov.a4.margin, s.diffuse.slope_a, s.shadow.windows
            );
        }
    }
    if matches!(cli.command, Command::Melnikov | Command::Diffuse | Command::Shadow) {
        write_atomic(&out, "config.toml", cfg.to_saved_toml().as_bytes())?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} workers: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

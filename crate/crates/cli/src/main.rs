use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use semrom::cli::{cmd_dgmini, cmd_fom, cmd_report, cmd_rom, cmd_stab, CommandContext};
use semrom::config::RunConfig;
use std::path::PathBuf;

/// Reduced-order modeling toolkit for spectral element discretizations.
#[derive(Parser)]
#[command(name = "semrom", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct CommonArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory (default: config, then $SEMROM_OUT, then ./out).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Random seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// BLAS thread count (default 1, keeping runs deterministic).
    #[arg(long)]
    threads: Option<usize>,
    /// Verbose progress on stderr.
    #[arg(long)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate full-order snapshots over the viscosity range.
    Fom(CommonArgs),
    /// Build the reduced model and run the validation error sweep.
    Rom(CommonArgs),
    /// Stabilize the reduced operator of an archived trajectory.
    Stab(CommonArgs),
    /// Run the 1D discontinuous-Galerkin miniature model.
    Dgmini(CommonArgs),
    /// Summarize the artifacts in an output directory.
    Report {
        /// Output directory to inspect.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn output_dir(cfg: &RunConfig, flag: &Option<PathBuf>) -> PathBuf {
    flag.clone()
        .or_else(|| cfg.output.dir.clone())
        .or_else(|| std::env::var_os("SEMROM_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn context(args: &CommonArgs) -> anyhow::Result<CommandContext> {
    if let Some(threads) = args.threads {
        // Must happen before the first BLAS call.
        std::env::set_var("OPENBLAS_NUM_THREADS", threads.to_string());
    } else if std::env::var_os("OPENBLAS_NUM_THREADS").is_none() {
        std::env::set_var("OPENBLAS_NUM_THREADS", "1");
    }
    let config = RunConfig::load(&args.config)
        .with_context(|| format!("loading {}", args.config.display()))?;
    let out = output_dir(&config, &args.out);
    Ok(CommandContext::new(config, out, args.seed, args.verbose))
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Fom(args) => {
            let ctx = context(&args)?;
            let outcome = cmd_fom(&ctx)?;
            println!(
                "fom: {} snapshots -> {}",
                outcome.converged,
                outcome.archive.display()
            );
            if let Some(nu) = outcome.failed_nu {
                bail!("continuation failed at nu = {nu}; partial results kept");
            }
        }
        Command::Rom(args) => {
            let ctx = context(&args)?;
            let outcome = cmd_rom(&ctx)?;
            println!(
                "rom: {} modes, offline {:.3}s, online {:.3}s -> {}",
                outcome.n_modes,
                outcome.offline_seconds,
                outcome.online_seconds,
                outcome.model.display()
            );
            if let Some(table) = outcome.table {
                println!("rom: error table -> {}", table.display());
            }
        }
        Command::Stab(args) => {
            let ctx = context(&args)?;
            let outcome = cmd_stab(&ctx)?;
            println!(
                "stab: applied={} alpha_after={:.3e} -> {}",
                outcome.result.applied,
                outcome.result.alpha_after,
                outcome.report.display()
            );
            if !outcome.result.success {
                bail!(
                    "stabilization failed: power slope {:.3e} is not negative",
                    outcome.result.alpha_after
                );
            }
        }
        Command::Dgmini(args) => {
            let ctx = context(&args)?;
            let outcome = cmd_dgmini(&ctx)?;
            println!(
                "dgmini: {} snapshots -> {}",
                outcome.snapshots,
                outcome.archive.display()
            );
        }
        Command::Report { out } => {
            let dir = out
                .or_else(|| std::env::var_os("SEMROM_OUT").map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from("out"));
            print!("{}", cmd_report(&dir)?);
        }
    }
    Ok(())
}

//! Command-line front end for the filter simulation library.
//!
//! Exit codes: 0 on success, 1 for usage/configuration/check errors, 2 when
//! more than 10% of trajectories fail.

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use qpf::runner::bench::bench_filters;
use qpf::runner::checks::run_checks;
use qpf::runner::output::write_outputs;
use qpf::runner::{load_config_with_preset, run_ensemble, EnsembleRun, RunConfig};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "qpf",
    version,
    about = "Monte Carlo simulations of exact, unnormalized, and projection \
             filters for continuously monitored qubit ensembles"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a trajectory ensemble and write per-trajectory CSV files, an
    /// ensemble summary, and run metadata.
    Run {
        /// TOML configuration file; omitted keys fall back to the preset
        /// (or baseline) defaults.
        config: Option<PathBuf>,
        /// Scenario preset (fig3, fig5, hzero); wins over the config file's
        /// own `preset` key.
        #[arg(long)]
        preset: Option<String>,
        /// Override the seed base.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the trajectory count.
        #[arg(long)]
        trajectories: Option<usize>,
        /// Worker thread count (default: one per core). Results are
        /// identical for any worker count.
        #[arg(long)]
        workers: Option<usize>,
        /// Output directory (overrides the config's `out_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run fast self-diagnostics (determinism, state sanity, residual
    /// elimination, config round-trip) for a configuration.
    Check {
        /// TOML configuration file.
        config: Option<PathBuf>,
        /// Scenario preset (fig3, fig5, hzero).
        #[arg(long)]
        preset: Option<String>,
    },
    /// Compare per-step costs of the exact filter and the projection filter
    /// across system sizes.
    Bench {
        /// Largest atom count to time.
        #[arg(long, default_value_t = 4)]
        max_atoms: usize,
        /// Steps per timing pass.
        #[arg(long, default_value_t = 256)]
        steps: usize,
        /// Timing passes per filter (fastest pass wins).
        #[arg(long, default_value_t = 3)]
        repeats: usize,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(code) => ExitCode::from(code),
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::from(1)
        }
    }
}

fn load(config: Option<&Path>, preset: Option<&str>) -> Result<RunConfig, String> {
    let text = match config {
        Some(path) => fs::read_to_string(path)
            .map_err(|e| format!("cannot read {}: {e}", path.display()))?,
        None => String::new(),
    };
    load_config_with_preset(&text, preset).map_err(|e| e.to_string())
}

fn with_workers<T: Send>(
    workers: Option<usize>,
    f: impl FnOnce() -> T + Send,
) -> Result<T, String> {
    match workers {
        None => Ok(f()),
        Some(0) => Err("--workers must be at least 1".to_string()),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| format!("cannot build worker pool: {e}"))
            .map(|pool| pool.install(f)),
    }
}

fn execute(cli: Cli) -> Result<u8, String> {
    match cli.command {
        Command::Run {
            config,
            preset,
            seed,
            trajectories,
            workers,
            out,
        } => {
            let mut cfg = load(config.as_deref(), preset.as_deref())?;
            if let Some(s) = seed {
                cfg.seed_base = s;
            }
            if let Some(n) = trajectories {
                cfg.n_trajectories = n;
            }
            if let Some(dir) = out {
                cfg.out_dir = dir.display().to_string();
            }
            cfg.validate().map_err(|e| e.to_string())?;
            let run = with_workers(workers, || run_ensemble(&cfg))?
                .map_err(|e| e.to_string())?;
            let out_dir = PathBuf::from(&cfg.out_dir);
            let written =
                write_outputs(&run, &cfg, &out_dir).map_err(|e| e.to_string())?;
            report_run(&run, written.len(), &out_dir);
            if run.failure_rate_exceeded() {
                Ok(2)
            } else {
                Ok(0)
            }
        }
        Command::Check { config, preset } => {
            let cfg = load(config.as_deref(), preset.as_deref())?;
            let results = run_checks(&cfg).map_err(|e| e.to_string())?;
            let mut all_passed = true;
            for result in &results {
                let verdict = if result.passed { "PASS" } else { "FAIL" };
                println!("{verdict}  {:<22} {}", result.name, result.detail);
                all_passed &= result.passed;
            }
            Ok(if all_passed { 0 } else { 1 })
        }
        Command::Bench {
            max_atoms,
            steps,
            repeats,
        } => {
            let rows = bench_filters(max_atoms, steps, repeats).map_err(|e| e.to_string())?;
            println!(
                "{:>5} {:>5} {:>7} {:>16} {:>16} {:>8}",
                "atoms", "dim", "coords", "exact ns/step", "proj ns/step", "ratio"
            );
            for row in &rows {
                println!(
                    "{:>5} {:>5} {:>7} {:>16.0} {:>16.0} {:>8.1}",
                    row.n_atoms,
                    row.dim,
                    row.coordinates,
                    row.exact_ns_per_step,
                    row.projection_ns_per_step,
                    row.ratio()
                );
            }
            Ok(0)
        }
    }
}

fn report_run(run: &EnsembleRun, n_files: usize, out_dir: &Path) {
    let summary = &run.summary;
    println!(
        "{} trajectories ({} failed, {} hit the theta guard); {} files in {}",
        summary.n_total,
        summary.n_failed,
        summary.n_guard_tripped,
        n_files,
        out_dir.display()
    );
    let timings = summary.timings;
    if timings.steps > 0 {
        println!(
            "per-step cost: exact {:.0} ns, unnormalized {:.0} ns, projection {:.0} ns",
            timings.truth_ns_per_step(),
            timings.unnormalized_ns_per_step(),
            timings.projection_ns_per_step()
        );
    }
    for record in run.records.iter().filter(|r| !r.completed()).take(5) {
        eprintln!(
            "trajectory {} (seed {}) failed: {}",
            record.index,
            record.seed,
            record.failure.as_deref().unwrap_or("unknown")
        );
    }
    if summary.n_failed > 5 {
        eprintln!("... and {} more failures (see metadata.toml)", summary.n_failed - 5);
    }
}

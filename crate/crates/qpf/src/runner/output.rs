//! CSV and metadata writers. Reals are printed with 17 significant digits so
//! every f64 round-trips exactly; trajectory files are therefore stable
//! regression artifacts for fixed seeds.

use super::{CheckpointRow, EnsembleRun, ProjectionKind, RunConfig, TrajectoryRecord};
use serde::Serialize;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OutputError {
    #[error("failed to write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("failed to serialize metadata: {0}")]
    Metadata(#[from] toml::ser::Error),
}

fn fmt_real(x: f64) -> String {
    format!("{x:.16e}")
}

fn trajectory_header(m: usize, n: usize) -> String {
    let mut header = String::from("t");
    for i in 1..=m {
        let _ = write!(header, ",theta_{i}");
    }
    for i in 1..=n {
        let _ = write!(header, ",rho_diag_{i}");
    }
    for i in 1..=n {
        let _ = write!(header, ",rhotilde_diag_{i}");
    }
    header.push_str(",frob_err,pred_res,corr1,corr2,trPR,logtrace");
    header
}

fn trajectory_row(row: &CheckpointRow) -> String {
    let mut line = fmt_real(row.t);
    let push = |line: &mut String, x: f64| {
        line.push(',');
        line.push_str(&fmt_real(x));
    };
    for &x in &row.theta {
        push(&mut line, x);
    }
    for &x in &row.rho_diag {
        push(&mut line, x);
    }
    for &x in &row.rhotilde_diag {
        push(&mut line, x);
    }
    for x in [
        row.frob_err,
        row.pred_res,
        row.corr1,
        row.corr2,
        row.tr_pr,
        row.logtrace,
    ] {
        push(&mut line, x);
    }
    line
}

fn trajectory_csv(record: &TrajectoryRecord, m: usize, n: usize) -> String {
    let mut text = trajectory_header(m, n);
    text.push('\n');
    for row in &record.rows {
        text.push_str(&trajectory_row(row));
        text.push('\n');
    }
    text
}

fn summary_csv(run: &EnsembleRun) -> String {
    let m = run
        .summary
        .metrics
        .as_ref()
        .map_or(0, |metrics| metrics.exp_theta.len());
    let mut text = String::from(
        "t,frob_err_mean,frob_err_se,pred_res_mean,pred_res_se,corr1_mean,corr1_se,\
         corr2_mean,corr2_se,trPR_mean,trPR_se",
    );
    for i in 1..=m {
        let _ = write!(text, ",exp_theta_{i}_mean,exp_theta_{i}_se");
    }
    text.push('\n');
    let Some(metrics) = &run.summary.metrics else {
        return text;
    };
    for (k, &t) in run.summary.checkpoint_times.iter().enumerate() {
        let mut line = fmt_real(t);
        for stats in [
            &metrics.frob_err,
            &metrics.pred_res,
            &metrics.corr1,
            &metrics.corr2,
            &metrics.tr_pr,
        ] {
            line.push(',');
            line.push_str(&fmt_real(stats.mean[k]));
            line.push(',');
            line.push_str(&fmt_real(stats.stderr[k]));
        }
        for stats in &metrics.exp_theta {
            line.push(',');
            line.push_str(&fmt_real(stats.mean[k]));
            line.push(',');
            line.push_str(&fmt_real(stats.stderr[k]));
        }
        text.push_str(&line);
        text.push('\n');
    }
    text
}

fn scheme_name(kind: ProjectionKind) -> &'static str {
    match kind {
        ProjectionKind::Auto => "auto",
        ProjectionKind::General => "general",
        ProjectionKind::Reduced => "reduced",
        ProjectionKind::Commuting => "commuting",
    }
}

#[derive(Serialize)]
struct BuildInfo {
    package: &'static str,
    version: &'static str,
    build_id: String,
}

#[derive(Serialize)]
struct RngInfo {
    algorithm: &'static str,
    seed_base: u64,
    trajectory_seed_rule: &'static str,
    draw_order: &'static str,
}

#[derive(Serialize)]
struct BasisInfo {
    ordering: &'static str,
    zero_state: &'static str,
}

#[derive(Serialize)]
struct FailureInfo {
    index: usize,
    seed: u64,
    message: String,
}

#[derive(Serialize)]
struct RunInfo {
    n_trajectories: usize,
    n_failed: usize,
    n_guard_tripped: usize,
    projection_scheme: &'static str,
    failures: Vec<FailureInfo>,
}

#[derive(Serialize)]
struct TimingInfo {
    steps: u64,
    exact_ns_per_step: f64,
    unnormalized_ns_per_step: f64,
    projection_ns_per_step: f64,
    exact_vs_projection_ratio: f64,
}

#[derive(Serialize)]
struct Metadata<'a> {
    build: BuildInfo,
    rng: RngInfo,
    basis: BasisInfo,
    run: RunInfo,
    timings: TimingInfo,
    config: &'a RunConfig,
}

fn metadata_toml(run: &EnsembleRun, cfg: &RunConfig) -> Result<String, OutputError> {
    let timings = run.summary.timings;
    let metadata = Metadata {
        build: BuildInfo {
            package: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            build_id: option_env!("QPF_BUILD_ID")
                .map(str::to_string)
                .unwrap_or_else(|| format!("v{}", env!("CARGO_PKG_VERSION"))),
        },
        rng: RngInfo {
            algorithm: "ChaCha12",
            seed_base: cfg.seed_base,
            trajectory_seed_rule: "seed_base.wrapping_add(trajectory_index)",
            draw_order: "control amplitude scale first, then fine Wiener increments",
        },
        basis: BasisInfo {
            ordering: "product basis ordered by binary index; atom 1 is the leftmost \
                       tensor factor (2 atoms: |00>, |01>, |10>, |11>)",
            zero_state: "|0> is the +1 eigenstate of sigma_z",
        },
        run: RunInfo {
            n_trajectories: run.summary.n_total,
            n_failed: run.summary.n_failed,
            n_guard_tripped: run.summary.n_guard_tripped,
            projection_scheme: scheme_name(run.projection_scheme),
            failures: run
                .records
                .iter()
                .filter_map(|r| {
                    r.failure.as_ref().map(|message| FailureInfo {
                        index: r.index,
                        seed: r.seed,
                        message: message.clone(),
                    })
                })
                .collect(),
        },
        timings: TimingInfo {
            steps: timings.steps,
            exact_ns_per_step: timings.truth_ns_per_step(),
            unnormalized_ns_per_step: timings.unnormalized_ns_per_step(),
            projection_ns_per_step: timings.projection_ns_per_step(),
            exact_vs_projection_ratio: timings.truth_ns_per_step()
                / timings.projection_ns_per_step(),
        },
        config: cfg,
    };
    Ok(toml::to_string_pretty(&metadata)?)
}

/// Writes one CSV per trajectory, an ensemble summary CSV, and a metadata
/// document into `out_dir` (created if missing). Returns the paths written.
pub fn write_outputs(
    run: &EnsembleRun,
    cfg: &RunConfig,
    out_dir: &Path,
) -> Result<Vec<PathBuf>, OutputError> {
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| OutputError::Io { path, source }
    };
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let n = cfg.dim();
    let m = run
        .records
        .iter()
        .find_map(|r| r.rows.first())
        .map_or(0, |row| row.theta.len());
    let mut written = Vec::new();
    for record in &run.records {
        let path = out_dir.join(format!("trajectory_{:04}.csv", record.index));
        fs::write(&path, trajectory_csv(record, m, n)).map_err(io_err(&path))?;
        written.push(path);
    }
    let path = out_dir.join("summary.csv");
    fs::write(&path, summary_csv(run)).map_err(io_err(&path))?;
    written.push(path);
    let path = out_dir.join("metadata.toml");
    fs::write(&path, metadata_toml(run, cfg)?).map_err(io_err(&path))?;
    written.push(path);
    Ok(written)
}

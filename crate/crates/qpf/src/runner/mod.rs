//! Monte Carlo runner: drives the exact, unnormalized, and projection
//! filters along shared observation paths, records checkpoint diagnostics,
//! and aggregates ensemble statistics.

pub mod bench;
pub mod checks;
pub mod config;
pub mod output;

pub use config::{
    load_config, load_config_with_preset, ConfigError, ControlKind, FilterSelection,
    ObservationSource, ProjectionKind, RunConfig, UnnormalizedScheme,
};

use crate::diagnostics::{residual_report, CheckpointStats, StatsAccumulator};
use crate::filter::{
    default_submanifold, normalize, projection_filter_step_commuting,
    projection_filter_step_general, projection_filter_step_reduced, quantum_filter_step_traced,
    unnormalized_filter_step, unnormalized_filter_step_stratonovich, FilterState, Submanifold,
    ThetaState, UnnormalizedState,
};
use crate::linalg::Operator;
use crate::model::SystemModel;
use crate::sde::{wiener_path_from_rng, TimeGrid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use std::time::Instant;

/// One checkpoint of a trajectory: everything needed to reconstruct the
/// output row at time `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointRow {
    pub t: f64,
    pub theta: Vec<f64>,
    pub rho_diag: Vec<f64>,
    pub rhotilde_diag: Vec<f64>,
    pub frob_err: f64,
    pub pred_res: f64,
    pub corr1: f64,
    pub corr2: f64,
    pub tr_pr: f64,
    pub logtrace: f64,
}

/// Nanoseconds spent inside each filter's step function, plus the number of
/// steps taken (equal across filters unless the trajectory failed).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FilterTimings {
    pub truth_ns: u128,
    pub unnormalized_ns: u128,
    pub projection_ns: u128,
    pub steps: u64,
}

impl FilterTimings {
    fn per_step(total_ns: u128, steps: u64) -> f64 {
        if steps == 0 {
            return f64::NAN;
        }
        total_ns as f64 / steps as f64
    }

    pub fn truth_ns_per_step(&self) -> f64 {
        Self::per_step(self.truth_ns, self.steps)
    }

    pub fn unnormalized_ns_per_step(&self) -> f64 {
        Self::per_step(self.unnormalized_ns, self.steps)
    }

    pub fn projection_ns_per_step(&self) -> f64 {
        Self::per_step(self.projection_ns, self.steps)
    }

    fn merge(&mut self, other: &FilterTimings) {
        self.truth_ns += other.truth_ns;
        self.unnormalized_ns += other.unnormalized_ns;
        self.projection_ns += other.projection_ns;
        self.steps += other.steps;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRecord {
    pub index: usize,
    pub seed: u64,
    /// Per-trajectory control amplitude multiplier (1 when not randomized).
    pub control_scale: f64,
    pub rows: Vec<CheckpointRow>,
    /// Set when a step failed; `rows` is then truncated at the last
    /// checkpoint reached before the failure.
    pub failure: Option<String>,
    pub theta_guard_tripped: bool,
    /// Largest |Tr ρ − 1| observed after renormalization.
    pub max_trace_deviation: f64,
    /// Smallest eigenvalue of the pre-renormalization update, over all steps.
    pub min_precorrection_eigenvalue: f64,
    pub timings: FilterTimings,
}

impl TrajectoryRecord {
    pub fn completed(&self) -> bool {
        self.failure.is_none()
    }
}

/// Per-checkpoint ensemble means and standard errors over completed
/// trajectories.
#[derive(Clone, Debug)]
pub struct SummaryMetrics {
    pub frob_err: CheckpointStats,
    pub pred_res: CheckpointStats,
    pub corr1: CheckpointStats,
    pub corr2: CheckpointStats,
    pub tr_pr: CheckpointStats,
    /// One entry per coordinate: statistics of e^{θ_i(t)}.
    pub exp_theta: Vec<CheckpointStats>,
}

#[derive(Clone, Debug)]
pub struct EnsembleSummary {
    pub n_total: usize,
    pub n_failed: usize,
    pub n_guard_tripped: usize,
    pub checkpoint_times: Vec<f64>,
    /// None when every trajectory failed.
    pub metrics: Option<SummaryMetrics>,
    pub timings: FilterTimings,
}

impl EnsembleSummary {
    /// Terminal-time mean and standard error of e^{θ_i} for each coordinate;
    /// under reference-measure observations each mean estimates 1.
    pub fn terminal_exp_theta(&self) -> Option<Vec<(f64, f64)>> {
        let metrics = self.metrics.as_ref()?;
        let last = self.checkpoint_times.len().checked_sub(1)?;
        Some(
            metrics
                .exp_theta
                .iter()
                .map(|s| (s.mean[last], s.stderr[last]))
                .collect(),
        )
    }
}

#[derive(Clone, Debug)]
pub struct EnsembleRun {
    pub records: Vec<TrajectoryRecord>,
    pub summary: EnsembleSummary,
    /// Projection update actually used (auto choice resolved).
    pub projection_scheme: ProjectionKind,
}

impl EnsembleRun {
    /// More than 10% of trajectories failing marks the run itself as failed.
    pub fn failure_rate_exceeded(&self) -> bool {
        10 * self.summary.n_failed > self.summary.n_total
    }
}

/// Immutable per-run context shared by every trajectory: grid, initial
/// state, submanifold, and the pointer-complement projector.
#[derive(Debug)]
pub struct Scenario {
    grid: TimeGrid,
    rho0: Operator,
    sub: Submanifold,
    projector_r: Operator,
    projection: ProjectionKind,
}

impl Scenario {
    pub fn from_config(cfg: &RunConfig) -> Result<Self, ConfigError> {
        cfg.validate()?;
        let grid = cfg.time_grid()?;
        let rho0 = cfg.initial_state_operator()?;
        let base_model = cfg.build_model(1.0)?;
        let sub = default_submanifold(&base_model, &rho0)?;
        let dim = rho0.dim();
        let projector_r =
            &Operator::identity(dim) - &Operator::basis_projector(dim, cfg.pointer_index);
        let projection = resolve_projection(cfg.filters.projection, &base_model)?;
        Ok(Self {
            grid,
            rho0,
            sub,
            projector_r,
            projection,
        })
    }

    pub fn submanifold(&self) -> &Submanifold {
        &self.sub
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn projection(&self) -> ProjectionKind {
        self.projection
    }
}

fn resolve_projection(
    requested: ProjectionKind,
    model: &SystemModel,
) -> Result<ProjectionKind, ConfigError> {
    let resolved = match requested {
        ProjectionKind::Auto => {
            if model.commuting() {
                ProjectionKind::Commuting
            } else if model.hermitian_coupling() {
                ProjectionKind::Reduced
            } else {
                ProjectionKind::General
            }
        }
        explicit => explicit,
    };
    if resolved == ProjectionKind::Commuting && !model.commuting() {
        return Err(ConfigError::Invalid {
            key: "filters.projection".to_string(),
            detail: "commuting update requested but the Hamiltonian does not commute \
                     with the coupling"
                .to_string(),
        });
    }
    Ok(resolved)
}

/// Runs one trajectory of the configured scenario. Builds the shared context
/// itself; [`run_ensemble`] amortizes that across trajectories.
pub fn run_trajectory(cfg: &RunConfig, index: usize) -> Result<TrajectoryRecord, ConfigError> {
    let scenario = Scenario::from_config(cfg)?;
    Ok(run_in_scenario(cfg, &scenario, index))
}

fn run_in_scenario(cfg: &RunConfig, sc: &Scenario, index: usize) -> TrajectoryRecord {
    let seed = cfg.seed_base.wrapping_add(index as u64);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    // The amplitude draw always happens, so the Wiener path below is the
    // same whether or not the control is randomized.
    let draw: f64 = rng.sample(StandardNormal);
    let control_scale = if cfg.model.control.random_scale {
        draw
    } else {
        1.0
    };
    let model = cfg
        .build_model(control_scale)
        .expect("model construction was validated with the scenario");
    let path = wiener_path_from_rng(seed, &mut rng, &sc.grid);

    let mut record = TrajectoryRecord {
        index,
        seed,
        control_scale,
        rows: Vec::with_capacity(sc.grid.coarse_count() / cfg.checkpoint_stride),
        failure: None,
        theta_guard_tripped: false,
        max_trace_deviation: 0.0,
        min_precorrection_eigenvalue: f64::INFINITY,
        timings: FilterTimings::default(),
    };

    let mut truth = FilterState::new(sc.rho0.clone()).expect("validated initial state");
    let mut zakai = UnnormalizedState::new(sc.rho0.clone()).expect("validated initial state");
    let mut theta = ThetaState::origin(sc.sub.m());
    let dt = sc.grid.coarse_dt();

    for k in 0..sc.grid.coarse_count() {
        let t = sc.grid.coarse_time(k);
        let dw = if cfg.zero_noise {
            0.0
        } else {
            path.coarse_increments()[k]
        };
        let dy = match cfg.observation {
            ObservationSource::Truth => model.expected_signal(truth.rho()) * dt + dw,
            ObservationSource::Wiener => dw,
        };

        let started = Instant::now();
        let stepped = quantum_filter_step_traced(&model, &truth, t, dt, dy);
        record.timings.truth_ns += started.elapsed().as_nanos();
        match stepped {
            Ok((next, trace_before)) => {
                truth = next;
                let dev = (truth.rho().trace_re() - 1.0).abs();
                record.max_trace_deviation = record.max_trace_deviation.max(dev);
                match truth.rho().min_eigenvalue() {
                    Ok(min) => {
                        record.min_precorrection_eigenvalue =
                            record.min_precorrection_eigenvalue.min(min * trace_before);
                    }
                    Err(e) => {
                        record.failure = Some(format!("eigenvalue check at step {k}: {e}"));
                        break;
                    }
                }
            }
            Err(e) => {
                record.failure = Some(format!("exact filter at step {k}: {e}"));
                break;
            }
        }

        let started = Instant::now();
        let stepped = match cfg.filters.unnormalized {
            UnnormalizedScheme::Euler => unnormalized_filter_step(&model, &zakai, t, dt, dy),
            UnnormalizedScheme::Heun => {
                unnormalized_filter_step_stratonovich(&model, &zakai, t, dt, dy)
            }
        };
        record.timings.unnormalized_ns += started.elapsed().as_nanos();
        match stepped {
            Ok(next) => zakai = next,
            Err(e) => {
                record.failure = Some(format!("unnormalized filter at step {k}: {e}"));
                break;
            }
        }

        let started = Instant::now();
        let stepped = match sc.projection {
            ProjectionKind::General => {
                projection_filter_step_general(&sc.sub, &model, &theta, dt, dy)
            }
            ProjectionKind::Reduced => {
                projection_filter_step_reduced(&sc.sub, &model, &theta, dt, dy)
            }
            ProjectionKind::Commuting => projection_filter_step_commuting(&sc.sub, &theta, dt, dy),
            ProjectionKind::Auto => unreachable!("resolved when the scenario was built"),
        };
        record.timings.projection_ns += started.elapsed().as_nanos();
        match stepped {
            Ok(next) => theta = next,
            Err(e) => {
                record.failure = Some(format!("projection filter at step {k}: {e}"));
                break;
            }
        }
        if !theta.is_finite() {
            record.failure = Some(format!("projection coordinates diverged at step {k}"));
            break;
        }
        if theta.exceeds_guard(cfg.filters.theta_guard) {
            record.theta_guard_tripped = true;
        }

        record.timings.steps += 1;
        if (k + 1) % cfg.checkpoint_stride == 0 {
            let t_next = sc.grid.coarse_time(k + 1);
            match checkpoint_row(sc, &model, t_next, &truth, &zakai, &theta) {
                Ok(row) => record.rows.push(row),
                Err(e) => {
                    record.failure = Some(format!("checkpoint at t = {t_next}: {e}"));
                    break;
                }
            }
        }
    }
    record
}

fn checkpoint_row(
    sc: &Scenario,
    model: &SystemModel,
    t: f64,
    truth: &FilterState,
    zakai: &UnnormalizedState,
    theta: &ThetaState,
) -> Result<CheckpointRow, String> {
    let bar = sc
        .sub
        .manifold_state(theta.theta())
        .map_err(|e| e.to_string())?;
    let tilde = normalize(&bar).map_err(|e| e.to_string())?;
    let report =
        residual_report(&sc.sub, model, t, theta.theta()).map_err(|e| e.to_string())?;
    let tr_pr = bar.rho_bar().trace_product(&sc.projector_r).re;
    Ok(CheckpointRow {
        t,
        theta: theta.theta().to_vec(),
        rho_diag: diag_re(truth.rho()),
        rhotilde_diag: diag_re(tilde.rho()),
        frob_err: (truth.rho() - tilde.rho()).frobenius_norm(),
        pred_res: report.prediction_norm,
        corr1: report.correction1_norm,
        corr2: report.correction2_norm,
        tr_pr,
        logtrace: zakai.log_trace(),
    })
}

fn diag_re(x: &Operator) -> Vec<f64> {
    (0..x.dim()).map(|i| x.entry(i, i).re).collect()
}

/// Bitwise equality of checkpoint sequences (distinguishes ±0 and NaN
/// payloads, unlike float ==): the determinism contract for fixed seeds.
pub fn rows_identical(a: &[CheckpointRow], b: &[CheckpointRow]) -> bool {
    fn eq(x: f64, y: f64) -> bool {
        x.to_bits() == y.to_bits()
    }
    fn veq(x: &[f64], y: &[f64]) -> bool {
        x.len() == y.len() && x.iter().zip(y).all(|(&u, &v)| eq(u, v))
    }
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            eq(x.t, y.t)
                && veq(&x.theta, &y.theta)
                && veq(&x.rho_diag, &y.rho_diag)
                && veq(&x.rhotilde_diag, &y.rhotilde_diag)
                && eq(x.frob_err, y.frob_err)
                && eq(x.pred_res, y.pred_res)
                && eq(x.corr1, y.corr1)
                && eq(x.corr2, y.corr2)
                && eq(x.tr_pr, y.tr_pr)
                && eq(x.logtrace, y.logtrace)
        })
}

/// Runs the full ensemble. Trajectories are independent (seeded by index),
/// so the records are identical for any worker count.
pub fn run_ensemble(cfg: &RunConfig) -> Result<EnsembleRun, ConfigError> {
    let scenario = Scenario::from_config(cfg)?;
    let records: Vec<TrajectoryRecord> = (0..cfg.n_trajectories)
        .into_par_iter()
        .map(|index| run_in_scenario(cfg, &scenario, index))
        .collect();
    let summary = summarize(&records);
    Ok(EnsembleRun {
        records,
        summary,
        projection_scheme: scenario.projection,
    })
}

fn summarize(records: &[TrajectoryRecord]) -> EnsembleSummary {
    let completed: Vec<&TrajectoryRecord> = records.iter().filter(|r| r.completed()).collect();
    let mut timings = FilterTimings::default();
    for r in records {
        timings.merge(&r.timings);
    }
    let n_total = records.len();
    let n_failed = n_total - completed.len();
    let n_guard_tripped = records.iter().filter(|r| r.theta_guard_tripped).count();

    let Some(first) = completed.first() else {
        return EnsembleSummary {
            n_total,
            n_failed,
            n_guard_tripped,
            checkpoint_times: Vec::new(),
            metrics: None,
            timings,
        };
    };
    let checkpoint_times: Vec<f64> = first.rows.iter().map(|row| row.t).collect();
    let n_check = checkpoint_times.len();
    let m = first.rows.first().map_or(0, |row| row.theta.len());

    let mut scalar_acc = vec![StatsAccumulator::new(n_check); 5];
    let mut exp_acc = vec![StatsAccumulator::new(n_check); m];
    for record in &completed {
        let pick = |f: fn(&CheckpointRow) -> f64| -> Vec<f64> {
            record.rows.iter().map(f).collect()
        };
        scalar_acc[0].push(&pick(|r| r.frob_err)).expect("row length fixed");
        scalar_acc[1].push(&pick(|r| r.pred_res)).expect("row length fixed");
        scalar_acc[2].push(&pick(|r| r.corr1)).expect("row length fixed");
        scalar_acc[3].push(&pick(|r| r.corr2)).expect("row length fixed");
        scalar_acc[4].push(&pick(|r| r.tr_pr)).expect("row length fixed");
        for (i, acc) in exp_acc.iter_mut().enumerate() {
            let row: Vec<f64> = record.rows.iter().map(|r| r.theta[i].exp()).collect();
            acc.push(&row).expect("row length fixed");
        }
    }
    let finish = |acc: StatsAccumulator| acc.finish().expect("at least one completed record");
    let mut scalars = scalar_acc.into_iter().map(finish);
    let metrics = SummaryMetrics {
        frob_err: scalars.next().unwrap(),
        pred_res: scalars.next().unwrap(),
        corr1: scalars.next().unwrap(),
        corr2: scalars.next().unwrap(),
        tr_pr: scalars.next().unwrap(),
        exp_theta: exp_acc.into_iter().map(finish).collect(),
    };
    EnsembleSummary {
        n_total,
        n_failed,
        n_guard_tripped,
        checkpoint_times,
        metrics: Some(metrics),
        timings,
    }
}

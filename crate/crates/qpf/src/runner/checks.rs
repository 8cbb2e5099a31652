//! Fast self-diagnostics for a configuration: determinism, state sanity,
//! residual elimination, and config round-tripping. Each check reports
//! pass/fail with a human-readable detail line.

use super::{
    load_config, rows_identical, run_trajectory, ConfigError, ProjectionKind, RunConfig, Scenario,
};

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &'static str, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name,
            passed,
            detail: detail.into(),
        }
    }
}

/// Runs the whole battery; a configuration error (as opposed to a failed
/// check) is returned as `Err`.
pub fn run_checks(cfg: &RunConfig) -> Result<Vec<CheckResult>, ConfigError> {
    let scenario = Scenario::from_config(cfg)?;
    let first = run_trajectory(cfg, 0)?;
    let mut results = Vec::new();

    let second = run_trajectory(cfg, 0)?;
    let deterministic = rows_identical(&first.rows, &second.rows)
        && first.failure == second.failure
        && first.control_scale.to_bits() == second.control_scale.to_bits();
    results.push(CheckResult::new(
        "determinism",
        deterministic,
        if deterministic {
            format!("two runs of trajectory 0 agree bitwise over {} rows", first.rows.len())
        } else {
            "reruns of trajectory 0 disagree".to_string()
        },
    ));

    let trace_ok = first.max_trace_deviation <= 1e-10;
    let eig_ok = first.min_precorrection_eigenvalue >= -1e-6;
    let complete = first.completed();
    results.push(CheckResult::new(
        "state_sanity",
        trace_ok && eig_ok && complete,
        format!(
            "max |Tr ρ − 1| = {:.3e}, min pre-correction eigenvalue = {:.3e}{}",
            first.max_trace_deviation,
            first.min_precorrection_eigenvalue,
            first
                .failure
                .as_deref()
                .map(|f| format!(", failed: {f}"))
                .unwrap_or_default()
        ),
    ));

    if scenario.projection() == ProjectionKind::General {
        results.push(CheckResult::new(
            "residual_elimination",
            true,
            "not applicable: general projection scheme keeps correction residuals",
        ));
    } else {
        let worst = first
            .rows
            .iter()
            .map(|row| row.corr1.max(row.corr2))
            .fold(0.0f64, f64::max);
        results.push(CheckResult::new(
            "residual_elimination",
            worst <= 1e-8 && !first.rows.is_empty(),
            format!("max correction residual = {worst:.3e} over {} rows", first.rows.len()),
        ));
    }

    let echoed = toml::to_string(cfg).map(|text| load_config(&text));
    let roundtrip = match &echoed {
        Ok(Ok(parsed)) => parsed == cfg,
        _ => false,
    };
    results.push(CheckResult::new(
        "config_roundtrip",
        roundtrip,
        if roundtrip {
            "serialized configuration reparses to an identical value".to_string()
        } else {
            "configuration does not survive a serialize/parse cycle".to_string()
        },
    ));

    Ok(results)
}

//! Step-cost comparison between the exact filter (dense 2^N×2^N state) and
//! the projection filter (one coordinate per distinct coupling eigenvalue).

use super::ConfigError;
use crate::filter::{
    default_submanifold, projection_filter_step_commuting, quantum_filter_step, FilterState,
    ThetaState,
};
use crate::linalg::Operator;
use crate::model::{build_spin_model, ControlLaw, SpinAxis};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use std::hint::black_box;
use std::time::Instant;

#[derive(Clone, Copy, Debug)]
pub struct BenchRow {
    pub n_atoms: usize,
    /// Hilbert-space dimension 2^N.
    pub dim: usize,
    /// Projection coordinate count (distinct nonzero coupling eigenvalues).
    pub coordinates: usize,
    pub exact_ns_per_step: f64,
    pub projection_ns_per_step: f64,
}

impl BenchRow {
    pub fn ratio(&self) -> f64 {
        self.exact_ns_per_step / self.projection_ns_per_step
    }
}

/// Times `steps` filter steps for each atom count, repeating `repeats` times
/// and keeping the fastest pass of each filter.
pub fn bench_filters(
    max_atoms: usize,
    steps: usize,
    repeats: usize,
) -> Result<Vec<BenchRow>, ConfigError> {
    if max_atoms == 0 || steps == 0 || repeats == 0 {
        return Err(ConfigError::Invalid {
            key: "bench".to_string(),
            detail: "max_atoms, steps, and repeats must all be at least 1".to_string(),
        });
    }
    let dt = 2f64.powi(-11);
    let mut rng = ChaCha12Rng::seed_from_u64(7);
    let noise = Normal::new(0.0, dt.sqrt()).expect("valid std dev");
    let increments: Vec<f64> = (0..steps).map(|_| noise.sample(&mut rng)).collect();

    let mut rows = Vec::with_capacity(max_atoms);
    for n_atoms in 1..=max_atoms {
        let model = build_spin_model(n_atoms, 1.0, ControlLaw::Zero, SpinAxis::Z)?;
        let dim = 1usize << n_atoms;
        let rho0 = Operator::identity(dim).scale(1.0 / dim as f64);
        let sub = default_submanifold(&model, &rho0)?;

        let mut exact_best = f64::INFINITY;
        let mut projection_best = f64::INFINITY;
        for _ in 0..repeats {
            let mut state = FilterState::new(rho0.clone()).expect("uniform state is valid");
            let started = Instant::now();
            for (k, &dw) in increments.iter().enumerate() {
                let t = k as f64 * dt;
                let dy = model.expected_signal(state.rho()) * dt + dw;
                state = quantum_filter_step(&model, &state, t, dt, dy)
                    .expect("exact step on a valid state");
            }
            exact_best = exact_best.min(started.elapsed().as_nanos() as f64);
            black_box(&state);

            let mut theta = ThetaState::origin(sub.m());
            let started = Instant::now();
            for &dw in &increments {
                // The coupling is the only generator here, so the expected
                // signal under the anchor is 0 and dy = dw serves both forms.
                theta = projection_filter_step_commuting(&sub, &theta, dt, dw)
                    .expect("commuting step");
            }
            projection_best = projection_best.min(started.elapsed().as_nanos() as f64);
            black_box(&theta);
        }
        rows.push(BenchRow {
            n_atoms,
            dim,
            coordinates: sub.m(),
            exact_ns_per_step: exact_best / steps as f64,
            projection_ns_per_step: projection_best / steps as f64,
        });
    }
    Ok(rows)
}

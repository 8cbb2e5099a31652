//! Time grids, seeded Brownian paths, and generic one-step integrators.
//!
//! The Brownian path is discretized at a fine resolution `δt = T/N0` and the
//! equations are stepped at a coarser `Δt = R·δt` whose increments are exact
//! sums of fine ones. Holding the seed (hence the fine path) fixed while
//! varying `R` gives step-size refinement studies on a single realization.

use crate::linalg::Operator;
use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SdeError {
    #[error("time horizon must be positive and finite, got {0}")]
    Horizon(f64),
    #[error("fine step count {fine} must be a positive multiple of aggregation {aggregation}")]
    Grid { fine: usize, aggregation: usize },
}

/// Two-level time discretization of `[0, T]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    fine_count: usize,
    aggregation: usize,
}

impl TimeGrid {
    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn fine_count(&self) -> usize {
        self.fine_count
    }

    pub fn aggregation(&self) -> usize {
        self.aggregation
    }

    /// `δt = T/N0`.
    pub fn fine_dt(&self) -> f64 {
        self.horizon / self.fine_count as f64
    }

    /// `Δt = R·δt`.
    pub fn coarse_dt(&self) -> f64 {
        self.aggregation as f64 * self.fine_dt()
    }

    pub fn coarse_count(&self) -> usize {
        self.fine_count / self.aggregation
    }

    /// Time at the start of coarse step `k` (so `coarse_time(coarse_count())`
    /// is the horizon up to rounding).
    pub fn coarse_time(&self, k: usize) -> f64 {
        k as f64 * self.coarse_dt()
    }
}

/// Builds a [`TimeGrid`], validating positivity and divisibility.
pub fn make_grid(horizon: f64, fine_count: usize, aggregation: usize) -> Result<TimeGrid, SdeError> {
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(SdeError::Horizon(horizon));
    }
    if fine_count == 0 || aggregation == 0 || fine_count % aggregation != 0 {
        return Err(SdeError::Grid {
            fine: fine_count,
            aggregation,
        });
    }
    let grid = TimeGrid {
        horizon,
        fine_count,
        aggregation,
    };
    debug_assert!((grid.coarse_dt() * grid.coarse_count() as f64 - horizon).abs() <= 1e-12);
    Ok(grid)
}

/// One Wiener realization on a [`TimeGrid`]: fine increments `~N(0, δt)` and
/// their exact `R`-blocked sums.
#[derive(Clone, Debug)]
pub struct NoisePath {
    seed: u64,
    fine: Vec<f64>,
    coarse: Vec<f64>,
}

impl NoisePath {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn fine_increments(&self) -> &[f64] {
        &self.fine
    }

    pub fn coarse_increments(&self) -> &[f64] {
        &self.coarse
    }

    /// Total displacement `W(T)`; identical whether summed fine or coarse.
    pub fn terminal(&self) -> f64 {
        self.coarse.iter().sum()
    }
}

/// Draws a Wiener path from a fresh generator seeded with `seed`.
pub fn wiener_path(seed: u64, grid: &TimeGrid) -> NoisePath {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    wiener_path_from_rng(seed, &mut rng, grid)
}

/// Draws a Wiener path from an already-positioned generator; `seed` is kept
/// as a label only. Lets callers interleave other draws (e.g. a random
/// control amplitude) on the same per-trajectory stream.
pub fn wiener_path_from_rng(seed: u64, rng: &mut impl Rng, grid: &TimeGrid) -> NoisePath {
    let sqrt_dt = grid.fine_dt().sqrt();
    let fine: Vec<f64> = (0..grid.fine_count())
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z * sqrt_dt
        })
        .collect();
    let coarse = fine
        .chunks(grid.aggregation())
        .map(|chunk| chunk.iter().sum())
        .collect();
    NoisePath {
        seed,
        fine,
        coarse,
    }
}

/// State types the one-step integrators can advance.
pub trait SdeState: Clone {
    /// `self += coeff·delta`.
    fn add_scaled(&mut self, coeff: f64, delta: &Self);
}

impl SdeState for f64 {
    fn add_scaled(&mut self, coeff: f64, delta: &Self) {
        *self += coeff * delta;
    }
}

impl SdeState for Array1<f64> {
    fn add_scaled(&mut self, coeff: f64, delta: &Self) {
        self.scaled_add(coeff, delta);
    }
}

impl SdeState for Operator {
    fn add_scaled(&mut self, coeff: f64, delta: &Self) {
        self.scaled_add(coeff, delta);
    }
}

/// Euler–Maruyama step for `dx = f(x)dt + g(x)dW` (Itô):
/// `x + f(x)·dt + g(x)·dW`.
pub fn ito_euler_step<S: SdeState, E>(
    mut drift: impl FnMut(&S) -> Result<S, E>,
    mut diffusion: impl FnMut(&S) -> Result<S, E>,
    x: &S,
    dt: f64,
    dw: f64,
) -> Result<S, E> {
    let f = drift(x)?;
    let g = diffusion(x)?;
    let mut out = x.clone();
    out.add_scaled(dt, &f);
    out.add_scaled(dw, &g);
    Ok(out)
}

/// Heun predictor–corrector step for `dx = f(x)dt + g(x)∘dW` (Stratonovich):
/// predict with an Euler step, then average both fields between the current
/// and predicted state. Coincides bit-for-bit with [`ito_euler_step`] when
/// `f` and `g` are state-independent.
pub fn stratonovich_heun_step<S: SdeState, E>(
    mut drift: impl FnMut(&S) -> Result<S, E>,
    mut diffusion: impl FnMut(&S) -> Result<S, E>,
    x: &S,
    dt: f64,
    dw: f64,
) -> Result<S, E> {
    let f0 = drift(x)?;
    let g0 = diffusion(x)?;
    let mut predicted = x.clone();
    predicted.add_scaled(dt, &f0);
    predicted.add_scaled(dw, &g0);
    let mut f_avg = f0;
    f_avg.add_scaled(1.0, &drift(&predicted)?);
    let mut g_avg = g0;
    g_avg.add_scaled(1.0, &diffusion(&predicted)?);
    let mut out = x.clone();
    out.add_scaled(0.5 * dt, &f_avg);
    out.add_scaled(0.5 * dw, &g_avg);
    Ok(out)
}

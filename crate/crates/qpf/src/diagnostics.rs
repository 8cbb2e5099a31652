//! Residual diagnostics for the projection filter (how much of the exact
//! dynamics leaves the submanifold's tangent space), pointer-block analysis
//! of states, spectral/Lyapunov stability certificates for the reduced
//! dynamics on the off-pointer block, and ensemble statistics for
//! expectation-level bounds.

use crate::filter::{FilterError, FilterState, Submanifold, UnnormalizedState};
use crate::linalg::{
    commutator, complex_eigenvalues, herm_eig, lu_solve, singular_values, tol,
    unvec_column_stack, vec_column_stack, vectorize_superoperator, C64, LinalgError, Operator,
};
use crate::model::{ModelError, SystemModel};
use ndarray::{Array1, Array2};
use thiserror::Error;

/// A returned certificate must satisfy its defining inequality with at most
/// this max-eigenvalue violation.
pub const CERTIFICATE_DEFECT_TOL: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("pointer index {index} out of range for dimension {dim}")]
    PointerIndex { index: usize, dim: usize },
    #[error("ensemble is empty")]
    EmptyEnsemble,
    #[error("ensemble rows have mixed lengths: expected {expected}, got {got}")]
    RaggedEnsemble { expected: usize, got: usize },
    #[error("invalid reduced generator: {0}")]
    InvalidGenerator(String),
    #[error("no decay certificate exists: spectral abscissa {delta0:.3e} ≤ ε {epsilon:.3e}")]
    Infeasible { delta0: f64, epsilon: f64 },
    #[error("certificate inequality violated by {defect:.3e}")]
    CertificateDefect { defect: f64 },
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Residual norms of the projection filter at one instant: how far the
/// Hamiltonian rotation (prediction) and the two measurement terms
/// (corrections) stick out of the tangent space.
#[derive(Clone, Debug)]
pub struct ResidualReport {
    pub t: f64,
    pub prediction_norm: f64,
    pub correction1_norm: f64,
    pub correction2_norm: f64,
}

/// The prediction residual `𝔓 = −i[H,ρ̄_θ] − Π_θ(−i[H,ρ̄_θ])`: the component
/// of the Hamiltonian rotation that the submanifold cannot represent.
pub fn prediction_residual(
    sub: &Submanifold,
    model: &SystemModel,
    t: f64,
    theta: &Array1<f64>,
) -> Result<Operator, DiagnosticsError> {
    if model.control().law().is_zero() {
        // H ≡ 0 leaves nothing to project.
        sub.manifold_state(theta)?;
        return Ok(Operator::zeros(sub.dim()));
    }
    let rho = sub.manifold_state(theta)?;
    let h = model.hamiltonian_at(t);
    let v = commutator(&h, rho.rho_bar())?
        .scale_c(C64::new(0.0, -1.0))
        .hermitize();
    let projected = sub.projection_op(theta, &v)?;
    Ok((&v - &projected).hermitize())
}

/// The two correction residuals: the off-tangent parts of `−𝓢_L(ρ̄_θ)`
/// (Stratonovich drift) and of `Lρ̄_θ + ρ̄_θL†` (measurement update). Both
/// vanish identically when the generators are the spectral projectors of a
/// Hermitian coupling.
pub fn correction_residuals(
    sub: &Submanifold,
    model: &SystemModel,
    theta: &Array1<f64>,
) -> Result<(Operator, Operator), DiagnosticsError> {
    let rho = sub.manifold_state(theta)?;
    let v1 = -&model.stratonovich_drift(rho.rho_bar())?;
    let c1 = (&v1 - &sub.projection_op(theta, &v1)?).hermitize();
    let v2 = model.measurement_update(rho.rho_bar())?;
    let c2 = (&v2 - &sub.projection_op(theta, &v2)?).hermitize();
    Ok((c1, c2))
}

/// All three residual norms at one instant.
pub fn residual_report(
    sub: &Submanifold,
    model: &SystemModel,
    t: f64,
    theta: &Array1<f64>,
) -> Result<ResidualReport, DiagnosticsError> {
    let p = prediction_residual(sub, model, t, theta)?;
    let (c1, c2) = correction_residuals(sub, model, theta)?;
    Ok(ResidualReport {
        t,
        prediction_norm: p.frobenius_norm(),
        correction1_norm: c1.frobenius_norm(),
        correction2_norm: c2.frobenius_norm(),
    })
}

/// Block decomposition of a matrix with respect to the splitting
/// `span{ψ₀} ⊕ span{ψ₀}^⊥`, where ψ₀ is a pointer basis state. The R-block
/// indices run over the remaining basis states in ascending order.
#[derive(Clone, Debug)]
pub struct PointerDecomposition {
    pointer_index: usize,
    s_block: C64,
    r_block: Operator,
    /// Row mapping the complement into the pointer line.
    p_block: Array1<C64>,
    /// Column mapping the pointer line into the complement.
    q_block: Array1<C64>,
    projector_s: Operator,
    projector_r: Operator,
}

impl PointerDecomposition {
    pub fn pointer_index(&self) -> usize {
        self.pointer_index
    }

    pub fn s_block(&self) -> C64 {
        self.s_block
    }

    pub fn r_block(&self) -> &Operator {
        &self.r_block
    }

    pub fn p_block(&self) -> &Array1<C64> {
        &self.p_block
    }

    pub fn q_block(&self) -> &Array1<C64> {
        &self.q_block
    }

    /// Rank-one projector onto the pointer state.
    pub fn projector_s(&self) -> &Operator {
        &self.projector_s
    }

    /// Projector onto the complement.
    pub fn projector_r(&self) -> &Operator {
        &self.projector_r
    }

    /// Rebuilds the original matrix from the four blocks.
    pub fn reassemble(&self) -> Operator {
        let n = self.r_block.dim() + 1;
        let p = self.pointer_index;
        Operator::from_fn(n, |r, c| {
            if r == p && c == p {
                self.s_block
            } else if r == p {
                let k = if c < p { c } else { c - 1 };
                self.p_block[k]
            } else if c == p {
                let j = if r < p { r } else { r - 1 };
                self.q_block[j]
            } else {
                let j = if r < p { r } else { r - 1 };
                let k = if c < p { c } else { c - 1 };
                self.r_block.entry(j, k)
            }
        })
    }
}

/// Splits `x` into pointer-line and complement blocks.
pub fn pointer_decompose(
    x: &Operator,
    pointer_index: usize,
) -> Result<PointerDecomposition, DiagnosticsError> {
    let n = x.dim();
    if pointer_index >= n {
        return Err(DiagnosticsError::PointerIndex {
            index: pointer_index,
            dim: n,
        });
    }
    let rest: Vec<usize> = (0..n).filter(|&i| i != pointer_index).collect();
    let nr = n - 1;
    let r_block = Operator::from_fn(nr, |j, k| x.entry(rest[j], rest[k]));
    let p_block = Array1::from_iter(rest.iter().map(|&c| x.entry(pointer_index, c)));
    let q_block = Array1::from_iter(rest.iter().map(|&r| x.entry(r, pointer_index)));
    let projector_s = Operator::basis_projector(n, pointer_index);
    let projector_r = &Operator::identity(n) - &projector_s;
    Ok(PointerDecomposition {
        pointer_index,
        s_block: x.entry(pointer_index, pointer_index),
        r_block,
        p_block,
        q_block,
        projector_s,
        projector_r,
    })
}

/// Lindblad generator restricted to the complement of a pointer state,
/// `X_R ↦ i[H_R,X_R] + L_R†X_RL_R − ½(L_R†L_RX_R + X_RL_R†L_R)`, stored as
/// its dense matrix on column-stacked coordinates.
#[derive(Clone, Debug)]
pub struct ReducedGenerator {
    matrix: Array2<C64>,
    dim: usize,
}

impl ReducedGenerator {
    /// Builds the generator from the complement blocks of the model's
    /// Hamiltonian and coupling. The Hamiltonian is evaluated at t = 0: a
    /// time-varying control would make every spectral quantity below
    /// time-dependent, which this diagnostic does not model.
    pub fn from_model(
        model: &SystemModel,
        pointer_index: usize,
    ) -> Result<Self, DiagnosticsError> {
        let h = model.hamiltonian_at(0.0);
        let h_r = pointer_decompose(&h, pointer_index)?.r_block;
        let l_r = pointer_decompose(model.coupling(), pointer_index)?.r_block;
        Self::from_blocks(&h_r, &l_r)
    }

    /// Generator from explicit complement-block operators.
    pub fn from_blocks(h_r: &Operator, l_r: &Operator) -> Result<Self, DiagnosticsError> {
        if h_r.dim() != l_r.dim() {
            return Err(LinalgError::DimMismatch {
                left: h_r.dim(),
                right: l_r.dim(),
            }
            .into());
        }
        let dev = h_r.hermiticity_deviation();
        if dev > tol::HERMITICITY {
            return Err(LinalgError::NotHermitian { deviation: dev }.into());
        }
        let dim = h_r.dim();
        let l_adj = l_r.adjoint();
        let gram = (&l_adj * l_r).hermitize();
        let matrix = vectorize_superoperator(
            |x| {
                let unitary = (&(h_r * x) - &(x * h_r)).scale_c(C64::new(0.0, 1.0));
                let jump = &(&l_adj * x) * l_r;
                let damp = (&(&gram * x) + &(x * &gram)).scale(0.5);
                &(&unitary + &jump) - &damp
            },
            dim,
        );
        Ok(Self { matrix, dim })
    }

    /// Wraps a user-supplied dense superoperator matrix (column-stacked
    /// convention). The map must preserve Hermiticity, which is probed on a
    /// Hermitian matrix-unit basis.
    pub fn from_superoperator(matrix: Array2<C64>) -> Result<Self, DiagnosticsError> {
        let rows = matrix.nrows();
        if rows != matrix.ncols() {
            return Err(DiagnosticsError::InvalidGenerator(format!(
                "matrix is {}×{}",
                rows,
                matrix.ncols()
            )));
        }
        let dim = (rows as f64).sqrt().round() as usize;
        if dim * dim != rows {
            return Err(DiagnosticsError::InvalidGenerator(format!(
                "side {rows} is not a perfect square"
            )));
        }
        let gen = Self { matrix, dim };
        let scale = gen.matrix.iter().map(|z| z.norm()).fold(1.0f64, f64::max);
        let mut dev: f64 = 0.0;
        for j in 0..dim {
            for k in j..dim {
                let sym = Operator::from_fn(dim, |r, c| {
                    if (r, c) == (j, k) || (r, c) == (k, j) {
                        C64::new(1.0, 0.0)
                    } else {
                        C64::new(0.0, 0.0)
                    }
                });
                dev = dev.max(gen.apply(&sym).hermiticity_deviation());
                if j != k {
                    let skew = Operator::from_fn(dim, |r, c| {
                        if (r, c) == (j, k) {
                            C64::new(0.0, 1.0)
                        } else if (r, c) == (k, j) {
                            C64::new(0.0, -1.0)
                        } else {
                            C64::new(0.0, 0.0)
                        }
                    });
                    dev = dev.max(gen.apply(&skew).hermiticity_deviation());
                }
            }
        }
        if dev > tol::HERMITICITY * scale {
            return Err(DiagnosticsError::InvalidGenerator(format!(
                "map does not preserve Hermiticity (deviation {dev:.3e})"
            )));
        }
        Ok(gen)
    }

    /// Side dimension of the operators the generator acts on.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn matrix(&self) -> &Array2<C64> {
        &self.matrix
    }

    /// Applies the generator through its stored matrix.
    pub fn apply(&self, x: &Operator) -> Operator {
        assert_eq!(x.dim(), self.dim, "reduced generator dimension mismatch");
        let v = self.matrix.dot(&vec_column_stack(x));
        unvec_column_stack(&v, self.dim)
    }

    /// `Δ₀ = min{−Re λ}` over the generator's spectrum. Nonpositive whenever
    /// the generator annihilates some state (e.g. any unital map).
    pub fn spectral_abscissa(&self) -> Result<f64, DiagnosticsError> {
        let eigs = complex_eigenvalues(&self.matrix)?;
        eigs.iter()
            .map(|z| -z.re)
            .min_by(|a, b| a.partial_cmp(b).expect("finite eigenvalues"))
            .ok_or_else(|| DiagnosticsError::InvalidGenerator("empty spectrum".into()))
    }

    /// Constructs a decay certificate: K with λ_min(K) = 1 satisfying
    /// `𝓛(K) ≤ −(Δ₀−ε)K` up to [`CERTIFICATE_DEFECT_TOL`]. ε defaults to
    /// Δ₀/2 and must lie in (0, Δ₀); Δ₀ ≤ 0 is always infeasible.
    pub fn certificate(
        &self,
        pointer_index: usize,
        epsilon: Option<f64>,
    ) -> Result<StabilityCertificate, DiagnosticsError> {
        let delta0 = self.spectral_abscissa()?;
        let epsilon = epsilon.unwrap_or(delta0 / 2.0);
        if !(epsilon > 0.0) || epsilon >= delta0 {
            return Err(DiagnosticsError::Infeasible { delta0, epsilon });
        }
        let rate = delta0 - epsilon;
        // Shifted resolvent applied to −I: (𝓛 + rate·id)(K) = −I. Every
        // eigenvalue of the shifted matrix has Re ≤ −ε < 0, so it is
        // invertible and K inherits positivity from the semigroup integral
        // representation K = ∫ e^{t𝓛}(I)e^{t·rate}dt.
        let side = self.dim * self.dim;
        let mut shifted = self.matrix.clone();
        for i in 0..side {
            shifted[(i, i)] += C64::new(rate, 0.0);
        }
        let rhs = vec_column_stack(&Operator::identity(self.dim).scale(-1.0));
        let k_vec = lu_solve(&shifted, &rhs)?;
        let k_raw = unvec_column_stack(&k_vec, self.dim).hermitize();
        let min_eig = k_raw.min_eigenvalue()?;
        if min_eig <= 0.0 {
            return Err(DiagnosticsError::InvalidGenerator(format!(
                "resolvent produced a non-positive candidate (λ_min = {min_eig:.3e})"
            )));
        }
        let k_r = k_raw.scale(1.0 / min_eig);
        // Recheck the defining inequality on the returned operator.
        let mut residual = self.apply(&k_r).hermitize();
        residual.scaled_add(rate, &k_r);
        let eigs = herm_eig(&residual)?;
        let defect = *eigs.eigenvalues.last().expect("nonempty spectrum");
        if defect > CERTIFICATE_DEFECT_TOL {
            return Err(DiagnosticsError::CertificateDefect { defect });
        }
        Ok(StabilityCertificate {
            delta0,
            epsilon,
            k_r,
            pointer_index,
        })
    }
}

/// A verified exponential-decay certificate for the off-pointer block:
/// `𝓛(K_R) ≤ −(Δ₀−ε)K_R` with `K_R ≥ I`.
#[derive(Clone, Debug)]
pub struct StabilityCertificate {
    delta0: f64,
    epsilon: f64,
    k_r: Operator,
    pointer_index: usize,
}

impl StabilityCertificate {
    pub fn delta0(&self) -> f64 {
        self.delta0
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn k_r(&self) -> &Operator {
        &self.k_r
    }

    pub fn pointer_index(&self) -> usize {
        self.pointer_index
    }

    /// Certified decay rate Δ₀ − ε.
    pub fn rate(&self) -> f64 {
        self.delta0 - self.epsilon
    }

    /// Coefficients (c₁, c₂) of the envelope `c₁e^{−rate·t} + c₂` bounding
    /// the off-pointer mass, given the initial state and the constant
    /// forcing operator X₀ (largest singular value enters the offset).
    pub fn bound_coefficients(
        &self,
        rho0: &Operator,
        x0: &Operator,
    ) -> Result<(f64, f64), DiagnosticsError> {
        let n = rho0.dim();
        if self.k_r.dim() + 1 != n || x0.dim() != n {
            return Err(LinalgError::DimMismatch {
                left: self.k_r.dim() + 1,
                right: n,
            }
            .into());
        }
        let dec = pointer_decompose(rho0, self.pointer_index)?;
        let off_mass = rho0.trace_product(dec.projector_r()).re;
        let s1 = singular_values(x0).first().copied().unwrap_or(0.0);
        let trace_k = self.k_r.trace_re();
        let c2 = trace_k * s1 / self.rate();
        let c1 = trace_k * off_mass - c2;
        Ok((c1, c2))
    }
}

/// Spectral abscissa of the model's reduced generator on the complement of
/// the given pointer state (Hamiltonian frozen at t = 0).
pub fn spectral_abscissa(
    model: &SystemModel,
    pointer_index: usize,
) -> Result<f64, DiagnosticsError> {
    ReducedGenerator::from_model(model, pointer_index)?.spectral_abscissa()
}

/// Decay certificate for the model's reduced generator; see
/// [`ReducedGenerator::certificate`].
pub fn lyapunov_certificate(
    model: &SystemModel,
    pointer_index: usize,
    epsilon: Option<f64>,
) -> Result<StabilityCertificate, DiagnosticsError> {
    ReducedGenerator::from_model(model, pointer_index)?.certificate(pointer_index, epsilon)
}

/// Envelope value `c₁e^{−rate·t} + c₂` bounding the off-pointer mass
/// `Tr(P̄_Rρ̄_θ)` of the projection-filter state at time t.
pub fn off_pointer_mass_bound(
    t: f64,
    rho0: &Operator,
    cert: &StabilityCertificate,
    x0: &Operator,
) -> Result<f64, DiagnosticsError> {
    let (c1, c2) = cert.bound_coefficients(rho0, x0)?;
    Ok(c1 * (-cert.rate() * t).exp() + c2)
}

/// Convergence metrics of one checkpoint: distance of the normalized state
/// from its pointer compression, `‖ρ − P̄_SρP̄_S‖_F`, and off-pointer mass of
/// the unnormalized state, `Tr(P̄_Rρ̄)`.
pub fn pointer_convergence_metrics(
    rho: &FilterState,
    rho_bar: &UnnormalizedState,
    pointer_index: usize,
) -> Result<(f64, f64), DiagnosticsError> {
    let n = rho.rho().dim();
    if pointer_index >= n {
        return Err(DiagnosticsError::PointerIndex {
            index: pointer_index,
            dim: n,
        });
    }
    // P̄_SρP̄_S keeps only the (ψ₀,ψ₀) entry, so the distance is the norm of
    // everything else.
    let total = rho.rho().frobenius_norm();
    let kept = rho.rho().entry(pointer_index, pointer_index).norm();
    let distance = (total * total - kept * kept).max(0.0).sqrt();
    let projector_r = &Operator::identity(n) - &Operator::basis_projector(n, pointer_index);
    let off_mass = rho_bar.rho_bar().trace_product(&projector_r).re;
    Ok((distance, off_mass))
}

/// `√Tr((ρ − ρ̃)²)` between two normalized states.
pub fn frobenius_error(a: &FilterState, b: &FilterState) -> f64 {
    (a.rho() - b.rho()).frobenius_norm()
}

/// Streaming per-checkpoint mean/variance accumulator (Welford), mergeable
/// across parallel workers.
#[derive(Clone, Debug)]
pub struct StatsAccumulator {
    count: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl StatsAccumulator {
    pub fn new(len: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; len],
            m2: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// Accumulates one trajectory's checkpoint row.
    pub fn push(&mut self, row: &[f64]) -> Result<(), DiagnosticsError> {
        if row.len() != self.mean.len() {
            return Err(DiagnosticsError::RaggedEnsemble {
                expected: self.mean.len(),
                got: row.len(),
            });
        }
        self.count += 1;
        let n = self.count as f64;
        for (i, &x) in row.iter().enumerate() {
            let delta = x - self.mean[i];
            self.mean[i] += delta / n;
            self.m2[i] += delta * (x - self.mean[i]);
        }
        Ok(())
    }

    /// Merges another accumulator (parallel-variance combination).
    pub fn merge(&mut self, other: &Self) -> Result<(), DiagnosticsError> {
        if other.mean.len() != self.mean.len() {
            return Err(DiagnosticsError::RaggedEnsemble {
                expected: self.mean.len(),
                got: other.mean.len(),
            });
        }
        if other.count == 0 {
            return Ok(());
        }
        if self.count == 0 {
            *self = other.clone();
            return Ok(());
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let total = na + nb;
        for i in 0..self.mean.len() {
            let delta = other.mean[i] - self.mean[i];
            self.mean[i] += delta * nb / total;
            self.m2[i] += other.m2[i] + delta * delta * na * nb / total;
        }
        self.count += other.count;
        Ok(())
    }

    pub fn finish(self) -> Result<CheckpointStats, DiagnosticsError> {
        if self.count == 0 {
            return Err(DiagnosticsError::EmptyEnsemble);
        }
        let n = self.count as f64;
        let stderr = self
            .m2
            .iter()
            .map(|&m2| {
                if self.count < 2 {
                    0.0
                } else {
                    (m2 / (n - 1.0) / n).sqrt()
                }
            })
            .collect();
        Ok(CheckpointStats {
            count: self.count,
            mean: self.mean,
            stderr,
        })
    }
}

/// Per-checkpoint sample mean and standard error over an ensemble.
#[derive(Clone, Debug)]
pub struct CheckpointStats {
    pub count: u64,
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
}

/// Folds trajectory rows (one row of checkpoint values per trajectory) into
/// per-checkpoint statistics.
pub fn ensemble_stats(rows: &[Vec<f64>]) -> Result<CheckpointStats, DiagnosticsError> {
    let first = rows.first().ok_or(DiagnosticsError::EmptyEnsemble)?;
    let mut acc = StatsAccumulator::new(first.len());
    for row in rows {
        acc.push(row)?;
    }
    acc.finish()
}

/// Monte Carlo estimate of the prediction-residual norm against its
/// theoretical ceiling `√Tr(X₀²)`.
#[derive(Clone, Debug)]
pub struct ResidualBoundEstimate {
    pub stats: CheckpointStats,
    /// The constant `√Tr(X₀²)` the per-checkpoint means are compared to.
    pub bound: f64,
}

impl ResidualBoundEstimate {
    /// True when `mean ≤ bound + k·stderr` at every checkpoint.
    pub fn holds_within(&self, k_sigma: f64) -> bool {
        self.stats
            .mean
            .iter()
            .zip(&self.stats.stderr)
            .all(|(m, se)| *m <= self.bound + k_sigma * se)
    }
}

/// Builds the estimate from per-trajectory rows of `√Tr(𝔓(t)²)` values at
/// shared checkpoints. The trajectories must be driven by a pure Wiener
/// observation record (reference-measure convention).
pub fn residual_bound_estimate(
    samples: &[Vec<f64>],
    x0: &Operator,
) -> Result<ResidualBoundEstimate, DiagnosticsError> {
    let stats = ensemble_stats(samples)?;
    Ok(ResidualBoundEstimate {
        stats,
        bound: x0.frobenius_norm(),
    })
}

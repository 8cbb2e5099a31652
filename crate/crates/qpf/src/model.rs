//! The monitored system: a Hamiltonian signal `H(t)`, a coupling operator `L`,
//! the superoperators built from them, and the spin-ensemble constructors used
//! by the simulation scenarios.

use crate::linalg::{commutator, kron, pauli, tol, C64, LinalgError, Operator};
use thiserror::Error;

/// Largest supported atom count for collective-spin constructions (dimension
/// `2^8 = 256` keeps dense linear algebra tractable).
pub const MAX_ATOMS: usize = 8;

/// Relative gap used to cluster and zero-test eigenvalues of the coupling
/// operator when no explicit tolerance is supplied.
pub const RELATIVE_SPECTRAL_GAP: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("atom count must lie in 1..={MAX_ATOMS}, got {0}")]
    AtomCount(usize),
    #[error("coupling strength must be positive and finite, got {0}")]
    CouplingStrength(f64),
    #[error("spectral decomposition inconsistency: {0}")]
    Spectral(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Scalar control waveform `u(t)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ControlLaw {
    /// `u(t) = 0`.
    Zero,
    /// `u(t) = amplitude`.
    Constant { amplitude: f64 },
    /// `u(t) = amplitude · e^{−rate·t}`.
    ExpDecay { amplitude: f64, rate: f64 },
}

impl ControlLaw {
    pub fn value(&self, t: f64) -> f64 {
        match *self {
            ControlLaw::Zero => 0.0,
            ControlLaw::Constant { amplitude } => amplitude,
            ControlLaw::ExpDecay { amplitude, rate } => amplitude * (-rate * t).exp(),
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, ControlLaw::Zero)
    }
}

/// A control-modulated Hamiltonian `H(t) = u(t)·B` with fixed base operator
/// `B` and deterministic scalar law `u`.
#[derive(Clone, Debug)]
pub struct ControlSignal {
    law: ControlLaw,
    base: Operator,
}

impl ControlSignal {
    pub fn new(law: ControlLaw, base: Operator) -> Self {
        Self { law, base }
    }

    /// The identically-zero Hamiltonian.
    pub fn off(dim: usize) -> Self {
        Self {
            law: ControlLaw::Zero,
            base: Operator::zeros(dim),
        }
    }

    pub fn law(&self) -> ControlLaw {
        self.law
    }

    pub fn base(&self) -> &Operator {
        &self.base
    }

    pub fn value(&self, t: f64) -> f64 {
        self.law.value(t)
    }

    /// `H(t) = u(t)·B`.
    pub fn operator_at(&self, t: f64) -> Operator {
        if self.law.is_zero() {
            Operator::zeros(self.base.dim())
        } else {
            self.base.scale(self.law.value(t))
        }
    }
}

/// Axis label for collective spin operators.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpinAxis {
    X,
    Y,
    Z,
}

impl std::str::FromStr for SpinAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "x" => Ok(SpinAxis::X),
            "y" => Ok(SpinAxis::Y),
            "z" => Ok(SpinAxis::Z),
            other => Err(format!("unknown spin axis {other:?} (expected x, y, or z)")),
        }
    }
}

/// An open quantum system under homodyne monitoring: Hamiltonian signal
/// `H(t)` plus a single coupling operator `L`.
///
/// Construction verifies that the Hamiltonian base is Hermitian (so `H(t)` is
/// Hermitian for every `t`) and records whether `L` is Hermitian — several
/// downstream reductions are only available in that case. Products that the
/// superoperators need at every step (`L†`, `L†L`, `L+L†`, …) are cached here.
#[derive(Clone, Debug)]
pub struct SystemModel {
    dim: usize,
    hamiltonian: ControlSignal,
    coupling: Operator,
    coupling_adjoint: Operator,
    /// `L†L`.
    gram: Operator,
    /// `L + L†`.
    lplus: Operator,
    /// `(L+L†)L / 2`.
    strat_left: Operator,
    /// `L†(L+L†) / 2`.
    strat_right: Operator,
    hermitian_coupling: bool,
    commuting: bool,
}

impl SystemModel {
    pub fn new(hamiltonian: ControlSignal, coupling: Operator) -> Result<Self, ModelError> {
        let dim = coupling.dim();
        if hamiltonian.base().dim() != dim {
            return Err(LinalgError::DimMismatch {
                left: hamiltonian.base().dim(),
                right: dim,
            }
            .into());
        }
        let base_dev = hamiltonian.base().hermiticity_deviation();
        if base_dev > tol::HERMITICITY {
            return Err(LinalgError::NotHermitian {
                deviation: base_dev,
            }
            .into());
        }
        let hermitian_coupling = coupling.is_hermitian(tol::HERMITICITY);
        let coupling_adjoint = coupling.adjoint();
        let gram = (&coupling_adjoint * &coupling).hermitize();
        let lplus = (&coupling + &coupling_adjoint).hermitize();
        let strat_left = (&lplus * &coupling).scale(0.5);
        let strat_right = (&coupling_adjoint * &lplus).scale(0.5);
        let commuting = hamiltonian.law().is_zero()
            || commutator(hamiltonian.base(), &coupling)?.max_abs()
                <= tol::HERMITICITY * (1.0 + hamiltonian.base().max_abs() * coupling.max_abs());
        Ok(Self {
            dim,
            hamiltonian,
            coupling,
            coupling_adjoint,
            gram,
            lplus,
            strat_left,
            strat_right,
            hermitian_coupling,
            commuting,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn control(&self) -> &ControlSignal {
        &self.hamiltonian
    }

    pub fn coupling(&self) -> &Operator {
        &self.coupling
    }

    pub fn coupling_adjoint(&self) -> &Operator {
        &self.coupling_adjoint
    }

    /// `L + L†`; the measured quadrature.
    pub fn lplus(&self) -> &Operator {
        &self.lplus
    }

    /// Whether `L = L†` holds (required by the reduced-filter constructions).
    pub fn hermitian_coupling(&self) -> bool {
        self.hermitian_coupling
    }

    /// Whether `[H(t), L] = 0` for all `t` (true when the control is off or
    /// the Hamiltonian base commutes with the coupling).
    pub fn commuting(&self) -> bool {
        self.commuting
    }

    pub fn hamiltonian_at(&self, t: f64) -> Operator {
        self.hamiltonian.operator_at(t)
    }

    fn check_dim(&self, x: &Operator) -> Result<(), ModelError> {
        if x.dim() != self.dim {
            return Err(LinalgError::DimMismatch {
                left: self.dim,
                right: x.dim(),
            }
            .into());
        }
        Ok(())
    }

    /// Keeps Hermitian inputs exactly Hermitian through floating-point noise.
    fn seal(&self, out: Operator, x: &Operator) -> Operator {
        if x.is_hermitian(tol::HERMITICITY) {
            out.hermitize()
        } else {
            out
        }
    }

    /// Heisenberg-picture generator `i[H(t),X] + L†XL − ½(L†LX + XL†L)`.
    pub fn lindblad_generator(&self, t: f64, x: &Operator) -> Result<Operator, ModelError> {
        self.check_dim(x)?;
        let mut out = &(&(&self.coupling_adjoint * x) * &self.coupling)
            - &(&(&self.gram * x) + &(x * &self.gram)).scale(0.5);
        if !self.hamiltonian.law().is_zero() {
            let h = self.hamiltonian_at(t);
            out = &out + &commutator(&h, x)?.scale_c(C64::new(0.0, 1.0));
        }
        Ok(self.seal(out, x))
    }

    /// Schrödinger-picture (adjoint) generator
    /// `−i[H(t),X] + LXL† − ½(L†LX + XL†L)`; traceless on any input.
    pub fn lindblad_adjoint(&self, t: f64, x: &Operator) -> Result<Operator, ModelError> {
        self.check_dim(x)?;
        let mut out = &(&(&self.coupling * x) * &self.coupling_adjoint)
            - &(&(&self.gram * x) + &(x * &self.gram)).scale(0.5);
        if !self.hamiltonian.law().is_zero() {
            let h = self.hamiltonian_at(t);
            out = &out + &commutator(&h, x)?.scale_c(C64::new(0.0, -1.0));
        }
        Ok(self.seal(out, x))
    }

    /// `LX + XL†`; the measurement-update operator of the linear filter.
    pub fn measurement_update(&self, x: &Operator) -> Result<Operator, ModelError> {
        self.check_dim(x)?;
        let out = &(&self.coupling * x) + &(x * &self.coupling_adjoint);
        Ok(self.seal(out, x))
    }

    /// Innovation gain `LX + XL† − X·Tr(X(L+L†))` of the normalized filter.
    pub fn innovation_gain(&self, x: &Operator) -> Result<Operator, ModelError> {
        self.check_dim(x)?;
        let update = &(&self.coupling * x) + &(x * &self.coupling_adjoint);
        let expectation = x.trace_product(&self.lplus);
        let out = &update - &x.scale_c(expectation);
        Ok(self.seal(out, x))
    }

    /// Drift correction `((L+L†)LX + XL†(L+L†))/2` that converts the linear
    /// filter between Itô and Stratonovich form; equals `L²X + XL²` for
    /// Hermitian `L`.
    pub fn stratonovich_drift(&self, x: &Operator) -> Result<Operator, ModelError> {
        self.check_dim(x)?;
        let out = &(&self.strat_left * x) + &(x * &self.strat_right);
        Ok(self.seal(out, x))
    }

    /// `Tr(X(L+L†))`; the expected homodyne signal when `X` is a state.
    pub fn expected_signal(&self, x: &Operator) -> f64 {
        x.trace_product(&self.lplus).re
    }
}

/// Spectral decomposition of a Hermitian coupling operator restricted to its
/// nonzero eigenvalues: `L = Σ λ_i P_i` with distinct `λ_i` (descending) and
/// orthogonal projectors `P_i`.
#[derive(Clone, Debug)]
pub struct SpectralDecomposition {
    eigenvalues: Vec<f64>,
    projectors: Vec<Operator>,
}

impl SpectralDecomposition {
    /// Number of distinct nonzero eigenvalues.
    pub fn count(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Distinct nonzero eigenvalues, descending.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Spectral projectors, ordered to match [`Self::eigenvalues`].
    pub fn projectors(&self) -> &[Operator] {
        &self.projectors
    }

    /// Convenience wrapper around [`spectral_projectors`] with the default
    /// relative tolerance.
    pub fn compute(l: &Operator) -> Result<Self, ModelError> {
        spectral_projectors(l, RELATIVE_SPECTRAL_GAP * l.max_abs().max(1.0))
    }

    /// Verifies projector algebra and reconstruction against the original
    /// operator.
    pub fn validate(&self, l: &Operator, zero_tol: f64) -> Result<(), ModelError> {
        let n = l.dim();
        for (j, p) in self.projectors.iter().enumerate() {
            if p.hermiticity_deviation() > tol::PROJECTOR {
                return Err(ModelError::Spectral(format!(
                    "projector {j} is not Hermitian"
                )));
            }
            for (k, q) in self.projectors.iter().enumerate() {
                let prod = p * q;
                let want = if j == k { p.clone() } else { Operator::zeros(n) };
                let dev = (&prod - &want).max_abs();
                if dev > tol::PROJECTOR {
                    return Err(ModelError::Spectral(format!(
                        "P_{j}·P_{k} deviates from orthogonality by {dev:.3e}"
                    )));
                }
            }
        }
        let mut rebuilt = Operator::zeros(n);
        for (lambda, p) in self.eigenvalues.iter().zip(&self.projectors) {
            rebuilt = &rebuilt + &p.scale(*lambda);
        }
        let allowed =
            tol::PROJECTOR * l.frobenius_norm().max(1.0) + 2.0 * zero_tol * (n as f64).sqrt();
        let dev = (&rebuilt - l).frobenius_norm();
        if dev > allowed {
            return Err(ModelError::Spectral(format!(
                "Σ λ_i P_i misses L by {dev:.3e} (allowed {allowed:.3e})"
            )));
        }
        Ok(())
    }
}

/// Clusters the spectrum of a Hermitian `l` with gap tolerance `zero_tol`,
/// drops eigenvalues with `|λ| ≤ zero_tol`, and returns eigenvalues and
/// projectors in descending eigenvalue order.
pub fn spectral_projectors(
    l: &Operator,
    zero_tol: f64,
) -> Result<SpectralDecomposition, ModelError> {
    let eig = crate::linalg::herm_eig(l)?;
    let n = l.dim();
    // Group ascending eigenvalues into chains with adjacent gaps ≤ zero_tol.
    let mut clusters: Vec<(f64, Vec<usize>)> = Vec::new();
    for (idx, &lambda) in eig.eigenvalues.iter().enumerate() {
        match clusters.last_mut() {
            Some((last, members)) if lambda - *last <= zero_tol => {
                *last = lambda;
                members.push(idx);
            }
            _ => clusters.push((lambda, vec![idx])),
        }
    }
    let mut eigenvalues = Vec::new();
    let mut projectors = Vec::new();
    for (_, members) in clusters.iter().rev() {
        let mean = members.iter().map(|&i| eig.eigenvalues[i]).sum::<f64>() / members.len() as f64;
        if mean.abs() <= zero_tol {
            continue;
        }
        let mut p = Operator::zeros(n);
        for &col in members {
            let v = eig.eigenvectors.column(col);
            let outer = Operator::from_fn(n, |r, c| v[r] * v[c].conj());
            p = &p + &outer;
        }
        eigenvalues.push(mean);
        projectors.push(p.hermitize());
    }
    let decomposition = SpectralDecomposition {
        eigenvalues,
        projectors,
    };
    decomposition.validate(l, zero_tol)?;
    Ok(decomposition)
}

/// Collective spin component `J_axis = Σ_k ½σ_axis^{(k)}` on `n_atoms`
/// two-level systems (dimension `2^n_atoms`).
pub fn collective_spin(n_atoms: usize, axis: SpinAxis) -> Result<Operator, ModelError> {
    if n_atoms == 0 || n_atoms > MAX_ATOMS {
        return Err(ModelError::AtomCount(n_atoms));
    }
    let single = match axis {
        SpinAxis::X => pauli::sx(),
        SpinAxis::Y => pauli::sy(),
        SpinAxis::Z => pauli::sz(),
    }
    .scale(0.5);
    let mut total = Operator::zeros(1 << n_atoms);
    for k in 0..n_atoms {
        let factor = |pos: usize| {
            if pos == k {
                single.clone()
            } else {
                pauli::id2()
            }
        };
        let term = (1..n_atoms).fold(factor(0), |acc, pos| kron(&acc, &factor(pos)));
        total = &total + &term;
    }
    Ok(total)
}

/// Spin-ensemble scenario: `L = √μ·J_z` monitored, `H(t) = u(t)·J_axis`
/// steered by the given control law.
pub fn build_spin_model(
    n_atoms: usize,
    mu: f64,
    control: ControlLaw,
    control_axis: SpinAxis,
) -> Result<SystemModel, ModelError> {
    if !(mu.is_finite() && mu > 0.0) {
        return Err(ModelError::CouplingStrength(mu));
    }
    let coupling = collective_spin(n_atoms, SpinAxis::Z)?.scale(mu.sqrt());
    let base = collective_spin(n_atoms, control_axis)?;
    SystemModel::new(ControlSignal::new(control, base), coupling)
}

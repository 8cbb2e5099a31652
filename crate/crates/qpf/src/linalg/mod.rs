//! Dense complex linear algebra for small Hermitian-dominated problems.
//!
//! Everything operates on square `n×n` complex matrices with `n ≤ 256` and is
//! written for robustness and determinism rather than speed: cyclic Jacobi for
//! Hermitian eigenproblems, Hessenberg + shifted QR for general spectra, and
//! partial-pivot LU for linear solves. All routines are pure functions on
//! immutable values and are safe to use from parallel workers.

mod eig;
mod solve;

pub use eig::{complex_eigenvalues, herm_eig, herm_exp, singular_values, EigenSystem};
pub use solve::{codiagonalize, lu_solve, sym_solve, Codiagonalization, SymSolve};

use ndarray::{Array1, Array2};
use num_complex::Complex64;
use thiserror::Error;

/// Shorthand for the only scalar type used by the crate.
pub type C64 = Complex64;

/// Centralized numeric tolerances with their rationale.
pub mod tol {
    /// Max-entry deviation `|a_jk - conj(a_kj)|` below which a matrix is
    /// accepted as Hermitian. Desk-scale conditioning permits a tight bound.
    pub const HERMITICITY: f64 = 1e-10;
    /// Relative Frobenius error allowed when reconstructing `A` from its
    /// eigensystem: `‖VΛV† − A‖_F ≤ EIG_RECONSTRUCT · max(1, ‖A‖_F)`.
    pub const EIG_RECONSTRUCT: f64 = 1e-9;
    /// Entrywise deviation of `V†V` from the identity.
    pub const UNITARITY: f64 = 1e-10;
    /// Spectral-projector algebra (orthogonality, idempotence, reconstruction).
    pub const PROJECTOR: f64 = 1e-9;
    /// Jacobi sweep termination: off-diagonal mass relative to `‖A‖_F`.
    pub(crate) const JACOBI_OFF: f64 = 1e-14;
}

/// Errors from the dense linear algebra layer.
#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("matrix must be square, got {rows}×{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("dimension mismatch: {left}×{left} vs {right}×{right}")]
    DimMismatch { left: usize, right: usize },
    #[error("matrix is not Hermitian: max |A - A†| entry = {deviation:.3e}")]
    NotHermitian { deviation: f64 },
    #[error("{algorithm} did not converge within {iterations} iterations")]
    NoConvergence {
        algorithm: &'static str,
        iterations: usize,
    },
    #[error("singular linear system: {context}")]
    Singular { context: String },
}

/// Dense square complex matrix; the universal carrier for Hamiltonians,
/// coupling operators, density matrices, and submanifold generators.
///
/// The `hermitian_hint` caches the outcome of a Hermiticity check so that hot
/// paths can skip re-verification; it is only ever `Some(true)` after the
/// check has actually passed.
#[derive(Clone, Debug)]
pub struct Operator {
    entries: Array2<C64>,
    hermitian_hint: Option<bool>,
}

impl Operator {
    /// Wraps a square array without any Hermiticity claim.
    pub fn from_array(entries: Array2<C64>) -> Result<Self, LinalgError> {
        if entries.nrows() != entries.ncols() {
            return Err(LinalgError::NotSquare {
                rows: entries.nrows(),
                cols: entries.ncols(),
            });
        }
        Ok(Self {
            entries,
            hermitian_hint: None,
        })
    }

    /// Wraps a square array after verifying Hermiticity to [`tol::HERMITICITY`].
    pub fn hermitian_from_array(entries: Array2<C64>) -> Result<Self, LinalgError> {
        let mut op = Self::from_array(entries)?;
        let dev = op.hermiticity_deviation();
        if dev > tol::HERMITICITY {
            return Err(LinalgError::NotHermitian { deviation: dev });
        }
        op.hermitian_hint = Some(true);
        Ok(op)
    }

    /// Builds an operator entry by entry.
    pub fn from_fn(dim: usize, mut f: impl FnMut(usize, usize) -> C64) -> Self {
        Self {
            entries: Array2::from_shape_fn((dim, dim), |(r, c)| f(r, c)),
            hermitian_hint: None,
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            entries: Array2::zeros((dim, dim)),
            hermitian_hint: Some(true),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self::diag_real(&vec![1.0; dim])
    }

    /// Diagonal matrix with real entries (always Hermitian).
    pub fn diag_real(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut entries = Array2::zeros((n, n));
        for (i, d) in diag.iter().enumerate() {
            entries[(i, i)] = C64::new(*d, 0.0);
        }
        Self {
            entries,
            hermitian_hint: Some(true),
        }
    }

    /// Rank-one projector `|i⟩⟨i|` onto the `i`-th basis vector.
    pub fn basis_projector(dim: usize, i: usize) -> Self {
        let mut entries = Array2::zeros((dim, dim));
        entries[(i, i)] = C64::new(1.0, 0.0);
        Self {
            entries,
            hermitian_hint: Some(true),
        }
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &Array2<C64> {
        &self.entries
    }

    pub fn into_entries(self) -> Array2<C64> {
        self.entries
    }

    pub fn entry(&self, r: usize, c: usize) -> C64 {
        self.entries[(r, c)]
    }

    /// Real parts of the diagonal.
    pub fn diagonal_re(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.entries[(i, i)].re).collect()
    }

    pub fn adjoint(&self) -> Self {
        let n = self.dim();
        let entries = Array2::from_shape_fn((n, n), |(r, c)| self.entries[(c, r)].conj());
        Self {
            entries,
            hermitian_hint: self.hermitian_hint,
        }
    }

    pub fn transpose(&self) -> Self {
        let n = self.dim();
        let entries = Array2::from_shape_fn((n, n), |(r, c)| self.entries[(c, r)]);
        Self {
            entries,
            hermitian_hint: None,
        }
    }

    pub fn trace(&self) -> C64 {
        (0..self.dim()).map(|i| self.entries[(i, i)]).sum()
    }

    pub fn trace_re(&self) -> f64 {
        self.trace().re
    }

    pub fn scale(&self, a: f64) -> Self {
        self.scale_c(C64::new(a, 0.0))
    }

    pub fn scale_c(&self, a: C64) -> Self {
        Self {
            entries: self.entries.mapv(|x| x * a),
            hermitian_hint: if a.im == 0.0 { self.hermitian_hint } else { None },
        }
    }

    /// `(A + A†)/2`; cleans floating-point Hermiticity drift.
    pub fn hermitize(&self) -> Self {
        let n = self.dim();
        let entries = Array2::from_shape_fn((n, n), |(r, c)| {
            (self.entries[(r, c)] + self.entries[(c, r)].conj()) * 0.5
        });
        Self {
            entries,
            hermitian_hint: Some(true),
        }
    }

    /// Max-entry deviation from Hermiticity.
    pub fn hermiticity_deviation(&self) -> f64 {
        let n = self.dim();
        let mut dev: f64 = 0.0;
        for r in 0..n {
            for c in r..n {
                let d = (self.entries[(r, c)] - self.entries[(c, r)].conj()).norm();
                dev = dev.max(d);
            }
        }
        dev
    }

    pub fn is_hermitian(&self, tolerance: f64) -> bool {
        match self.hermitian_hint {
            Some(true) => true,
            _ => self.hermiticity_deviation() <= tolerance,
        }
    }

    /// `√Tr(A†A)`.
    pub fn frobenius_norm(&self) -> f64 {
        self.entries
            .iter()
            .map(|x| x.norm_sqr())
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.entries.iter().map(|x| x.norm()).fold(0.0, f64::max)
    }

    /// Frobenius inner product `Tr(A†B)`.
    pub fn frob_inner(&self, rhs: &Self) -> C64 {
        assert_eq!(self.dim(), rhs.dim(), "frob_inner dimension mismatch");
        self.entries
            .iter()
            .zip(rhs.entries.iter())
            .map(|(a, b)| a.conj() * b)
            .sum()
    }

    /// `Tr(AB)` without forming the product.
    pub fn trace_product(&self, rhs: &Self) -> C64 {
        assert_eq!(self.dim(), rhs.dim(), "trace_product dimension mismatch");
        let n = self.dim();
        let mut acc = C64::new(0.0, 0.0);
        for r in 0..n {
            for c in 0..n {
                acc += self.entries[(r, c)] * rhs.entries[(c, r)];
            }
        }
        acc
    }

    /// `self += coeff·rhs` in place, preserving a joint Hermiticity claim.
    pub fn scaled_add(&mut self, coeff: f64, rhs: &Self) {
        assert_eq!(self.dim(), rhs.dim(), "scaled_add dimension mismatch");
        self.entries
            .scaled_add(C64::new(coeff, 0.0), &rhs.entries);
        self.hermitian_hint = match (self.hermitian_hint, rhs.hermitian_hint) {
            (Some(true), Some(true)) => Some(true),
            _ => None,
        };
    }

    /// Matrix product; panics on dimension mismatch (programming error).
    pub fn matmul(&self, rhs: &Self) -> Self {
        assert_eq!(self.dim(), rhs.dim(), "matmul dimension mismatch");
        Self {
            entries: self.entries.dot(&rhs.entries),
            hermitian_hint: None,
        }
    }

    /// Smallest eigenvalue of a Hermitian operator.
    pub fn min_eigenvalue(&self) -> Result<f64, LinalgError> {
        let eig = herm_eig(self)?;
        Ok(eig.eigenvalues[0])
    }
}

impl std::ops::Add for &Operator {
    type Output = Operator;
    fn add(self, rhs: &Operator) -> Operator {
        assert_eq!(self.dim(), rhs.dim(), "add dimension mismatch");
        Operator {
            entries: &self.entries + &rhs.entries,
            hermitian_hint: match (self.hermitian_hint, rhs.hermitian_hint) {
                (Some(true), Some(true)) => Some(true),
                _ => None,
            },
        }
    }
}

impl std::ops::Sub for &Operator {
    type Output = Operator;
    fn sub(self, rhs: &Operator) -> Operator {
        assert_eq!(self.dim(), rhs.dim(), "sub dimension mismatch");
        Operator {
            entries: &self.entries - &rhs.entries,
            hermitian_hint: match (self.hermitian_hint, rhs.hermitian_hint) {
                (Some(true), Some(true)) => Some(true),
                _ => None,
            },
        }
    }
}

impl std::ops::Mul for &Operator {
    type Output = Operator;
    fn mul(self, rhs: &Operator) -> Operator {
        self.matmul(rhs)
    }
}

impl std::ops::Neg for &Operator {
    type Output = Operator;
    fn neg(self) -> Operator {
        Operator {
            entries: self.entries.mapv(|x| -x),
            hermitian_hint: self.hermitian_hint,
        }
    }
}

/// `AB − BA`; anti-Hermitian when both inputs are Hermitian.
pub fn commutator(a: &Operator, b: &Operator) -> Result<Operator, LinalgError> {
    if a.dim() != b.dim() {
        return Err(LinalgError::DimMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    Ok(&(a * b) - &(b * a))
}

/// `AB + BA`.
pub fn anticommutator(a: &Operator, b: &Operator) -> Result<Operator, LinalgError> {
    if a.dim() != b.dim() {
        return Err(LinalgError::DimMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    Ok(&(a * b) + &(b * a))
}

/// Kronecker product, `dim = a.dim · b.dim`.
pub fn kron(a: &Operator, b: &Operator) -> Operator {
    let (na, nb) = (a.dim(), b.dim());
    let n = na * nb;
    let entries = Array2::from_shape_fn((n, n), |(r, c)| {
        a.entries[(r / nb, c / nb)] * b.entries[(r % nb, c % nb)]
    });
    Operator {
        entries,
        hermitian_hint: match (a.hermitian_hint, b.hermitian_hint) {
            (Some(true), Some(true)) => Some(true),
            _ => None,
        },
    }
}

/// Free-function form of [`Operator::frobenius_norm`].
pub fn frobenius_norm(a: &Operator) -> f64 {
    a.frobenius_norm()
}

/// Column-stacking vectorization: `vec(X)[c·n + r] = X[r,c]`.
pub fn vec_column_stack(x: &Operator) -> Array1<C64> {
    let n = x.dim();
    Array1::from_shape_fn(n * n, |i| x.entries[(i % n, i / n)])
}

/// Inverse of [`vec_column_stack`].
pub fn unvec_column_stack(v: &Array1<C64>, n: usize) -> Operator {
    assert_eq!(v.len(), n * n, "unvec length mismatch");
    Operator::from_fn(n, |r, c| v[c * n + r])
}

/// Dense `n²×n²` matrix `M` of a linear map `f` on operators, with
/// `M·vec(X) = vec(f(X))` under column-stacking vec. Built by probing the
/// matrix-unit basis `E_rc`, whose vectorization is the unit coordinate
/// vector `e_{c·n+r}`.
pub fn vectorize_superoperator(
    f: impl Fn(&Operator) -> Operator,
    n: usize,
) -> Array2<C64> {
    let mut m = Array2::zeros((n * n, n * n));
    for c in 0..n {
        for r in 0..n {
            let unit = Operator::from_fn(n, |i, j| {
                if i == r && j == c {
                    C64::new(1.0, 0.0)
                } else {
                    C64::new(0.0, 0.0)
                }
            });
            let image = f(&unit);
            assert_eq!(image.dim(), n, "superoperator changed dimension");
            let col = vec_column_stack(&image);
            let j = c * n + r;
            for i in 0..n * n {
                m[(i, j)] = col[i];
            }
        }
    }
    m
}

/// Pauli matrices and related two-level constants.
pub mod pauli {
    use super::{C64, Operator};
    use ndarray::array;

    pub fn sx() -> Operator {
        Operator::hermitian_from_array(array![
            [C64::new(0.0, 0.0), C64::new(1.0, 0.0)],
            [C64::new(1.0, 0.0), C64::new(0.0, 0.0)]
        ])
        .expect("σx is Hermitian")
    }

    pub fn sy() -> Operator {
        Operator::hermitian_from_array(array![
            [C64::new(0.0, 0.0), C64::new(0.0, -1.0)],
            [C64::new(0.0, 1.0), C64::new(0.0, 0.0)]
        ])
        .expect("σy is Hermitian")
    }

    pub fn sz() -> Operator {
        Operator::diag_real(&[1.0, -1.0])
    }

    pub fn id2() -> Operator {
        Operator::identity(2)
    }
}

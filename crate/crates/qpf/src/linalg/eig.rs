//! Eigendecompositions: cyclic Jacobi for Hermitian matrices (values and
//! vectors) and Hessenberg reduction + Wilkinson-shifted QR for the spectra of
//! general complex matrices (values only, used for vectorized superoperators).

use ndarray::Array2;

use super::{tol, C64, LinalgError, Operator};

/// Result of a Hermitian eigendecomposition: `A = V diag(λ) V†` with real
/// eigenvalues sorted ascending and unitary `V` whose columns are the
/// eigenvectors in matching order.
#[derive(Clone, Debug)]
pub struct EigenSystem {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Array2<C64>,
}

impl EigenSystem {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// `V diag(g(λ)) V†` for a real function of the eigenvalues.
    pub fn apply_spectral(&self, g: impl Fn(f64) -> f64) -> Operator {
        let n = self.dim();
        let v = &self.eigenvectors;
        let entries = Array2::from_shape_fn((n, n), |(r, c)| {
            (0..n)
                .map(|k| v[(r, k)] * g(self.eigenvalues[k]) * v[(c, k)].conj())
                .sum()
        });
        // Spectral synthesis with real weights is Hermitian by construction.
        Operator::from_array(entries)
            .expect("square by construction")
            .hermitize()
    }

    /// `V diag(λ) V†`, for reconstruction checks.
    pub fn reconstruct(&self) -> Operator {
        self.apply_spectral(|x| x)
    }

    /// Max-entry deviation of `V†V` from the identity.
    pub fn unitarity_deviation(&self) -> f64 {
        let n = self.dim();
        let v = &self.eigenvectors;
        let mut dev: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                let dot: C64 = (0..n).map(|k| v[(k, i)].conj() * v[(k, j)]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                dev = dev.max((dot - want).norm());
            }
        }
        dev
    }
}

const MAX_JACOBI_SWEEPS: usize = 60;

/// Hermitian eigendecomposition by cyclic Jacobi with complex rotations.
///
/// Each pivot `(p,q)` is reduced to a real 2×2 problem by the phase of
/// `a_pq = r·e^{iφ}`: conjugating by `diag(1, e^{−iφ})` makes the block real
/// symmetric, after which a standard Jacobi rotation annihilates it. The
/// combined local unitary is applied to the iterate and accumulated into the
/// eigenvector matrix. Deterministic pivot order gives bit-reproducible
/// output for identical input.
pub fn herm_eig(a: &Operator) -> Result<EigenSystem, LinalgError> {
    let dev = a.hermiticity_deviation();
    if dev > tol::HERMITICITY {
        return Err(LinalgError::NotHermitian { deviation: dev });
    }
    let n = a.dim();
    let mut m = a.hermitize().into_entries();
    let mut v: Array2<C64> = Array2::eye(n);
    let scale = a.frobenius_norm();
    let stop = tol::JACOBI_OFF * scale.max(f64::MIN_POSITIVE);

    let mut converged = false;
    for _sweep in 0..MAX_JACOBI_SWEEPS {
        let off: f64 = {
            let mut s = 0.0;
            for p in 0..n {
                for q in (p + 1)..n {
                    s += 2.0 * m[(p, q)].norm_sqr();
                }
            }
            s.sqrt()
        };
        if off <= stop {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                let r = apq.norm();
                if r <= stop / (n as f64) {
                    continue;
                }
                let phase = apq / r; // e^{iφ}
                let app = m[(p, p)].re;
                let aqq = m[(q, q)].re;
                // Real Jacobi rotation on the phase-reduced block
                // [[app, r], [r, aqq]]: cot(2θ) = (app − aqq)/(2r).
                let tau = (app - aqq) / (2.0 * r);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                // Local unitary V: V[p][p]=c, V[p][q]=−s,
                // V[q][p]=s·e^{−iφ}, V[q][q]=c·e^{−iφ}.
                let sp = s * phase.conj(); // s·e^{−iφ}
                for k in 0..n {
                    if k == p || k == q {
                        continue;
                    }
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = mkp * c + mkq * sp;
                    m[(k, q)] = -mkp * s + mkq * (phase.conj() * c);
                    m[(p, k)] = m[(k, p)].conj();
                    m[(q, k)] = m[(k, q)].conj();
                }
                m[(p, p)] = C64::new(app + t * r, 0.0);
                m[(q, q)] = C64::new(aqq - t * r, 0.0);
                m[(p, q)] = C64::new(0.0, 0.0);
                m[(q, p)] = C64::new(0.0, 0.0);
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = vkp * c + vkq * sp;
                    v[(k, q)] = -vkp * s + vkq * (phase.conj() * c);
                }
            }
        }
    }
    if !converged {
        // One final check: the last sweep may have finished the job.
        let mut s = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                s += 2.0 * m[(p, q)].norm_sqr();
            }
        }
        if s.sqrt() > stop {
            return Err(LinalgError::NoConvergence {
                algorithm: "Jacobi eigensolver",
                iterations: MAX_JACOBI_SWEEPS,
            });
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(i, i)].re.total_cmp(&m[(j, j)].re));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| m[(i, i)].re).collect();
    let eigenvectors = Array2::from_shape_fn((n, n), |(r, c)| v[(r, order[c])]);
    Ok(EigenSystem {
        eigenvalues,
        eigenvectors,
    })
}

/// `e^A = V diag(e^λ) V†` for Hermitian `A`; the result is Hermitian positive
/// definite.
pub fn herm_exp(a: &Operator) -> Result<Operator, LinalgError> {
    Ok(herm_eig(a)?.apply_spectral(f64::exp))
}

/// Singular values in descending order, via the Hermitian eigenvalues of
/// `A†A`. Equals the sorted absolute eigenvalues when `A` is Hermitian.
pub fn singular_values(a: &Operator) -> Vec<f64> {
    let gram = &a.adjoint() * a;
    let eig = herm_eig(&gram.hermitize()).expect("A†A is Hermitian by construction");
    let mut s: Vec<f64> = eig
        .eigenvalues
        .iter()
        .map(|&x| x.max(0.0).sqrt())
        .collect();
    s.reverse();
    s
}

const MAX_QR_ITERS_PER_EIG: usize = 40;

/// Eigenvalues of a general complex matrix (no eigenvectors), unsorted.
///
/// Householder Hessenberg reduction followed by explicit single-shift QR with
/// Wilkinson shifts and standard deflation. Intended for vectorized
/// superoperators (dimensions ≤ 256 here).
pub fn complex_eigenvalues(a: &Array2<C64>) -> Result<Vec<C64>, LinalgError> {
    if a.nrows() != a.ncols() {
        return Err(LinalgError::NotSquare {
            rows: a.nrows(),
            cols: a.ncols(),
        });
    }
    let n = a.nrows();
    if n == 0 {
        return Ok(vec![]);
    }
    let mut h = hessenberg(a);
    let mut eigs = Vec::with_capacity(n);
    let mut hi = n; // active block is h[0..hi, 0..hi]
    let mut iters_since_deflation = 0usize;
    let mut total_budget = MAX_QR_ITERS_PER_EIG * n.max(1);

    while hi > 0 {
        // Zero out negligible subdiagonals, then find the active block start.
        for i in 1..hi {
            let sub = h[(i, i - 1)].norm();
            let local = h[(i, i)].norm() + h[(i - 1, i - 1)].norm();
            if sub <= f64::EPSILON * local.max(f64::MIN_POSITIVE) {
                h[(i, i - 1)] = C64::new(0.0, 0.0);
            }
        }
        let mut lo = 0;
        for i in (1..hi).rev() {
            if h[(i, i - 1)].norm() == 0.0 {
                lo = i;
                break;
            }
        }
        // lo is now the start of the trailing irreducible block [lo, hi).
        if hi - lo == 1 {
            eigs.push(h[(lo, lo)]);
            hi -= 1;
            iters_since_deflation = 0;
            continue;
        }
        if hi - lo == 2 {
            let (l1, l2) = eig2(
                h[(lo, lo)],
                h[(lo, lo + 1)],
                h[(lo + 1, lo)],
                h[(lo + 1, lo + 1)],
            );
            eigs.push(l1);
            eigs.push(l2);
            hi -= 2;
            iters_since_deflation = 0;
            continue;
        }
        if total_budget == 0 {
            return Err(LinalgError::NoConvergence {
                algorithm: "shifted QR",
                iterations: MAX_QR_ITERS_PER_EIG * n,
            });
        }
        total_budget -= 1;
        iters_since_deflation += 1;

        let shift = if iters_since_deflation % 12 == 0 {
            // Exceptional shift to break rare limit cycles.
            let mag = h[(hi - 1, hi - 2)].norm() + h[(hi - 2, hi - 2)].norm();
            h[(hi - 1, hi - 1)] + C64::new(0.75 * mag, 0.0)
        } else {
            wilkinson_shift(
                h[(hi - 2, hi - 2)],
                h[(hi - 2, hi - 1)],
                h[(hi - 1, hi - 2)],
                h[(hi - 1, hi - 1)],
            )
        };
        qr_step(&mut h, lo, hi, shift);
    }
    Ok(eigs)
}

/// Eigenvalues of a 2×2 complex matrix.
fn eig2(a: C64, b: C64, c: C64, d: C64) -> (C64, C64) {
    let half_tr = (a + d) * 0.5;
    let det = a * d - b * c;
    let disc = (half_tr * half_tr - det).sqrt();
    (half_tr + disc, half_tr - disc)
}

/// Root of the trailing 2×2 closer to the bottom-right entry.
fn wilkinson_shift(a: C64, b: C64, c: C64, d: C64) -> C64 {
    let (l1, l2) = eig2(a, b, c, d);
    if (l1 - d).norm() <= (l2 - d).norm() {
        l1
    } else {
        l2
    }
}

/// One explicit shifted QR step on the Hessenberg block `h[lo..hi, lo..hi]`:
/// `H − σI = QR` via Givens rotations, then `H ← RQ + σI`.
fn qr_step(h: &mut Array2<C64>, lo: usize, hi: usize, shift: C64) {
    let m = hi - lo;
    for i in lo..hi {
        h[(i, i)] -= shift;
    }
    // Left-multiply by Givens rotations G_i annihilating subdiagonals.
    let mut rots: Vec<(f64, C64)> = Vec::with_capacity(m - 1);
    for i in lo..hi - 1 {
        let f = h[(i, i)];
        let g = h[(i + 1, i)];
        let (c, s) = givens(f, g);
        rots.push((c, s));
        for j in i..hi {
            let hij = h[(i, j)];
            let hi1j = h[(i + 1, j)];
            h[(i, j)] = hij * c + hi1j * s;
            h[(i + 1, j)] = -hij * s.conj() + hi1j * c;
        }
    }
    // Right-multiply by the adjoints: H ← H G₀† G₁† ⋯.
    for (k, (c, s)) in rots.iter().enumerate() {
        let i = lo + k;
        let top = (i + 2).min(hi);
        for r in lo..top {
            let hri = h[(r, i)];
            let hri1 = h[(r, i + 1)];
            h[(r, i)] = hri * *c + hri1 * s.conj();
            h[(r, i + 1)] = -hri * *s + hri1 * *c;
        }
    }
    for i in lo..hi {
        h[(i, i)] += shift;
    }
}

/// Complex Givens rotation: returns `(c, s)` with real `c ≥ 0` such that
/// `[[c, s], [−s̄, c]]·[f, g]ᵀ = [r, 0]ᵀ`.
fn givens(f: C64, g: C64) -> (f64, C64) {
    let gn = g.norm();
    if gn == 0.0 {
        return (1.0, C64::new(0.0, 0.0));
    }
    let fn_ = f.norm();
    if fn_ == 0.0 {
        // r = |g|, rotation swaps with a phase.
        return (0.0, g.conj() / gn);
    }
    let d = (fn_ * fn_ + gn * gn).sqrt();
    let c = fn_ / d;
    let s = (f / fn_) * (g.conj() / d);
    (c, s)
}

/// Householder reduction to upper Hessenberg form (similarity transform; the
/// accumulated unitary is discarded since only eigenvalues are needed).
fn hessenberg(a: &Array2<C64>) -> Array2<C64> {
    let n = a.nrows();
    let mut h = a.clone();
    for k in 0..n.saturating_sub(2) {
        // Householder vector for column k below the subdiagonal.
        let mut xnorm_sq = 0.0;
        for i in k + 1..n {
            xnorm_sq += h[(i, k)].norm_sqr();
        }
        let xnorm = xnorm_sq.sqrt();
        if xnorm <= f64::MIN_POSITIVE {
            continue;
        }
        let x0 = h[(k + 1, k)];
        let phase = if x0.norm() == 0.0 {
            C64::new(1.0, 0.0)
        } else {
            x0 / x0.norm()
        };
        let alpha = -phase * xnorm;
        // v = x − α e₁, normalized.
        let mut v: Vec<C64> = (k + 1..n).map(|i| h[(i, k)]).collect();
        v[0] -= alpha;
        let vnorm = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if vnorm <= f64::MIN_POSITIVE {
            continue;
        }
        for z in v.iter_mut() {
            *z /= vnorm;
        }
        // H ← (I − 2vv†) H (rows k+1..n), then H ← H (I − 2vv†) (cols k+1..n).
        for j in k..n {
            let dot: C64 = (0..v.len()).map(|i| v[i].conj() * h[(k + 1 + i, j)]).sum();
            for i in 0..v.len() {
                let upd = v[i] * dot * 2.0;
                h[(k + 1 + i, j)] -= upd;
            }
        }
        for r in 0..n {
            let dot: C64 = (0..v.len()).map(|i| h[(r, k + 1 + i)] * v[i]).sum();
            for i in 0..v.len() {
                let upd = dot * v[i].conj() * 2.0;
                h[(r, k + 1 + i)] -= upd;
            }
        }
        // Entries below the subdiagonal in column k are now zero by
        // construction; enforce exactly to keep deflation tests clean.
        for i in k + 2..n {
            h[(i, k)] = C64::new(0.0, 0.0);
        }
    }
    h
}

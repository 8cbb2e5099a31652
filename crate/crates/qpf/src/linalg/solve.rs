//! Linear solves and simultaneous diagonalization.

use ndarray::{Array1, Array2};

use super::{herm_eig, tol, C64, LinalgError, Operator};

/// Solves `A x = b` for general complex `A` by LU with partial pivoting.
pub fn lu_solve(a: &Array2<C64>, b: &Array1<C64>) -> Result<Array1<C64>, LinalgError> {
    if a.nrows() != a.ncols() {
        return Err(LinalgError::NotSquare {
            rows: a.nrows(),
            cols: a.ncols(),
        });
    }
    let n = a.nrows();
    assert_eq!(b.len(), n, "rhs length mismatch");
    let mut lu = a.clone();
    let mut x = b.clone();
    let scale = a.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let tiny = scale * n as f64 * f64::EPSILON;

    for k in 0..n {
        // Partial pivot: largest remaining entry in column k.
        let mut p = k;
        let mut best = lu[(k, k)].norm();
        for i in k + 1..n {
            let m = lu[(i, k)].norm();
            if m > best {
                best = m;
                p = i;
            }
        }
        if best <= tiny {
            return Err(LinalgError::Singular {
                context: format!("LU pivot {best:.3e} at column {k}"),
            });
        }
        if p != k {
            for j in 0..n {
                let t = lu[(k, j)];
                lu[(k, j)] = lu[(p, j)];
                lu[(p, j)] = t;
            }
            let t = x[k];
            x[k] = x[p];
            x[p] = t;
        }
        let piv = lu[(k, k)];
        for i in k + 1..n {
            let f = lu[(i, k)] / piv;
            if f.norm() == 0.0 {
                continue;
            }
            for j in k + 1..n {
                let upd = f * lu[(k, j)];
                lu[(i, j)] -= upd;
            }
            let upd = f * x[k];
            x[i] -= upd;
        }
    }
    // Back substitution.
    for k in (0..n).rev() {
        let mut acc = x[k];
        for j in k + 1..n {
            acc -= lu[(k, j)] * x[j];
        }
        x[k] = acc / lu[(k, k)];
    }
    Ok(x)
}

/// Solution of a real symmetric positive-definite system together with the
/// spectral condition number observed during the solve.
#[derive(Clone, Debug)]
pub struct SymSolve {
    pub solution: Array1<f64>,
    pub condition: f64,
    pub min_eigenvalue: f64,
}

/// Solves `G x = b` for real symmetric positive-definite `G` through its
/// eigendecomposition (never forms an explicit inverse). Fails when `G` is
/// not positive definite or its condition number exceeds `max_condition`.
pub fn sym_solve(
    g: &Array2<f64>,
    b: &Array1<f64>,
    max_condition: f64,
) -> Result<SymSolve, LinalgError> {
    let n = g.nrows();
    assert_eq!(g.ncols(), n, "matrix must be square");
    assert_eq!(b.len(), n, "rhs length mismatch");
    let op = Operator::from_fn(n, |r, c| C64::new(0.5 * (g[(r, c)] + g[(c, r)]), 0.0));
    let eig = herm_eig(&op)?;
    let lo = eig.eigenvalues[0];
    let hi = eig.eigenvalues[n - 1];
    if lo <= 0.0 {
        return Err(LinalgError::Singular {
            context: format!("matrix not positive definite: λ_min = {lo:.3e}"),
        });
    }
    let condition = hi / lo;
    if condition > max_condition {
        return Err(LinalgError::Singular {
            context: format!("condition number {condition:.3e} exceeds {max_condition:.1e}"),
        });
    }
    // x = V Λ⁻¹ Vᵀ b (V is real here; complex parts vanish).
    let v = &eig.eigenvectors;
    let mut coeffs = vec![0.0; n];
    for k in 0..n {
        let mut acc = 0.0;
        for r in 0..n {
            acc += v[(r, k)].re * b[r];
        }
        coeffs[k] = acc / eig.eigenvalues[k];
    }
    let mut x = Array1::zeros(n);
    for r in 0..n {
        let mut acc = 0.0;
        for k in 0..n {
            acc += v[(r, k)].re * coeffs[k];
        }
        x[r] = acc;
    }
    Ok(SymSolve {
        solution: x,
        condition,
        min_eigenvalue: lo,
    })
}

/// Shared eigenbasis of a family of mutually commuting Hermitian operators.
#[derive(Clone, Debug)]
pub struct Codiagonalization {
    /// Unitary whose columns are joint eigenvectors.
    pub basis: Array2<C64>,
    /// `eigenvalues[i][j]`: eigenvalue of operator `i` on basis column `j`.
    pub eigenvalues: Vec<Vec<f64>>,
}

/// Simultaneously diagonalizes commuting Hermitian operators by recursive
/// block refinement: diagonalize the first operator, split the basis into its
/// eigenspaces, then refine each eigenspace with the next operator (which
/// preserves those spaces because it commutes), and so on.
pub fn codiagonalize(ops: &[Operator]) -> Result<Codiagonalization, LinalgError> {
    assert!(!ops.is_empty(), "need at least one operator");
    let n = ops[0].dim();
    for a in ops {
        if a.dim() != n {
            return Err(LinalgError::DimMismatch {
                left: n,
                right: a.dim(),
            });
        }
        let dev = a.hermiticity_deviation();
        if dev > tol::HERMITICITY {
            return Err(LinalgError::NotHermitian { deviation: dev });
        }
    }

    let mut u: Array2<C64> = Array2::eye(n);
    let mut blocks: Vec<(usize, usize)> = vec![(0, n)];
    for a in ops {
        let cluster_tol = 1e-8 * a.max_abs().max(1.0);
        let mut next_blocks = Vec::new();
        for &(s, e) in &blocks {
            let k = e - s;
            if k == 1 {
                next_blocks.push((s, e));
                continue;
            }
            // Compressed block B = U_b† A U_b on the invariant subspace.
            let mut au = Array2::<C64>::zeros((n, k));
            for j in 0..k {
                for r in 0..n {
                    let mut acc = C64::new(0.0, 0.0);
                    for t in 0..n {
                        acc += a.entries()[(r, t)] * u[(t, s + j)];
                    }
                    au[(r, j)] = acc;
                }
            }
            let mut b = Array2::<C64>::zeros((k, k));
            for i in 0..k {
                for j in 0..k {
                    let mut acc = C64::new(0.0, 0.0);
                    for r in 0..n {
                        acc += u[(r, s + i)].conj() * au[(r, j)];
                    }
                    b[(i, j)] = acc;
                }
            }
            let bop = Operator::from_array(b)?.hermitize();
            let eig = herm_eig(&bop)?;
            // U_b ← U_b · V.
            let v = &eig.eigenvectors;
            let mut newcols = Array2::<C64>::zeros((n, k));
            for r in 0..n {
                for j in 0..k {
                    let mut acc = C64::new(0.0, 0.0);
                    for t in 0..k {
                        acc += u[(r, s + t)] * v[(t, j)];
                    }
                    newcols[(r, j)] = acc;
                }
            }
            for r in 0..n {
                for j in 0..k {
                    u[(r, s + j)] = newcols[(r, j)];
                }
            }
            // Split by eigenvalue clusters (ascending within the block).
            let mut start = 0;
            for j in 1..k {
                if eig.eigenvalues[j] - eig.eigenvalues[j - 1] > cluster_tol {
                    next_blocks.push((s + start, s + j));
                    start = j;
                }
            }
            next_blocks.push((s + start, e));
        }
        blocks = next_blocks;
    }

    // Extract eigenvalue lists and verify joint diagonality.
    let mut eigenvalues = Vec::with_capacity(ops.len());
    for a in ops {
        let scale = a.frobenius_norm().max(1.0);
        let mut offdiag_sq = 0.0;
        let mut diag = vec![0.0; n];
        for i in 0..n {
            for j in 0..n {
                let mut acc = C64::new(0.0, 0.0);
                for r in 0..n {
                    for t in 0..n {
                        acc += u[(r, i)].conj() * a.entries()[(r, t)] * u[(t, j)];
                    }
                }
                if i == j {
                    diag[i] = acc.re;
                } else {
                    offdiag_sq += acc.norm_sqr();
                }
            }
        }
        if offdiag_sq.sqrt() > tol::PROJECTOR * scale {
            return Err(LinalgError::Singular {
                context: format!(
                    "operators do not commute: joint off-diagonal mass {:.3e}",
                    offdiag_sq.sqrt()
                ),
            });
        }
        eigenvalues.push(diag);
    }
    Ok(Codiagonalization {
        basis: u,
        eigenvalues,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{kron, pauli};
    use approx::assert_abs_diff_eq;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn lu_solves_random_systems() {
        for seed in 0..10u64 {
            let n = 2 + (seed as usize % 7);
            let a = crate::linalg::tests::random_operator(n, 3000 + seed);
            let xs = crate::linalg::tests::random_operator(n, 4000 + seed);
            let want: Array1<C64> = (0..n).map(|i| xs.entry(i, 0)).collect();
            let b = a.entries().dot(&want);
            let got = lu_solve(a.entries(), &b).unwrap();
            let dev = got
                .iter()
                .zip(want.iter())
                .map(|(p, q)| (p - q).norm())
                .fold(0.0, f64::max);
            assert!(dev < 1e-10, "solve deviation {dev:.3e}");
        }
    }

    #[test]
    fn lu_detects_singular_matrix() {
        let a = Operator::from_fn(3, |r, _| c(r as f64, 0.0)); // equal columns
        let b = Array1::from_elem(3, c(1.0, 0.0));
        assert!(matches!(
            lu_solve(a.entries(), &b),
            Err(LinalgError::Singular { .. })
        ));
    }

    #[test]
    fn sym_solve_reports_condition_and_solution() {
        let g = ndarray::array![[4.0, 1.0], [1.0, 3.0]];
        let b = ndarray::array![1.0, 2.0];
        let r = sym_solve(&g, &b, 1e12).unwrap();
        // Direct 2×2 inverse check.
        let det = 11.0;
        let want = [(3.0 * 1.0 - 1.0 * 2.0) / det, (4.0 * 2.0 - 1.0 * 1.0) / det];
        assert_abs_diff_eq!(r.solution[0], want[0], epsilon = 1e-12);
        assert_abs_diff_eq!(r.solution[1], want[1], epsilon = 1e-12);
        assert!(r.condition > 1.0 && r.condition < 3.0);
    }

    #[test]
    fn sym_solve_rejects_indefinite_and_ill_conditioned() {
        let ind = ndarray::array![[1.0, 0.0], [0.0, -1.0]];
        let b = ndarray::array![1.0, 1.0];
        assert!(sym_solve(&ind, &b, 1e12).is_err());
        let ill = ndarray::array![[1.0, 0.0], [0.0, 1e-15]];
        assert!(sym_solve(&ill, &b, 1e12).is_err());
    }

    #[test]
    fn codiagonalize_two_qubit_z_operators() {
        let a1 = kron(&pauli::sz(), &pauli::id2());
        let a2 = kron(&pauli::id2(), &pauli::sz());
        let cd = codiagonalize(&[a1.clone(), a2.clone()]).unwrap();
        // Joint eigenvalues must reproduce both operators.
        for (i, a) in [a1, a2].iter().enumerate() {
            let rebuilt = Operator::from_fn(4, |r, cc| {
                (0..4)
                    .map(|k| cd.basis[(r, k)] * cd.eigenvalues[i][k] * cd.basis[(cc, k)].conj())
                    .sum()
            });
            assert!((&rebuilt - a).max_abs() < 1e-12);
        }
    }

    #[test]
    fn codiagonalize_handles_degenerate_first_operator() {
        // First operator is the identity (fully degenerate); the second must
        // still be diagonalized inside the untouched block.
        let cd = codiagonalize(&[Operator::identity(2), pauli::sx()]).unwrap();
        let mut vals = cd.eigenvalues[1].clone();
        vals.sort_by(f64::total_cmp);
        assert_abs_diff_eq!(vals[0], -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(vals[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn codiagonalize_random_commuting_family() {
        use rand::{Rng, SeedableRng};
        // Build commuting operators as real polynomials of one random
        // Hermitian matrix, conjugated by its eigenbasis.
        let h = crate::linalg::tests::random_hermitian(6, 55);
        let eig = herm_eig(&h).unwrap();
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(91);
        let ops: Vec<Operator> = (0..3)
            .map(|_| {
                let coeffs: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
                // Force a degeneracy: tie two eigenvalues together.
                let mut d = coeffs;
                d[3] = d[2];
                Operator::from_fn(6, |r, cc| {
                    (0..6)
                        .map(|k| {
                            eig.eigenvectors[(r, k)] * d[k] * eig.eigenvectors[(cc, k)].conj()
                        })
                        .sum()
                })
                .hermitize()
            })
            .collect();
        let cd = codiagonalize(&ops).unwrap();
        for (i, a) in ops.iter().enumerate() {
            let rebuilt = Operator::from_fn(6, |r, cc| {
                (0..6)
                    .map(|k| cd.basis[(r, k)] * cd.eigenvalues[i][k] * cd.basis[(cc, k)].conj())
                    .sum()
            });
            assert!(
                (&rebuilt - a).max_abs() < 1e-9,
                "operator {i} not reproduced"
            );
        }
    }

    #[test]
    fn codiagonalize_rejects_non_commuting() {
        assert!(codiagonalize(&[pauli::sx(), pauli::sz()]).is_err());
    }
}

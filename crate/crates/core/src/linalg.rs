//! Dense symmetric-matrix helpers used by the samplers and the spectral
//! clusterer: Cholesky factorization, SPD solves/inversion and a cyclic
//! Jacobi eigensolver. Matrices here are small (feature dimension or the
//! phone-class count), so dense O(n^3) routines are fine.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
/// Returns `None` if a non-positive pivot is hit.
pub fn cholesky(a: &ArrayView2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[[i, j]];
            for k in 0..j {
                sum -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return None;
                }
                l[[i, i]] = sum.sqrt();
            } else {
                l[[i, j]] = sum / l[[j, j]];
            }
        }
    }
    Some(l)
}

/// Solve L y = b for lower-triangular L.
pub fn solve_lower(l: &ArrayView2<f64>, b: &ArrayView1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut y = Array1::<f64>::zeros(n);
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[[i, k]] * y[k];
        }
        y[i] = sum / l[[i, i]];
    }
    y
}

/// Solve L^T x = y for lower-triangular L.
pub fn solve_lower_transpose(l: &ArrayView2<f64>, y: &ArrayView1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut x = Array1::<f64>::zeros(n);
    for i in (0..n).rev() {
        let mut sum = y[i];
        for k in i + 1..n {
            sum -= l[[k, i]] * x[k];
        }
        x[i] = sum / l[[i, i]];
    }
    x
}

/// log-determinant of an SPD matrix from its Cholesky factor.
pub fn log_det_from_cholesky(l: &ArrayView2<f64>) -> f64 {
    (0..l.nrows()).map(|i| l[[i, i]].ln()).sum::<f64>() * 2.0
}

/// Inverse of an SPD matrix via Cholesky. Returns `None` if not SPD.
pub fn spd_inverse(a: &ArrayView2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    let l = cholesky(a)?;
    let mut inv = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut e = Array1::<f64>::zeros(n);
        e[j] = 1.0;
        let y = solve_lower(&l.view(), &e.view());
        let x = solve_lower_transpose(&l.view(), &y.view());
        inv.column_mut(j).assign(&x);
    }
    // symmetrize against round-off
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (inv[[i, j]] + inv[[j, i]]);
            inv[[i, j]] = v;
            inv[[j, i]] = v;
        }
    }
    Some(inv)
}

/// Eigendecomposition of a symmetric matrix by the cyclic Jacobi method.
/// Returns (eigenvalues, eigenvectors) sorted by ascending eigenvalue;
/// eigenvectors are the columns of the returned matrix.
pub fn jacobi_eigen(a: &ArrayView2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    let mut m = a.to_owned();
    let mut v = Array2::<f64>::eye(n);
    let max_sweeps = 100;
    let tol = 1e-14;

    for _ in 0..max_sweeps {
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += m[[i, j]] * m[[i, j]];
            }
        }
        let scale: f64 = (0..n).map(|i| m[[i, i]].abs()).sum::<f64>().max(1.0);
        if off.sqrt() <= tol * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[[p, q]];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = m[[p, p]];
                let aqq = m[[q, q]];
                let theta = (aqq - app) / (2.0 * apq);
                // stable tangent of the rotation angle
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[[i, i]].partial_cmp(&m[[j, j]]).unwrap());
    let values = Array1::from_iter(order.iter().map(|&i| m[[i, i]]));
    let mut vectors = Array2::<f64>::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        vectors.column_mut(dst).assign(&v.column(src));
    }
    (values, vectors)
}

/// Clamp the eigenvalues of a symmetric matrix to at least `floor`.
/// The cheap path first checks `a - floor*I` for positive definiteness and
/// leaves `a` untouched when it already satisfies the bound.
pub fn floor_eigenvalues(a: &Array2<f64>, floor: f64) -> Array2<f64> {
    let n = a.nrows();
    let mut shifted = a.clone();
    for i in 0..n {
        shifted[[i, i]] -= floor;
    }
    if cholesky(&shifted.view()).is_some() {
        return a.clone();
    }
    log::debug!("covariance eigenvalue below floor {floor:e}; repairing");
    let (vals, vecs) = jacobi_eigen(&a.view());
    let mut out = Array2::<f64>::zeros((n, n));
    for k in 0..n {
        let lam = vals[k].max(floor);
        let u = vecs.column(k);
        for i in 0..n {
            for j in 0..n {
                out[[i, j]] += lam * u[i] * u[j];
            }
        }
    }
    out
}

/// x^T A^{-1} x and log|A| together, given the Cholesky factor of A.
pub fn quad_form_and_logdet(l: &ArrayView2<f64>, x: &ArrayView1<f64>) -> (f64, f64) {
    let y = solve_lower(l, x);
    (y.dot(&y), log_det_from_cholesky(l))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;

    #[test]
    fn cholesky_reconstructs() {
        let a = array![[4.0, 2.0, 0.6], [2.0, 5.0, 1.0], [0.6, 1.0, 3.0]];
        let l = cholesky(&a.view()).unwrap();
        let back = l.dot(&l.t());
        for i in 0..3 {
            for j in 0..3 {
                assert_relative_eq!(back[[i, j]], a[[i, j]], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = array![[1.0, 2.0], [2.0, 1.0]];
        assert!(cholesky(&a.view()).is_none());
    }

    #[test]
    fn spd_inverse_matches_identity() {
        let a = array![[2.0, 0.5], [0.5, 1.0]];
        let inv = spd_inverse(&a.view()).unwrap();
        let id = a.dot(&inv);
        assert_relative_eq!(id[[0, 0]], 1.0, epsilon = 1e-12);
        assert_relative_eq!(id[[0, 1]], 0.0, epsilon = 1e-12);
        assert_relative_eq!(id[[1, 0]], 0.0, epsilon = 1e-12);
        assert_relative_eq!(id[[1, 1]], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn jacobi_diagonalizes_known_matrix() {
        // eigenvalues of [[2,1],[1,2]] are 1 and 3
        let a = array![[2.0, 1.0], [1.0, 2.0]];
        let (vals, vecs) = jacobi_eigen(&a.view());
        assert_relative_eq!(vals[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(vals[1], 3.0, epsilon = 1e-12);
        for k in 0..2 {
            let v = vecs.column(k);
            let av = a.dot(&v);
            for i in 0..2 {
                assert_relative_eq!(av[i], vals[k] * v[i], epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn jacobi_residuals_small_on_random_symmetric() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let n = 25;
        let mut a = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            for j in 0..=i {
                let v = rng.gen_range(-1.0..1.0);
                a[[i, j]] = v;
                a[[j, i]] = v;
            }
        }
        let (vals, vecs) = jacobi_eigen(&a.view());
        for k in 0..n {
            let v = vecs.column(k).to_owned();
            let av = a.dot(&v);
            let diff = &av - &(&v * vals[k]);
            let res = diff.dot(&diff).sqrt();
            let norm = v.dot(&v).sqrt();
            assert!(res <= 1e-8 * norm.max(1.0), "residual {res} too large");
        }
    }

    #[test]
    fn floor_eigenvalues_repairs_degenerate() {
        let a = array![[1.0, 1.0], [1.0, 1.0]]; // eigenvalues 0 and 2
        let fixed = floor_eigenvalues(&a, 0.1);
        let (vals, _) = jacobi_eigen(&fixed.view());
        assert!(vals[0] >= 0.1 - 1e-12);
        assert_relative_eq!(vals[1], 2.0, epsilon = 1e-10);
    }

    #[test]
    fn floor_eigenvalues_keeps_good_matrix() {
        let a = array![[2.0, 0.1], [0.1, 3.0]];
        let kept = floor_eigenvalues(&a, 1e-6);
        assert_eq!(kept, a);
    }
}

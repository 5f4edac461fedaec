//! Symmetric eigendecomposition by cyclic Jacobi rotations.

use super::tensor::Tensor;
use crate::{Error, Result};

/// Eigendecomposition of a symmetric matrix: `input = U · diag(λ) · Uᵀ`.
///
/// Eigenvalues are sorted descending; eigenvectors are the columns of
/// `eigenvectors` (row-major d×d) with a deterministic sign: the
/// largest-magnitude entry of each eigenvector is positive.
#[derive(Clone, Debug)]
pub struct EigenDecomposition {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Tensor,
}

impl EigenDecomposition {
    /// Column `j` of the eigenvector matrix.
    pub fn eigenvector(&self, j: usize) -> Vec<f64> {
        let d = self.eigenvalues.len();
        (0..d).map(|i| self.eigenvectors.data()[i * d + j]).collect()
    }
}

const MAX_SWEEPS: usize = 100;
const MAX_DIM: usize = 256;

/// Eigendecomposition of a symmetric d×d matrix, d ≤ 256.
///
/// The input is symmetrized as (Σ+Σᵀ)/2 first. Rotations run until the
/// largest off-diagonal magnitude drops below `1e-12 · ‖Σ‖_F` or 100 sweeps
/// have elapsed, whichever is first; hitting the sweep cap with a residual
/// above tolerance is an error that reports the residual.
pub fn sym_eig(sigma: &Tensor) -> Result<EigenDecomposition> {
    let sh = sigma.shape();
    if sh.len() != 2 || sh[0] != sh[1] {
        return Err(Error::ShapeMismatch {
            op: "sym_eig",
            lhs: sh.to_vec(),
            rhs: sh.to_vec(),
        });
    }
    let d = sh[0];
    if d > MAX_DIM {
        return Err(Error::Invalid(format!(
            "sym_eig supports d <= {MAX_DIM}, got {d}"
        )));
    }
    if d == 0 {
        return Ok(EigenDecomposition {
            eigenvalues: vec![],
            eigenvectors: Tensor::zeros(&[0, 0]),
        });
    }

    // a: working copy, symmetrized.
    let src = sigma.data();
    let mut a = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            a[i * d + j] = 0.5 * (src[i * d + j] + src[j * d + i]);
        }
    }
    let frob = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = 1e-12 * frob;

    let mut u = vec![0.0; d * d];
    for i in 0..d {
        u[i * d + i] = 1.0;
    }

    let max_offdiag = |a: &[f64]| -> f64 {
        let mut mx: f64 = 0.0;
        for i in 0..d {
            for j in (i + 1)..d {
                mx = mx.max(a[i * d + j].abs());
            }
        }
        mx
    };

    let mut converged = frob == 0.0 || max_offdiag(&a) <= tol;
    let mut sweeps = 0;
    while !converged && sweeps < MAX_SWEEPS {
        sweeps += 1;
        for p in 0..d.saturating_sub(1) {
            for q in (p + 1)..d {
                let apq = a[p * d + q];
                if apq.abs() <= tol * 1e-3 {
                    continue;
                }
                let app = a[p * d + p];
                let aqq = a[q * d + q];
                let theta = 0.5 * (aqq - app) / apq;
                let t = if theta.abs() > 1e12 {
                    0.5 / theta
                } else {
                    let s = if theta >= 0.0 { 1.0 } else { -1.0 };
                    s / (theta.abs() + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;

                // A <- Jᵀ A J over rows/cols p and q.
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let ukp = u[k * d + p];
                    let ukq = u[k * d + q];
                    u[k * d + p] = c * ukp - s * ukq;
                    u[k * d + q] = s * ukp + c * ukq;
                }
            }
        }
        converged = max_offdiag(&a) <= tol;
    }
    if !converged {
        return Err(Error::EigNonConvergence {
            sweeps,
            residual: max_offdiag(&a),
        });
    }

    // Sort descending, fix signs.
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| a[j * d + j].partial_cmp(&a[i * d + i]).unwrap());
    let mut vals = Vec::with_capacity(d);
    let mut vecs = vec![0.0; d * d];
    for (newj, &oldj) in order.iter().enumerate() {
        vals.push(a[oldj * d + oldj]);
        let mut best = 0.0f64;
        for i in 0..d {
            let v = u[i * d + oldj];
            if v.abs() > best.abs() {
                best = v;
            }
        }
        let sign = if best < 0.0 { -1.0 } else { 1.0 };
        for i in 0..d {
            vecs[i * d + newj] = sign * u[i * d + oldj];
        }
    }
    Ok(EigenDecomposition {
        eigenvalues: vals,
        eigenvectors: Tensor::from_vec(vecs, &[d, d]),
    })
}

/// Solve `A x = b` by Gaussian elimination with partial pivoting.
pub fn solve_linear(a: &mut [Vec<f64>], b: &mut [f64]) -> Result<Vec<f64>> {
    let n = b.len();
    if a.len() != n || a.iter().any(|r| r.len() != n) {
        return Err(Error::Invalid("solve_linear: dimension mismatch".into()));
    }
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        if a[piv][col].abs() < 1e-14 {
            return Err(Error::Invalid("solve_linear: singular system".into()));
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in (col + 1)..n {
            let f = a[row][col] / a[col][col];
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in (row + 1)..n {
            acc -= a[row][k] * x[k];
        }
        x[row] = acc / a[row][row];
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn reconstruct(e: &EigenDecomposition) -> Vec<f64> {
        let d = e.eigenvalues.len();
        let u = e.eigenvectors.data();
        let mut out = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                let mut acc = 0.0;
                for k in 0..d {
                    acc += u[i * d + k] * e.eigenvalues[k] * u[j * d + k];
                }
                out[i * d + j] = acc;
            }
        }
        out
    }

    #[test]
    fn diagonal_input() {
        let e = sym_eig(&Tensor::from_vec(vec![2.0, 0.0, 0.0, 1.0], &[2, 2])).unwrap();
        assert_eq!(e.eigenvalues, vec![2.0, 1.0]);
        assert_eq!(e.eigenvectors.data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn off_diagonal_pair() {
        let e = sym_eig(&Tensor::from_vec(vec![0.0, 1.0, 1.0, 0.0], &[2, 2])).unwrap();
        assert!((e.eigenvalues[0] - 1.0).abs() < 1e-12);
        assert!((e.eigenvalues[1] + 1.0).abs() < 1e-12);
        let v0 = e.eigenvector(0);
        let v1 = e.eigenvector(1);
        let r = 1.0 / 2.0f64.sqrt();
        assert!((v0[0] - r).abs() < 1e-12 && (v0[1] - r).abs() < 1e-12);
        assert!((v1[0].abs() - r).abs() < 1e-12 && (v1[1].abs() - r).abs() < 1e-12);
        assert!(v1[0] * v1[1] < 0.0);
    }

    #[test]
    fn random_spd_reconstruction_and_orthonormality() {
        let mut rng = Rng::new(42);
        for _ in 0..20 {
            let d = 8;
            let mut m = vec![0.0; d * d];
            for x in m.iter_mut() {
                *x = rng.normal();
            }
            // SPD: MᵀM + I
            let mut spd = vec![0.0; d * d];
            for i in 0..d {
                for j in 0..d {
                    let mut acc = if i == j { 1.0 } else { 0.0 };
                    for k in 0..d {
                        acc += m[k * d + i] * m[k * d + j];
                    }
                    spd[i * d + j] = acc;
                }
            }
            let t = Tensor::from_vec(spd.clone(), &[d, d]);
            let e = sym_eig(&t).unwrap();
            let frob = spd.iter().map(|x| x * x).sum::<f64>().sqrt();
            let rec = reconstruct(&e);
            let err = rec
                .iter()
                .zip(&spd)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            assert!(err <= 1e-8 * frob, "reconstruction err {err}");
            // UᵀU = I
            let u = e.eigenvectors.data();
            for i in 0..d {
                for j in 0..d {
                    let mut acc = 0.0;
                    for k in 0..d {
                        acc += u[k * d + i] * u[k * d + j];
                    }
                    let target = if i == j { 1.0 } else { 0.0 };
                    assert!((acc - target).abs() <= 1e-8);
                }
            }
            // eigenvalue sum == trace
            let tr: f64 = (0..d).map(|i| spd[i * d + i]).sum();
            let sum: f64 = e.eigenvalues.iter().sum();
            assert!((tr - sum).abs() <= 1e-9 * frob.max(1.0));
        }
    }

    #[test]
    fn rejects_large_dims() {
        assert!(sym_eig(&Tensor::zeros(&[300, 300])).is_err());
    }
}

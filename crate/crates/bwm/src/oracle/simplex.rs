//! Kantorovich-Rubinstein dual via a dense tableau simplex.
//!
//! The dual problem — maximize E_mu[f] - E_nu[f] over 1-Lipschitz f — is a
//! linear program whose constraints `f(s) - f(s') <= rho(s, s')` all have
//! nonnegative right-hand sides, so the slack basis (f = 0) is feasible
//! and no phase-1 is needed. Free variables are split as f = g - h with
//! g, h >= 0. Bland's rule guarantees termination.
//!
//! This path shares no code with the primal transport solver; agreement
//! between the two is strong duality checked numerically.

use crate::{Error, Result};

const PIVOT_TOL: f64 = 1e-10;

/// Maximize `c·x` subject to `A x <= b`, `x >= 0`, with `b >= 0`.
/// Returns (optimal value, optimal x).
pub fn maximize_leq(c: &[f64], a: &[Vec<f64>], b: &[f64]) -> Result<(f64, Vec<f64>)> {
    let m = a.len();
    let n = c.len();
    if b.len() != m || a.iter().any(|r| r.len() != n) {
        return Err(Error::Mdp("simplex: dimension mismatch".into()));
    }
    if b.iter().any(|&x| x < 0.0) {
        return Err(Error::Mdp("simplex: negative right-hand side".into()));
    }
    // tableau: m rows of [A | I | b], objective row holds -c over x columns.
    let cols = n + m;
    let mut t = vec![vec![0.0f64; cols + 1]; m + 1];
    for i in 0..m {
        t[i][..n].copy_from_slice(&a[i]);
        t[i][n + i] = 1.0;
        t[i][cols] = b[i];
    }
    for j in 0..n {
        t[m][j] = -c[j];
    }
    let mut basis: Vec<usize> = (n..n + m).collect();

    let max_pivots = 50 * (m + n) + 1000;
    for _ in 0..max_pivots {
        // Bland: entering variable = smallest index with negative reduced cost.
        let Some(enter) = (0..cols).find(|&j| t[m][j] < -PIVOT_TOL) else {
            let mut x = vec![0.0; n];
            for i in 0..m {
                if basis[i] < n {
                    x[basis[i]] = t[i][cols];
                }
            }
            return Ok((t[m][cols], x));
        };
        // Ratio test; Bland tie-break on smallest basis variable index.
        let mut leave: Option<usize> = None;
        let mut best = f64::INFINITY;
        for i in 0..m {
            if t[i][enter] > PIVOT_TOL {
                let ratio = t[i][cols] / t[i][enter];
                let better = ratio < best - 1e-12
                    || ((ratio - best).abs() <= 1e-12
                        && leave.is_some_and(|l| basis[i] < basis[l]));
                if better {
                    best = ratio;
                    leave = Some(i);
                }
            }
        }
        let Some(leave) = leave else {
            return Err(Error::Mdp("simplex: objective unbounded".into()));
        };
        // pivot
        let piv = t[leave][enter];
        for v in t[leave].iter_mut() {
            *v /= piv;
        }
        for i in 0..=m {
            if i != leave {
                let factor = t[i][enter];
                if factor != 0.0 {
                    // split borrows to subtract the pivot row
                    let (row_ptr, pivot_row): (&mut Vec<f64>, &Vec<f64>) = unsafe {
                        let rows = t.as_mut_ptr();
                        (&mut *rows.add(i), &*rows.add(leave))
                    };
                    for (x, p) in row_ptr.iter_mut().zip(pivot_row.iter()) {
                        *x -= factor * p;
                    }
                }
            }
        }
        basis[leave] = enter;
    }
    Err(Error::Mdp("simplex: pivot limit exceeded".into()))
}

/// Check that `rho` is a (pseudo)metric: symmetric, zero diagonal,
/// nonnegative, triangle inequality within `tol`.
pub fn validate_metric(rho: &[Vec<f64>], tol: f64) -> Result<()> {
    let n = rho.len();
    if rho.iter().any(|r| r.len() != n) {
        return Err(Error::Mdp("rho must be square".into()));
    }
    for i in 0..n {
        if rho[i][i].abs() > tol {
            return Err(Error::Mdp(format!("rho[{i}][{i}] must be 0")));
        }
        for j in 0..n {
            if rho[i][j] < -tol || !rho[i][j].is_finite() {
                return Err(Error::Mdp(format!("rho[{i}][{j}] must be finite nonnegative")));
            }
            if (rho[i][j] - rho[j][i]).abs() > tol {
                return Err(Error::Mdp(format!("rho not symmetric at ({i}, {j})")));
            }
            for k in 0..n {
                if rho[i][j] > rho[i][k] + rho[k][j] + tol {
                    return Err(Error::Mdp(format!(
                        "triangle inequality violated: rho[{i}][{j}] > rho[{i}][{k}] + rho[{k}][{j}]"
                    )));
                }
            }
        }
    }
    Ok(())
}

/// 1-Wasserstein distance via the Kantorovich-Rubinstein dual:
/// sup over 1-Lipschitz f (w.r.t. `rho`) of E_mu[f] - E_nu[f].
///
/// Returns the optimum and one optimal potential f (defined up to an
/// additive constant).
pub fn kr_dual(mu: &[f64], nu: &[f64], rho: &[Vec<f64>]) -> Result<(f64, Vec<f64>)> {
    let n = mu.len();
    if nu.len() != n || rho.len() != n {
        return Err(Error::Mdp("kr_dual: dimension mismatch".into()));
    }
    validate_metric(rho, 1e-9)?;
    let su: f64 = mu.iter().sum();
    let sv: f64 = nu.iter().sum();
    if (su - 1.0).abs() > 1e-9 || (sv - 1.0).abs() > 1e-9 {
        return Err(Error::Mdp("kr_dual: distributions must sum to 1".into()));
    }

    // f_i = g_i - h_i with g, h >= 0; constraints f_i - f_j <= rho_ij (i != j).
    let mut a = Vec::with_capacity(n * n - n);
    let mut b = Vec::with_capacity(n * n - n);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let mut row = vec![0.0; 2 * n];
            row[i] = 1.0;
            row[n + i] = -1.0;
            row[j] = -1.0;
            row[n + j] = 1.0;
            a.push(row);
            b.push(rho[i][j]);
        }
    }
    let mut c = vec![0.0; 2 * n];
    for i in 0..n {
        let w = mu[i] - nu[i];
        c[i] = w;
        c[n + i] = -w;
    }
    let (value, x) = maximize_leq(&c, &a, &b)?;
    let f: Vec<f64> = (0..n).map(|i| x[i] - x[n + i]).collect();
    Ok((value, f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::transport::wasserstein1;
    use crate::rng::Rng;

    #[test]
    fn equal_distributions_have_zero_dual_value() {
        let mu = vec![0.3, 0.3, 0.4];
        let rho = vec![
            vec![0.0, 1.0, 2.0],
            vec![1.0, 0.0, 1.0],
            vec![2.0, 1.0, 0.0],
        ];
        let (v, _) = kr_dual(&mu, &mu, &rho).unwrap();
        assert!(v.abs() < 1e-10);
    }

    #[test]
    fn two_point_masses_at_distance_one() {
        let rho = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        let (v, f) = kr_dual(&[1.0, 0.0], &[0.0, 1.0], &rho).unwrap();
        assert!((v - 1.0).abs() < 1e-10);
        // optimal potential has f(1) - f(2) = 1 (binding constraint)
        assert!((f[0] - f[1] - 1.0).abs() < 1e-9, "f = {f:?}");
    }

    #[test]
    fn rejects_triangle_violations() {
        let rho = vec![
            vec![0.0, 5.0, 1.0],
            vec![5.0, 0.0, 1.0],
            vec![1.0, 1.0, 0.0],
        ];
        assert!(kr_dual(&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &rho).is_err());
    }

    fn random_metric(rng: &mut Rng, n: usize) -> Vec<Vec<f64>> {
        // metric from random points in the plane
        let pts: Vec<[f64; 2]> = (0..n)
            .map(|_| [rng.uniform(0.0, 3.0), rng.uniform(0.0, 3.0)])
            .collect();
        (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| (pts[i][0] - pts[j][0]).hypot(pts[i][1] - pts[j][1]))
                    .collect()
            })
            .collect()
    }

    fn random_dist(rng: &mut Rng, n: usize) -> Vec<f64> {
        let mut v: Vec<f64> = (0..n).map(|_| rng.uniform(0.01, 1.0)).collect();
        let s: f64 = v.iter().sum();
        v.iter_mut().for_each(|x| *x /= s);
        v
    }

    #[test]
    fn primal_equals_dual_on_random_metric_instances() {
        let mut rng = Rng::new(99);
        for trial in 0..60 {
            let n = 2 + rng.uniform_usize(10);
            let rho = random_metric(&mut rng, n);
            let mu = random_dist(&mut rng, n);
            let nu = random_dist(&mut rng, n);
            let primal = wasserstein1(&mu, &nu, &rho).unwrap().value;
            let (dual, _) = kr_dual(&mu, &nu, &rho).unwrap();
            assert!(
                (primal - dual).abs() <= 1e-6,
                "trial {trial}: primal {primal} vs dual {dual}"
            );
        }
    }
}

//! Exact optimal transport between finite distributions.
//!
//! The transportation LP is solved as a min-cost flow by successive
//! shortest augmenting paths. Shortest paths run Bellman-Ford on the
//! bipartite residual graph (backward arcs carry negative costs, which
//! Bellman-Ford handles directly). Augmenting along shortest paths keeps
//! every intermediate flow optimal for its mass, so the final plan is an
//! exact optimum of the LP up to floating-point arithmetic.

use crate::{Error, Result};

const MASS_TOL: f64 = 1e-9;

/// Value and an optimal coupling for the transport problem between `mu`
/// and `nu` under `cost` (row-major, `mu.len() × nu.len()`).
#[derive(Clone, Debug)]
pub struct TransportPlan {
    pub value: f64,
    /// `plan[i][j]`: mass moved from source i to sink j.
    pub plan: Vec<Vec<f64>>,
}

/// Exact 1-Wasserstein cost between two distributions over at most 64
/// support points each, with an explicit optimal plan.
///
/// `mu` and `nu` must each sum to 1 within 1e-9 and the cost matrix must
/// be finite and nonnegative.
pub fn wasserstein1(mu: &[f64], nu: &[f64], cost: &[Vec<f64>]) -> Result<TransportPlan> {
    let n = mu.len();
    let m = nu.len();
    if n == 0 || m == 0 || n > 64 || m > 64 {
        return Err(Error::Mdp(format!(
            "transport supports 1..=64 support points, got {n} and {m}"
        )));
    }
    if cost.len() != n || cost.iter().any(|r| r.len() != m) {
        return Err(Error::Mdp("cost matrix shape mismatch".into()));
    }
    for (i, row) in cost.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if !c.is_finite() || c < 0.0 {
                return Err(Error::Mdp(format!(
                    "cost[{i}][{j}] = {c} must be finite and nonnegative"
                )));
            }
        }
    }
    if mu.iter().any(|&x| x < -MASS_TOL) || nu.iter().any(|&x| x < -MASS_TOL) {
        return Err(Error::Mdp("negative mass".into()));
    }
    let su: f64 = mu.iter().sum();
    let sv: f64 = nu.iter().sum();
    if (su - 1.0).abs() > MASS_TOL || (sv - 1.0).abs() > MASS_TOL {
        return Err(Error::Mdp(format!(
            "mass mismatch: sum(mu) = {su}, sum(nu) = {sv}"
        )));
    }

    let mut supply: Vec<f64> = mu.iter().map(|&x| x.max(0.0)).collect();
    let mut demand: Vec<f64> = nu.iter().map(|&x| x.max(0.0)).collect();
    let mut plan = vec![vec![0.0; m]; n];

    let max_augmentations = 4 * (n + m) + 16;
    for aug in 0.. {
        if supply.iter().sum::<f64>() <= MASS_TOL {
            break;
        }
        if aug >= max_augmentations {
            return Err(Error::Mdp("transport failed to terminate".into()));
        }

        // Bellman-Ford from all sources with remaining supply.
        // dist_u over sources, dist_v over sinks.
        let mut dist_u = vec![f64::INFINITY; n];
        let mut dist_v = vec![f64::INFINITY; m];
        let mut prev_v = vec![usize::MAX; m]; // best predecessor source of sink j
        let mut prev_u = vec![usize::MAX; n]; // best predecessor sink of source i
        for i in 0..n {
            if supply[i] > MASS_TOL {
                dist_u[i] = 0.0;
            }
        }
        for _ in 0..(n + m + 1) {
            let mut changed = false;
            for i in 0..n {
                if dist_u[i].is_finite() {
                    for j in 0..m {
                        let nd = dist_u[i] + cost[i][j];
                        if nd < dist_v[j] - 1e-15 {
                            dist_v[j] = nd;
                            prev_v[j] = i;
                            changed = true;
                        }
                    }
                }
            }
            for j in 0..m {
                if dist_v[j].is_finite() {
                    for i in 0..n {
                        if plan[i][j] > MASS_TOL {
                            let nd = dist_v[j] - cost[i][j];
                            if nd < dist_u[i] - 1e-15 {
                                dist_u[i] = nd;
                                prev_u[i] = j;
                                changed = true;
                            }
                        }
                    }
                }
            }
            if !changed {
                break;
            }
        }

        // cheapest reachable sink with remaining demand
        let mut tgt = usize::MAX;
        let mut best = f64::INFINITY;
        for j in 0..m {
            if demand[j] > MASS_TOL && dist_v[j] < best {
                best = dist_v[j];
                tgt = j;
            }
        }
        if tgt == usize::MAX {
            return Err(Error::Mdp("transport: no augmenting path found".into()));
        }

        // trace the path back, collecting the bottleneck
        let mut path: Vec<(usize, usize, bool)> = Vec::new(); // (i, j, forward)
        let mut bottleneck = demand[tgt];
        let mut j = tgt;
        let src = loop {
            if path.len() > 2 * (n + m) {
                return Err(Error::Mdp("transport: predecessor chain cycled".into()));
            }
            let i = prev_v[j];
            debug_assert_ne!(i, usize::MAX, "broken predecessor chain");
            path.push((i, j, true));
            if prev_u[i] == usize::MAX {
                bottleneck = bottleneck.min(supply[i]);
                break i;
            }
            let jb = prev_u[i];
            bottleneck = bottleneck.min(plan[i][jb]);
            path.push((i, jb, false));
            j = jb;
        };

        for (i, j, forward) in &path {
            if *forward {
                plan[*i][*j] += bottleneck;
            } else {
                plan[*i][*j] -= bottleneck;
            }
        }
        supply[src] = (supply[src] - bottleneck).max(0.0);
        demand[tgt] = (demand[tgt] - bottleneck).max(0.0);
    }

    let mut value = 0.0;
    for i in 0..n {
        for j in 0..m {
            value += plan[i][j] * cost[i][j];
        }
    }
    Ok(TransportPlan { value, plan })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn identical_distributions_cost_zero_with_diagonal_plan() {
        let mu = vec![0.25, 0.25, 0.5];
        let cost = vec![
            vec![0.0, 1.0, 2.0],
            vec![1.0, 0.0, 1.0],
            vec![2.0, 1.0, 0.0],
        ];
        let p = wasserstein1(&mu, &mu, &cost).unwrap();
        assert!(p.value.abs() < 1e-12);
        for (i, row) in p.plan.iter().enumerate() {
            assert!((row[i] - mu[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn point_masses_pay_their_cost() {
        let mu = vec![1.0, 0.0];
        let nu = vec![0.0, 1.0];
        let cost = vec![vec![0.0, 3.5], vec![3.5, 0.0]];
        let p = wasserstein1(&mu, &nu, &cost).unwrap();
        assert!((p.value - 3.5).abs() < 1e-12);
    }

    #[test]
    fn half_half_to_point_mass_is_the_enumerated_plan() {
        // mu = (1/2, 1/2) on {a, b}, nu = delta_c; c(a,c)=1, c(b,c)=3 -> 2
        let mu = vec![0.5, 0.5];
        let nu = vec![1.0];
        let cost = vec![vec![1.0], vec![3.0]];
        let p = wasserstein1(&mu, &nu, &cost).unwrap();
        assert_eq!(p.value, 2.0);
    }

    #[test]
    fn mass_mismatch_is_rejected() {
        let cost = vec![vec![0.0]];
        assert!(wasserstein1(&[0.9], &[1.0], &cost).is_err());
    }

    /// Brute-force oracle on 2×2 problems: the plan has one degree of
    /// freedom, minimize over it directly.
    #[test]
    fn matches_brute_force_on_2x2() {
        let mut rng = Rng::new(17);
        for _ in 0..200 {
            let a = rng.uniform(0.05, 0.95);
            let b = rng.uniform(0.05, 0.95);
            let mu = vec![a, 1.0 - a];
            let nu = vec![b, 1.0 - b];
            let cost: Vec<Vec<f64>> = (0..2)
                .map(|_| (0..2).map(|_| rng.uniform(0.0, 5.0)).collect())
                .collect();
            // plan = [[x, a-x], [b-x, 1-a-b+x]], x in [max(0, a+b-1), min(a,b)]
            let lo = (a + b - 1.0).max(0.0);
            let hi = a.min(b);
            let val_at = |x: f64| {
                cost[0][0] * x
                    + cost[0][1] * (a - x)
                    + cost[1][0] * (b - x)
                    + cost[1][1] * (1.0 - a - b + x)
            };
            let expect = val_at(lo).min(val_at(hi));
            let got = wasserstein1(&mu, &nu, &cost).unwrap().value;
            assert!(
                (got - expect).abs() < 1e-9,
                "got {got}, expected {expect}"
            );
        }
    }

    /// Exhaustive assignment oracle on 3-point uniform marginals: optimal
    /// transport between uniform distributions of equal support size is a
    /// permutation (Birkhoff), so minimize over all 6 permutations.
    #[test]
    fn matches_assignment_oracle_on_uniform_3x3() {
        let mut rng = Rng::new(23);
        let perms: [[usize; 3]; 6] = [
            [0, 1, 2],
            [0, 2, 1],
            [1, 0, 2],
            [1, 2, 0],
            [2, 0, 1],
            [2, 1, 0],
        ];
        for _ in 0..200 {
            let u = vec![1.0 / 3.0; 3];
            let cost: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..3).map(|_| rng.uniform(0.0, 4.0)).collect())
                .collect();
            let expect = perms
                .iter()
                .map(|p| (0..3).map(|i| cost[i][p[i]]).sum::<f64>() / 3.0)
                .fold(f64::INFINITY, f64::min);
            let got = wasserstein1(&u, &u, &cost).unwrap().value;
            assert!((got - expect).abs() < 1e-9, "got {got}, expected {expect}");
        }
    }

    #[test]
    fn plan_is_feasible() {
        let mut rng = Rng::new(31);
        for _ in 0..50 {
            let n = 2 + rng.uniform_usize(6);
            let m = 2 + rng.uniform_usize(6);
            let mut mu: Vec<f64> = (0..n).map(|_| rng.uniform(0.01, 1.0)).collect();
            let s: f64 = mu.iter().sum();
            mu.iter_mut().for_each(|x| *x /= s);
            let mut nu: Vec<f64> = (0..m).map(|_| rng.uniform(0.01, 1.0)).collect();
            let s: f64 = nu.iter().sum();
            nu.iter_mut().for_each(|x| *x /= s);
            let cost: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..m).map(|_| rng.uniform(0.0, 3.0)).collect())
                .collect();
            let p = wasserstein1(&mu, &nu, &cost).unwrap();
            for i in 0..n {
                let row: f64 = p.plan[i].iter().sum();
                assert!((row - mu[i]).abs() < 1e-7);
                assert!(p.plan[i].iter().all(|&x| x >= -1e-9));
            }
            for j in 0..m {
                let col: f64 = (0..n).map(|i| p.plan[i][j]).sum();
                assert!((col - nu[j]).abs() < 1e-7);
            }
        }
    }
}

//! Recursive and one-step bisimulation metrics on finite MDPs.

use rayon::prelude::*;

use super::transport::wasserstein1;
use super::FiniteMdp;
use crate::{Error, Result};

/// A pairwise state metric with convergence bookkeeping.
#[derive(Clone, Debug)]
pub struct MetricTable {
    n: usize,
    values: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
}

impl MetricTable {
    pub fn zeros(n: usize) -> MetricTable {
        MetricTable {
            n,
            values: vec![0.0; n * n],
            residual: 0.0,
            iterations: 0,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    fn set_sym(&mut self, i: usize, j: usize, v: f64) {
        self.values[i * self.n + j] = v;
        self.values[j * self.n + i] = v;
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.n)
            .map(|i| self.values[i * self.n..(i + 1) * self.n].to_vec())
            .collect()
    }

    pub fn max_abs_difference(&self, other: &MetricTable) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

const FP_TOL: f64 = 1e-10;

/// Least fixed point of the on-policy bisimulation recursion from d0 = 0:
///
/// `d(s, s') = [reward_aware]·|r(s) - r(s')| + γ·W1^{d}(P_s, P_{s'})`
///
/// Solved by coupling-policy iteration: each sweep computes exact optimal
/// transport plans under the current metric, then solves the linear fixed
/// point induced by those plans exactly. The returned residual is a
/// certificate — one exact application of the recursion moves no entry by
/// more than it.
///
/// With the reward term dropped, the least fixed point from d0 = 0 is
/// identically zero (the first sweep certifies it: the recursion is a
/// γ-contraction whose zero-reward iteration never leaves the origin).
/// The one-step metric over a ground metric (`one_step_metric`) is the
/// quantity matching a learned one-step target.
pub fn bisim_fixed_point(mdp: &FiniteMdp, reward_aware: bool) -> Result<MetricTable> {
    mdp.validate()?;
    let n = mdp.n;
    let rewards = if reward_aware {
        Some(
            mdp.rewards
                .as_ref()
                .ok_or_else(|| Error::Mdp("reward-aware metric needs rewards".into()))?,
        )
    } else {
        None
    };
    let max_sweeps = (10.0 / (1.0 - mdp.gamma)).ceil() as usize;
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
        .collect();
    let np = pairs.len();
    let pair_idx = |i: usize, j: usize| -> usize {
        // index into `pairs` for i < j
        (2 * n - i - 1) * i / 2 + (j - i - 1)
    };
    let r_pair: Vec<f64> = pairs
        .iter()
        .map(|&(i, j)| rewards.map_or(0.0, |r| (r[i] - r[j]).abs()))
        .collect();

    let mut current = MetricTable::zeros(n);
    if np == 0 {
        return Ok(current);
    }
    for sweep in 1..=max_sweeps {
        let cost = current.rows();
        let solved: Vec<((usize, usize), super::transport::TransportPlan)> = pairs
            .par_iter()
            .map(|&(i, j)| {
                let p = wasserstein1(&mdp.transitions[i], &mdp.transitions[j], &cost)?;
                Ok::<_, Error>(((i, j), p))
            })
            .collect::<Result<_>>()?;

        // certificate: one exact application of the recursion
        let mut residual = 0.0f64;
        for (k, ((i, j), p)) in solved.iter().enumerate() {
            let bellman = r_pair[k] + mdp.gamma * p.value;
            residual = residual.max((bellman - current.get(*i, *j)).abs());
        }
        current.iterations = sweep;
        current.residual = residual;
        if residual < FP_TOL {
            return Ok(current);
        }

        if np <= 512 {
            // evaluation: solve (I - γ·M_plans) d = r over pair variables
            let mut a = vec![vec![0.0; np]; np];
            let mut b = r_pair.clone();
            for (row, a_row) in a.iter_mut().enumerate() {
                a_row[row] = 1.0;
                let plan = &solved[row].1.plan;
                for (u, plan_row) in plan.iter().enumerate() {
                    for (v, &w) in plan_row.iter().enumerate() {
                        if u != v && w != 0.0 {
                            let q = pair_idx(u.min(v), u.max(v));
                            a_row[q] -= mdp.gamma * w;
                        }
                    }
                }
            }
            let x = crate::autodiff::solve_linear(&mut a, &mut b)?;
            let mut next = MetricTable::zeros(n);
            for (k, &(i, j)) in pairs.iter().enumerate() {
                next.set_sym(i, j, x[k].max(0.0));
            }
            next.iterations = sweep;
            next.residual = current.residual;
            current = next;
        } else {
            // large instances fall back to plain value iteration
            let mut next = MetricTable::zeros(n);
            for (k, ((i, j), p)) in solved.iter().enumerate() {
                next.set_sym(*i, *j, r_pair[k] + mdp.gamma * p.value);
            }
            next.iterations = sweep;
            next.residual = current.residual;
            current = next;
        }
    }
    Err(Error::Mdp(format!(
        "bisimulation iteration did not converge: residual {:.3e} after {} sweeps",
        current.residual, current.iterations
    )))
}

/// One application of the dynamics-similarity operator under a fixed
/// ground metric: `d(s, s') = γ·W1^rho(P_s, P_{s'})`. No iteration.
pub fn one_step_metric(mdp: &FiniteMdp, rho: &[Vec<f64>]) -> Result<MetricTable> {
    mdp.validate()?;
    super::simplex::validate_metric(rho, 1e-9)?;
    let n = mdp.n;
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
        .collect();
    let computed: Vec<((usize, usize), f64)> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let w1 = wasserstein1(&mdp.transitions[i], &mdp.transitions[j], rho)?.value;
            Ok::<_, Error>(((i, j), mdp.gamma * w1))
        })
        .collect::<Result<_>>()?;
    let mut table = MetricTable::zeros(n);
    for ((i, j), v) in computed {
        table.set_sym(i, j, v);
    }
    table.iterations = 1;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn reward_free_least_fixed_point_is_zero() {
        let mdp = FiniteMdp::random(&mut Rng::new(4), 6, 0.9, true);
        let t = bisim_fixed_point(&mdp, false).unwrap();
        assert_eq!(t.iterations, 1);
        assert_eq!(t.residual, 0.0);
        for i in 0..6 {
            for j in 0..6 {
                assert_eq!(t.get(i, j), 0.0);
            }
        }
    }

    #[test]
    fn two_absorbing_states_have_closed_form_distance() {
        // d = 1 + γ d  =>  d = 1/(1-γ) = 10 at γ = 0.9
        let mdp = FiniteMdp {
            n: 2,
            gamma: 0.9,
            transitions: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            rewards: Some(vec![1.0, 0.0]),
            embeddings: None,
            rho: None,
        };
        let t = bisim_fixed_point(&mdp, true).unwrap();
        assert!((t.get(0, 1) - 10.0).abs() <= 1e-9, "d = {}", t.get(0, 1));
    }

    #[test]
    fn bisimilar_states_have_zero_distance() {
        // identical rows and rewards
        let mdp = FiniteMdp {
            n: 3,
            gamma: 0.9,
            transitions: vec![
                vec![0.2, 0.3, 0.5],
                vec![0.2, 0.3, 0.5],
                vec![1.0, 0.0, 0.0],
            ],
            rewards: Some(vec![0.7, 0.7, 0.1]),
            embeddings: None,
            rho: None,
        };
        let t = bisim_fixed_point(&mdp, true).unwrap();
        assert!(t.get(0, 1).abs() <= 1e-12);
    }

    #[test]
    fn metric_axioms_hold_on_random_mdps() {
        let mut rng = Rng::new(11);
        for _ in 0..5 {
            let mdp = FiniteMdp::random(&mut rng, 6, 0.85, true);
            let t = bisim_fixed_point(&mdp, true).unwrap();
            for i in 0..6 {
                assert_eq!(t.get(i, i), 0.0);
                for j in 0..6 {
                    assert_eq!(t.get(i, j), t.get(j, i));
                    assert!(t.get(i, j).is_finite());
                    for k in 0..6 {
                        assert!(
                            t.get(i, j) <= t.get(i, k) + t.get(k, j) + 1e-9,
                            "triangle violated"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn reward_aware_dominates_reward_free() {
        let mut rng = Rng::new(13);
        let mdp = FiniteMdp::random(&mut rng, 5, 0.9, true);
        let aware = bisim_fixed_point(&mdp, true).unwrap();
        let free = bisim_fixed_point(&mdp, false).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                assert!(aware.get(i, j) >= free.get(i, j) - 1e-12);
            }
        }
    }

    #[test]
    fn one_step_metric_on_deterministic_transitions() {
        // s0 -> u (state 2), s1 -> v (state 3); d = γ·rho(u, v).
        // rho from points on a line at 0, 1, 2, 2.8.
        let pts = [0.0, 1.0, 2.0, 2.8];
        let rho: Vec<Vec<f64>> = (0..4)
            .map(|i| (0..4).map(|j| (pts[i] - pts[j]) as f64).map(f64::abs).collect())
            .collect();
        let mdp = FiniteMdp {
            n: 4,
            gamma: 0.9,
            transitions: vec![
                vec![0.0, 0.0, 1.0, 0.0],
                vec![0.0, 0.0, 0.0, 1.0],
                vec![0.0, 0.0, 1.0, 0.0],
                vec![0.0, 0.0, 0.0, 1.0],
            ],
            rewards: None,
            embeddings: None,
            rho: Some(rho.clone()),
        };
        let t = one_step_metric(&mdp, &rho).unwrap();
        assert!((t.get(0, 1) - 0.9 * 0.8).abs() < 1e-12);
        assert_eq!(t.get(0, 2), 0.0, "identical rows give zero");
    }

    /// Enumeration oracle: on rows with at most 3-point support, enumerate
    /// couplings over a fine simplex grid and compare.
    #[test]
    fn one_step_matches_enumeration_on_small_supports() {
        let mut rng = Rng::new(21);
        for _ in 0..20 {
            // two rows supported on 3 points
            let draw_row = |rng: &mut Rng| {
                let mut row = vec![0.0; 6];
                let a = rng.uniform(0.05, 0.9);
                let b = rng.uniform(0.05, 1.0 - a);
                let idx: Vec<usize> = {
                    let mut v: Vec<usize> = (0..6).collect();
                    rng.shuffle(&mut v);
                    v.truncate(3);
                    v
                };
                row[idx[0]] = a;
                row[idx[1]] = b;
                row[idx[2]] = 1.0 - a - b;
                row
            };
            let mu = draw_row(&mut rng);
            let nu = draw_row(&mut rng);
            // metric from points on a line
            let pts: Vec<f64> = (0..6).map(|_| rng.uniform(0.0, 5.0)).collect();
            let rho: Vec<Vec<f64>> = (0..6)
                .map(|i| (0..6).map(|j| (pts[i] - pts[j]).abs()).collect())
                .collect();
            let exact = wasserstein1(&mu, &nu, &rho).unwrap().value;
            // brute force over a grid of couplings via greedy refinement:
            // sample many random feasible plans by north-west style fills
            // over permuted supports; the minimum over all permutation
            // fills of a 3x3 transport equals the LP optimum.
            let supp_mu: Vec<usize> = (0..6).filter(|&i| mu[i] > 0.0).collect();
            let supp_nu: Vec<usize> = (0..6).filter(|&j| nu[j] > 0.0).collect();
            let mut best = f64::INFINITY;
            let perms3 = [
                [0, 1, 2],
                [0, 2, 1],
                [1, 0, 2],
                [1, 2, 0],
                [2, 0, 1],
                [2, 1, 0],
            ];
            for pa in &perms3 {
                for pb in &perms3 {
                    // greedy north-west corner fill in permuted order
                    let mut su: Vec<f64> = pa.iter().map(|&i| mu[supp_mu[i]]).collect();
                    let mut sv: Vec<f64> = pb.iter().map(|&j| nu[supp_nu[j]]).collect();
                    let mut cost = 0.0;
                    let (mut i, mut j) = (0, 0);
                    while i < 3 && j < 3 {
                        let m = su[i].min(sv[j]);
                        cost += m * rho[supp_mu[pa[i]]][supp_nu[pb[j]]];
                        su[i] -= m;
                        sv[j] -= m;
                        if su[i] <= 1e-12 {
                            i += 1;
                        } else {
                            j += 1;
                        }
                    }
                    best = best.min(cost);
                }
            }
            // every northwest fill over permutations visits every basic
            // feasible solution of the 3x3 transportation polytope
            assert!(
                exact <= best + 1e-9,
                "LP value {exact} exceeds an enumerated plan {best}"
            );
            assert!(
                best <= exact + 1e-9,
                "enumeration {best} beat the LP {exact}"
            );
        }
    }
}

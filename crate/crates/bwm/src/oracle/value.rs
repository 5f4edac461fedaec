//! Exact cost-to-go and the generalization-bound ingredient checks.

use serde::Serialize;

use super::metrics::one_step_metric;
use super::transport::wasserstein1;
use super::FiniteMdp;
use crate::{Error, Result};

/// Goal-reaching cost c(w) = ||w - w_g||².
fn goal_cost(w: &[f64], goal: &[f64]) -> f64 {
    w.iter().zip(goal).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn embedding_rho(emb: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = emb.len();
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    emb[i]
                        .iter()
                        .zip(&emb[j])
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt()
                })
                .collect()
        })
        .collect()
}

/// Exact T-step on-policy cost-to-go by backward dynamic programming:
/// `J_0 = 0`, `J_t(s) = c(h(s)) + γ·E_{s'~P_s}[J_{t-1}(s')]`.
pub fn cost_to_go(mdp: &FiniteMdp, goal: &[f64], t_horizon: usize) -> Result<Vec<Vec<f64>>> {
    mdp.validate()?;
    let emb = mdp
        .embeddings
        .as_ref()
        .ok_or_else(|| Error::Mdp("cost_to_go needs an embedding table".into()))?;
    if emb.iter().any(|e| e.len() != goal.len()) {
        return Err(Error::Mdp("goal embedding dimension mismatch".into()));
    }
    let n = mdp.n;
    let costs: Vec<f64> = emb.iter().map(|w| goal_cost(w, goal)).collect();
    let mut tables = Vec::with_capacity(t_horizon + 1);
    tables.push(vec![0.0; n]);
    for _ in 1..=t_horizon {
        let prev = tables.last().unwrap();
        let next: Vec<f64> = (0..n)
            .map(|s| {
                let e: f64 = mdp.transitions[s]
                    .iter()
                    .zip(prev)
                    .map(|(p, j)| p * j)
                    .sum();
                costs[s] + mdp.gamma * e
            })
            .collect();
        tables.push(next);
    }
    Ok(tables)
}

/// Numerical report on the ingredients of the reward-free planning
/// generalization bound.
#[derive(Clone, Debug, Serialize)]
pub struct TheoremReport {
    /// Were all embeddings (and the goal) inside the H_w ball?
    pub premise_ok: bool,
    pub premise_violation: f64,
    /// (a) max over pairs of |Δc| − 4·H_w·‖Δw‖ (≤ 0 means the
    /// cost-Lipschitz inequality holds).
    pub cost_lipschitz_violation: f64,
    /// (b) max over horizons and pairs of
    /// |E_P J − E_P' J| − L̂·W1^ρ(P, P') (≤ tolerance means the
    /// Kantorovich-Rubinstein induction step holds).
    pub induction_violation: f64,
    /// (c) max |ΔJ_T| over pairs whose one-step metric distance is zero
    /// (exactly zero for duplicate-state constructions).
    pub duplicate_gap: f64,
    pub n_zero_distance_pairs: usize,
    /// (d) fraction of pairs satisfying |ΔJ_T| ≤ 8·H_w·T·d_onestep + tol,
    /// reported as a diagnostic (the bound's hypothesis is an ε-isometry
    /// of the recursive metric, which arbitrary inputs need not satisfy).
    pub bound_satisfaction_ratio: f64,
    pub n_pairs: usize,
    pub horizon: usize,
    pub h_w: f64,
}

/// Evaluate the bound's ingredients on a concrete MDP with embeddings.
///
/// A violated ball premise is reported as a premise failure (the other
/// checks still run, for diagnosis, against the supplied `h_w`).
pub fn check_theorem_ingredients(
    mdp: &FiniteMdp,
    goal: &[f64],
    t_horizon: usize,
    h_w: f64,
) -> Result<TheoremReport> {
    let emb = mdp
        .embeddings
        .as_ref()
        .ok_or_else(|| Error::Mdp("theorem check needs an embedding table".into()))?;
    let n = mdp.n;
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut premise_violation = norm(goal) - h_w;
    for e in emb {
        premise_violation = premise_violation.max(norm(e) - h_w);
    }
    let premise_ok = premise_violation <= 1e-12;

    let j_tables = cost_to_go(mdp, goal, t_horizon)?;
    let rho = embedding_rho(emb);

    // (a) cost Lipschitz
    let costs: Vec<f64> = emb.iter().map(|w| goal_cost(w, goal)).collect();
    let mut cost_lip_viol = f64::NEG_INFINITY;
    for i in 0..n {
        for j in (i + 1)..n {
            cost_lip_viol = cost_lip_viol.max((costs[i] - costs[j]).abs() - 4.0 * h_w * rho[i][j]);
        }
    }

    // (b) induction step at every horizon 1..=T using the measured
    // Lipschitz constant of J_{t-1} w.r.t. rho.
    let mut induction_viol = f64::NEG_INFINITY;
    for t in 1..=t_horizon {
        let prev = &j_tables[t - 1];
        let mut lhat = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                if rho[i][j] > 1e-12 {
                    lhat = lhat.max((prev[i] - prev[j]).abs() / rho[i][j]);
                }
            }
        }
        for i in 0..n {
            for j in (i + 1)..n {
                let e_diff: f64 = (0..n)
                    .map(|s| (mdp.transitions[i][s] - mdp.transitions[j][s]) * prev[s])
                    .sum();
                let w1 = wasserstein1(&mdp.transitions[i], &mdp.transitions[j], &rho)?.value;
                induction_viol = induction_viol.max(e_diff.abs() - lhat * w1);
            }
        }
    }

    // (c) + (d) against the one-step metric
    let one_step = one_step_metric(mdp, &rho)?;
    let jt = &j_tables[t_horizon];
    let mut duplicate_gap = 0.0f64;
    let mut n_zero = 0usize;
    let mut satisfied = 0usize;
    let mut n_pairs = 0usize;
    for i in 0..n {
        for j in (i + 1)..n {
            n_pairs += 1;
            let d = one_step.get(i, j);
            let gap = (jt[i] - jt[j]).abs();
            if d <= 1e-14 && rho[i][j] <= 1e-14 {
                n_zero += 1;
                duplicate_gap = duplicate_gap.max(gap);
            }
            if gap <= 8.0 * h_w * t_horizon as f64 * d + 1e-9 {
                satisfied += 1;
            }
        }
    }

    Ok(TheoremReport {
        premise_ok,
        premise_violation: premise_violation.max(0.0),
        cost_lipschitz_violation: if n > 1 { cost_lip_viol } else { 0.0 },
        induction_violation: if t_horizon > 0 && n > 1 {
            induction_viol
        } else {
            0.0
        },
        duplicate_gap,
        n_zero_distance_pairs: n_zero,
        bound_satisfaction_ratio: if n_pairs > 0 {
            satisfied as f64 / n_pairs as f64
        } else {
            1.0
        },
        n_pairs,
        horizon: t_horizon,
        h_w,
    })
}

/// Clone every state of an MDP: the copy keeps each state's embedding and
/// (clone-relabeled) transition row. Clone pairs are exactly bisimilar, so
/// their one-step metric distance and cost-to-go gaps must both be zero.
pub fn duplicate_states(mdp: &FiniteMdp) -> Result<FiniteMdp> {
    let emb = mdp
        .embeddings
        .as_ref()
        .ok_or_else(|| Error::Mdp("duplication needs embeddings".into()))?;
    let n = mdp.n;
    // state s maps to 2s (original) and 2s+1 (clone); each original
    // probability p(s -> u) splits evenly over u's two copies.
    let mut transitions = Vec::with_capacity(2 * n);
    let mut embeddings = Vec::with_capacity(2 * n);
    for s in 0..n {
        let mut row = vec![0.0; 2 * n];
        for u in 0..n {
            row[2 * u] = mdp.transitions[s][u] / 2.0;
            row[2 * u + 1] = mdp.transitions[s][u] / 2.0;
        }
        transitions.push(row.clone());
        transitions.push(row);
        embeddings.push(emb[s].clone());
        embeddings.push(emb[s].clone());
    }
    Ok(FiniteMdp {
        n: 2 * n,
        gamma: mdp.gamma,
        transitions,
        rewards: None,
        embeddings: Some(embeddings),
        rho: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn mdp_with_embeddings(seed: u64, n: usize, d: usize, scale: f64) -> FiniteMdp {
        let mut rng = Rng::new(seed);
        let mut mdp = FiniteMdp::random(&mut rng, n, 0.9, false);
        mdp.embeddings = Some(
            (0..n)
                .map(|_| (0..d).map(|_| rng.uniform(-scale, scale)).collect())
                .collect(),
        );
        mdp
    }

    #[test]
    fn zero_horizon_is_zero_and_one_step_is_the_cost() {
        let mdp = mdp_with_embeddings(3, 5, 3, 0.5);
        let goal = vec![0.1, -0.2, 0.3];
        let tables = cost_to_go(&mdp, &goal, 1).unwrap();
        assert!(tables[0].iter().all(|&x| x == 0.0));
        let emb = mdp.embeddings.as_ref().unwrap();
        for s in 0..5 {
            let c = goal_cost(&emb[s], &goal);
            assert!((tables[1][s] - c).abs() < 1e-15);
        }
    }

    #[test]
    fn recursion_is_exactly_additive() {
        let mdp = mdp_with_embeddings(5, 6, 4, 0.8);
        let goal = vec![0.0; 4];
        let tables = cost_to_go(&mdp, &goal, 6).unwrap();
        let emb = mdp.embeddings.as_ref().unwrap();
        for t in 1..=6 {
            for s in 0..6 {
                let e: f64 = mdp.transitions[s]
                    .iter()
                    .zip(&tables[t - 1])
                    .map(|(p, j)| p * j)
                    .sum();
                let c = goal_cost(&emb[s], &goal);
                assert!((tables[t][s] - mdp.gamma * e - c).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn absorbing_goal_state_has_zero_cost_forever() {
        let goal = vec![0.5, -0.5];
        let mdp = FiniteMdp {
            n: 2,
            gamma: 0.9,
            transitions: vec![vec![1.0, 0.0], vec![0.5, 0.5]],
            rewards: None,
            embeddings: Some(vec![goal.clone(), vec![1.0, 1.0]]),
            rho: None,
        };
        let tables = cost_to_go(&mdp, &goal, 8).unwrap();
        for t in 0..=8 {
            assert_eq!(tables[t][0], 0.0);
        }
    }

    #[test]
    fn theorem_ingredients_hold_on_random_mdps_in_ball() {
        let mut worst_a = f64::NEG_INFINITY;
        let mut worst_b = f64::NEG_INFINITY;
        for seed in 0..20 {
            let mdp = mdp_with_embeddings(100 + seed, 6, 3, 0.6);
            let goal = vec![0.2, 0.1, -0.3];
            let h_w = 0.6 * 3.0f64.sqrt().max(goal.iter().map(|x| x * x).sum::<f64>().sqrt());
            let rep = check_theorem_ingredients(&mdp, &goal, 4, h_w.max(1.0)).unwrap();
            assert!(rep.premise_ok);
            worst_a = worst_a.max(rep.cost_lipschitz_violation);
            worst_b = worst_b.max(rep.induction_violation);
        }
        assert!(worst_a <= 0.0, "cost-Lipschitz violated by {worst_a}");
        assert!(worst_b <= 1e-9, "induction step violated by {worst_b}");
    }

    #[test]
    fn duplicate_states_give_exactly_zero_gaps() {
        let mdp = mdp_with_embeddings(7, 4, 3, 0.5);
        let doubled = duplicate_states(&mdp).unwrap();
        let goal = vec![0.1, 0.0, -0.1];
        let rep = check_theorem_ingredients(&doubled, &goal, 5, 2.0).unwrap();
        assert!(rep.n_zero_distance_pairs >= 4, "clone pairs not detected");
        assert_eq!(rep.duplicate_gap, 0.0, "clone pairs must have ΔJ = 0");
        // and T=0 trivially gives both sides zero
        let rep0 = check_theorem_ingredients(&doubled, &goal, 0, 2.0).unwrap();
        assert_eq!(rep0.duplicate_gap, 0.0);
    }

    #[test]
    fn premise_violation_is_reported_not_asserted() {
        let mdp = mdp_with_embeddings(9, 4, 2, 5.0);
        let rep = check_theorem_ingredients(&mdp, &[0.0, 0.0], 3, 0.1).unwrap();
        assert!(!rep.premise_ok);
        assert!(rep.premise_violation > 0.0);
    }
}

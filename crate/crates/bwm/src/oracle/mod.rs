//! Exact computations on small finite MDPs: 1-Wasserstein distances
//! (primal transport LP and Kantorovich-Rubinstein dual), recursive and
//! one-step bisimulation metrics, exact T-step cost-to-go, and numerical
//! checks of the reward-free planning generalization bound's ingredients.
//!
//! Everything here is an oracle: small, exact, and independent of the
//! learned-model code paths, so learned quantities have precise reference
//! values to be compared against.

mod metrics;
mod simplex;
mod transport;
mod value;

pub use metrics::{bisim_fixed_point, one_step_metric, MetricTable};
pub use simplex::{kr_dual, maximize_leq, validate_metric};
pub use transport::{wasserstein1, TransportPlan};
pub use value::{check_theorem_ingredients, cost_to_go, duplicate_states, TheoremReport};

use crate::rng::Rng;
use crate::{Error, Result};

const ROW_SUM_TOL: f64 = 1e-12;

/// An explicit finite MDP under a fixed policy: row-stochastic transition
/// table, optional per-state rewards, optional state embeddings, optional
/// ground metric.
#[derive(Clone, Debug)]
pub struct FiniteMdp {
    pub n: usize,
    pub gamma: f64,
    pub transitions: Vec<Vec<f64>>,
    pub rewards: Option<Vec<f64>>,
    pub embeddings: Option<Vec<Vec<f64>>>,
    pub rho: Option<Vec<Vec<f64>>>,
}

impl FiniteMdp {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.transitions.len() != self.n {
            return Err(Error::Mdp("transition table must have n rows".into()));
        }
        if !(0.0 < self.gamma && self.gamma < 1.0) {
            return Err(Error::Mdp(format!("gamma = {} must lie in (0,1)", self.gamma)));
        }
        for (i, row) in self.transitions.iter().enumerate() {
            if row.len() != self.n {
                return Err(Error::Mdp(format!("row {i} must have n entries")));
            }
            if row.iter().any(|&p| p < -ROW_SUM_TOL || !p.is_finite()) {
                return Err(Error::Mdp(format!("row {i} has negative or non-finite mass")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::Mdp(format!("row {i} sums to {s}, expected 1")));
            }
        }
        if let Some(r) = &self.rewards {
            if r.len() != self.n || r.iter().any(|x| !x.is_finite()) {
                return Err(Error::Mdp("rewards must be n finite values".into()));
            }
        }
        if let Some(e) = &self.embeddings {
            if e.len() != self.n {
                return Err(Error::Mdp("embeddings must have n rows".into()));
            }
            let d = e.first().map_or(0, |r| r.len());
            if e.iter().any(|r| r.len() != d || r.iter().any(|x| !x.is_finite())) {
                return Err(Error::Mdp("embedding rows must share a finite dimension".into()));
            }
        }
        if let Some(rho) = &self.rho {
            validate_metric(rho, 1e-9)?;
        }
        Ok(())
    }

    /// The ground metric: explicit `rho` when supplied, otherwise distances
    /// between state embeddings.
    pub fn ground_metric(&self) -> Result<Vec<Vec<f64>>> {
        if let Some(rho) = &self.rho {
            return Ok(rho.clone());
        }
        let emb = self
            .embeddings
            .as_ref()
            .ok_or_else(|| Error::Mdp("need either a rho block or an embeddings block".into()))?;
        Ok((0..self.n)
            .map(|i| {
                (0..self.n)
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
            .collect())
    }

    /// Random row-stochastic MDP for tests and suites.
    pub fn random(rng: &mut Rng, n: usize, gamma: f64, with_rewards: bool) -> FiniteMdp {
        let transitions = (0..n)
            .map(|_| {
                let mut row: Vec<f64> = (0..n).map(|_| rng.uniform(0.0, 1.0)).collect();
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|x| *x /= s);
                // fold rounding dust into the largest entry so rows sum to 1 exactly
                let s2: f64 = row.iter().sum();
                let imax = (0..n).fold(0, |a, i| if row[i] > row[a] { i } else { a });
                row[imax] += 1.0 - s2;
                row
            })
            .collect();
        FiniteMdp {
            n,
            gamma,
            transitions,
            rewards: with_rewards.then(|| (0..n).map(|_| rng.uniform(0.0, 1.0)).collect()),
            embeddings: None,
            rho: None,
        }
    }

    /// Parse the UTF-8 oracle input format:
    ///
    /// ```text
    /// # comments allowed anywhere
    /// 3            # n
    /// 0.9          # gamma
    /// 0.5 0.5 0.0  # n transition rows
    /// 0.0 1.0 0.0
    /// 0.0 0.0 1.0
    /// rewards      # optional block
    /// 1.0 0.0 0.5
    /// embeddings   # optional block, n rows
    /// 0.0 0.1
    /// 1.0 0.0
    /// 0.5 0.5
    /// rho          # optional block, n rows
    /// 0.0 1.0 2.0
    /// 1.0 0.0 1.0
    /// 2.0 1.0 0.0
    /// ```
    pub fn parse(text: &str) -> Result<FiniteMdp> {
        let mut lines = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or("").trim())
            .filter(|l| !l.is_empty());
        let mut next_line = |what: &str| -> Result<String> {
            lines
                .next()
                .map(str::to_string)
                .ok_or_else(|| Error::Mdp(format!("unexpected end of file, expected {what}")))
        };
        let n: usize = next_line("n")?
            .parse()
            .map_err(|_| Error::Mdp("first value must be n".into()))?;
        let gamma: f64 = next_line("gamma")?
            .parse()
            .map_err(|_| Error::Mdp("second value must be gamma".into()))?;
        let parse_row = |line: &str, what: &str| -> Result<Vec<f64>> {
            line.split_whitespace()
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|_| Error::Mdp(format!("bad number `{t}` in {what}")))
                })
                .collect()
        };
        let mut transitions = Vec::with_capacity(n);
        for i in 0..n {
            transitions.push(parse_row(&next_line("transition row")?, &format!("row {i}"))?);
        }
        let mut mdp = FiniteMdp {
            n,
            gamma,
            transitions,
            rewards: None,
            embeddings: None,
            rho: None,
        };
        loop {
            let Ok(block) = next_line("") else { break };
            match block.as_str() {
                "rewards" => {
                    mdp.rewards = Some(parse_row(&next_line("rewards line")?, "rewards")?);
                }
                "embeddings" => {
                    let mut rows = Vec::with_capacity(n);
                    for i in 0..n {
                        rows.push(parse_row(
                            &next_line("embedding row")?,
                            &format!("embedding row {i}"),
                        )?);
                    }
                    mdp.embeddings = Some(rows);
                }
                "rho" => {
                    let mut rows = Vec::with_capacity(n);
                    for i in 0..n {
                        rows.push(parse_row(&next_line("rho row")?, &format!("rho row {i}"))?);
                    }
                    mdp.rho = Some(rows);
                }
                other => {
                    return Err(Error::Mdp(format!("unknown block `{other}`")));
                }
            }
        }
        mdp.validate()?;
        Ok(mdp)
    }

    pub fn load(path: &std::path::Path) -> Result<FiniteMdp> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

//! Goal-conditioned model-predictive control with cross-entropy-method
//! action optimization.
//!
//! Planning minimizes the terminal cost `‖ŵ_T - w_g‖²` over flattened
//! latent grids. Candidate sampling is seeded per (episode, step,
//! iteration, candidate), so enlarging the population keeps earlier
//! candidates identical, and the whole evaluation table is a pure
//! function of its seed. The current sampling mean is always evaluated as
//! candidate 0, so a zero-cost mean is found exactly.

use rayon::prelude::*;

use crate::autodiff::Tensor;
use crate::config::RunConfig;
use crate::encoders::{BisimEncoder, FrozenEncoder};
use crate::maze::{
    proprio, render, step, success, EnvState, MazeSpec, Scenario, ScenarioTag,
};
use crate::rng::Rng;
use crate::transition::TransitionModel;
use crate::{Error, Result};

/// Latent dynamics the planner can roll out. Implementations must be pure
/// and safe to call from parallel candidate evaluations.
pub trait LatentDynamics: Sync {
    /// (n_patches, d) of the latent grids.
    fn latent_shape(&self) -> (usize, usize);

    /// Terminal latents for a batch of action sequences from a shared
    /// start: returns `[P]` tensors of shape `[n_patches, d]`.
    fn terminal_latents(
        &self,
        w0: &Tensor,
        proprio0: [f64; 4],
        action_seqs: &[Vec<[f64; 2]>],
    ) -> Result<Vec<Tensor>>;

    /// Full rollout of one sequence.
    fn rollout_sequence(
        &self,
        w0: &Tensor,
        proprio0: [f64; 4],
        actions: &[[f64; 2]],
    ) -> Result<Vec<Tensor>>;
}

impl LatentDynamics for TransitionModel {
    fn latent_shape(&self) -> (usize, usize) {
        (self.cfg.n_patches, self.cfg.d_latent)
    }

    fn terminal_latents(
        &self,
        w0: &Tensor,
        proprio0: [f64; 4],
        action_seqs: &[Vec<[f64; 2]>],
    ) -> Result<Vec<Tensor>> {
        let (np, d) = self.latent_shape();
        let p = action_seqs.len();
        // chunk candidates so the two worker threads share the batch
        let chunk = p.div_ceil(rayon::current_num_threads().max(1)).max(1);
        let chunks: Vec<&[Vec<[f64; 2]>]> = action_seqs.chunks(chunk).collect();
        let per_chunk: Vec<Vec<Tensor>> = chunks
            .par_iter()
            .map(|seqs| {
                let steps = self.rollout_batch(w0, proprio0, seqs)?;
                let terminal = steps.last().expect("nonempty rollout");
                let mut out = Vec::with_capacity(seqs.len());
                for i in 0..seqs.len() {
                    out.push(Tensor::from_vec(
                        terminal.data()[i * np * d..(i + 1) * np * d].to_vec(),
                        &[np, d],
                    ));
                }
                Ok::<_, Error>(out)
            })
            .collect::<Result<_>>()?;
        Ok(per_chunk.into_iter().flatten().collect())
    }

    fn rollout_sequence(
        &self,
        w0: &Tensor,
        proprio0: [f64; 4],
        actions: &[[f64; 2]],
    ) -> Result<Vec<Tensor>> {
        self.rollout(w0, proprio0, actions)
    }
}

/// Cross-entropy-method hyperparameters.
#[derive(Clone, Debug)]
pub struct CemConfig {
    pub population: usize,
    pub elites: usize,
    pub iterations: usize,
    pub horizon: usize,
    pub init_std: f64,
    pub std_floor: f64,
    pub warm_start: bool,
}

impl Default for CemConfig {
    fn default() -> CemConfig {
        CemConfig {
            population: 300,
            elites: 30,
            iterations: 10,
            horizon: 10,
            init_std: 0.5,
            std_floor: 0.05,
            warm_start: true,
        }
    }
}

impl CemConfig {
    pub fn from_run(cfg: &RunConfig) -> CemConfig {
        CemConfig {
            population: cfg.cem_population,
            elites: cfg.cem_elites,
            iterations: cfg.cem_iters,
            horizon: cfg.plan_horizon,
            init_std: cfg.cem_init_std,
            std_floor: cfg.cem_std_floor,
            warm_start: cfg.cem_warm_start,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.elites == 0 || self.elites > self.population {
            return Err(Error::Planning(format!(
                "elites {} must lie in [1, population {}]",
                self.elites, self.population
            )));
        }
        if self.horizon == 0 || self.iterations == 0 {
            return Err(Error::Planning("horizon and iterations must be positive".into()));
        }
        Ok(())
    }
}

/// Outcome of one planning call.
#[derive(Clone, Debug)]
pub struct PlanResult {
    pub actions: Vec<[f64; 2]>,
    pub rollout: Vec<Tensor>,
    pub terminal_cost: f64,
    /// Mean elite cost per iteration.
    pub elite_mean_costs: Vec<f64>,
    /// Best-ever cost after each iteration; non-increasing.
    pub best_costs: Vec<f64>,
    /// Filled in by the MPC loop after execution.
    pub success: Option<bool>,
}

fn flat_sq_distance(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

/// CEM optimization of an action sequence against the terminal latent
/// distance to `w_goal`. `seed` fixes the candidate noise; `warm_mean`
/// initializes the sampling mean (receding-horizon reuse).
pub fn plan_cem(
    dynamics: &dyn LatentDynamics,
    w0: &Tensor,
    proprio0: [f64; 4],
    w_goal: &Tensor,
    cfg: &CemConfig,
    seed: u64,
    warm_mean: Option<&[[f64; 2]]>,
) -> Result<PlanResult> {
    cfg.validate()?;
    let t = cfg.horizon;
    let mut mean: Vec<[f64; 2]> = match warm_mean {
        Some(m) if m.len() == t => m.to_vec(),
        _ => vec![[0.0, 0.0]; t],
    };
    let mut std = vec![[cfg.init_std, cfg.init_std]; t];
    let root = Rng::new(seed);

    let mut best_cost = f64::INFINITY;
    let mut best_actions = mean.clone();
    let mut elite_mean_costs = Vec::with_capacity(cfg.iterations);
    let mut best_costs = Vec::with_capacity(cfg.iterations);

    for iter in 0..cfg.iterations {
        let iter_rng = root.derive("iter").derive_u64(iter as u64);
        // candidate 0 is the current mean; the rest are Gaussian draws in
        // per-candidate streams (so a larger population extends, never
        // reshuffles, the candidate set)
        let candidates: Vec<Vec<[f64; 2]>> = (0..cfg.population)
            .map(|c| {
                if c == 0 {
                    mean.iter()
                        .map(|a| [a[0].clamp(-1.0, 1.0), a[1].clamp(-1.0, 1.0)])
                        .collect()
                } else {
                    let mut crng = iter_rng.derive_u64(c as u64);
                    (0..t)
                        .map(|k| {
                            [
                                (mean[k][0] + std[k][0] * crng.normal()).clamp(-1.0, 1.0),
                                (mean[k][1] + std[k][1] * crng.normal()).clamp(-1.0, 1.0),
                            ]
                        })
                        .collect()
                }
            })
            .collect();
        let terminals = dynamics.terminal_latents(w0, proprio0, &candidates)?;
        let costs: Vec<f64> = terminals
            .iter()
            .map(|wt| {
                let c = flat_sq_distance(wt, w_goal);
                if c.is_finite() {
                    c
                } else {
                    f64::INFINITY
                }
            })
            .collect();
        if costs.iter().all(|c| !c.is_finite()) {
            return Err(Error::Planning(
                "every candidate produced a non-finite cost".into(),
            ));
        }

        // elites: lowest cost, stable order
        let mut order: Vec<usize> = (0..cfg.population).collect();
        order.sort_by(|&a, &b| costs[a].partial_cmp(&costs[b]).unwrap().then(a.cmp(&b)));
        let elites: Vec<usize> = order
            .iter()
            .copied()
            .filter(|&i| costs[i].is_finite())
            .take(cfg.elites)
            .collect();
        if costs[elites[0]] < best_cost {
            best_cost = costs[elites[0]];
            best_actions = candidates[elites[0]].clone();
        }
        elite_mean_costs
            .push(elites.iter().map(|&i| costs[i]).sum::<f64>() / elites.len() as f64);
        best_costs.push(best_cost);

        // refit mean and std (unbiased, floored)
        for k in 0..t {
            for axis in 0..2 {
                let m = elites
                    .iter()
                    .map(|&i| candidates[i][k][axis])
                    .sum::<f64>()
                    / elites.len() as f64;
                let var = if elites.len() > 1 {
                    elites
                        .iter()
                        .map(|&i| (candidates[i][k][axis] - m).powi(2))
                        .sum::<f64>()
                        / (elites.len() - 1) as f64
                } else {
                    0.0
                };
                mean[k][axis] = m;
                std[k][axis] = var.sqrt().max(cfg.std_floor);
            }
        }
    }

    let rollout = dynamics.rollout_sequence(w0, proprio0, &best_actions)?;
    Ok(PlanResult {
        actions: best_actions,
        terminal_cost: best_cost,
        rollout,
        elite_mean_costs,
        best_costs,
        success: None,
    })
}

/// The perception + dynamics stack the planner runs against.
pub struct PlannerStack<'a> {
    pub frozen: &'a FrozenEncoder,
    pub bisim: Option<&'a BisimEncoder>,
    pub model: &'a TransitionModel,
}

impl PlannerStack<'_> {
    /// Encode an observation into the planning latent space.
    pub fn encode(&self, frame: &Tensor) -> Result<Tensor> {
        let z = self.frozen.encode(frame)?;
        match self.bisim {
            Some(enc) => enc.encode_value(&z),
            None => Ok(z),
        }
    }
}

/// A goal given as an observation and its proprio, rendered under the
/// current evaluation scenario.
#[derive(Clone, Debug)]
pub struct Goal {
    pub pos: [f64; 2],
    pub frame: Tensor,
    pub proprio: [f64; 4],
}

impl Goal {
    pub fn at(spec: &MazeSpec, pos: [f64; 2], scenario: Scenario) -> Goal {
        let state = EnvState::new(pos, scenario);
        Goal {
            pos,
            frame: render(spec, &state),
            proprio: proprio(&state),
        }
    }
}

/// Execution record of one receding-horizon episode.
#[derive(Clone, Debug)]
pub struct EpisodeRecord {
    pub success: bool,
    pub steps: usize,
    pub final_distance: f64,
    pub positions: Vec<[f64; 2]>,
    pub plan_costs: Vec<f64>,
    pub wall_seconds: f64,
}

/// Receding-horizon control: observe, encode, plan, execute the first
/// action, repeat. Stops on success or after `max_steps`.
pub fn mpc_episode(
    spec: &MazeSpec,
    stack: &PlannerStack<'_>,
    start: EnvState,
    goal: &Goal,
    cem: &CemConfig,
    max_steps: usize,
    episode_seed: u64,
) -> Result<EpisodeRecord> {
    let t0 = std::time::Instant::now();
    let w_goal = stack.encode(&goal.frame)?;
    let mut state = start;
    let mut positions = vec![state.pos];
    let mut plan_costs = Vec::new();
    let mut warm: Option<Vec<[f64; 2]>> = None;
    let mut steps = 0;
    let mut reached = success(state.pos, goal.pos, spec.goal_radius);
    while !reached && steps < max_steps {
        let frame = render(spec, &state);
        let w0 = stack.encode(&frame)?;
        let plan = plan_cem(
            stack.model,
            &w0,
            proprio(&state),
            &w_goal,
            cem,
            Rng::new(episode_seed).derive_u64(steps as u64).next_u64(),
            warm.as_deref(),
        )?;
        plan_costs.push(plan.terminal_cost);
        state = step(spec, &state, plan.actions[0]);
        positions.push(state.pos);
        steps += 1;
        reached = success(state.pos, goal.pos, spec.goal_radius);
        warm = cem.warm_start.then(|| {
            let mut shifted: Vec<[f64; 2]> = plan.actions[1..].to_vec();
            shifted.push([0.0, 0.0]);
            shifted
        });
    }
    let dx = state.pos[0] - goal.pos[0];
    let dy = state.pos[1] - goal.pos[1];
    Ok(EpisodeRecord {
        success: reached,
        steps,
        final_distance: (dx * dx + dy * dy).sqrt(),
        positions,
        plan_costs,
        wall_seconds: t0.elapsed().as_secs_f64(),
    })
}

/// One row of the evaluation table.
#[derive(Clone, Debug)]
pub struct EvalRow {
    pub model_tag: String,
    pub scenario: ScenarioTag,
    pub success_rate: f64,
    pub mean_final_distance: f64,
    pub mean_steps: f64,
    pub n_episodes: usize,
    pub seed: u64,
}

/// The paired (start, goal) set used by every scenario and variant of an
/// evaluation at a given seed.
pub fn paired_episodes(spec: &MazeSpec, n: usize, seed: u64) -> Vec<([f64; 2], [f64; 2])> {
    let root = Rng::new(seed).derive("episodes");
    (0..n)
        .map(|e| {
            let mut rng = root.derive_u64(e as u64);
            let start = spec.sample_free_position(&mut rng);
            loop {
                let goal = spec.sample_free_position(&mut rng);
                let d = (start[0] - goal[0]).hypot(start[1] - goal[1]);
                if d >= 2.0 {
                    return (start, goal);
                }
            }
        })
        .collect()
}

/// Evaluate one (model, scenario) cell over the paired episode set.
/// `parallel_episodes` toggles intra-cell parallelism; results are
/// identical either way.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_cell(
    stack: &PlannerStack<'_>,
    spec: &MazeSpec,
    model_tag: &str,
    tag: ScenarioTag,
    pairs: &[([f64; 2], [f64; 2])],
    seed: u64,
    cem: &CemConfig,
    max_steps: usize,
    parallel_episodes: bool,
) -> Result<(EvalRow, Vec<EpisodeRecord>)> {
    let run_one = |(e, (start, goal_pos)): (usize, &([f64; 2], [f64; 2]))| {
        let scenario = Scenario::new(tag, seed ^ (e as u64));
        let goal = Goal::at(spec, *goal_pos, scenario.clone());
        mpc_episode(
            spec,
            stack,
            EnvState::new(*start, scenario),
            &goal,
            cem,
            max_steps,
            seed.wrapping_mul(1315423911) ^ (e as u64),
        )
    };
    let records: Vec<EpisodeRecord> = if parallel_episodes {
        pairs.par_iter().enumerate().map(run_one).collect::<Result<_>>()?
    } else {
        pairs.iter().enumerate().map(run_one).collect::<Result<_>>()?
    };
    let n = records.len() as f64;
    let row = EvalRow {
        model_tag: model_tag.to_string(),
        scenario: tag,
        success_rate: records.iter().filter(|r| r.success).count() as f64 / n,
        mean_final_distance: records.iter().map(|r| r.final_distance).sum::<f64>() / n,
        mean_steps: records.iter().map(|r| r.steps as f64).sum::<f64>() / n,
        n_episodes: pairs.len(),
        seed,
    };
    Ok((row, records))
}

/// Evaluate a model over scenarios with the paired episode set. Episodes
/// run in parallel; results are deterministic in `seed`.
pub fn evaluate_suite(
    stack: &PlannerStack<'_>,
    spec: &MazeSpec,
    model_tag: &str,
    scenarios: &[ScenarioTag],
    n_episodes: usize,
    seed: u64,
    cem: &CemConfig,
    max_steps: usize,
) -> Result<(Vec<EvalRow>, Vec<Vec<EpisodeRecord>>)> {
    let pairs = paired_episodes(spec, n_episodes, seed);
    let mut rows = Vec::with_capacity(scenarios.len());
    let mut all_records = Vec::with_capacity(scenarios.len());
    for &tag in scenarios {
        let (row, records) = evaluate_cell(
            stack, spec, model_tag, tag, &pairs, seed, cem, max_steps, true,
        )?;
        rows.push(row);
        all_records.push(records);
    }
    Ok((rows, all_records))
}

/// Invariance diagnostic: best plan costs from two renderings of the same
/// underlying state under identical random streams. A perfectly invariant
/// encoder gives exactly equal costs.
pub fn plan_cost_gap(
    stack: &PlannerStack<'_>,
    spec: &MazeSpec,
    state_pos: [f64; 2],
    goal_pos: [f64; 2],
    tags: (ScenarioTag, ScenarioTag),
    cem: &CemConfig,
    seed: u64,
) -> Result<f64> {
    let mut costs = [0.0; 2];
    for (i, tag) in [tags.0, tags.1].into_iter().enumerate() {
        let scenario = Scenario::new(tag, seed);
        let goal = Goal::at(spec, goal_pos, scenario.clone());
        let w_goal = stack.encode(&goal.frame)?;
        let state = EnvState::new(state_pos, scenario);
        let w0 = stack.encode(&render(spec, &state))?;
        let plan = plan_cem(stack.model, &w0, proprio(&state), &w_goal, cem, seed, None)?;
        costs[i] = plan.terminal_cost;
    }
    Ok((costs[0] - costs[1]).abs())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// 1-patch toy dynamics: w' = w + B·a with known B.
    struct LinearToy {
        b: [[f64; 2]; 2],
    }

    impl LatentDynamics for LinearToy {
        fn latent_shape(&self) -> (usize, usize) {
            (1, 2)
        }

        fn terminal_latents(
            &self,
            w0: &Tensor,
            _proprio0: [f64; 4],
            action_seqs: &[Vec<[f64; 2]>],
        ) -> Result<Vec<Tensor>> {
            Ok(action_seqs
                .iter()
                .map(|seq| {
                    let mut w = [w0.data()[0], w0.data()[1]];
                    for a in seq {
                        w[0] += self.b[0][0] * a[0] + self.b[0][1] * a[1];
                        w[1] += self.b[1][0] * a[0] + self.b[1][1] * a[1];
                    }
                    Tensor::from_vec(vec![w[0], w[1]], &[1, 2])
                })
                .collect())
        }

        fn rollout_sequence(
            &self,
            w0: &Tensor,
            p: [f64; 4],
            actions: &[[f64; 2]],
        ) -> Result<Vec<Tensor>> {
            let mut out = Vec::new();
            let mut w = w0.clone();
            for a in actions {
                w = self.terminal_latents(&w, p, &[vec![*a]])?.pop().unwrap();
                out.push(w.clone());
            }
            Ok(out)
        }
    }

    fn cem(population: usize, iters: usize, horizon: usize) -> CemConfig {
        CemConfig {
            population,
            elites: (population / 8).max(2),
            iterations: iters,
            horizon,
            init_std: 0.5,
            std_floor: 0.05,
            warm_start: false,
        }
    }

    #[test]
    fn zero_action_rollout_already_at_goal_returns_cost_zero() {
        let toy = LinearToy {
            b: [[1.0, 0.0], [0.0, 1.0]],
        };
        let w0 = Tensor::from_vec(vec![0.4, -0.2], &[1, 2]);
        // goal = terminal of the zero sequence = w0 (identity under zero action)
        let plan = plan_cem(&toy, &w0, [0.0; 4], &w0, &cem(32, 4, 5), 7, None).unwrap();
        assert_eq!(plan.terminal_cost, 0.0);
        assert!(plan.actions.iter().all(|a| a == &[0.0, 0.0]));
    }

    #[test]
    fn one_d_toy_converges_to_the_closed_form_optimum() {
        // w' = w + a in one effective dimension; w0 = 0, goal = 0.7, T = 1:
        // argmin (w0 + a - 0.7)^2 = 0.7
        let toy = LinearToy {
            b: [[1.0, 0.0], [0.0, 0.0]],
        };
        let w0 = Tensor::from_vec(vec![0.0, 0.0], &[1, 2]);
        let goal = Tensor::from_vec(vec![0.7, 0.0], &[1, 2]);
        let plan = plan_cem(&toy, &w0, [0.0; 4], &goal, &cem(300, 10, 1), 3, None).unwrap();
        assert!(
            (plan.actions[0][0] - 0.7).abs() <= 0.02,
            "CEM mean missed the optimum: {:?}",
            plan.actions[0]
        );
    }

    #[test]
    fn best_cost_is_non_increasing_across_iterations() {
        let toy = LinearToy {
            b: [[0.8, 0.1], [-0.2, 0.9]],
        };
        let w0 = Tensor::from_vec(vec![0.0, 0.0], &[1, 2]);
        let goal = Tensor::from_vec(vec![1.0, -0.5], &[1, 2]);
        let plan = plan_cem(&toy, &w0, [0.0; 4], &goal, &cem(64, 8, 4), 11, None).unwrap();
        for w in plan.best_costs.windows(2) {
            assert!(w[1] <= w[0] + 1e-15);
        }
    }

    #[test]
    fn doubling_population_never_increases_best_cost() {
        let toy = LinearToy {
            b: [[0.7, 0.0], [0.0, 0.7]],
        };
        let w0 = Tensor::from_vec(vec![0.1, 0.1], &[1, 2]);
        let goal = Tensor::from_vec(vec![-0.6, 0.8], &[1, 2]);
        for seed in [1u64, 7, 23] {
            let small = plan_cem(&toy, &w0, [0.0; 4], &goal, &cem(40, 1, 3), seed, None).unwrap();
            let large = plan_cem(&toy, &w0, [0.0; 4], &goal, &cem(80, 1, 3), seed, None).unwrap();
            assert!(
                large.terminal_cost <= small.terminal_cost + 1e-15,
                "seed {seed}: doubling the population increased the cost"
            );
        }
    }

    #[test]
    fn all_non_finite_costs_error_out() {
        struct NanDyn;
        impl LatentDynamics for NanDyn {
            fn latent_shape(&self) -> (usize, usize) {
                (1, 1)
            }
            fn terminal_latents(
                &self,
                _w0: &Tensor,
                _p: [f64; 4],
                seqs: &[Vec<[f64; 2]>],
            ) -> Result<Vec<Tensor>> {
                Ok(seqs
                    .iter()
                    .map(|_| Tensor::from_vec(vec![f64::NAN], &[1, 1]))
                    .collect())
            }
            fn rollout_sequence(
                &self,
                _w0: &Tensor,
                _p: [f64; 4],
                a: &[[f64; 2]],
            ) -> Result<Vec<Tensor>> {
                Ok(vec![Tensor::from_vec(vec![f64::NAN], &[1, 1]); a.len()])
            }
        }
        let w0 = Tensor::zeros(&[1, 1]);
        assert!(plan_cem(&NanDyn, &w0, [0.0; 4], &w0, &cem(8, 2, 2), 5, None).is_err());
    }

    #[test]
    fn paired_episode_sets_are_shared_and_separated() {
        let spec = MazeSpec::default_layout();
        let a = paired_episodes(&spec, 10, 42);
        let b = paired_episodes(&spec, 10, 42);
        assert_eq!(a.len(), 10);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x, y, "pairs must be a pure function of the seed");
        }
        for (s, g) in &a {
            let d = (s[0] - g[0]).hypot(s[1] - g[1]);
            assert!(d >= 2.0, "start and goal too close: {d}");
        }
    }
}

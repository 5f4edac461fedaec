//! Force-actuated 2-D point-mass navigation in a walled grid, with pixel
//! rendering under six visual scenarios and deterministic dataset
//! generation.
//!
//! Dynamics are semi-implicit Euler with per-axis wall collision. Every
//! scenario changes rendering only; the (position, velocity) trajectory
//! induced by an action sequence is identical under all of them.

mod dataset;
mod render;

pub use dataset::{generate_dataset, Dataset, DatasetMeta};
pub use render::{
    background_for_tag, dr_background, nc_palette, render, Background, AGENT_COLOR, CHECKER_A,
    CHECKER_B, HALO_GLOW, WALL_COLOR,
};

use crate::rng::Rng;
use crate::{Error, Result};

/// The six visual-shift scenarios.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScenarioTag {
    /// No change: fixed checkerboard background.
    Nc,
    /// Slight background color change.
    Sc,
    /// Color-gradient background.
    C,
    /// Large (saturated) uniform recolor.
    Lc,
    /// Large color gradient.
    Lcg,
    /// Moving distractors over the NC background.
    D,
}

impl ScenarioTag {
    pub const ALL: [ScenarioTag; 6] = [
        ScenarioTag::Nc,
        ScenarioTag::Sc,
        ScenarioTag::C,
        ScenarioTag::Lc,
        ScenarioTag::Lcg,
        ScenarioTag::D,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ScenarioTag::Nc => "NC",
            ScenarioTag::Sc => "SC",
            ScenarioTag::C => "C",
            ScenarioTag::Lc => "LC",
            ScenarioTag::Lcg => "LCG",
            ScenarioTag::D => "D",
        }
    }

    pub fn parse(s: &str) -> Result<ScenarioTag> {
        match s {
            "NC" => Ok(ScenarioTag::Nc),
            "SC" => Ok(ScenarioTag::Sc),
            "C" => Ok(ScenarioTag::C),
            "LC" => Ok(ScenarioTag::Lc),
            "LCG" => Ok(ScenarioTag::Lcg),
            "D" => Ok(ScenarioTag::D),
            other => Err(Error::Config(format!("unknown scenario tag `{other}`"))),
        }
    }
}

/// A scenario instance: tag, seed (distractor phases), and an optional
/// background override used by domain randomization.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub tag: ScenarioTag,
    pub seed: u64,
    pub background_override: Option<Background>,
}

impl Scenario {
    pub fn new(tag: ScenarioTag, seed: u64) -> Scenario {
        Scenario {
            tag,
            seed,
            background_override: None,
        }
    }

    pub fn randomized(background: Background, seed: u64) -> Scenario {
        Scenario {
            tag: ScenarioTag::Nc,
            seed,
            background_override: Some(background),
        }
    }

    pub fn background(&self) -> Background {
        self.background_override
            .clone()
            .unwrap_or_else(|| background_for_tag(self.tag))
    }

    pub fn has_distractors(&self) -> bool {
        self.tag == ScenarioTag::D && self.background_override.is_none()
    }
}

/// Maze geometry and physics constants. World coordinates span
/// `[0, grid_size]` in both axes with one cell per unit.
#[derive(Clone, Debug)]
pub struct MazeSpec {
    /// Row-major wall grid, `grid_size × grid_size`.
    pub walls: Vec<bool>,
    pub grid_size: usize,
    pub agent_radius: f64,
    pub goal_radius: f64,
    pub force_limit: f64,
    pub v_max: f64,
    pub dt: f64,
    pub image_size: usize,
    pub patch_size: usize,
}

impl MazeSpec {
    /// The default 9×9 layout: outer ring plus four short interior walls.
    pub fn default_layout() -> MazeSpec {
        const ROWS: [&str; 9] = [
            "#########",
            "#.......#",
            "#..#.#..#",
            "#..#.#..#",
            "#.......#",
            "#..#.#..#",
            "#..#.#..#",
            "#.......#",
            "#########",
        ];
        let walls = ROWS
            .iter()
            .flat_map(|r| r.chars().map(|c| c == '#'))
            .collect();
        MazeSpec {
            walls,
            grid_size: 9,
            agent_radius: 0.30,
            goal_radius: 0.45,
            force_limit: 1.0,
            v_max: 1.2,
            dt: 0.3,
            image_size: 64,
            patch_size: 8,
        }
    }

    pub fn is_wall_cell(&self, row: isize, col: isize) -> bool {
        if row < 0 || col < 0 || row >= self.grid_size as isize || col >= self.grid_size as isize {
            return true;
        }
        self.walls[row as usize * self.grid_size + col as usize]
    }

    pub fn n_patches(&self) -> usize {
        let per_side = self.image_size / self.patch_size;
        per_side * per_side
    }

    /// Distance from a point to the nearest wall surface minus `radius`;
    /// negative means the disc overlaps a wall.
    pub fn wall_clearance(&self, x: f64, y: f64, radius: f64) -> f64 {
        let cx = x.floor() as isize;
        let cy = y.floor() as isize;
        let mut min_d = f64::INFINITY;
        for r in (cy - 1)..=(cy + 1) {
            for c in (cx - 1)..=(cx + 1) {
                if !self.is_wall_cell(r, c) {
                    continue;
                }
                let nx = x.clamp(c as f64, c as f64 + 1.0);
                let ny = y.clamp(r as f64, r as f64 + 1.0);
                let d = ((x - nx) * (x - nx) + (y - ny) * (y - ny)).sqrt();
                min_d = min_d.min(d);
            }
        }
        min_d - radius
    }

    pub fn collides(&self, x: f64, y: f64) -> bool {
        self.wall_clearance(x, y, self.agent_radius) < 0.0
    }

    /// Uniform sample of a free position with clearance margin.
    pub fn sample_free_position(&self, rng: &mut Rng) -> [f64; 2] {
        let g = self.grid_size as f64;
        loop {
            let x = rng.uniform(1.0, g - 1.0);
            let y = rng.uniform(1.0, g - 1.0);
            if self.wall_clearance(x, y, self.agent_radius + 0.05) > 0.0 {
                return [x, y];
            }
        }
    }

    /// Checks the wall-grid invariants: closed boundary and a connected
    /// free region of at least two cells.
    pub fn validate(&self) -> Result<()> {
        let n = self.grid_size;
        if self.walls.len() != n * n {
            return Err(Error::Invalid("wall grid size mismatch".into()));
        }
        for i in 0..n {
            if !(self.is_wall_cell(0, i as isize)
                && self.is_wall_cell(n as isize - 1, i as isize)
                && self.is_wall_cell(i as isize, 0)
                && self.is_wall_cell(i as isize, n as isize - 1))
            {
                return Err(Error::Invalid("outer boundary must be all wall".into()));
            }
        }
        let free_count = self.walls.iter().filter(|w| !**w).count();
        let Some(start) = self.walls.iter().position(|w| !*w) else {
            return Err(Error::Invalid("no free cells".into()));
        };
        let mut seen = vec![false; n * n];
        let mut stack = vec![start];
        seen[start] = true;
        let mut reached = 0usize;
        while let Some(p) = stack.pop() {
            reached += 1;
            let (r, c) = (p / n, p % n);
            for (dr, dc) in [(0isize, 1isize), (0, -1), (1, 0), (-1, 0)] {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if !self.is_wall_cell(nr, nc) {
                    let q = nr as usize * n + nc as usize;
                    if !seen[q] {
                        seen[q] = true;
                        stack.push(q);
                    }
                }
            }
        }
        if reached < 2 || reached < free_count {
            return Err(Error::Invalid(
                "free region must be connected and have at least 2 cells".into(),
            ));
        }
        Ok(())
    }
}

/// Full simulator state. Scenario data rides along so that rendering is a
/// pure function of the state.
#[derive(Clone, Debug)]
pub struct EnvState {
    pub pos: [f64; 2],
    pub vel: [f64; 2],
    pub t: usize,
    pub scenario: Scenario,
    pub distractors: Vec<[f64; 2]>,
}

impl EnvState {
    pub fn new(pos: [f64; 2], scenario: Scenario) -> EnvState {
        let distractors = distractor_positions(&scenario, 0);
        EnvState {
            pos,
            vel: [0.0, 0.0],
            t: 0,
            scenario,
            distractors,
        }
    }
}

/// Distractor orbit positions at time `t` (scenario D only).
pub fn distractor_positions(scenario: &Scenario, t: usize) -> Vec<[f64; 2]> {
    if !scenario.has_distractors() {
        return Vec::new();
    }
    let mut rng = Rng::new(scenario.seed).derive("distractors");
    let mut out = Vec::with_capacity(2);
    for k in 0..2 {
        let phase = rng.uniform(0.0, std::f64::consts::TAU);
        let (rx, ry, omega) = if k == 0 {
            (2.4, 1.7, 0.17)
        } else {
            (1.7, 2.5, -0.23)
        };
        let a = phase + omega * t as f64;
        out.push([4.5 + rx * a.cos(), 4.5 + ry * a.sin()]);
    }
    out
}

/// Semi-implicit Euler step with per-axis collision resolution: the x axis
/// is attempted first, then y from the updated x. An axis that would push
/// the agent into a wall keeps its old coordinate and zeroes that velocity
/// component. Distractors advance along their fixed orbits regardless of
/// the action.
pub fn step(spec: &MazeSpec, state: &EnvState, action: [f64; 2]) -> EnvState {
    let f = spec.force_limit;
    let ax = action[0].clamp(-f, f);
    let ay = action[1].clamp(-f, f);
    let mut vx = (state.vel[0] + ax * spec.dt).clamp(-spec.v_max, spec.v_max);
    let mut vy = (state.vel[1] + ay * spec.dt).clamp(-spec.v_max, spec.v_max);

    let mut x = state.pos[0] + vx * spec.dt;
    if spec.collides(x, state.pos[1]) {
        x = state.pos[0];
        vx = 0.0;
    }
    let mut y = state.pos[1] + vy * spec.dt;
    if spec.collides(x, y) {
        y = state.pos[1];
        vy = 0.0;
    }

    let t = state.t + 1;
    EnvState {
        pos: [x, y],
        vel: [vx, vy],
        t,
        scenario: state.scenario.clone(),
        distractors: distractor_positions(&state.scenario, t),
    }
}

/// Goal test: inside the closed ball of radius `goal_radius`.
pub fn success(pos: [f64; 2], goal: [f64; 2], goal_radius: f64) -> bool {
    let dx = pos[0] - goal[0];
    let dy = pos[1] - goal[1];
    (dx * dx + dy * dy).sqrt() <= goal_radius
}

/// Proprioceptive vector (x, y, vx, vy).
pub fn proprio(state: &EnvState) -> [f64; 4] {
    [state.pos[0], state.pos[1], state.vel[0], state.vel[1]]
}

/// A rolled-out episode: T+1 frames and proprios, T actions.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub observations: Vec<crate::autodiff::Tensor>,
    pub proprios: Vec<[f64; 4]>,
    pub actions: Vec<[f64; 2]>,
}

/// Simulate `actions` from `start`, rendering every frame.
pub fn rollout_trajectory(spec: &MazeSpec, start: EnvState, actions: &[[f64; 2]]) -> Trajectory {
    let mut observations = Vec::with_capacity(actions.len() + 1);
    let mut proprios = Vec::with_capacity(actions.len() + 1);
    let mut state = start;
    observations.push(render(spec, &state));
    proprios.push(proprio(&state));
    for a in actions {
        state = step(spec, &state, *a);
        observations.push(render(spec, &state));
        proprios.push(proprio(&state));
    }
    Trajectory {
        observations,
        proprios,
        actions: actions.to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nc_state(pos: [f64; 2]) -> EnvState {
        EnvState::new(pos, Scenario::new(ScenarioTag::Nc, 0))
    }

    #[test]
    fn default_layout_is_valid() {
        MazeSpec::default_layout().validate().unwrap();
    }

    #[test]
    fn step_matches_hand_computed_update() {
        // dt=0.1, v_max=0.5: v' = (0.1, 0), p' = (0.51, 0.5)
        let mut open = MazeSpec::default_layout();
        open.dt = 0.1;
        open.v_max = 0.5;
        // clear the walls so the arithmetic check runs unobstructed
        open.walls.iter_mut().for_each(|w| *w = false);
        let s0 = nc_state([0.5, 0.5]);
        let s1 = step(&open, &s0, [1.0, 0.0]);
        assert!((s1.vel[0] - 0.1).abs() < 1e-15 && s1.vel[1] == 0.0);
        assert!((s1.pos[0] - 0.51).abs() < 1e-15 && (s1.pos[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_action_at_rest_changes_only_time() {
        let spec = MazeSpec::default_layout();
        let s0 = nc_state([4.5, 4.5]);
        let s1 = step(&spec, &s0, [0.0, 0.0]);
        assert_eq!(s1.pos, s0.pos);
        assert_eq!(s1.vel, [0.0, 0.0]);
        assert_eq!(s1.t, 1);
    }

    #[test]
    fn wall_collision_zeroes_normal_velocity() {
        let spec = MazeSpec::default_layout();
        // left of the pillar cells at rows 2..4 in column 3; push right into them
        let mut state = nc_state([2.5, 2.5]);
        for _ in 0..10 {
            state = step(&spec, &state, [1.0, 0.0]);
        }
        assert_eq!(state.vel[0], 0.0, "wall-normal velocity must be zeroed");
        assert!(state.pos[0] <= 3.0 - spec.agent_radius + 1e-9);
    }

    #[test]
    fn velocity_stays_bounded_and_agent_stays_free() {
        let spec = MazeSpec::default_layout();
        let mut state = nc_state([4.5, 4.5]);
        let mut rng = crate::rng::Rng::new(5);
        for _ in 0..200 {
            let a = [rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)];
            state = step(&spec, &state, a);
            assert!(state.vel[0].abs() <= spec.v_max && state.vel[1].abs() <= spec.v_max);
            assert!(!spec.collides(state.pos[0], state.pos[1]));
        }
    }

    #[test]
    fn success_boundary_is_closed() {
        assert!(success([1.0, 1.0], [1.0, 1.0], 0.45));
        assert!(success([1.45, 1.0], [1.0, 1.0], 0.45));
        assert!(!success([1.0 + 0.45 * 1.01, 1.0], [1.0, 1.0], 0.45));
    }

    #[test]
    fn dynamics_identical_across_scenarios() {
        let spec = MazeSpec::default_layout();
        let mut rng = crate::rng::Rng::new(9);
        let actions: Vec<[f64; 2]> = (0..50)
            .map(|_| [rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)])
            .collect();
        let mut traces = Vec::new();
        for tag in ScenarioTag::ALL {
            let mut state = EnvState::new([1.5, 1.5], Scenario::new(tag, 3));
            let mut trace = Vec::new();
            for a in &actions {
                state = step(&spec, &state, *a);
                trace.push((state.pos, state.vel));
            }
            traces.push(trace);
        }
        for t in &traces[1..] {
            assert_eq!(*t, traces[0]);
        }
    }

    #[test]
    fn scripted_straight_line_controller_reaches_a_goal() {
        // guards against degenerate mazes: drive along the open outer corridor
        let spec = MazeSpec::default_layout();
        let goal = [7.5, 1.5];
        let mut state = nc_state([1.5, 1.5]);
        for _ in 0..60 {
            if success(state.pos, goal, spec.goal_radius) {
                return;
            }
            let dx = goal[0] - state.pos[0];
            let dy = goal[1] - state.pos[1];
            let a = [
                (dx * 1.5 - state.vel[0] * 2.0).clamp(-1.0, 1.0),
                (dy * 1.5 - state.vel[1] * 2.0).clamp(-1.0, 1.0),
            ];
            state = step(&spec, &state, a);
        }
        panic!("straight-line controller failed to reach an open goal");
    }

    #[test]
    fn distractors_move_and_agent_does_not() {
        let spec = MazeSpec::default_layout();
        let s0 = EnvState::new([4.5, 7.5], Scenario::new(ScenarioTag::D, 11));
        let s1 = step(&spec, &s0, [0.0, 0.0]);
        assert_eq!(s1.pos, s0.pos);
        assert_ne!(s1.distractors, s0.distractors);
    }
}

//! Scenario rendering.
//!
//! Frames are S×S×3 tensors in [0,1], drawn back to front: background,
//! walls, distractors, the agent's dithered halo rings, then the agent
//! disc. Everything is opaque, so the NC palette is exactly five colors —
//! two checker colors, wall, halo, agent — which keeps the background
//! score of an NC frame identically zero.
//!
//! The halo exists to give patch features a monotone radial cue around the
//! agent: the ring dither density falls off with distance, so per-patch
//! halo-pixel counts decrease smoothly away from the agent. All scenario
//! and randomized palettes stay far from the agent/halo/wall colors, which
//! is what makes foreground detection background-independent.

use super::{EnvState, MazeSpec, ScenarioTag};
use crate::autodiff::Tensor;
use crate::rng::Rng;

pub const WALL_COLOR: [f64; 3] = [0.08, 0.10, 0.26];
pub const AGENT_COLOR: [f64; 3] = [0.92, 0.10, 0.12];
pub const CHECKER_A: [f64; 3] = [0.80, 0.86, 0.84];
pub const CHECKER_B: [f64; 3] = [0.68, 0.74, 0.72];
pub const DISTRACTOR_COLORS: [[f64; 3]; 2] = [
    [0.88, 0.92, 0.10], // yellow
    [0.78, 0.15, 0.85], // magenta
];
const DISTRACTOR_RADIUS: f64 = 0.28;

/// The agent's glow: solid concentric annuli in an ordered color ramp,
/// drawn over the background (walls, distractors, and the agent body
/// stay on top). Each entry is (outer radius in world units, color).
///
/// The glow quantizes distance-to-agent into opaque palette colors, so a
/// patch's features step smoothly and monotonically as the agent
/// approaches — a long-range cue that survives the per-patch locality of
/// the feature extractor — while staying exactly enumerable for the NC
/// palette and trivially detectable under any background.
pub const HALO_GLOW: [(f64, [f64; 3]); 6] = [
    (0.9, [0.93, 0.35, 0.32]),
    (1.4, [0.94, 0.44, 0.40]),
    (1.9, [0.95, 0.52, 0.48]),
    (2.4, [0.95, 0.61, 0.56]),
    (2.8, [0.96, 0.70, 0.64]),
    (3.2, [0.97, 0.78, 0.72]),
];

/// Background families. Colors are in [0,1] RGB.
#[derive(Clone, Debug, PartialEq)]
pub enum Background {
    Checker([f64; 3], [f64; 3]),
    Flat([f64; 3]),
    /// Vertical two-color gradient (top → bottom).
    GradientY([f64; 3], [f64; 3]),
    /// Horizontal two-color gradient (left → right).
    GradientX([f64; 3], [f64; 3]),
}

impl Background {
    fn color_at(&self, wx: f64, wy: f64, extent: f64) -> [f64; 3] {
        match self {
            Background::Checker(a, b) => {
                let parity = ((wx * 2.0).floor() as i64 + (wy * 2.0).floor() as i64).rem_euclid(2);
                if parity == 0 {
                    *a
                } else {
                    *b
                }
            }
            Background::Flat(c) => *c,
            Background::GradientY(a, b) => lerp3(a, b, (wy / extent).clamp(0.0, 1.0)),
            Background::GradientX(a, b) => lerp3(a, b, (wx / extent).clamp(0.0, 1.0)),
        }
    }
}

fn lerp3(a: &[f64; 3], b: &[f64; 3], t: f64) -> [f64; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

/// Fixed background for each scenario tag.
pub fn background_for_tag(tag: ScenarioTag) -> Background {
    match tag {
        ScenarioTag::Nc | ScenarioTag::D => Background::Checker(CHECKER_A, CHECKER_B),
        ScenarioTag::Sc => Background::Checker(
            [0.84, 0.83, 0.89],
            [0.72, 0.71, 0.77],
        ),
        ScenarioTag::C => Background::GradientY([0.55, 0.70, 0.82], [0.75, 0.82, 0.60]),
        ScenarioTag::Lc => Background::Flat([0.05, 0.75, 0.70]),
        ScenarioTag::Lcg => Background::GradientX([0.10, 0.20, 0.90], [0.05, 0.85, 0.30]),
    }
}

/// The exact set of colors an NC frame can contain.
pub fn nc_palette() -> Vec<[f64; 3]> {
    let mut p = vec![CHECKER_A, CHECKER_B, WALL_COLOR, AGENT_COLOR];
    p.extend(HALO_GLOW.iter().map(|(_, c)| *c));
    p
}

fn color_dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Random background for domain randomization. Draws stay away from the
/// foreground colors (so the agent and walls remain detectable) and carry
/// a moderate deviation from the NC checker palette — strictly milder than
/// the saturated LC/LCG shifts.
pub fn dr_background(rng: &mut Rng) -> Background {
    let mut fg = vec![AGENT_COLOR, WALL_COLOR];
    fg.extend(HALO_GLOW.iter().map(|(_, c)| *c));
    let draw_color = |rng: &mut Rng| -> [f64; 3] {
        loop {
            let c = [
                rng.uniform(0.0, 0.75),
                rng.uniform(0.1, 1.0),
                rng.uniform(0.1, 1.0),
            ];
            let red_dominant = c[0] > c[1].max(c[2]) - 0.02;
            let near_fg = fg.iter().any(|f| color_dist(&c, f) < 0.25);
            let dev = color_dist(&c, &CHECKER_A).min(color_dist(&c, &CHECKER_B));
            if !red_dominant && !near_fg && (0.15..=0.55).contains(&dev) {
                return c;
            }
        }
    };
    match rng.uniform_usize(3) {
        0 => Background::Flat(draw_color(rng)),
        1 => Background::GradientY(draw_color(rng), draw_color(rng)),
        _ => Background::Checker(draw_color(rng), draw_color(rng)),
    }
}

/// Render one frame. Pure in `(spec, state)`; the scenario (and its seed)
/// ride inside the state.
pub fn render(spec: &MazeSpec, state: &EnvState) -> Tensor {
    let s = spec.image_size;
    let g = spec.grid_size as f64;
    let scale = g / s as f64;
    let bg = state.scenario.background();
    let (ax, ay) = (state.pos[0], state.pos[1]);
    let mut data = vec![0.0f64; s * s * 3];

    for py in 0..s {
        let wy = (py as f64 + 0.5) * scale;
        for px in 0..s {
            let wx = (px as f64 + 0.5) * scale;
            let mut color = bg.color_at(wx, wy, g);
            let r = (wx - ax).hypot(wy - ay);
            if r > spec.agent_radius {
                for (outer, glow_color) in HALO_GLOW {
                    if r <= outer {
                        color = glow_color;
                        break;
                    }
                }
            }
            if spec.is_wall_cell(wy.floor() as isize, wx.floor() as isize) {
                color = WALL_COLOR;
            }
            for (k, d) in state.distractors.iter().enumerate() {
                let dd = (wx - d[0]).hypot(wy - d[1]);
                if dd <= DISTRACTOR_RADIUS {
                    color = DISTRACTOR_COLORS[k % 2];
                }
            }
            if r <= spec.agent_radius {
                color = AGENT_COLOR;
            }
            let base = (py * s + px) * 3;
            data[base] = color[0];
            data[base + 1] = color[1];
            data[base + 2] = color[2];
        }
    }
    Tensor::from_vec(data, &[s, s, 3])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maze::{EnvState, Scenario};

    fn frame(tag: ScenarioTag, pos: [f64; 2], seed: u64) -> Tensor {
        let spec = MazeSpec::default_layout();
        render(&spec, &EnvState::new(pos, Scenario::new(tag, seed)))
    }

    #[test]
    fn nc_frame_palette_is_exactly_the_reference_palette() {
        let f = frame(ScenarioTag::Nc, [4.5, 4.5], 0);
        let palette = nc_palette();
        for px in f.data().chunks(3) {
            let c = [px[0], px[1], px[2]];
            assert!(
                palette.iter().any(|p| *p == c),
                "pixel {c:?} not in NC palette"
            );
        }
        // all five colors actually appear
        for p in &palette {
            assert!(
                f.data().chunks(3).any(|px| px == p.as_slice()),
                "palette color {p:?} missing from frame"
            );
        }
    }

    #[test]
    fn scenarios_differ_only_on_background_pixels() {
        let a = frame(ScenarioTag::Nc, [4.5, 4.5], 0);
        let b = frame(ScenarioTag::Lcg, [4.5, 4.5], 0);
        let palette = nc_palette();
        let mut fg: Vec<[f64; 3]> = vec![WALL_COLOR, AGENT_COLOR];
        fg.extend(HALO_GLOW.iter().map(|(_, c)| *c));
        let mut differing = 0;
        for (pa, pb) in a.data().chunks(3).zip(b.data().chunks(3)) {
            let ca = [pa[0], pa[1], pa[2]];
            if pa != pb {
                differing += 1;
                // a pixel that differs must be a background pixel in NC
                assert!(
                    !fg.contains(&ca),
                    "foreground pixel changed across scenarios: {ca:?}"
                );
            }
        }
        assert!(differing > 0);
        let _ = palette;
    }

    #[test]
    fn distractors_move_while_agent_pixels_stay() {
        let spec = MazeSpec::default_layout();
        let s0 = EnvState::new([2.0, 7.0], Scenario::new(ScenarioTag::D, 5));
        let s1 = crate::maze::step(&spec, &s0, [0.0, 0.0]);
        let f0 = render(&spec, &s0);
        let f1 = render(&spec, &s1);
        assert_ne!(f0.data(), f1.data(), "distractor pixels should move");
        // agent disc pixels identical: find pixels equal to AGENT_COLOR in f0
        let s = spec.image_size;
        for i in 0..s * s {
            let p0 = &f0.data()[i * 3..i * 3 + 3];
            if p0 == AGENT_COLOR.as_slice() {
                assert_eq!(p0, &f1.data()[i * 3..i * 3 + 3], "agent pixel moved");
            }
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let a = frame(ScenarioTag::D, [3.3, 5.2], 9);
        let b = frame(ScenarioTag::D, [3.3, 5.2], 9);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn dr_backgrounds_respect_constraints() {
        let mut rng = Rng::new(123);
        for _ in 0..50 {
            let bg = dr_background(&mut rng);
            let colors: Vec<[f64; 3]> = match &bg {
                Background::Flat(c) => vec![*c],
                Background::Checker(a, b)
                | Background::GradientY(a, b)
                | Background::GradientX(a, b) => vec![*a, *b],
            };
            for c in colors {
                assert!(c[0] <= c[1].max(c[2]) - 0.02 + 1e-12, "red-dominant {c:?}");
                assert!(color_dist(&c, &AGENT_COLOR) >= 0.25);
                assert!(color_dist(&c, &WALL_COLOR) >= 0.25);
                for (_, rc) in HALO_GLOW {
                    assert!(color_dist(&c, &rc) >= 0.25);
                }
                let dev = color_dist(&c, &CHECKER_A).min(color_dist(&c, &CHECKER_B));
                assert!((0.15..=0.55).contains(&dev), "deviation {dev}");
            }
        }
    }
}

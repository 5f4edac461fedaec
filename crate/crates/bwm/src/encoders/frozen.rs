//! The frozen per-patch visual featurizer.
//!
//! Stands in for a pretrained patch encoder. Each pixel is first mapped to
//! three fixed color-detector channels (agent body, halo ring, wall); each
//! 8×8 patch of channel values then passes through a frozen random MLP.
//! The MLP output is projected off a fixed unit direction `u_slow`, and
//! `beta · bg_score · u_slow` is added back, where the background score is
//! the patch's mean pixel deviation from the NC reference palette.
//!
//! Consequences, by construction:
//! - under NC every pixel matches the palette exactly, so the slow
//!   coordinate is identically zero;
//! - any background change moves features along `u_slow` only (the
//!   detector channels do not react to background colors, which are kept
//!   far from the foreground colors);
//! - over a mixed-scenario batch the leading principal component aligns
//!   with `u_slow` and carries most of the variance.
//!
//! Weights are fixed at construction; a patch's features depend only on
//! that patch's pixels.

use crate::autodiff::{gelu_value, he_uniform, Tensor};
use crate::maze::nc_palette;
use crate::rng::Rng;
use crate::{Error, Result};

const TAU_BODY: f64 = 0.12;
const TAU_GLOW: f64 = 0.035;
const TAU_WALL: f64 = 0.12;
const HIDDEN: usize = 128;
/// Graded glow-level code: inner annuli score higher, so a patch's mean
/// over this channel decreases monotonically with distance from the agent.
const GLOW_CODE: [f64; 6] = [1.0, 0.82, 0.65, 0.49, 0.34, 0.2];
const N_CHANNELS: usize = 4;

#[derive(Clone, Debug)]
pub struct FrozenEncoder {
    image_size: usize,
    patch_size: usize,
    d_z: usize,
    beta: f64,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
    u_slow: Vec<f64>,
    palette: Vec<[f64; 3]>,
    construction_checksum: u64,
}

impl FrozenEncoder {
    pub fn new(seed: u64, image_size: usize, patch_size: usize, d_z: usize, beta: f64) -> Result<FrozenEncoder> {
        if image_size % patch_size != 0 {
            return Err(Error::Invalid(format!(
                "patch size {patch_size} must divide image size {image_size}"
            )));
        }
        if beta < 0.0 {
            return Err(Error::Invalid("beta must be nonnegative".into()));
        }
        let in_dim = patch_size * patch_size * N_CHANNELS;
        let root = Rng::new(seed);
        let w1 = he_uniform(&mut root.derive("w1"), in_dim, &[in_dim, HIDDEN]);
        let b1 = he_uniform(&mut root.derive("b1"), in_dim, &[HIDDEN]);
        let w2 = he_uniform(&mut root.derive("w2"), HIDDEN, &[HIDDEN, d_z]);
        let b2 = he_uniform(&mut root.derive("b2"), HIDDEN, &[d_z]);
        let mut u_rng = root.derive("u_slow");
        let mut u_slow: Vec<f64> = (0..d_z).map(|_| u_rng.normal()).collect();
        let norm = u_slow.iter().map(|x| x * x).sum::<f64>().sqrt();
        u_slow.iter_mut().for_each(|x| *x /= norm);

        let mut enc = FrozenEncoder {
            image_size,
            patch_size,
            d_z,
            beta,
            w1,
            b1,
            w2,
            b2,
            u_slow,
            palette: nc_palette(),
            construction_checksum: 0,
        };
        enc.construction_checksum = enc.checksum();
        Ok(enc)
    }

    pub fn d_z(&self) -> usize {
        self.d_z
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn n_patches(&self) -> usize {
        let per_side = self.image_size / self.patch_size;
        per_side * per_side
    }

    pub fn u_slow(&self) -> &[f64] {
        &self.u_slow
    }

    /// Bit-level checksum over all fixed weights; constant for the
    /// lifetime of the encoder.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for t in [&self.w1, &self.b1, &self.w2, &self.b2] {
            h ^= t.bit_checksum();
            h = h.wrapping_mul(0x100000001b3);
        }
        for x in &self.u_slow {
            h ^= x.to_bits();
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }

    pub fn verify_unchanged(&self) -> bool {
        self.checksum() == self.construction_checksum
    }

    /// Tensors stored in checkpoints under `frozen.*`.
    pub fn export_tensors(&self) -> Vec<(&'static str, Tensor)> {
        vec![
            ("frozen.w1", self.w1.clone()),
            ("frozen.b1", self.b1.clone()),
            ("frozen.w2", self.w2.clone()),
            ("frozen.b2", self.b2.clone()),
            ("frozen.u_slow", Tensor::from_vec(self.u_slow.clone(), &[self.d_z])),
        ]
    }

    fn detector_channels(&self, px: &[f64]) -> [f64; N_CHANNELS] {
        use crate::maze::{AGENT_COLOR, HALO_GLOW, WALL_COLOR};
        let d2 = |c: &[f64; 3]| -> f64 {
            (px[0] - c[0]).powi(2) + (px[1] - c[1]).powi(2) + (px[2] - c[2]).powi(2)
        };
        let body = (-d2(&AGENT_COLOR) / (2.0 * TAU_BODY * TAU_BODY)).exp();
        let mut glow_coded = 0.0;
        let mut glow_presence = 0.0;
        for (k, (_, gc)) in HALO_GLOW.iter().enumerate() {
            let m = (-d2(gc) / (2.0 * TAU_GLOW * TAU_GLOW)).exp();
            glow_coded += GLOW_CODE[k] * m;
            glow_presence += m;
        }
        let wall = (-d2(&WALL_COLOR) / (2.0 * TAU_WALL * TAU_WALL)).exp();
        [body, glow_coded, glow_presence, wall]
    }

    fn palette_deviation(&self, px: &[f64]) -> f64 {
        self.palette
            .iter()
            .map(|c| {
                ((px[0] - c[0]).powi(2) + (px[1] - c[1]).powi(2) + (px[2] - c[2]).powi(2)).sqrt()
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Background score per patch: mean pixel deviation from the NC
    /// reference palette. Identically zero on NC frames.
    pub fn background_scores(&self, frame: &Tensor) -> Result<Vec<f64>> {
        let (s, ps) = (self.image_size, self.patch_size);
        if frame.shape() != [s, s, 3] {
            return Err(Error::ShapeMismatch {
                op: "encode_pretrained",
                lhs: frame.shape().to_vec(),
                rhs: vec![s, s, 3],
            });
        }
        let per_side = s / ps;
        let mut scores = vec![0.0; per_side * per_side];
        let data = frame.data();
        for (p, score) in scores.iter_mut().enumerate() {
            let (pr, pc) = (p / per_side, p % per_side);
            let mut acc = 0.0;
            for dy in 0..ps {
                for dx in 0..ps {
                    let idx = ((pr * ps + dy) * s + pc * ps + dx) * 3;
                    acc += self.palette_deviation(&data[idx..idx + 3]);
                }
            }
            *score = acc / (ps * ps) as f64;
        }
        Ok(scores)
    }

    /// Encode one frame into the pretrained patch-feature grid
    /// `[n_patches, d_z]`.
    pub fn encode(&self, frame: &Tensor) -> Result<Tensor> {
        let (s, ps) = (self.image_size, self.patch_size);
        if frame.shape() != [s, s, 3] {
            return Err(Error::ShapeMismatch {
                op: "encode_pretrained",
                lhs: frame.shape().to_vec(),
                rhs: vec![s, s, 3],
            });
        }
        let per_side = s / ps;
        let n_patches = per_side * per_side;
        let in_dim = ps * ps * N_CHANNELS;
        let data = frame.data();
        let bg = self.background_scores(frame)?;

        let mut out = vec![0.0; n_patches * self.d_z];
        let mut x = vec![0.0; in_dim];
        let mut h = vec![0.0; HIDDEN];
        for p in 0..n_patches {
            let (pr, pc) = (p / per_side, p % per_side);
            for dy in 0..ps {
                for dx in 0..ps {
                    let idx = ((pr * ps + dy) * s + pc * ps + dx) * 3;
                    let ch = self.detector_channels(&data[idx..idx + 3]);
                    let base = (dy * ps + dx) * N_CHANNELS;
                    x[base..base + N_CHANNELS].copy_from_slice(&ch);
                }
            }
            // h = gelu(x·W1 + b1)
            h.copy_from_slice(self.b1.data());
            for (k, &xv) in x.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                let row = &self.w1.data()[k * HIDDEN..(k + 1) * HIDDEN];
                for (hv, &wv) in h.iter_mut().zip(row) {
                    *hv += xv * wv;
                }
            }
            for hv in h.iter_mut() {
                *hv = gelu_value(*hv);
            }
            // y = h·W2 + b2
            let y = &mut out[p * self.d_z..(p + 1) * self.d_z];
            y.copy_from_slice(self.b2.data());
            for (k, &hv) in h.iter().enumerate() {
                let row = &self.w2.data()[k * self.d_z..(k + 1) * self.d_z];
                for (yv, &wv) in y.iter_mut().zip(row) {
                    *yv += hv * wv;
                }
            }
            // project off u_slow, then add the slow coordinate
            let dot: f64 = y.iter().zip(&self.u_slow).map(|(a, b)| a * b).sum();
            let slow = self.beta * bg[p];
            for (yv, &uv) in y.iter_mut().zip(&self.u_slow) {
                *yv += (slow - dot) * uv;
            }
        }
        Ok(Tensor::from_vec(out, &[n_patches, self.d_z]))
    }

    /// Encode several frames into `[n, n_patches, d_z]`.
    pub fn encode_batch(&self, frames: &[Tensor]) -> Result<Tensor> {
        use rayon::prelude::*;
        let grids: Vec<Tensor> = frames
            .par_iter()
            .map(|f| self.encode(f))
            .collect::<Result<_>>()?;
        let n_patches = self.n_patches();
        let mut data = Vec::with_capacity(frames.len() * n_patches * self.d_z);
        for g in &grids {
            data.extend_from_slice(g.data());
        }
        Ok(Tensor::from_vec(
            data,
            &[frames.len(), n_patches, self.d_z],
        ))
    }
}

//! The trainable per-patch bisimulation encoder.
//!
//! Linear(d_z → hidden) → residual MLP block → Linear(hidden → d_w),
//! weights shared across patches, followed by learned per-patch positional
//! embeddings and LayerNorm with a learned affine. Runs on `[n, N_p, d_z]`
//! batches inside a differentiation graph.

use crate::autodiff::{he_uniform, BoundParams, Graph, ParamRef, ParamSet, Tensor, Var};
use crate::rng::Rng;
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct BisimEncoder {
    pub params: ParamSet,
    d_z: usize,
    d_w: usize,
    n_patches: usize,
    proj_in_w: ParamRef,
    proj_in_b: ParamRef,
    res_fc1_w: ParamRef,
    res_fc1_b: ParamRef,
    res_fc2_w: ParamRef,
    res_fc2_b: ParamRef,
    proj_out_w: ParamRef,
    proj_out_b: ParamRef,
    pos_emb: ParamRef,
    ln_gain: ParamRef,
    ln_bias: ParamRef,
}

const LN_EPS: f64 = 1e-5;

impl BisimEncoder {
    pub fn new(seed: u64, d_z: usize, d_w: usize, hidden: usize, n_patches: usize) -> BisimEncoder {
        let root = Rng::new(seed);
        let mut params = ParamSet::new();
        let proj_in_w = params.add(
            "bisim.proj_in.w",
            he_uniform(&mut root.derive("in_w"), d_z, &[d_z, hidden]),
        );
        let proj_in_b = params.add("bisim.proj_in.b", Tensor::zeros(&[hidden]));
        let res_fc1_w = params.add(
            "bisim.res.fc1.w",
            he_uniform(&mut root.derive("r1_w"), hidden, &[hidden, hidden]),
        );
        let res_fc1_b = params.add("bisim.res.fc1.b", Tensor::zeros(&[hidden]));
        let res_fc2_w = params.add(
            "bisim.res.fc2.w",
            he_uniform(&mut root.derive("r2_w"), hidden, &[hidden, hidden]),
        );
        let res_fc2_b = params.add("bisim.res.fc2.b", Tensor::zeros(&[hidden]));
        let proj_out_w = params.add(
            "bisim.proj_out.w",
            he_uniform(&mut root.derive("out_w"), hidden, &[hidden, d_w]),
        );
        let proj_out_b = params.add("bisim.proj_out.b", Tensor::zeros(&[d_w]));
        let pos_emb = params.add(
            "bisim.pos_emb",
            he_uniform(&mut root.derive("pos"), d_w, &[n_patches, d_w]),
        );
        // A uniform gain makes the coordinate sum of every output constant
        // (the normalization subtracts the mean), which pins one covariance
        // direction at exactly zero and is a stationary point of the
        // variance floor. Jittering the init breaks that symmetry.
        let mut g_rng = root.derive("ln_g");
        let ln_gain = params.add(
            "bisim.ln.g",
            Tensor::from_vec(
                (0..d_w).map(|_| 1.0 + g_rng.uniform(-0.25, 0.25)).collect(),
                &[d_w],
            ),
        );
        let ln_bias = params.add("bisim.ln.b", Tensor::zeros(&[d_w]));
        BisimEncoder {
            params,
            d_z,
            d_w,
            n_patches,
            proj_in_w,
            proj_in_b,
            res_fc1_w,
            res_fc1_b,
            res_fc2_w,
            res_fc2_b,
            proj_out_w,
            proj_out_b,
            pos_emb,
            ln_gain,
            ln_bias,
        }
    }

    pub fn d_w(&self) -> usize {
        self.d_w
    }

    pub fn d_z(&self) -> usize {
        self.d_z
    }

    pub fn n_patches(&self) -> usize {
        self.n_patches
    }

    pub fn bind<'g>(&self, g: &'g Graph, trainable: bool) -> BoundParams<'g> {
        self.params.bind(g, trainable)
    }

    /// Forward pass on a bound graph: `[n, N_p, d_z] -> [n, N_p, d_w]`.
    pub fn forward<'g>(
        &self,
        bound: &BoundParams<'g>,
        z: Var<'g>,
    ) -> Result<Var<'g>> {
        let sh = z.shape();
        if sh.len() != 3 || sh[1] != self.n_patches || sh[2] != self.d_z {
            return Err(Error::ShapeMismatch {
                op: "encode_bisim",
                lhs: sh,
                rhs: vec![0, self.n_patches, self.d_z],
            });
        }
        let v = |r: ParamRef| bound.var(r);
        let h = z
            .matmul(v(self.proj_in_w))?
            .add(v(self.proj_in_b))?;
        let r = h
            .matmul(v(self.res_fc1_w))?
            .add(v(self.res_fc1_b))?
            .gelu()
            .matmul(v(self.res_fc2_w))?
            .add(v(self.res_fc2_b))?;
        let h = h.add(r)?;
        let w = h
            .matmul(v(self.proj_out_w))?
            .add(v(self.proj_out_b))?
            .add(v(self.pos_emb))?
            .layer_norm(LN_EPS)
            .mul(v(self.ln_gain))?
            .add(v(self.ln_bias))?;
        Ok(w)
    }

    /// Forward-only convenience on plain tensors.
    pub fn encode_value(&self, z: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let bound = self.bind(&g, false);
        let zin = if z.rank() == 2 {
            let mut sh = vec![1];
            sh.extend_from_slice(z.shape());
            g.constant(z.clone().reshaped(&sh)?)
        } else {
            g.constant(z.clone())
        };
        let w = self.forward(&bound, zin)?;
        if z.rank() == 2 {
            Ok(w.value().reshaped(&[self.n_patches, self.d_w])?)
        } else {
            Ok(w.value())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_z(n: usize, n_patches: usize, d_z: usize, seed: u64) -> Tensor {
        let mut rng = Rng::new(seed);
        Tensor::from_vec(
            (0..n * n_patches * d_z).map(|_| rng.normal()).collect(),
            &[n, n_patches, d_z],
        )
    }

    #[test]
    fn zero_final_linear_and_pos_gives_constant_rows() {
        let mut enc = BisimEncoder::new(1, 8, 4, 16, 6);
        // zero the output projection and positional embeddings
        for name in ["bisim.proj_out.w", "bisim.proj_out.b", "bisim.pos_emb"] {
            let shape = enc.params.by_name(name).unwrap().shape().to_vec();
            enc.params.set_by_name(name, Tensor::zeros(&shape));
        }
        let w = enc.encode_value(&sample_z(2, 6, 8, 3)).unwrap();
        // LN(0) = 0, so output = ln bias, identical across patches and samples
        let bias = enc.params.by_name("bisim.ln.b").unwrap().data().to_vec();
        for row in w.data().chunks(4) {
            assert_eq!(row, bias.as_slice());
        }
    }

    #[test]
    fn weight_sharing_commutes_with_patch_permutation() {
        let mut enc = BisimEncoder::new(2, 8, 4, 16, 6);
        let shape = enc.params.by_name("bisim.pos_emb").unwrap().shape().to_vec();
        enc.params.set_by_name("bisim.pos_emb", Tensor::zeros(&shape));
        let z = sample_z(1, 6, 8, 4);
        let w = enc.encode_value(&z).unwrap();
        // rotate patches by 2
        let perm: Vec<usize> = (0..6).map(|i| (i + 2) % 6).collect();
        let mut zp = vec![0.0; z.numel()];
        for (dst, &src) in perm.iter().enumerate() {
            zp[dst * 8..(dst + 1) * 8].copy_from_slice(&z.data()[src * 8..(src + 1) * 8]);
        }
        let wp = enc
            .encode_value(&Tensor::from_vec(zp, &[1, 6, 8]))
            .unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            assert_eq!(
                &wp.data()[dst * 4..(dst + 1) * 4],
                &w.data()[src * 4..(src + 1) * 4]
            );
        }
    }

    #[test]
    fn default_init_outputs_are_bounded() {
        let enc = BisimEncoder::new(3, 64, 16, 256, 64);
        let w = enc.encode_value(&sample_z(2, 64, 64, 5)).unwrap();
        assert!(w.all_finite());
        assert!(w.data().iter().all(|x| x.abs() < 100.0));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let enc = BisimEncoder::new(1, 8, 4, 16, 6);
        assert!(enc.encode_value(&sample_z(1, 6, 9, 0)).is_err());
    }

    #[test]
    fn gradients_flow_to_all_parameters() {
        let enc = BisimEncoder::new(4, 8, 4, 16, 6);
        let g = Graph::new();
        let bound = enc.bind(&g, true);
        let z = g.constant(sample_z(3, 6, 8, 9));
        let w = enc.forward(&bound, z).unwrap();
        w.sumsq().backward().unwrap();
        let grads = bound.grads(&g);
        for (i, (name, _)) in enc.params.iter().enumerate() {
            let gr = grads[i].as_ref().unwrap_or_else(|| panic!("no grad for {name}"));
            assert!(
                gr.data().iter().any(|&x| x != 0.0),
                "gradient for {name} is identically zero"
            );
        }
    }
}

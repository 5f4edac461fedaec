//! Representation losses: prediction MSE, the bisimulation pairing loss,
//! standard variance-covariance regularization, and the PCA-based variant
//! with a staged switch.
//!
//! All functions build nodes on the caller's graph so gradients reach the
//! encoder. The PCA basis is computed outside the graph (gradient-blocked)
//! and consumed as a constant; the per-component eigenvalue surrogate is
//! the variance of the projected coordinate, which has the same value and
//! a usable derivative through the projections.

use crate::autodiff::{sym_eig, Tensor, Var};
use crate::{Error, Result};

/// Mean squared error between two same-shape tensors, averaged over every
/// element. The dynamics loss is this applied to predicted vs. target
/// latent grids.
pub fn mse<'g>(pred: Var<'g>, target: Var<'g>) -> Result<Var<'g>> {
    let d = pred.sub(target)?;
    Ok(d.mul(d)?.mean_all())
}

/// Bisimulation pairing loss: mean over the batch of
/// `(‖w - w'‖₂ - Δ)²` where `w'` (paired latents from the buffer) and `Δ`
/// (the γ-scaled predicted-next-state distance) enter as constants — the
/// one-step target is computed under stop-gradient.
pub fn loss_bisim<'g>(w_flat: Var<'g>, w_pair: &Tensor, delta: &Tensor) -> Result<Var<'g>> {
    let sh = w_flat.shape();
    if sh.len() != 2 || w_pair.shape() != sh.as_slice() || delta.shape() != [sh[0]] {
        return Err(Error::ShapeMismatch {
            op: "loss_bisim",
            lhs: sh,
            rhs: w_pair.shape().to_vec(),
        });
    }
    let g = w_flat.graph();
    let pair = g.constant(w_pair.clone());
    let target = g.constant(delta.clone());
    let dist = w_flat.sub(pair)?.l2_norm_last();
    let err = dist.sub(target)?;
    Ok(err.mul(err)?.mean_all())
}

/// Unbiased per-coordinate standard deviations of a `[B, D]` batch,
/// as graph nodes: sqrt(Var_j + eps).
fn coordinate_stds<'g>(x: Var<'g>, eps: f64) -> Result<Var<'g>> {
    let sh = x.shape();
    let b = sh[0] as f64;
    if sh[0] < 2 {
        return Err(Error::Invalid(
            "variance regularizer needs batch size >= 2".into(),
        ));
    }
    let mean = x.sum_axis0().scale(1.0 / b);
    let centered = x.sub(mean)?;
    let var = centered.mul(centered)?.sum_axis0().scale(1.0 / (b - 1.0));
    Ok(var.add_const(eps).sqrt())
}

/// Unbiased covariance `[D, D]` of a `[B, D]` batch, as graph nodes.
fn covariance<'g>(x: Var<'g>) -> Result<Var<'g>> {
    let sh = x.shape();
    let b = sh[0] as f64;
    let mean = x.sum_axis0().scale(1.0 / b);
    let centered = x.sub(mean)?;
    centered
        .transpose2()?
        .matmul(centered)
        .map(|c| c.scale(1.0 / (b - 1.0)))
}

/// Mean of squared off-diagonal entries of a square `[D, D]` node.
fn offdiag_penalty<'g>(c: Var<'g>) -> Result<Var<'g>> {
    let d = c.shape()[0];
    if d < 2 {
        return Ok(c.graph().scalar(0.0));
    }
    let mask = {
        let mut m = vec![1.0; d * d];
        for i in 0..d {
            m[i * d + i] = 0.0;
        }
        c.graph().constant(Tensor::from_vec(m, &[d, d]))
    };
    let off = c.mul(mask)?;
    Ok(off.mul(off)?.sum_all().scale(1.0 / (d * (d - 1)) as f64))
}

/// Standard variance-covariance regularization over flattened latents
/// `[B, D]`: a variance hinge `mean_j max(0, σ_min - √(Var_j + ε))²` over
/// all coordinates plus the mean squared off-diagonal covariance.
/// Invariance is supplied by the bisimulation loss, not duplicated here.
/// Returns `(variance_term, covariance_term)`.
pub fn loss_vicreg_standard<'g>(
    w_flat: Var<'g>,
    sigma_min: f64,
    eps: f64,
) -> Result<(Var<'g>, Var<'g>)> {
    let stds = coordinate_stds(w_flat, eps)?;
    let hinge = stds.scale(-1.0).add_const(sigma_min).relu();
    let var_term = hinge.mul(hinge)?.mean_all();
    let cov_term = offdiag_penalty(covariance(w_flat)?)?;
    Ok((var_term, cov_term))
}

/// PCA basis (eigenvector columns, eigenvalues descending) of the unbiased
/// covariance of `rows` (`[M, d]` values). Computed outside any graph —
/// consumers treat it as a constant, so no gradient flows through the
/// eigendecomposition.
pub fn pca_basis(rows: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    let sh = rows.shape();
    if sh.len() != 2 || sh[0] < 2 {
        return Err(Error::Invalid("pca_basis needs an [M >= 2, d] matrix".into()));
    }
    let (m, d) = (sh[0], sh[1]);
    let x = rows.data();
    let mut mean = vec![0.0; d];
    for r in x.chunks(d) {
        for (mu, v) in mean.iter_mut().zip(r) {
            *mu += v / m as f64;
        }
    }
    let mut cov = vec![0.0; d * d];
    for r in x.chunks(d) {
        for i in 0..d {
            let ci = r[i] - mean[i];
            for j in i..d {
                cov[i * d + j] += ci * (r[j] - mean[j]) / (m as f64 - 1.0);
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            cov[i * d + j] = cov[j * d + i];
        }
    }
    let eig = sym_eig(&Tensor::from_vec(cov, &[d, d]))?;
    Ok((eig.eigenvectors, eig.eigenvalues))
}

/// PCA-based variance-covariance regularization on per-patch latents
/// `[M, d]` under a fixed `basis` (`[d, d]`, eigenvector columns, leading
/// component first).
///
/// The variance floor applies only to tail components `i ≥ i0`
/// (1-indexed): leading components are free to collapse. The covariance
/// penalty is the mean squared off-diagonal of the covariance expressed in
/// the PCA basis. Returns the unweighted `(variance_term, covariance_term)`;
/// the caller applies `α_v`, `α_c`.
pub fn loss_pca_vc<'g>(
    rows: Var<'g>,
    basis: &Tensor,
    i0: usize,
    sigma_min: f64,
    eps: f64,
) -> Result<(Var<'g>, Var<'g>)> {
    let sh = rows.shape();
    if sh.len() != 2 {
        return Err(Error::Invalid("loss_pca_vc needs [M, d] rows".into()));
    }
    let d = sh[1];
    if sh[0] < 2 {
        return Err(Error::Invalid("loss_pca_vc needs M >= 2 rows".into()));
    }
    if !(1..=d).contains(&i0) {
        return Err(Error::Invalid(format!("i0 = {i0} out of range [1, {d}]")));
    }
    if basis.shape() != [d, d] {
        return Err(Error::ShapeMismatch {
            op: "loss_pca_vc",
            lhs: basis.shape().to_vec(),
            rhs: vec![d, d],
        });
    }
    let g = rows.graph();
    let u = g.constant(basis.clone());
    let projected = rows.matmul(u)?;
    let stds = coordinate_stds(projected, eps)?;
    let tail = stds.slice(0, i0 - 1, d - i0 + 1)?;
    let hinge = tail.scale(-1.0).add_const(sigma_min).relu();
    let var_term = hinge.mul(hinge)?.mean_all();
    let cov_term = offdiag_penalty(covariance(projected)?)?;
    Ok((var_term, cov_term))
}

/// Which regularizer is active at a given epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegPhase {
    StandardVicreg,
    PcaVc,
}

/// Standard VICReg for epochs below the switch, the PCA-based loss from
/// the switch epoch on (inclusive). A switch at or beyond the total epoch
/// count acts as the "standard forever" sentinel.
pub fn staged_regularizer(epoch: usize, switch_epoch: usize) -> RegPhase {
    if epoch >= switch_epoch {
        RegPhase::PcaVc
    } else {
        RegPhase::StandardVicreg
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use crate::rng::Rng;

    fn leaf<'g>(g: &'g Graph, data: Vec<f64>, shape: &[usize]) -> Var<'g> {
        g.leaf(Tensor::from_vec(data, shape), true)
    }

    #[test]
    fn mse_of_identical_tensors_is_zero() {
        let g = Graph::new();
        let a = leaf(&g, vec![1.0, 2.0, 3.0], &[3]);
        assert_eq!(mse(a, a).unwrap().item(), 0.0);
    }

    #[test]
    fn mse_of_unit_offset_is_one() {
        let g = Graph::new();
        let a = leaf(&g, vec![1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = a.add_const(1.0);
        assert_eq!(mse(b, a).unwrap().item(), 1.0);
    }

    #[test]
    fn mse_matches_direct_arithmetic() {
        let mut rng = Rng::new(8);
        let a: Vec<f64> = (0..10).map(|_| rng.normal()).collect();
        let b: Vec<f64> = (0..10).map(|_| rng.normal()).collect();
        let expect: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / 10.0;
        let g = Graph::new();
        let va = leaf(&g, a, &[2, 5]);
        let vb = leaf(&g, b, &[2, 5]);
        assert!((mse(va, vb).unwrap().item() - expect).abs() < 1e-12);
    }

    #[test]
    fn bisim_loss_hand_example() {
        // one pair with ‖w - w'‖ = 2, Δ = 0.9·1 -> (2 - 0.9)² = 1.21
        let g = Graph::new();
        let w = leaf(&g, vec![2.0, 0.0], &[1, 2]);
        let pair = Tensor::from_vec(vec![0.0, 0.0], &[1, 2]);
        let delta = Tensor::from_vec(vec![0.9], &[1]);
        let loss = loss_bisim(w, &pair, &delta).unwrap().item();
        assert!((loss - 1.21).abs() < 1e-12);
    }

    #[test]
    fn bisim_loss_is_zero_for_identical_pairs_with_zero_target() {
        let g = Graph::new();
        let w = leaf(&g, vec![0.3, -0.7, 0.1, 0.4], &[2, 2]);
        let pair = w.value();
        let delta = Tensor::zeros(&[2]);
        assert_eq!(loss_bisim(w, &pair, &delta).unwrap().item(), 0.0);
    }

    #[test]
    fn bisim_loss_at_gamma_zero_is_mean_squared_distance() {
        // with Δ ≡ 0 the loss reduces to mean ‖w - w'‖² (pure contraction)
        let mut rng = Rng::new(4);
        let w_data: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let p_data: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let expect: f64 = w_data
            .chunks(3)
            .zip(p_data.chunks(3))
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>())
            .sum::<f64>()
            / 2.0;
        let g = Graph::new();
        let w = leaf(&g, w_data, &[2, 3]);
        let loss = loss_bisim(w, &Tensor::from_vec(p_data, &[2, 3]), &Tensor::zeros(&[2]))
            .unwrap()
            .item();
        assert!((loss - expect).abs() < 1e-12);
    }

    #[test]
    fn vicreg_zero_at_satisfied_floor_and_diagonal_covariance() {
        // columns: (a, -a, 0) and (b, b, -2b) are orthogonal; choose scales
        // so each unbiased std is at least sigma_min.
        let a = 1.5f64;
        let b = 1.5f64 / 3.0f64.sqrt();
        let g = Graph::new();
        let x = leaf(&g, vec![a, b, -a, b, 0.0, -2.0 * b], &[3, 2]);
        let (var, cov) = loss_vicreg_standard(x, 1.0, 1e-4).unwrap();
        assert_eq!(var.item(), 0.0, "hinge must clamp above the floor");
        assert!(cov.item() < 1e-12, "orthogonal centered columns");
    }

    #[test]
    fn vicreg_collapsed_batch_hits_full_hinge() {
        // all-identical batch: std = 0, hinge = (1 - sqrt(1e-4))² ≈ 0.9801
        let g = Graph::new();
        let x = leaf(&g, vec![0.7; 8], &[4, 2]);
        let (var, _) = loss_vicreg_standard(x, 1.0, 1e-4).unwrap();
        assert!((var.item() - 0.9801).abs() < 1e-12);
    }

    #[test]
    fn vicreg_covariance_matches_direct_arithmetic() {
        let mut rng = Rng::new(12);
        let (b, d) = (6, 3);
        let data: Vec<f64> = (0..b * d).map(|_| rng.normal()).collect();
        // direct unbiased covariance
        let mut mean = vec![0.0; d];
        for r in data.chunks(d) {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / b as f64;
            }
        }
        let mut cov = vec![0.0; d * d];
        for r in data.chunks(d) {
            for i in 0..d {
                for j in 0..d {
                    cov[i * d + j] += (r[i] - mean[i]) * (r[j] - mean[j]) / (b as f64 - 1.0);
                }
            }
        }
        let mut expect = 0.0;
        for i in 0..d {
            for j in 0..d {
                if i != j {
                    expect += cov[i * d + j] * cov[i * d + j];
                }
            }
        }
        expect /= (d * (d - 1)) as f64;
        let g = Graph::new();
        let x = leaf(&g, data, &[b, d]);
        let (_, cov_term) = loss_vicreg_standard(x, 1.0, 1e-4).unwrap();
        assert!((cov_term.item() - expect).abs() < 1e-10);
    }

    #[test]
    fn pca_loss_is_zero_for_isotropic_batch_in_own_eigenbasis() {
        // rows ±c·e_i: diagonal covariance with equal eigenvalues
        let c = 2.0;
        let g = Graph::new();
        let rows = leaf(
            &g,
            vec![c, 0.0, -c, 0.0, 0.0, c, 0.0, -c],
            &[4, 2],
        );
        let (basis, vals) = pca_basis(&rows.value()).unwrap();
        assert!((vals[0] - vals[1]).abs() < 1e-12);
        let (var, cov) = loss_pca_vc(rows, &basis, 1, 1.0, 0.0).unwrap();
        assert_eq!(var.item(), 0.0);
        assert!(cov.item() < 1e-20, "covariance diagonal in its own eigenbasis");
    }

    #[test]
    fn pca_loss_on_collapsed_batch_is_one() {
        // batch collapsed to a point, d = 4, i0 = 2, sigma_min = 1, eps = 0:
        // three tail hinges of 1 -> mean 1
        let g = Graph::new();
        let rows = leaf(&g, vec![0.3; 12], &[3, 4]);
        let basis = Tensor::from_vec(
            {
                let mut eye = vec![0.0; 16];
                for i in 0..4 {
                    eye[i * 4 + i] = 1.0;
                }
                eye
            },
            &[4, 4],
        );
        let (var, cov) = loss_pca_vc(rows, &basis, 2, 1.0, 0.0).unwrap();
        assert!((var.item() - 1.0).abs() < 1e-12, "var = {}", var.item());
        assert!(cov.item() < 1e-30);
    }

    #[test]
    fn i0_of_one_floors_every_component() {
        // partially collapsed: one direction alive, one dead. i0 = 1 sees
        // the dead one and the live one; i0 = 2 sees only the tail.
        let g = Graph::new();
        let rows = leaf(&g, vec![3.0, 0.0, -3.0, 0.0, 1.5, 0.0, -1.5, 0.0], &[4, 2]);
        let (basis, _) = pca_basis(&rows.value()).unwrap();
        let (v1, _) = loss_pca_vc(rows, &basis, 1, 1.0, 0.0).unwrap();
        let (v2, _) = loss_pca_vc(rows, &basis, 2, 1.0, 0.0).unwrap();
        assert!(v2.item() > 0.99, "tail PC is dead");
        // i0 = 1 averages the satisfied leading floor with the dead tail
        assert!((v1.item() - v2.item() / 2.0).abs() < 1e-9);
    }

    #[test]
    fn pca_loss_is_invariant_to_batch_rotation() {
        let mut rng = Rng::new(77);
        let (m, d) = (24, 5);
        let data: Vec<f64> = (0..m * d).map(|_| rng.normal() * 0.8).collect();
        // random rotation from the eigenvectors of a random SPD matrix
        let mut spd = vec![0.0; d * d];
        let r: Vec<f64> = (0..d * d).map(|_| rng.normal()).collect();
        for i in 0..d {
            for j in 0..d {
                for k in 0..d {
                    spd[i * d + j] += r[k * d + i] * r[k * d + j];
                }
            }
        }
        let q = sym_eig(&Tensor::from_vec(spd, &[d, d])).unwrap().eigenvectors;
        let mut rotated = vec![0.0; m * d];
        for (src, dst) in data.chunks(d).zip(rotated.chunks_mut(d)) {
            for j in 0..d {
                dst[j] = (0..d).map(|k| src[k] * q.data()[k * d + j]).sum();
            }
        }
        let eval = |rows_data: Vec<f64>| -> (f64, f64) {
            let g = Graph::new();
            let rows = leaf(&g, rows_data, &[m, d]);
            let (basis, _) = pca_basis(&rows.value()).unwrap();
            let (v, c) = loss_pca_vc(rows, &basis, 2, 1.0, 1e-4).unwrap();
            (v.item(), c.item())
        };
        let (v0, c0) = eval(data);
        let (v1, c1) = eval(rotated);
        assert!((v0 - v1).abs() < 1e-8, "variance term not rotation invariant");
        assert!((c0 - c1).abs() < 1e-8, "covariance term not rotation invariant");
    }

    #[test]
    fn staged_switch_boundary_is_inclusive() {
        assert_eq!(staged_regularizer(0, 0), RegPhase::PcaVc);
        assert_eq!(staged_regularizer(9, 10), RegPhase::StandardVicreg);
        assert_eq!(staged_regularizer(10, 10), RegPhase::PcaVc);
        assert_eq!(staged_regularizer(10_000, usize::MAX), RegPhase::StandardVicreg);
    }

    #[test]
    fn batch_of_one_is_rejected() {
        let g = Graph::new();
        let x = leaf(&g, vec![1.0, 2.0], &[1, 2]);
        assert!(loss_vicreg_standard(x, 1.0, 1e-4).is_err());
    }
}

//! Visual feature extraction and representation losses.
//!
//! [`FrozenEncoder`] maps frames to pretrained-space patch grids Z with an
//! engineered slow-feature direction; [`BisimEncoder`] is the trainable
//! per-patch head mapping Z to the low-dimensional bisimulation space W;
//! [`BisimBuffer`] holds cross-trajectory comparison states; and
//! [`losses`] builds the training objective terms on a differentiation
//! graph.

mod bisim;
mod buffer;
mod frozen;
pub mod losses;

pub use bisim::BisimEncoder;
pub use buffer::{BisimBuffer, BufferEntry};
pub use frozen::FrozenEncoder;
pub use losses::{
    loss_bisim, loss_pca_vc, loss_vicreg_standard, mse, pca_basis, staged_regularizer, RegPhase,
};

/// Which feature space a latent grid lives in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatentSpace {
    /// Frozen pretrained features, dimension d_z per patch.
    Pretrained,
    /// Learned bisimulation latents, dimension d_w per patch.
    Bisim,
}

/// A patch-feature grid `[n_patches, d]` tagged with its space.
#[derive(Clone, Debug)]
pub struct LatentGrid {
    pub values: crate::autodiff::Tensor,
    pub space: LatentSpace,
}

impl LatentGrid {
    pub fn pretrained(values: crate::autodiff::Tensor) -> LatentGrid {
        LatentGrid {
            values,
            space: LatentSpace::Pretrained,
        }
    }

    pub fn bisim(values: crate::autodiff::Tensor) -> LatentGrid {
        LatentGrid {
            values,
            space: LatentSpace::Bisim,
        }
    }

    pub fn n_patches(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn flat(&self) -> &[f64] {
        self.values.data()
    }
}

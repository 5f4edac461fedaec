//! Minimal reverse-mode automatic differentiation over `f64` tensors,
//! with the linear-algebra pieces the learned components need: a cyclic
//! Jacobi symmetric eigensolver and an AdamW optimizer.
//!
//! The engine is tensor-granular: each recorded node holds a whole tensor,
//! so graphs stay small (hundreds to a few thousand nodes) even for
//! transformer forward passes. Graphs are single-threaded by construction
//! (`Graph` is not `Sync`); heavy kernels parallelize internally over rows
//! in a way that keeps results bit-identical for any thread count.

mod adamw;
mod eig;
pub mod fd;
mod graph;
mod params;
mod tensor;

pub use adamw::AdamW;
pub use eig::{solve_linear, sym_eig, EigenDecomposition};
pub use graph::{gelu_value, Graph, Var};
pub use params::{he_uniform, BoundParams, ParamRef, ParamSet};
pub use tensor::Tensor;

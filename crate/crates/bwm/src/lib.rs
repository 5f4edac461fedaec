//! Bisimulation world models on a desk-scale maze.
//!
//! This crate trains a latent predictive world model on pixel observations
//! of a force-actuated point-mass maze, augments it with a bisimulation
//! encoder that suppresses task-irrelevant background features, and plans
//! goal-reaching trajectories in the learned latent space with
//! cross-entropy-method MPC. A separate oracle module computes exact
//! 1-Wasserstein distances and bisimulation metrics on small finite MDPs
//! so that the learned quantities have something precise to be checked
//! against.
//!
//! The building blocks are deliberately self-contained: a reverse-mode
//! autodiff engine over `f64` tensors, a cyclic-Jacobi symmetric
//! eigensolver, an exact transportation solver, and a dense simplex for
//! the Kantorovich–Rubinstein dual. Everything is deterministic given a
//! seed.
//!
//! ```
//! use bwm::autodiff::Graph;
//! use bwm::autodiff::Tensor;
//!
//! let g = Graph::new();
//! let x = g.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0], &[3]), true);
//! let loss = x.mul(x).sum_all();
//! loss.backward().unwrap();
//! assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod encoders;
pub mod harness;
pub mod maze;
pub mod oracle;
pub mod planner;
pub mod probe;
pub mod rng;
pub mod transition;

/// Crate-wide error type.
#[derive(thiserror::Error, Debug)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Invalid(String),
    #[error("eigensolver did not converge after {sweeps} sweeps: off-diagonal residual {residual:.3e}")]
    EigNonConvergence { sweeps: usize, residual: f64 },
    #[error("mdp error: {0}")]
    Mdp(String),
    #[error("planning failed: {0}")]
    Planning(String),
}

pub type Result<T> = std::result::Result<T, Error>;

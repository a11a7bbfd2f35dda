//! Finite element core for a viscoelastic Cahn–Hilliard tumour-growth model
//! with stress diffusion.
//!
//! The crate provides the building blocks for the fully discrete scheme:
//! adaptive criss-cross triangulations ([`mesh`]), P1/P2 Taylor–Hood spaces
//! with mass lumping ([`fespace`]), spectral calculus on symmetric 2x2
//! matrices ([`matfun`]), model functions and stability constants
//! ([`model`]), per-step system assembly ([`assembly`]), Krylov/Newton
//! solvers and the outer sweep driver ([`solver`]) and discrete initial
//! data construction ([`init`]).

pub mod assembly;
pub mod error;
pub mod fespace;
pub mod init;
pub mod matfun;
pub mod mesh;
pub mod model;
pub mod solver;
pub mod sparse;
pub mod state;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

//! Lévy adaptive B-spline (LABS) regression.
//!
//! A regression function is modelled as a compound-Poisson sum of B-spline
//! atoms, each with its own degree, private knot vector and coefficient:
//!
//! ```text
//! f(x) = Σ_{k ∈ S} Σ_{l ≤ J_k} β_{k,l} B_k(x; ξ_{k,l})
//! ```
//!
//! The crate is organised bottom-up:
//!
//! * [`spline`]: B-spline kernel, atoms, design matrices and the knot
//!   perturbation Lipschitz constant.
//! * [`model`]: hyperparameters, sample-size schedules, prior and
//!   likelihood densities, constrained knot sampling, Hellinger distances.
//! * [`sampler`]: reversible-jump birth/death/update moves plus conjugate
//!   Gibbs steps, chain management and posterior summaries.
//! * [`testbed`]: Donoho–Johnstone test functions and RSNR-calibrated data.
//! * [`besov`]: finite differences, moduli of smoothness and Besov seminorm
//!   estimates on uniform grids.
//! * [`bench`]: simulation sweeps, rate fitting and result files.
//!
//! Numerical kernels that do not touch random number generation are generic
//! over [`Scalar`] (`f32` or `f64`); the concrete `f64` aliases below are what
//! the sampler and harness use.

pub mod bench;
pub mod besov;
mod error;
pub mod model;
pub mod sampler;
pub mod spline;
pub mod testbed;

pub use error::{Error, Result};

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive};

/// Floating point type the numerical kernels are generic over.
pub trait Scalar: Float + FromPrimitive + Debug + Default + Send + Sync + 'static {
    /// Lossless-enough conversion from an `f64` literal.
    fn of(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 literal representable")
    }

    fn of_usize(v: usize) -> Self {
        <Self as FromPrimitive>::from_usize(v).expect("usize representable")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

pub type KnotVector64 = spline::KnotVector<f64>;
pub type SplineAtom64 = spline::SplineAtom<f64>;
pub type GridFunction64 = besov::GridFunction<f64>;
pub type KnotVector32 = spline::KnotVector<f32>;
pub type SplineAtom32 = spline::SplineAtom<f32>;
pub type GridFunction32 = besov::GridFunction<f32>;

pub use bench::{BenchRecord, ExperimentConfig};
pub use model::{HyperParams, LabsState, PhiMode, Schedule};
pub use sampler::{ChainConfig, ChainOutput, MoveProbs};
pub use spline::{KnotVector, SplineAtom};
pub use testbed::{Dataset, TestFunctionId};

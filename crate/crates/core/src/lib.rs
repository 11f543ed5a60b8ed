//! Regularized loss minimization over locally perturbed data.
//!
//! The library covers five convex problem classes (exponential-family MLE,
//! fixed-design GLMs, exponential-family PCA, nonparametric regression and
//! max-margin matrix factorization), the local noise mechanisms applied to
//! their data, super-scale regularizers with proximal operators, a
//! certified proximal solver, closed-form consistency rates with Monte Carlo
//! checks, and Fano-type data-irrecoverability thresholds with simulated
//! MAP adversaries.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`); the `*64`
//! aliases below fix the common double-precision case.

// `!(x > 0.0)` also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod exp_family;
pub mod irrecover;
pub mod linalg;
pub mod optimize;
pub mod perturb;
pub mod rates;
pub mod regularize;
pub mod rng;
pub mod scalar;

pub use error::{Error, Result};
pub use exp_family::{
    Dataset, EmpiricalLoss, Family, Hypothesis, NormTag, ProblemKind, ProblemSpec, Shape,
};
pub use irrecover::{AdversaryResult, IrrecovClass, IrrecovQuery, NoiseThreshold};
pub use linalg::Matrix;
pub use optimize::{SolveCertificate, SolveConfig, StepRule};
pub use perturb::{MechanismKind, PerturbationSpec};
pub use rates::{RateColumn, RateQuery, Tail};
pub use regularize::{RegularizerKind, RegularizerSpec};
pub use scalar::Scalar;

pub type Hypothesis64 = Hypothesis<f64>;
pub type Hypothesis32 = Hypothesis<f32>;
pub type ProblemSpec64 = ProblemSpec<f64>;
pub type ProblemSpec32 = ProblemSpec<f32>;
pub type Dataset64 = Dataset<f64>;
pub type Matrix64 = Matrix<f64>;

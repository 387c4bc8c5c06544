//! Learning continuous-time ODE dynamics as Gaussian processes.
//!
//! Trajectory data sampled at discrete (possibly irregular) times is turned
//! into exact GP regression problems by transforming the observations through
//! variable-step multistep integrators (Adams-Bashforth, Adams-Moulton, BDF)
//! or truncated Taylor expansions. The trained posterior is a distribution
//! over dynamics functions; consistent vector fields are drawn from it via
//! decoupled sampling and can be integrated with arbitrary solvers.
//!
//! Module map:
//! - [`dynsys`]: benchmark systems, time grids, trajectories, CSV I/O
//! - [`mscoef`]: variable-step multistep coefficient generation
//! - [`kernels`]: ARD kernels, Lie-derivative kernels, random Fourier features
//! - [`obsmodel`]: transformed observations and noise models
//! - [`gpcore`]: composite Gram matrices, marginal likelihood, training
//! - [`sampler`]: decoupled sampling of dynamics functions
//! - [`integrate`]: multistep/Taylor rollouts and adaptive RK4(5)
//! - [`bounds`]: posterior error-bound evaluation

pub mod bounds;
pub mod dynsys;
pub mod gpcore;
pub mod integrate;
pub mod kernels;
pub mod mscoef;
pub mod obsmodel;
pub mod rng;
pub mod sampler;

pub use dynsys::{TimeGrid, Trajectory, VectorField};
pub use gpcore::{TrainConfig, TrainedModel};
pub use kernels::ArdHypers;
pub use mscoef::{MultistepScheme, SchemeKind};
pub use obsmodel::{NoiseModel, NoiseVariant, TransformedDataset};
pub use sampler::SampledDynamics;

//! Bayesian nonlinear spectral unmixing with a gamma Markov random field over
//! per-pixel nonlinearity scales.
//!
//! Pixels are modelled as `y = M a + phi(gamma) + e`, with nonnegative
//! abundances `a`, polynomial nonlinear terms `phi` built from endmember
//! products, and Gaussian noise. The [`sampler`] draws from the posterior and
//! adapts the field regularisation `alpha3`; [`estimators`] turn the draws
//! into MMSE maps and nonlinearity detection decisions.

pub mod baselines;
pub mod commands;
pub mod config;
pub mod dist;
pub mod error;
pub mod estimators;
pub mod evaluation;
pub mod gmrf;
pub mod io;
pub mod model;
pub mod rng;
pub mod sampler;
pub mod synth;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use model::{AbundanceField, EndmemberSet, HyperCube, InteractionBasis, SignMode};
pub use sampler::{run_chain, ChainConfig, ChainOutput};

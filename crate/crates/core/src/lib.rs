//! Value functions and safety probabilities of high-dimensional stochastic
//! systems through low-dimensional feature SDEs.
//!
//! The pipeline reduces a controlled diffusion to scalar feature processes
//! ([`reduction`]), turns those into small PDEs ([`pde`]) and solves them with
//! a physics-informed network ([`pinn`]); Monte Carlo ([`montecarlo`]),
//! finite differences and Riccati solutions serve as cross-checks.

pub mod error;
pub mod featureid;
pub mod harness;
pub mod montecarlo;
pub mod neural;
pub mod par;
pub mod pde;
pub mod pinn;
pub mod presets;
pub mod reduction;
pub mod rng;
pub mod sde;
pub mod stats;

pub use error::{Error, Result};

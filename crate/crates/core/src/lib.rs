//! Rare-event simulation for linear stochastic fluid (shot-noise) networks.
//!
//! The crate covers plain single- and multi-node networks as well as
//! Markov-modulated networks:
//!
//! * [`model`] declares network specifications and builds rate matrices.
//! * [`analytics`] evaluates log-MGFs, solves for the exponential twist and
//!   provides the Bahadur–Rao style run-count asymptotics.
//! * [`twist`] builds the importance-sampling measure for plain networks.
//! * [`modulation`] samples background paths and handles the per-path twist.
//! * [`simulate`] contains the estimators with the relative-precision
//!   stopping rule.
//! * [`moments`] computes exact transient and stationary moments of modulated
//!   networks through Kronecker-structured linear ODEs.

pub mod analytics;
pub mod error;
pub mod linalg;
pub mod model;
pub mod modulation;
pub mod moments;
pub mod quadrature;
pub mod rng;
mod segment;
pub mod simulate;
pub mod twist;

pub use error::{Error, Result};
pub use model::{JobLaw, Jobs, ModulatedNetworkSpec, NetworkSpec, RareTarget, StateSpec};

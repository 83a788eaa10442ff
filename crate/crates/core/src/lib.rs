//! Rare-event (collision) rate estimation for a car-following controller
//! using a learned, risk-tilted importance-sampling distribution.
//!
//! The pipeline:
//!
//! 1. [`data`] loads or synthesizes naturalistic `(scene, maneuver)` samples.
//! 2. [`gmm`] fits the naturalistic joint density `p(m, s)` and derives the
//!    exact state marginal `p(s)`.
//! 3. [`flow`] trains two real NVP flows, `q*(m, s)` and `q*(s)`, on mixture
//!    samples weighted by the risk indicator `e^{-ttc}` from [`risk`].
//! 4. [`sampler`] draws initial scenes from `q*(s)` and, step by step,
//!    maneuvers from the conditional `q*(m, s) / q*(s)` by accept-reject,
//!    while [`sim`] advances the IDM follower.
//! 5. [`estimator`] reweights each scenario by its likelihood ratio and
//!    tracks the estimate and its relative confidence half-width.

pub mod cli;
pub mod config;
pub mod data;
pub mod density;
pub mod error;
pub mod estimator;
pub mod flow;
pub mod gmm;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod risk;
pub mod sampler;
pub mod scenario;
pub mod sim;
pub mod stats;

pub use density::DensityModel;
pub use error::{Error, Result};
pub use scenario::{DataSummary, Maneuver, Normalizer, Scenario, Scene};

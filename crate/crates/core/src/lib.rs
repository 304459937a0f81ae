//! Discovery of stimulus-related modes in retinal ganglion cell population
//! firing rates.
//!
//! The crate covers the full desk-scale chain: labeled stimulus generation
//! ([`stimgen`]), a synthetic linear-nonlinear-Poisson retina on a 64x64
//! electrode lattice ([`retinasim`]), firing-rate estimation and conditioning
//! ([`rates`]), a mean-covariance restricted Boltzmann machine trained by
//! persistent contrastive divergence ([`mcrbm`]), and information-theoretic
//! evaluation with state/unit-triggered stimulus averages ([`eval`]).

pub mod error;
pub mod eval;
pub mod io;
pub mod mcrbm;
pub mod rates;
pub mod retinasim;
pub mod stimgen;

pub use error::{CoreError, Result};

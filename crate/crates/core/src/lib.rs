//! Forward volatility prediction from ESG news flow.
//!
//! The pipeline filters a timestamped news stream down to ESG items, links them to
//! tickers, turns each item into a sentiment vector and an embedding, pools them per
//! stock and period, and regresses forward realized volatility on the pooled
//! features with a Bayesian network sampled by preconditioned Langevin dynamics.

pub mod evalkit;
pub mod features;
pub mod manifest;
pub mod market;
pub mod model;
pub mod newsflow;
pub mod scalar;
pub mod simgen;

pub use scalar::Real;

pub type Params = model::Params<f64>;
pub type PosteriorEnsemble = model::PosteriorEnsemble<f64>;
pub type Row = model::Row<f64>;

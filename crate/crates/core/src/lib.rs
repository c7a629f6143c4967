//! AC power-flow toolkit.
//!
//! The crate bundles everything needed to study learned power-flow solvers
//! against a classical reference on synthetic distribution/transmission grids:
//!
//! - [`grid`] — static network model, per-unit conversion, nodal admittance
//!   assembly from π-model line parameters.
//! - [`acpf`] — power injections, mismatch residuals, the analytic polar
//!   Jacobian, and a Newton-Raphson reference solver.
//! - [`synth`] — random MV/HV scenario generation with Newton-Raphson
//!   reference solutions and Tukey IQR outlier filtering.
//! - [`autodiff`] — a small reverse-mode tape over real tensors, enough to
//!   train the unrolled graph network against the mismatch physics loss.
//! - [`model`] — the residual-to-update graph network (DeepSets and
//!   edge-aware attention aggregators), per-step update caps, and the
//!   backtracking line-search correction operator.
//! - [`train`] — label-free training loop: discounted physics loss, AdamW,
//!   cosine learning-rate schedule, block-diagonal batching.
//! - [`eval`] — RMSE evaluation against stored references, the ablation
//!   matrix, and single-/multi-scenario timing harnesses.
//! - [`io`] — dataset / checkpoint / config file formats.
//! - [`cli`] — implementations of the `synth | train | eval | bench | nr`
//!   subcommands.

pub mod acpf;
pub mod autodiff;
pub mod cli;
pub mod eval;
pub mod grid;
pub mod io;
pub mod model;
pub mod synth;
pub mod train;

pub use acpf::{NrReport, Residual, State};
pub use grid::{AdmittanceMatrix, Bus, BusType, Grid, Line, Regime};

//! Online robust voltage control for radial distribution feeders whose
//! topology and line parameters are not known in advance.
//!
//! The controller keeps an estimate of the voltage sensitivity matrix that
//! stays consistent with everything observed so far, and picks reactive
//! power setpoints that are safe for every model near that estimate.

// `!(a <= b)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod conic;
pub mod controller;
pub mod geometry;
pub mod grid;
pub mod oracle;
pub mod powerflow;
pub mod scenario;


//! Origin-destination travel-time estimation with calibrated intervals.
//!
//! A learned policy proposes the route for a query, a mixture-of-experts
//! sequence model turns the route into a point estimate with asymmetric
//! interval widths, and a held-out split fixes the width multiplier so the
//! interval reaches a target coverage with high probability.

// `!(x > 0.0)` is used on purpose so NaN lands on the error branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod align;
pub mod calib;
pub mod grad;
pub mod metrics;
pub mod nn;
pub mod pathpolicy;
pub mod pipeline;
pub mod roadnet;
pub mod seeding;
pub mod synthgen;
pub mod traffic;
pub mod uqmoe;

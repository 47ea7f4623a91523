// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod curve;
pub mod environment;
pub mod following;
pub mod localization;
pub mod magnetics;
pub mod navigator;
pub mod propulsion;
pub mod report;
pub mod rng;
pub mod sensing;
pub mod trajectory;

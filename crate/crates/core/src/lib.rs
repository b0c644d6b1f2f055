// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod graph;
pub mod harness;
pub mod hypernet;
pub mod layers;
pub mod metrics;
pub mod par;
pub mod pipeline;
pub mod tensor;

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod geometry;
pub mod network;
pub mod psv;
pub mod render;
pub mod run;
pub mod synthdata;
pub mod training;

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod dataset;
pub mod gradcheck;
pub mod image;
pub mod loss;
pub mod metaimage;
pub mod metrics;
pub mod model;
pub mod preprocess;
pub mod projection;
pub mod rng;
pub mod trainer;

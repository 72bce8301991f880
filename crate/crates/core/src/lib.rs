#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod eval;
pub mod features;
pub mod frame;
pub mod identify;
pub mod linalg;
pub mod metric;
pub mod reservoir;
pub mod synth;
pub mod tracker;

pub use error::{Error, Result};
pub use features::{BoundingBox, FeatureMode, Patch};
pub use frame::GrayFrame;
pub use linalg::{Matrix, MetricMatrix, RegressionCache, Vector};

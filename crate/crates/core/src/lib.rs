//! Crowd counting with dual-stream semantic-graph correlation mining.
//!
//! The pipeline: a small CNN backbone and path-aggregation pyramid produce a
//! fused feature map; a density head predicts a per-cell density map; two
//! semantic graphs over feature-map cells (one linking cells of similar
//! predicted density, one linking cells of similar representation) are mined
//! with independent GCN branches; the enhanced features feed point
//! regression/classification heads trained with Hungarian-matched point
//! supervision plus density supervision.
//!
//! Everything runs on the crate's own reverse-mode tensor engine
//! ([`autodiff`]), in `f64`.

pub mod assignment;
pub mod autodiff;
pub mod backbone;
pub mod config;
pub mod density;
pub mod error;
pub mod experiment;
pub mod gcn;
mod gemm;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod loss;
pub mod model;
pub mod optim;
pub mod params;
pub mod points;
pub mod sparse;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;

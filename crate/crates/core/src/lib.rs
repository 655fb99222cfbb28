//! Temporal monocular 3D lane detection at desk scale.
//!
//! The crate bundles a procedural driving-scene simulator with exact
//! geometric ground truth, the projective math for plane-sweep warping, a
//! small f64 autodiff engine, the temporal detection model (geometry
//! enhancement, temporal query generation, query-refinement decoder), the
//! matched multi-term training losses, and an OpenLane-style evaluation
//! suite.

pub mod autodiff;
pub mod backbone;
pub mod checks;
pub mod config;
pub mod data;
pub mod decoder;
pub mod geometry;
pub mod gradcheck;
pub mod io;
pub mod lane;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod openlane;
pub mod plot;
pub mod nn;
pub mod sim;
pub mod tgem;
pub mod tiqg;
pub mod train;

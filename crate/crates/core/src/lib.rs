//! Training-free surface-anomaly detection for 3D point clouds.
//!
//! Given a single scan with no reference data, the library separates
//! anomalous points from the underlying surface with three untrained
//! detectors that share one geometric substrate:
//!
//! - a sparse decomposition that splits the cloud into a smooth reference
//!   part and a row-sparse anomaly part via a graph smoothness operator and
//!   a nonconvex group penalty ([`decomposition`]),
//! - a latent-variable model over per-point plane residuals and neighborhood
//!   smoothness, fitted by mean-field variational EM ([`latent`]),
//! - local-geometry descriptors (fast point feature histograms) with a
//!   deviation-from-median scoring rule ([`descriptors`]).
//!
//! Supporting modules provide deterministic synthetic surfaces with ground
//! truth ([`synth`]), pointwise evaluation metrics and a benchmark harness
//! ([`metrics`], [`bench`]), and file formats plus run configuration for the
//! command-line front end ([`io`], [`config`]).

pub mod cloud;
pub mod error;
pub mod index;
pub mod latent;
pub mod metrics;
pub mod normals;
pub mod decomposition;
pub mod descriptors;
pub mod detect;
pub mod synth;
pub mod transform;

pub use cloud::{LabelVector, PointCloud};
pub use error::{Error, Result};

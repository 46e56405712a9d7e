//! Multi-level feature guided heterogeneous mixture-of-experts super-resolution.
//!
//! The model is `SR = head(backbone(LR))`: a residual convolutional backbone
//! exposes every block output, a multi-level aggregation module turns those
//! into a routing-guidance map, and a dual-routed mixture of heterogeneous
//! conv + pixel-shuffle experts produces the upsampled image.

pub mod backbone;
pub mod config;
pub mod data;
mod error;
pub mod gradcheck;
pub mod image;
pub mod metrics;
pub mod mfa;
pub mod model;
pub mod moe;
pub mod nn;
pub mod params;
pub mod rng;
pub mod train;

pub use crate::backbone::{Backbone, FeatureBlock, MultiLevelFeatures, ResidualBlock};
pub use crate::config::{ExperimentConfig, GroupSpec};
pub use crate::data::DatasetSplit;
pub use crate::error::{Error, Result};
pub use crate::image::ImagePlane;
pub use crate::metrics::MetricReport;
pub use crate::mfa::Mfa;
pub use crate::model::SrModel;
pub use crate::moe::{HmoeHead, RoutingDecision};
pub use crate::params::Parameters;

/// Identifier written next to every artifact this crate produces.
pub const VERSION: &str = concat!("hmoe-core ", env!("CARGO_PKG_VERSION"));

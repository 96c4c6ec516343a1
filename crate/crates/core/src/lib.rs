//! Driving backbone with an introspective explanation module.
//!
//! A spatio-temporal encoder and goal-conditioned GRU decoder predict the
//! ego trajectory; the explanation head fuses the flattened trajectory with
//! pooled mid-level activations through a bilinear operator (block-term by
//! default) to score driving causes or to generate a sentence.

pub mod autodiff;
pub mod backbone;
pub mod decoder;
pub mod error;
pub mod explain;
pub mod fusion;
pub mod gradcheck;
pub mod gradsuite;
pub mod metrics;
pub mod model;
pub mod params;
pub mod synthworld;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Gradients, Tape, Var};
pub use backbone::{Backbone, BackboneConfig, Goal};
pub use decoder::{ControlHead, DecoderConfig, Trajectory, TrajectoryDecoder};
pub use error::{Error, Result};
pub use explain::{Cause, LanguageHead, Vocabulary};
pub use fusion::{Fusion, FusionConfig, FusionKind};
pub use metrics::MetricReport;
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::{DType, Element, Tensor};

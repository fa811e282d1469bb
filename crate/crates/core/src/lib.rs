//! Single-image morphing attack detection from vision transformer features.
//!
//! The pipeline is: [`preprocess`] an image into encoder input, run the
//! [`vit`] encoder to get a class-token [`vit::FeatureVector`], score it with
//! a linear [`svm`], and evaluate scores with the ISO-style [`metrics`]. The
//! [`protocol`] module drives the cross-dataset grid and its statistics,
//! [`tsne`] embeds features for inspection and [`viz`] renders SVG plots.

pub mod error;
pub mod features;
pub mod metrics;
pub mod pipeline;
pub mod preprocess;
pub mod protocol;
pub mod svm;
pub mod tensor;
pub mod tsne;
pub mod vit;
pub mod viz;
pub mod weights;

pub use error::{Error, ErrorKind, Result};

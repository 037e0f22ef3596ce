//! Core algorithms for synthesizing standard-dose contrast-enhanced MRI from
//! low-dose acquisitions.
//!
//! The pipeline: volume I/O ([`volio`]), contrast-preserving preprocessing of
//! pre-contrast / contrast-enhanced pairs ([`preprocess`]), noise-free contrast
//! target extraction ([`target`]), a tape-based autodiff tensor core
//! ([`tensor`]), a metadata-conditioned 3-D U-Net ([`model`]), training
//! ([`trainer`]), inference and evaluation metrics ([`infer`]), and a synthetic
//! phantom generator with analytic ground truth ([`phantom`]).

pub mod error;
pub mod infer;
pub mod model;
pub mod pca;
pub mod phantom;
pub mod preprocess;
pub mod target;
pub mod tensor;
pub mod trainer;
pub mod volio;

pub use error::CoreError;
pub use volio::{AcquisitionMeta, LabelVolume, Volume};

//! Saliency-guided training for small convolutional classifiers.
//!
//! The crate bundles a minimal reverse-mode tensor engine, a block-structured
//! CNN that can mask one block's activations, GradCAM and the pointing game,
//! the saliency-gated training loop, and a generator for synthetic
//! context-biased image domains.

pub mod data;
pub mod domains;
pub mod error;
pub mod grid;
pub mod model;
pub mod saliency;
pub mod store;
pub mod tensor;
pub mod train;

pub use data::{Dataset, Example};
pub use domains::{DatasetManifest, DomainSpec, GeneratedExample, ShapeClass, SplitConfig};
pub use error::{CheckpointError, DatasetError, ModelError, TensorError, TrainError};
pub use grid::{BinaryMask, LayerAnnotation};
pub use model::{BlockSpec, ForwardRecord, GradTarget, MaskSpec, ModelConfig, ModelState};
pub use saliency::{PointingResult, SaliencyMap};
pub use tensor::{sgd_update, Tape, Tensor, Var};
pub use train::{EvalResult, Mode, TrainConfig};

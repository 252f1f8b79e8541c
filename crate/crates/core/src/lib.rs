//! Multimodal text/image fusion for three-way meme classification.
//!
//! The crate is self-contained: a small reverse-mode autodiff engine
//! ([`autodiff`]), modality encoders, six fusion strategies built on
//! multi-head attention ([`fusion`]), focal loss with label smoothing
//! ([`objectives`]), an AdamW training loop ([`train`]) and evaluation
//! metrics ([`evaluation`]). [`synthetic`] generates datasets with a known
//! amount of cross-modal signal for end-to-end checks.

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod gradcheck;
pub mod layers;
pub mod objectives;
pub mod pipeline;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use autodiff::{GradientMap, Graph, ParamId, ParamStore, Var};
pub use data::{Dataset, Label, Language, MemeRecord, NUM_CLASSES};
pub use error::{Error, Result};
pub use fusion::{FusionConfig, FusionModel, Strategy};
pub use objectives::LossConfig;
pub use tensor::Tensor;
pub use train::{TrainConfig, TrainHistory};

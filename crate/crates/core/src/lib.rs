//! Desk-scale training engine for supervised multi-modal domain adaptation
//! on open-ended VQA: joint and per-modality MMD alignment, dual-domain
//! classification, and an adversarial domain discriminator trained through a
//! gradient reversal layer.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod feature_file;
pub mod graph;
pub mod losses;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{CoreError, Result};
pub use graph::{grad_check, grad_check_multi, Graph, TensorId};
pub use tensor::Tensor;

//! Building blocks for a low-light bird detector: CBAM attention,
//! RetinexNet-style decomposition and enhancement, k-means++ anchor mining,
//! box geometry with NMS, and mAP evaluation. Everything runs on a small
//! deterministic `f64` tensor engine with reverse-mode gradients.

pub mod anchors;
pub mod autodiff;
pub mod cbam;
pub mod checks;
pub mod container;
pub mod data_io;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod metrics;
pub mod ops;
pub mod retinex;
pub mod rng;
pub mod tensor;

pub use autodiff::{Gradients, Graph, NodeId};
pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;

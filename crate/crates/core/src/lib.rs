//! CPU object-detection engine for three-stage strawberry maturity
//! detection: the YOLOv5s, YOLOv5s-C2f and YOLOv5s-Straw layer graphs,
//! the inference kernels they run on, letterboxing, anchor decoding and
//! NMS, the augmentation suite, and mAP@0.5 evaluation.

pub mod augment;
pub mod bbox;
pub mod dataset;
pub mod detect;
pub mod graph;
pub mod image;
pub mod metrics;
pub mod rng;
pub mod tensor;

pub use graph::{build_model, ArchId, ModelGraph};
pub use tensor::Tensor;

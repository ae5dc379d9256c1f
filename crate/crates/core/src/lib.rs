//! Pseudo-3D sliding-window transform for joint 2D/3D self-supervised
//! pre-training, with the supporting im2col convolution engine, seeded
//! augmentation, joint corpus batching, and a small verified numerical core.

pub mod augment;
pub mod bench;
pub mod dataset;
pub mod error;
pub mod im2col;
pub mod io;
pub mod p3d;
pub mod rng;
pub mod ssl;
pub mod tensor;
pub mod verify;

pub use augment::AugmentSpec;
pub use dataset::{BatchPlan, CorpusManifest};
pub use error::{Error, Result};
pub use im2col::ConvSpec;
pub use p3d::P3DConfig;
pub use tensor::{DType, Scalar, Tensor};

//! Two-stage CTR modeling: generative pre-training of a category-conditioned
//! self-attention decoder on behavior sequences, then fusion into
//! discriminative CTR backbones.

pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod embed;
pub mod error;
pub mod fuse;
pub mod gendec;
pub mod metrics;
pub mod pretrain;

pub use error::{Error, Result};

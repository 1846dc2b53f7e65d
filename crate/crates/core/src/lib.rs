//! Weakly supervised multi-task patch network: shared convolutional features,
//! an image-level classification branch, and a patch-level discovery branch,
//! trained from image labels alone.

// Kernel code keeps indexed loops (they mirror the written math across several
// same-length buffers) and explicit `x = x op y` updates (the scalar bound
// does not include the OpAssign traits).
#![allow(clippy::needless_range_loop, clippy::assign_op_pattern)]

pub mod boxes;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod head;
pub mod img;
pub mod net;
pub mod proposals;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod train;

pub use boxes::{iou, nms, PatchBox};
pub use error::{Error, Result};
pub use head::{LabelVector, LossMode, SpmScale};
pub use net::{BackboneConfig, HeadConfig, ModelConfig, ModelParams};
pub use proposals::{
    jittered, load_proposals, save_proposals, sliding_window, ProposalSet, ProposalSource,
};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Default training precision.
pub type Tensor32 = Tensor<f32>;
/// Double precision, used by the gradient checker.
pub type Tensor64 = Tensor<f64>;

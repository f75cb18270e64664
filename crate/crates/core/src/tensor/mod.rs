//! Minimal reverse-mode autodiff over f64 arrays, with the fused kernels the
//! model needs.

mod array;
pub mod gradcheck;
pub mod layers;
mod linalg;
mod nn;
mod ops;
pub mod optim;
mod params;
mod special;
mod tape;

pub use array::Array;
pub use layers::{group_count, Conv2d, GroupNorm, LayerNorm, Linear, Mlp};
pub use linalg::gemm;
pub use ops::{concat, stable_sigmoid, stack};
pub use optim::{AdamW, AdamWConfig};
pub use params::{Init, ParamGroup, ParamId, ParamStore};
pub use special::{deform_sample, focal_term, FocalParams, FrameSource, LevelShape, SamplingPlan};
pub use tape::{BackwardCtx, Gradients, Tape, Var};

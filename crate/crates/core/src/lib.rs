//! Video instance segmentation with query decomposition.
//!
//! One learned instance query per video-level object is decomposed into
//! per-frame box queries that locate the object on each frame with deformable
//! attention; the box queries are aggregated back into the instance query,
//! which generates a dynamic mask head shared by every frame.

pub mod decoder;
pub mod deformattn;
pub mod encoder;
pub mod geometry;
pub mod heads;
pub mod maskops;
pub mod matchloss;
pub mod model;
pub mod tensor;
pub mod vidgen;
pub mod viseval;

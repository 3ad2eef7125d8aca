//! Lossless JPEG transcoding with a learned lossy coder and a residual
//! mixture entropy model.

pub mod codec;
pub mod container;
pub mod dct_image;
pub mod entropy;
pub mod eval;
pub mod jpeg;
pub mod lossy;
pub mod model;
pub mod nn;
pub mod prob;
pub mod residual;
pub mod train;

//! Cascaded 2D segmentation of liver and liver lesions in CT volumes.

pub mod augment;
pub mod config;
pub mod error;
pub mod io;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod optim;
pub mod orient;
pub mod overlay;
pub mod phantom;
pub mod pipeline;
pub mod postprocess;
pub mod preprocess;
pub mod tensor;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
pub use tensor::{Scalar, Shape, Tensor};
pub use volume::{Affine, Axis, Dims, Mask, Volume};

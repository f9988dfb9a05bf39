//! Minimal tensor engine: dense tensors, reverse-mode autodiff, Adam,
//! parameter serialization and gradient-check support.

pub mod adam;
pub mod container;
pub mod gradcheck;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adam::{Adam, AdamConfig};
pub use container::{load_params, save_params, PARAMS_MAGIC, PARAMS_VERSION};
pub use params::Parameter;
pub use tape::{NodeId, Tape};
pub use tensor::{Scalar, Tensor};

//! Network building blocks on top of the tape: named parameter storage,
//! layers, initialization, and the Adam optimizer.

pub mod adam;
pub mod init;
pub mod layers;

pub use adam::Adam;
pub use layers::{Binder, BatchNorm, BnMode, Conv2d, Linear, TensorMap};

pub mod ail;
pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gcam;
pub mod gradcheck;
pub mod kernels;
pub mod layers;
pub mod losses;
pub mod mcm;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod tensor;
pub mod train;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Element, Tensor};

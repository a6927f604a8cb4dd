pub mod checkpoint;
pub mod denoiser;
pub mod error;
pub mod gate;
pub mod harness;
pub mod numcore;
pub mod scorer;
pub mod softtopk;
pub mod toytask;

pub use error::{Error, Result};

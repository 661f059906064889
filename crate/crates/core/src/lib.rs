pub mod dynamics;
pub mod entropy;
pub mod error;
pub mod fieldio;
pub mod lcs;
pub mod sampling;
pub mod spectra;

pub use error::{FtmeError, Result};

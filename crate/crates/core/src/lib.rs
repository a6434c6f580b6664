pub mod annotate;
pub mod baseline;
pub mod error;
pub mod eval;
pub mod flow;
pub mod io;
pub mod model;
pub mod selfheal;
pub mod synth;
pub mod train;
pub mod video;

pub use error::{Error, Result};

pub mod codec;
pub mod data;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod mask;
pub mod matching;
pub mod model;

pub use error::{Error, Result};

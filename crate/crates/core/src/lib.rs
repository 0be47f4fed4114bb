//! Multi-task dense prediction with a shared backbone and independent,
//! attention-gated task heads.

pub mod archive;
pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiments;
pub mod heads;
pub mod layers;
pub mod losses;
pub mod model;
pub mod training;

pub use error::{Error, Result};

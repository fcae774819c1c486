pub mod bbox;
pub mod config;
pub mod error;
pub mod eval;
pub mod extractor;
pub mod frame;
pub mod model;
pub mod numeric;
pub mod recurrent;
pub mod synth;
pub mod tracker;
pub mod trainer;

pub use bbox::BBox;
pub use error::{Error, Result};
pub use frame::Frame;

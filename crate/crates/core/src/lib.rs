// Several kernels walk parallel arrays by index; iterator chains would hide that.
#![allow(clippy::needless_range_loop)]

pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod global;
pub mod kb;
pub mod local;
pub mod params;
pub mod pipeline;

pub use error::{Error, Result};

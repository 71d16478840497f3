pub mod cli;
pub mod config;
pub mod criteria;
pub mod design_io;
pub mod error;
pub mod evaluate;
pub mod fdist;
pub mod linalg;
pub mod model;
pub mod search;
pub mod structure;

pub use error::{Error, Result};

pub mod autodiff;
mod binio;
pub mod config;
pub mod corpus;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod graph;
pub mod model;
pub mod retrieval;
pub mod runtime;
pub mod synthetic;

pub use config::Config;
pub use error::{Error, Result};

pub mod error;
pub mod io;
pub mod lattice;
pub mod model;
pub mod oracle;
pub mod sampler;
pub mod schedule;
pub mod sim;
pub mod stats;
pub mod summary;

pub use error::{Error, Result};

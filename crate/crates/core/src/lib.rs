pub mod error;
pub mod exec;
pub mod glue;
pub mod inner_arcs;
pub mod integrator;
pub mod outer_arcs;
pub mod potential;

pub use error::{Error, Result};

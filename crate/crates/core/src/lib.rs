pub mod error;
pub mod evaluation;
pub mod graph;
pub mod ingest;
pub mod io;
pub mod models;
pub mod plasmode;
pub mod seed;
pub mod spline;

pub use error::{Error, Result};

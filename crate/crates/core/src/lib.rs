pub mod aggregation;
pub mod data;
pub mod encoder;
pub mod error;
pub mod io;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod pruning;
pub mod retrieval;
pub mod sinkhorn;
pub mod tape;
pub mod training;

pub use error::{Error, Result};
pub use numerics::{Matrix, SeededRng};

pub mod backbone;
pub mod cli;
pub mod data_io;
pub mod error;
pub mod evalsim;
pub mod sampler;
pub mod schedule;
pub mod pipeline;
pub mod plot;
pub mod stage1;
pub mod stage2;
pub mod stage3;

pub use error::{Error, Result};

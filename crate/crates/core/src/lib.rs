pub mod engine;
pub mod experiment;
pub mod error;
pub mod grpo;
pub mod ledger;
pub mod model;
pub mod optim;
pub mod params;
pub mod probes;
pub mod seeds;
pub mod sft;
pub mod task;

pub use error::{Error, Result};

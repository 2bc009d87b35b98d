//! Event-based feature (EBF) sequences from multi-source engagement logs, a
//! cross-attention CTR model trained with hand-written backpropagation, and a
//! harness that measures how much each event source is worth as sequences
//! get longer, sources more diverse, and attributes richer.

pub mod enrichment;
pub mod error;
pub mod event;
pub mod explain;
pub mod gradcheck;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod rng;
pub mod trainer;
pub mod world;

pub use error::{CoffeeError, Result};

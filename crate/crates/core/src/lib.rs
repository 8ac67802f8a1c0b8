//! Desk-scale laboratory for looped and depth-grown decoder-only
//! transformers: training, growing, inference-time block repetition, and
//! mechanistic depth-utilization diagnostics, all on CPU with
//! property-level verification.

pub mod error;
pub mod growth;
pub mod io;
pub mod mech;
pub mod model;
pub mod numerics;
pub mod reference;
pub mod rng;
pub mod tasks;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
pub use numerics::{Element, Tensor};
pub use rng::RunRng;

// `!(x > 0.0)` rejects NaN along with the out-of-range values; index loops
// over parallel arrays read closer to the math than zipped iterators.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::too_many_arguments, clippy::type_complexity)]

pub mod bsde;
pub mod cli_io;
pub mod engine;
pub mod error;
pub mod exposure;
pub mod instruments;
pub mod market_sim;
pub mod risk_measure;
pub mod rng;
pub mod stats;

pub use error::{Result, XvaError};

// `!(x <= y)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod campaign;
pub mod error;
pub mod identifiability;
pub mod inference;
pub mod lindblad;
pub mod optimizer;
pub mod params;
pub mod pulse;
pub mod sequential;
pub mod testbed;
pub mod utility;

pub use error::{Error, Result};

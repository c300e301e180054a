pub mod attention;
pub mod block;
pub mod data;
pub mod ddconv;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use params::{Ctx, ParamBuilder, ParamId, ParamStore};
pub use tensor::{Tape, Tensor, Var};

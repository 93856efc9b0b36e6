pub mod error;
pub mod gradcheck;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::RngStream;
pub use tape::{Gradients, Mode, ParamId, Tape, Var};
pub use tensor::Tensor;
pub mod model;
pub mod objective;
pub mod params;
pub mod datasets;
pub mod metrics;
pub mod optim;
pub mod pointwise;
pub mod train;

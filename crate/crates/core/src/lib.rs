pub mod analysis;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod interp;
pub mod network;
pub mod nonlinearity;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use network::{Architecture, LayerKind, LossKind, Network};
pub use nonlinearity::{DerivativeMode, DerivativeTable, Kind, NonlinearitySpec};
pub use rng::Rng;
pub use tensor::{PoolMode, Scalar, Tensor};

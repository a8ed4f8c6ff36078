pub mod blocks;
pub mod checkpoint;
pub mod data;
pub mod engine;
pub mod error;
pub mod gmsrf;
pub mod gradsuite;
pub mod loss;
pub mod network;
pub mod optim;
pub mod params;
pub mod tensor;

pub use error::{Error, Result};
pub use gmsrf::ScaleBundle;
pub use network::{Model, ModelConfig, Network};
pub use params::{Init, ParamId, ParamStore, Session};
pub use tensor::{Activation, ConvSpec, Graph, Mode, Real, Shape, Tensor, Var};

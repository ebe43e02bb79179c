pub mod augment;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod filterbank;
pub mod frontend;
pub mod inspect;
pub mod model;
pub mod nn;
pub mod optim;
pub mod rawgat;
pub mod rawnet2;
pub mod tensor;
pub mod toy;
pub mod train;

pub use autodiff::{Gradients, Tape, Var};
pub use config::RunConfig;
pub use error::{Error, Result};
pub use model::{ModelConfig, ModelKind};
pub use nn::{Ctx, ParamStore};
pub use tensor::{ComplexTensor, Tensor};

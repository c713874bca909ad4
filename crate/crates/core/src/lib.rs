pub mod archive;
pub mod attention;
pub mod data;
pub mod ehr_ffn;
pub mod error;
pub mod evaluation;
pub mod interpretability;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};

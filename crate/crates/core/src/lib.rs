pub mod adaptation;
pub mod asr;
pub mod autograd;
pub mod chain;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod nn;
pub mod optim;
pub mod params;
pub mod seed;
pub mod speaker;
pub mod tensor;
pub mod train;
pub mod tts;

pub use error::{Error, Result};

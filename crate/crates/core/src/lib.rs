//! Decoding speech representations (MFCC frames and phoneme classes) from
//! EEG and EMG recordings.
//!
//! The numeric core is generic over [`Scalar`]; training uses `f32` with
//! 64-bit accumulation in reductions, and gradient checks run in `f64`.

pub mod analysis;
pub mod dataset;
pub mod error;
pub mod features;
pub mod kv;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod phoneme;
pub mod scalar;
pub mod signalproc;
pub mod synthgen;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Gradients, Tape, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type ParamStore32 = model::ParamStore<f32>;
pub type ParamStore64 = model::ParamStore<f64>;
pub type Epoch32 = signalproc::Epoch<f32>;
pub type Epoch64 = signalproc::Epoch<f64>;

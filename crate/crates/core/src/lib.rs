pub mod autodiff;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod model;
pub mod prompt;
pub mod scalar;
pub mod synthgen;
pub mod train;
pub mod wav;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default working precision.
pub type Real = f32;
pub type Model = model::SeparatorModel<Real>;
pub type Signal = dsp::Waveform<Real>;
/// Double-precision variants, used for gradient checks.
pub type Model64 = model::SeparatorModel<f64>;
pub type Signal64 = dsp::Waveform<f64>;

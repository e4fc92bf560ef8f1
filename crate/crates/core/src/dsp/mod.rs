//! Deterministic signal-processing primitives.

mod sad;
mod stft;

pub use sad::{detect_speech, splice_active, SadConfig, SadSegments};
pub use stft::{istft, stft, Spectrogram, StftConfig, StftPlan};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Project-wide sample rate in Hz.
pub const SAMPLE_RATE: u32 = 8000;

/// Convert a duration in milliseconds to a sample count at [`SAMPLE_RATE`],
/// rejecting durations that do not land on an integer sample.
pub fn ms_to_samples(ms: f64) -> Result<usize> {
    let exact = ms * f64::from(SAMPLE_RATE) / 1000.0;
    let rounded = exact.round();
    if !ms.is_finite() || ms < 0.0 || (exact - rounded).abs() > 1e-9 {
        return Err(Error::config(format!(
            "{ms} ms is not an integer number of samples at {SAMPLE_RATE} Hz"
        )));
    }
    Ok(rounded as usize)
}

/// Seconds to samples, rounding to the nearest sample.
pub fn seconds_to_samples(seconds: f64) -> usize {
    (seconds * f64::from(SAMPLE_RATE)).round().max(0.0) as usize
}

/// Mono time-domain signal.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform<T> {
    samples: Vec<T>,
    sample_rate: u32,
}

impl<T: Scalar> Waveform<T> {
    /// Wrap samples at [`SAMPLE_RATE`], rejecting NaN or infinite values.
    pub fn new(samples: Vec<T>) -> Result<Self> {
        if let Some(i) = samples.iter().position(|x| !x.is_finite()) {
            return Err(Error::DegenerateInput(format!("non-finite sample at index {i}")));
        }
        Ok(Self { samples, sample_rate: SAMPLE_RATE })
    }

    /// Wrap samples that are known to be finite (internal arithmetic on
    /// finite inputs).
    pub(crate) fn from_finite(samples: Vec<T>) -> Self {
        debug_assert!(samples.iter().all(|x| x.is_finite()));
        Self { samples, sample_rate: SAMPLE_RATE }
    }

    pub fn zeros(len: usize) -> Self {
        Self::from_finite(vec![T::zero(); len])
    }

    pub fn samples(&self) -> &[T] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<T> {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }

    /// Copy of `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        Self::from_finite(self.samples[start..end].to_vec())
    }

    pub fn scaled(&self, factor: T) -> Self {
        Self::from_finite(self.samples.iter().map(|&x| x * factor).collect())
    }

    /// Mean power `mean(x^2)`.
    pub fn power(&self) -> T {
        if self.samples.is_empty() {
            return T::zero();
        }
        let sum: f64 = self.samples.iter().map(|x| x.as_f64() * x.as_f64()).sum();
        T::of(sum / self.samples.len() as f64)
    }

    pub fn peak(&self) -> T {
        self.samples.iter().fold(T::zero(), |m, x| m.max(x.abs()))
    }

    pub fn concat(parts: &[&Waveform<T>]) -> Self {
        let mut out = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
        for p in parts {
            out.extend_from_slice(&p.samples);
        }
        Self::from_finite(out)
    }

    /// Lossy conversion to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Waveform<U> {
        Waveform::from_finite(self.samples.iter().map(|x| U::of(x.as_f64())).collect())
    }
}

/// Mean-removed population standard deviation.
///
/// Returns 0 for a constant signal; callers that divide by it must check.
pub fn sample_std<T: Scalar>(w: &Waveform<T>) -> T {
    let n = w.len();
    if n == 0 {
        return T::zero();
    }
    let mean = w.samples.iter().map(|x| x.as_f64()).sum::<f64>() / n as f64;
    let var = w
        .samples
        .iter()
        .map(|x| {
            let d = x.as_f64() - mean;
            d * d
        })
        .sum::<f64>()
        / n as f64;
    T::of(var.sqrt())
}

/// Standard deviations removed by [`normalize_gain`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GainScales<T> {
    pub sigma_y: T,
    pub sigma_e: T,
}

impl<T: Scalar> GainScales<T> {
    pub fn unit() -> Self {
        Self { sigma_y: T::one(), sigma_e: T::one() }
    }
}

/// Scale the mixture and target by the mixture's deviation and the
/// enrollment by its own, so both prompt halves enter the network at unit
/// variance. The target keeps its amplitude ratio to the mixture.
pub fn normalize_gain<T: Scalar>(
    s: &Waveform<T>,
    y: &Waveform<T>,
    e: &Waveform<T>,
) -> Result<(Waveform<T>, Waveform<T>, Waveform<T>, GainScales<T>)> {
    let sigma_y = sample_std(y);
    if !(sigma_y > T::zero()) {
        return Err(Error::DegenerateInput("mixture has zero variance".into()));
    }
    let sigma_e = sample_std(e);
    if !(sigma_e > T::zero()) {
        return Err(Error::DegenerateInput("enrollment has zero variance".into()));
    }
    let inv_y = T::one() / sigma_y;
    let inv_e = T::one() / sigma_e;
    Ok((s.scaled(inv_y), y.scaled(inv_y), e.scaled(inv_e), GainScales { sigma_y, sigma_e }))
}

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::{ms_to_samples, Waveform};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Analysis parameters in milliseconds at the project sample rate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StftConfig {
    pub window_ms: f64,
    pub hop_ms: f64,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self { window_ms: 16.0, hop_ms: 8.0 }
    }
}

impl StftConfig {
    /// `(window, hop)` in samples.
    pub fn lengths(&self) -> Result<(usize, usize)> {
        let win = ms_to_samples(self.window_ms)?;
        let hop = ms_to_samples(self.hop_ms)?;
        if win < 2 || win % 2 != 0 {
            return Err(Error::config(format!("window of {win} samples must be even and >= 2")));
        }
        if hop == 0 || win % hop != 0 || win / hop < 2 {
            return Err(Error::config(format!(
                "hop of {hop} samples must divide window {win} with at least 50% overlap"
            )));
        }
        Ok((win, hop))
    }

    pub fn bins(&self) -> Result<usize> {
        Ok(self.lengths()?.0 / 2 + 1)
    }
}

/// Complex time-frequency representation stored as two `frames x bins`
/// row-major planes.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram<T> {
    pub real: Vec<T>,
    pub imag: Vec<T>,
    pub frames: usize,
    pub bins: usize,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub fft_size: usize,
}

impl<T: Scalar> Spectrogram<T> {
    pub fn zeros(frames: usize, cfg: &StftConfig) -> Result<Self> {
        let (win, _) = cfg.lengths()?;
        let bins = win / 2 + 1;
        Ok(Self {
            real: vec![T::zero(); frames * bins],
            imag: vec![T::zero(); frames * bins],
            frames,
            bins,
            window_ms: cfg.window_ms,
            hop_ms: cfg.hop_ms,
            fft_size: win,
        })
    }

    pub fn config(&self) -> StftConfig {
        StftConfig { window_ms: self.window_ms, hop_ms: self.hop_ms }
    }

    /// `[frames, bins, 2]` layout with real and imaginary parts adjacent.
    pub fn to_interleaved(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.real.len() * 2);
        for (&re, &im) in self.real.iter().zip(&self.imag) {
            out.push(re);
            out.push(im);
        }
        out
    }

    pub fn from_interleaved(data: &[T], frames: usize, cfg: &StftConfig) -> Result<Self> {
        let mut spec = Self::zeros(frames, cfg)?;
        if data.len() != frames * spec.bins * 2 {
            return Err(Error::shape(format!(
                "interleaved spectrogram has {} values, expected {}",
                data.len(),
                frames * spec.bins * 2
            )));
        }
        for (i, pair) in data.chunks_exact(2).enumerate() {
            spec.real[i] = pair[0];
            spec.imag[i] = pair[1];
        }
        Ok(spec)
    }

    pub fn scaled(&self, a: T) -> Self {
        let mut out = self.clone();
        out.real.iter_mut().chain(out.imag.iter_mut()).for_each(|x| *x = *x * a);
        out
    }
}

/// Precomputed window and FFT plans for one `(window, hop)` setting.
///
/// Frames are laid out so that every input sample is covered by exactly
/// `window / hop` frames: the signal is zero-padded by `window - hop` on the
/// left and as far as needed on the right. With the square-root periodic
/// Hann window at 50 % overlap the squared windows sum to one at every
/// sample, so synthesis is plain overlap-add (scaled by `2 hop / window`
/// for higher overlaps).
pub struct StftPlan<T: Scalar> {
    cfg: StftConfig,
    win: usize,
    hop: usize,
    window: Vec<T>,
    forward: Arc<dyn Fft<T>>,
    inverse: Arc<dyn Fft<T>>,
}

impl<T: Scalar> StftPlan<T> {
    pub fn new(cfg: StftConfig) -> Result<Self> {
        let (win, hop) = cfg.lengths()?;
        let window = (0..win)
            .map(|n| {
                let phase = 2.0 * std::f64::consts::PI * n as f64 / win as f64;
                T::of((0.5 * (1.0 - phase.cos())).sqrt())
            })
            .collect();
        let mut planner = FftPlanner::<T>::new();
        Ok(Self {
            cfg,
            win,
            hop,
            window,
            forward: planner.plan_fft_forward(win),
            inverse: planner.plan_fft_inverse(win),
        })
    }

    pub fn config(&self) -> StftConfig {
        self.cfg
    }

    pub fn window_len(&self) -> usize {
        self.win
    }

    pub fn hop_len(&self) -> usize {
        self.hop
    }

    pub fn bins(&self) -> usize {
        self.win / 2 + 1
    }

    fn ola_scale(&self) -> T {
        T::of(2.0 * self.hop as f64 / self.win as f64)
    }

    fn left_pad(&self) -> usize {
        self.win - self.hop
    }

    /// Number of analysis frames for a signal of `len > 0` samples.
    pub fn num_frames(&self, len: usize) -> usize {
        (len.max(1) - 1) / self.hop + self.win / self.hop
    }

    /// First frame whose window touches input sample `n`.
    pub fn first_frame_covering(&self, n: usize) -> usize {
        (n + self.left_pad() + 1).saturating_sub(self.win).div_ceil(self.hop)
    }

    /// Frame whose window starts closest to input sample `n`.
    pub fn frame_of_sample(&self, n: usize) -> usize {
        (n + self.left_pad()) / self.hop
    }

    /// Longest signal that `frames` frames fully cover.
    pub fn synthesizable_len(&self, frames: usize) -> usize {
        if frames < self.win / self.hop {
            return 0;
        }
        (frames - self.win / self.hop + 1) * self.hop
    }

    pub fn analyze(&self, x: &[T]) -> Result<Spectrogram<T>> {
        if x.is_empty() {
            return Err(Error::DegenerateInput("cannot analyze an empty waveform".into()));
        }
        let frames = self.num_frames(x.len());
        let bins = self.bins();
        let pad = self.left_pad() as isize;
        let mut spec = Spectrogram::zeros(frames, &self.cfg)?;
        let mut buf = vec![Complex::new(T::zero(), T::zero()); self.win];
        let mut scratch = vec![Complex::new(T::zero(), T::zero()); self.forward.get_inplace_scratch_len()];
        for t in 0..frames {
            let start = (t * self.hop) as isize - pad;
            for (n, slot) in buf.iter_mut().enumerate() {
                let idx = start + n as isize;
                let v = if idx >= 0 && (idx as usize) < x.len() { x[idx as usize] } else { T::zero() };
                *slot = Complex::new(v * self.window[n], T::zero());
            }
            self.forward.process_with_scratch(&mut buf, &mut scratch);
            let row = t * bins;
            for f in 0..bins {
                spec.real[row + f] = buf[f].re;
                spec.imag[row + f] = buf[f].im;
            }
        }
        Ok(spec)
    }

    fn check(&self, spec_frames: usize, values: usize) -> Result<()> {
        if values != spec_frames * self.bins() * 2 {
            return Err(Error::shape(format!(
                "{values} spectrogram values for {spec_frames} frames of {} bins",
                self.bins()
            )));
        }
        Ok(())
    }

    /// Inverse transform of an interleaved `[frames, bins, 2]` buffer into
    /// `out_len` samples (zero-filled beyond the synthesizable range).
    pub fn synthesize(&self, ri: &[T], frames: usize, out_len: usize) -> Result<Vec<T>> {
        self.check(frames, ri.len())?;
        let bins = self.bins();
        let n = self.win;
        let inv_n = self.ola_scale() / T::of(n as f64);
        let pad = self.left_pad();
        let mut padded = vec![T::zero(); (frames - 1) * self.hop + self.win];
        let mut buf = vec![Complex::new(T::zero(), T::zero()); n];
        let mut scratch = vec![Complex::new(T::zero(), T::zero()); self.inverse.get_inplace_scratch_len()];
        for t in 0..frames {
            let row = &ri[t * bins * 2..(t + 1) * bins * 2];
            for f in 0..bins {
                let im = if f == 0 || f == bins - 1 { T::zero() } else { row[2 * f + 1] };
                buf[f] = Complex::new(row[2 * f], im);
                if f > 0 && f < bins - 1 {
                    buf[n - f] = Complex::new(row[2 * f], -im);
                }
            }
            self.inverse.process_with_scratch(&mut buf, &mut scratch);
            let start = t * self.hop;
            for k in 0..n {
                padded[start + k] = padded[start + k] + buf[k].re * inv_n * self.window[k];
            }
        }
        let mut out = vec![T::zero(); out_len];
        let avail = padded.len().saturating_sub(pad).min(out_len);
        out[..avail].copy_from_slice(&padded[pad..pad + avail]);
        Ok(out)
    }

    /// Adjoint of [`Self::synthesize`]: maps a gradient on the output samples
    /// to a gradient on the interleaved spectrogram.
    pub fn synthesize_adjoint(&self, grad: &[T], frames: usize) -> Vec<T> {
        let bins = self.bins();
        let n = self.win;
        let pad = self.left_pad() as isize;
        let inv_n = self.ola_scale() / T::of(n as f64);
        let two = T::of(2.0);
        let mut out = vec![T::zero(); frames * bins * 2];
        let mut buf = vec![Complex::new(T::zero(), T::zero()); n];
        let mut scratch = vec![Complex::new(T::zero(), T::zero()); self.forward.get_inplace_scratch_len()];
        for t in 0..frames {
            let start = (t * self.hop) as isize - pad;
            let mut any = false;
            for (k, slot) in buf.iter_mut().enumerate() {
                let idx = start + k as isize;
                let g = if idx >= 0 && (idx as usize) < grad.len() { grad[idx as usize] } else { T::zero() };
                any |= g != T::zero();
                *slot = Complex::new(g * self.window[k], T::zero());
            }
            if !any {
                continue;
            }
            self.forward.process_with_scratch(&mut buf, &mut scratch);
            let row = &mut out[t * bins * 2..(t + 1) * bins * 2];
            for f in 0..bins {
                let edge = f == 0 || f == bins - 1;
                let c = if edge { inv_n } else { two * inv_n };
                row[2 * f] = c * buf[f].re;
                row[2 * f + 1] = if edge { T::zero() } else { c * buf[f].im };
            }
        }
        out
    }
}

/// Short-time Fourier transform with a square-root periodic Hann window.
pub fn stft<T: Scalar>(w: &Waveform<T>, window_ms: f64, hop_ms: f64) -> Result<Spectrogram<T>> {
    StftPlan::new(StftConfig { window_ms, hop_ms })?.analyze(w.samples())
}

/// Overlap-add inverse of [`stft`], truncated or zero-padded to `out_length`.
pub fn istft<T: Scalar>(spec: &Spectrogram<T>, out_length: usize) -> Result<Waveform<T>> {
    let plan = StftPlan::new(spec.config())?;
    if spec.fft_size != plan.window_len() || spec.bins != plan.bins() {
        return Err(Error::config(format!(
            "spectrogram fft_size {} / {} bins inconsistent with {} ms window",
            spec.fft_size, spec.bins, spec.window_ms
        )));
    }
    if spec.real.len() != spec.imag.len() || spec.real.len() != spec.frames * spec.bins {
        return Err(Error::shape("real and imaginary planes disagree with frames x bins"));
    }
    let samples = plan.synthesize(&spec.to_interleaved(), spec.frames, out_length)?;
    Ok(Waveform::from_finite(samples))
}

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Parameters of a synthetic source-filter voice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerProfile {
    pub speaker_id: u32,
    pub f0_base: f64,
    /// Relative F0 excursion per syllable.
    pub f0_jitter: f64,
    pub formants: [f64; 3],
    /// Spectral tilt of the harmonics in dB per octave (positive = falling).
    pub harmonic_rolloff: f64,
}

impl SpeakerProfile {
    pub fn random<R: Rng + ?Sized>(speaker_id: u32, rng: &mut R) -> Self {
        Self {
            speaker_id,
            f0_base: rng.gen_range(80.0..300.0),
            f0_jitter: rng.gen_range(0.04..0.10),
            formants: [rng.gen_range(300.0..850.0), rng.gen_range(950.0..2100.0), rng.gen_range(2300.0..3400.0)],
            harmonic_rolloff: rng.gen_range(3.0..9.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.formants;
        if !(80.0..=300.0).contains(&self.f0_base) {
            return Err(Error::config(format!("f0 {} outside [80, 300] Hz", self.f0_base)));
        }
        if !(f[0] > 0.0 && f[0] < f[1] && f[1] < f[2] && f[2] < 4000.0) {
            return Err(Error::config(format!("formants {f:?} must be increasing below Nyquist")));
        }
        if !(0.0..0.5).contains(&self.f0_jitter) {
            return Err(Error::config("f0 jitter must lie in [0, 0.5)"));
        }
        Ok(())
    }

    fn formant_gain(&self, f: f64, shift: f64) -> f64 {
        const BW: [f64; 3] = [90.0, 130.0, 180.0];
        const G: [f64; 3] = [1.0, 0.7, 0.45];
        let mut g = 0.03;
        for i in 0..3 {
            let d = (f - self.formants[i] * shift) / BW[i];
            g += G[i] / (1.0 + d * d);
        }
        g
    }
}

/// Source-filter synthesis of a babbling utterance.
///
/// Harmonic pulses at a drifting F0 are shaped by the profile's formants,
/// cut into pseudo-syllables separated by silences, and the result is
/// peak-normalized to 0.9.
pub fn synth_utterance<T: Scalar, R: Rng + ?Sized>(p: &SpeakerProfile, duration_s: f64, rng: &mut R) -> Waveform<T> {
    let sr = f64::from(SAMPLE_RATE);
    let n = (duration_s * sr).round().max(1.0) as usize;
    let mut x = vec![0.0f64; n];
    let mut t = (rng.gen_range(0.05..0.25) * sr) as usize;
    let tilt = p.harmonic_rolloff / (20.0 * 2f64.log10());
    let mut gains: Vec<f64> = Vec::new();
    while t < n {
        let len = ((rng.gen_range(0.12..0.35) * sr) as usize).min(n - t);
        let f_start = p.f0_base * (1.0 + rng.gen_range(-p.f0_jitter..p.f0_jitter));
        let f_end = p.f0_base * (1.0 + rng.gen_range(-p.f0_jitter..p.f0_jitter));
        let shift = 1.0 + rng.gen_range(-0.08..0.08);
        let amp = rng.gen_range(0.5..1.0);
        let vib_rate = rng.gen_range(4.0..6.0);
        let attack = (0.02 * sr) as usize;
        let release = (0.04 * sr) as usize;
        let mut phase = rng.gen_range(0.0..2.0 * PI);
        for i in 0..len {
            let frac = i as f64 / len.max(1) as f64;
            let f0 = (f_start + (f_end - f_start) * frac) * (1.0 + 0.01 * (2.0 * PI * vib_rate * i as f64 / sr).sin());
            phase = (phase + 2.0 * PI * f0 / sr) % (2.0 * PI);
            let env = if i < attack {
                (0.5 - 0.5 * (PI * i as f64 / attack as f64).cos()).max(0.0)
            } else if i + release > len {
                0.5 - 0.5 * (PI * (len - i) as f64 / release as f64).cos()
            } else {
                1.0
            };
            if i % 16 == 0 {
                // harmonic amplitudes change slowly; refresh every 2 ms
                let k_max = ((3800.0 / f0) as usize).max(1);
                gains.clear();
                gains.extend((1..=k_max).map(|k| (k as f64).powf(-tilt) * p.formant_gain(k as f64 * f0, shift)));
            }
            let (s1, c1) = phase.sin_cos();
            let (mut sk, mut ck) = (s1, c1);
            let mut v = 0.0;
            for &g in &gains {
                v += g * sk;
                (sk, ck) = (sk * c1 + ck * s1, ck * c1 - sk * s1);
            }
            v += 0.02 * rng.gen_range(-1.0..1.0);
            x[t + i] = amp * env * v;
        }
        t += len + (rng.gen_range(0.04..0.25) * sr) as usize;
    }
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        x.iter_mut().for_each(|v| *v *= 0.9 / peak);
    }
    Waveform::from_finite(x.into_iter().map(T::of).collect())
}

/// Pink noise gated into bursts with a constant floor between them.
pub fn pink_noise_bursts<T: Scalar, R: Rng + ?Sized>(len: usize, rng: &mut R) -> Waveform<T> {
    use rustfft::num_complex::Complex;
    let size = len.next_power_of_two().max(2);
    let mut buf: Vec<Complex<f64>> = (0..size).map(|_| Complex::new(rng.gen_range(-1.0..1.0), 0.0)).collect();
    let mut planner = rustfft::FftPlanner::<f64>::new();
    planner.plan_fft_forward(size).process(&mut buf);
    for (k, c) in buf.iter_mut().enumerate() {
        let f = k.min(size - k).max(1) as f64;
        *c = *c / f.sqrt();
    }
    buf[0] = Complex::new(0.0, 0.0);
    planner.plan_fft_inverse(size).process(&mut buf);
    let sr = f64::from(SAMPLE_RATE);
    let mut env = vec![0.15f64; len];
    let mut t = 0;
    while t < len {
        let on = (rng.gen_range(0.2..1.0) * sr) as usize;
        let level = rng.gen_range(0.5..1.0);
        for v in env.iter_mut().skip(t).take(on) {
            *v = level;
        }
        t += on + (rng.gen_range(0.1..0.5) * sr) as usize;
    }
    // smooth the gate edges with a 10 ms moving average
    let w = (0.01 * sr) as usize;
    let mut smooth = vec![0.0; len];
    let mut acc = 0.0;
    for i in 0..len {
        acc += env[i];
        if i >= w {
            acc -= env[i - w];
        }
        smooth[i] = acc / (i + 1).min(w) as f64;
    }
    Waveform::from_finite((0..len).map(|i| T::of(buf[i].re * smooth[i])).collect())
}

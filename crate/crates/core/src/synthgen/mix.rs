use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dsp::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// One simulated two-speaker mixture with its clean references.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureRecord<T> {
    pub id: String,
    pub speaker_ids: [u32; 2],
    pub mixture: Waveform<T>,
    /// Clean (direct-path) reference per speaker, length-matched to the mixture.
    pub sources: [Waveform<T>; 2],
    /// Per-speaker enrollment pool, each utterance different from the mixed one.
    pub enrollments: [Vec<Waveform<T>>; 2],
    pub sir_db: f64,
    pub noise_snr_db: Option<f64>,
    pub t60_s: Option<f64>,
    pub seed: u64,
}

fn mean_power<T: Scalar>(x: &[T]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>() / x.len() as f64
}

/// Fully overlapped two-speaker mixture, truncated to the shorter source
/// and scaled so that `10 log10(P(s1) / P(s2)) = sir_db`.
pub fn mix_two<T: Scalar>(s1: &Waveform<T>, s2: &Waveform<T>, sir_db: f64) -> Result<MixtureRecord<T>> {
    let n = s1.len().min(s2.len());
    if n == 0 {
        return Err(Error::DegenerateInput("empty source".into()));
    }
    let a = s1.slice(0, n);
    let b = s2.slice(0, n);
    let (p1, p2) = (mean_power(a.samples()), mean_power(b.samples()));
    if p1 <= 0.0 || p2 <= 0.0 {
        return Err(Error::DegenerateInput("source with zero power".into()));
    }
    let gain = (p1 / p2 / 10f64.powf(sir_db / 10.0)).sqrt();
    let b = Waveform::from_finite(b.samples().iter().map(|&v| T::of(v.as_f64() * gain)).collect());
    let mixture = Waveform::from_finite(a.samples().iter().zip(b.samples()).map(|(&x, &y)| x + y).collect());
    Ok(MixtureRecord {
        id: String::new(),
        speaker_ids: [0, 1],
        mixture,
        sources: [a, b],
        enrollments: [Vec::new(), Vec::new()],
        sir_db,
        noise_snr_db: None,
        t60_s: None,
        seed: 0,
    })
}

/// Add noise scaled so the louder source is `snr_db` above it.
pub fn add_noise<T: Scalar>(mut rec: MixtureRecord<T>, noise: &Waveform<T>, snr_db: f64) -> Result<MixtureRecord<T>> {
    let n = rec.mixture.len();
    if noise.len() < n {
        return Err(Error::LengthMismatch { expected: n, got: noise.len() });
    }
    let pn = mean_power(&noise.samples()[..n]);
    if pn <= 0.0 {
        return Err(Error::DegenerateInput("noise with zero power".into()));
    }
    let loud = mean_power(rec.sources[0].samples()).max(mean_power(rec.sources[1].samples()));
    let gain = (loud / pn / 10f64.powf(snr_db / 10.0)).sqrt();
    let mixed = rec
        .mixture
        .samples()
        .iter()
        .zip(noise.samples())
        .map(|(&m, &v)| T::of(m.as_f64() + gain * v.as_f64()))
        .collect();
    rec.mixture = Waveform::from_finite(mixed);
    rec.noise_snr_db = Some(snr_db);
    Ok(rec)
}

/// Synthetic room impulse response: a unit impulse at `delay` followed by
/// an exponentially decaying Gaussian tail whose energy falls by 60 dB
/// over `t60_s`.
pub fn synth_rir<R: Rng + ?Sized>(t60_s: f64, delay: usize, rng: &mut R) -> Result<Vec<f64>> {
    if !(0.05..=2.0).contains(&t60_s) {
        return Err(Error::config(format!("t60 {t60_s} s outside [0.05, 2.0]")));
    }
    let sr = f64::from(SAMPLE_RATE);
    let tail = (t60_s * sr).ceil() as usize;
    let mut h = vec![0.0; delay + 1 + tail];
    h[delay] = 1.0;
    // amplitude decays 3 ln(10) nepers per t60, i.e. 60 dB in energy
    let rate = 3.0 * std::f64::consts::LN_10 / (t60_s * sr);
    for i in 1..=tail {
        let g: f64 = StandardNormal.sample(rng);
        h[delay + i] = 0.08 * g * (-rate * i as f64).exp();
    }
    Ok(h)
}

/// Convolve with a synthetic RIR; returns the reverberant signal and the
/// direct path (the source delayed only), both of the source length.
pub fn reverberate<T: Scalar, R: Rng + ?Sized>(src: &Waveform<T>, t60_s: f64, rng: &mut R) -> Result<(Waveform<T>, Waveform<T>)> {
    let delay = rng.gen_range(4..32);
    let h = synth_rir(t60_s, delay, rng)?;
    let x: Vec<f64> = src.samples().iter().map(|v| v.as_f64()).collect();
    let wet = fft_convolve(&x, &h, x.len());
    let mut direct = vec![T::zero(); x.len()];
    for i in delay..x.len() {
        direct[i] = T::of(x[i - delay]);
    }
    Ok((Waveform::from_finite(wet.into_iter().map(T::of).collect()), Waveform::from_finite(direct)))
}

fn fft_convolve(x: &[f64], h: &[f64], out_len: usize) -> Vec<f64> {
    use rustfft::num_complex::Complex;
    if x.is_empty() {
        return Vec::new();
    }
    let size = (x.len() + h.len()).next_power_of_two();
    let mut planner = rustfft::FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(size);
    let mut a: Vec<Complex<f64>> = (0..size).map(|i| Complex::new(x.get(i).copied().unwrap_or(0.0), 0.0)).collect();
    let mut b: Vec<Complex<f64>> = (0..size).map(|i| Complex::new(h.get(i).copied().unwrap_or(0.0), 0.0)).collect();
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (u, v) in a.iter_mut().zip(&b) {
        *u *= v;
    }
    planner.plan_fft_inverse(size).process(&mut a);
    let inv = 1.0 / size as f64;
    a.iter().take(out_len).map(|c| c.re * inv).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn noise(n: usize, seed: u64) -> Waveform<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn db(a: &Waveform<f64>, b: &Waveform<f64>) -> f64 {
        10.0 * (mean_power(a.samples()) / mean_power(b.samples())).log10()
    }

    #[test]
    fn sir_is_imposed() {
        let (a, b) = (noise(1000, 1), noise(1000, 2).scaled(0.3));
        for sir in [0.0, 5.0, -5.0] {
            let r = mix_two(&a, &b, sir).unwrap();
            assert!((db(&r.sources[0], &r.sources[1]) - sir).abs() < 1e-9);
            for i in 0..1000 {
                let sum = r.sources[0].samples()[i] + r.sources[1].samples()[i];
                assert!((r.mixture.samples()[i] - sum).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn min_truncation() {
        let r = mix_two(&noise(32000, 1), &noise(30000, 2), 0.0).unwrap();
        assert_eq!(r.mixture.len(), 30000);
        assert!(mix_two(&noise(10, 1), &Waveform::zeros(10), 0.0).is_err());
    }

    #[test]
    fn snr_against_louder_source() {
        let r = mix_two(&noise(2000, 1), &noise(2000, 2), 3.0).unwrap();
        let before = r.sources.clone();
        let nz = noise(2500, 3);
        for snr in [0.0, -6.0] {
            let out = add_noise(r.clone(), &nz, snr).unwrap();
            assert_eq!(out.sources, before);
            let resid: Vec<f64> = (0..2000).map(|i| out.mixture.samples()[i] - r.mixture.samples()[i]).collect();
            let measured = 10.0 * (mean_power(before[0].samples()) / mean_power(&resid)).log10();
            assert!((measured - snr).abs() < 1e-9, "{measured}");
        }
        assert!(add_noise(r.clone(), &noise(100, 4), 0.0).is_err());
    }

    #[test]
    fn rir_decay_matches_t60() {
        for t60 in [0.2, 1.0] {
            let h = synth_rir(t60, 10, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
            let tail = &h[11..];
            // least-squares fit of log energy in 10 ms blocks
            let blk = 80;
            let pts: Vec<(f64, f64)> = tail
                .chunks_exact(blk)
                .enumerate()
                .map(|(i, c)| ((i * blk) as f64 + blk as f64 / 2.0, 10.0 * (c.iter().map(|v| v * v).sum::<f64>() / blk as f64).log10()))
                .collect();
            let n = pts.len() as f64;
            let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
            let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
            let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
            let drop = slope * t60 * 8000.0;
            assert!((drop + 60.0).abs() < 1.0, "t60 {t60}: {drop} dB");
        }
        assert!(synth_rir(0.01, 0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn short_t60_is_nearly_direct() {
        let src = noise(4000, 8);
        let (wet, direct) = reverberate(&src, 0.05, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(wet.len(), 4000);
        let h = synth_rir(0.05, 0, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let tail_energy: f64 = h[1..].iter().map(|v| v * v).sum();
        let diff: Vec<f64> = wet.samples().iter().zip(direct.samples()).map(|(a, b)| a - b).collect();
        // white source: residual power is the tail energy times the source power
        assert!(mean_power(&diff) < 1.5 * tail_energy * mean_power(src.samples()));
    }
}

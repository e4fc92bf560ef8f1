//! Mono WAV reading and writing (16-bit PCM or 32-bit float).

use std::path::Path;

use hound::{SampleFormat, WavSpec};

use crate::dsp::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WavEncoding {
    Pcm16,
    Float32,
}

/// Write a waveform at the project sample rate. PCM output is clipped to
/// `[-1, 1]`.
pub fn write_wav<T: Scalar>(path: &Path, w: &Waveform<T>, encoding: WavEncoding) -> Result<()> {
    let spec = match encoding {
        WavEncoding::Pcm16 => WavSpec {
            channels: 1,
            sample_rate: SAMPLE_RATE,
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        },
        WavEncoding::Float32 => WavSpec {
            channels: 1,
            sample_rate: SAMPLE_RATE,
            bits_per_sample: 32,
            sample_format: SampleFormat::Float,
        },
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &x in w.samples() {
        match encoding {
            WavEncoding::Pcm16 => {
                let v = (x.as_f64() * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                writer.write_sample(v)?;
            }
            WavEncoding::Float32 => writer.write_sample(x.as_f64() as f32)?,
        }
    }
    writer.finalize()?;
    Ok(())
}

/// Read a mono WAV file, returning its samples and native sample rate.
fn read_raw(path: &Path) -> Result<(Vec<f64>, u32)> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::config(format!("{}: expected mono, found {} channels", path.display(), spec.channels)));
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Float, 32) => reader.samples::<f32>().map(|s| s.map(f64::from)).collect::<std::result::Result<_, _>>()?,
        (SampleFormat::Int, bits) if bits <= 32 => {
            let scale = (1u64 << (bits - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| f64::from(v) / scale))
                .collect::<std::result::Result<_, _>>()?
        }
        (fmt, bits) => {
            return Err(Error::config(format!("unsupported WAV format {fmt:?}/{bits} bits")));
        }
    };
    Ok((samples, spec.sample_rate))
}

/// Read a mono WAV at the project sample rate; other rates are rejected.
pub fn read_wav<T: Scalar>(path: &Path) -> Result<Waveform<T>> {
    let (samples, rate) = read_raw(path)?;
    if rate != SAMPLE_RATE {
        return Err(Error::config(format!(
            "{}: sample rate {rate} Hz, expected {SAMPLE_RATE} Hz (pass --resample to convert)",
            path.display()
        )));
    }
    Waveform::new(samples.into_iter().map(T::of).collect())
}

/// Read a mono WAV and linearly resample it to the project rate.
///
/// Intended for the command-line layer only; it is a plain interpolator
/// without anti-alias filtering.
pub fn read_wav_resampled<T: Scalar>(path: &Path) -> Result<Waveform<T>> {
    let (samples, rate) = read_raw(path)?;
    if rate == SAMPLE_RATE || samples.is_empty() {
        return Waveform::new(samples.into_iter().map(T::of).collect());
    }
    let ratio = f64::from(rate) / f64::from(SAMPLE_RATE);
    let out_len = ((samples.len() as f64) / ratio).floor().max(1.0) as usize;
    let out = (0..out_len)
        .map(|i| {
            let pos = i as f64 * ratio;
            let k = pos.floor() as usize;
            let frac = pos - k as f64;
            let a = samples[k.min(samples.len() - 1)];
            let b = samples[(k + 1).min(samples.len() - 1)];
            T::of(a + (b - a) * frac)
        })
        .collect();
    Waveform::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_roundtrip_is_exact_in_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let w = Waveform::new(vec![0.25f32, -0.5, 0.125, 0.0]).unwrap();
        write_wav(&path, &w, WavEncoding::Float32).unwrap();
        let r: Waveform<f32> = read_wav(&path).unwrap();
        assert_eq!(r, w);
    }

    #[test]
    fn pcm_roundtrip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.wav");
        let w = Waveform::new(vec![0.3f64, -0.7, 0.999]).unwrap();
        write_wav(&path, &w, WavEncoding::Pcm16).unwrap();
        let r: Waveform<f64> = read_wav(&path).unwrap();
        for (a, b) in r.samples().iter().zip(w.samples()) {
            assert!((a - b).abs() < 1.0 / 32000.0);
        }
    }

    #[test]
    fn other_rates_need_resampling() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.wav");
        let spec = WavSpec { channels: 1, sample_rate: 16000, bits_per_sample: 16, sample_format: SampleFormat::Int };
        let mut wr = hound::WavWriter::create(&path, spec).unwrap();
        for i in 0..1600 {
            wr.write_sample((i % 100) as i16).unwrap();
        }
        wr.finalize().unwrap();
        assert!(read_wav::<f32>(&path).is_err());
        let r: Waveform<f32> = read_wav_resampled(&path).unwrap();
        assert_eq!(r.len(), 800);
    }
}

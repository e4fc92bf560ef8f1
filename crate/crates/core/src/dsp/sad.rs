use serde::{Deserialize, Serialize};

use super::{ms_to_samples, Waveform};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Frame-energy speech activity detector settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SadConfig {
    pub frame_ms: f64,
    pub hop_ms: f64,
    /// Activity threshold relative to the loudest frame, in dB (negative).
    pub threshold_db: f64,
    pub min_segment_ms: f64,
}

impl Default for SadConfig {
    fn default() -> Self {
        Self { frame_ms: 25.0, hop_ms: 10.0, threshold_db: -40.0, min_segment_ms: 50.0 }
    }
}

/// Sorted, non-overlapping half-open sample ranges of detected speech.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SadSegments {
    pub segments: Vec<(usize, usize)>,
}

impl SadSegments {
    /// Validate ordering and bounds against a signal of `len` samples.
    pub fn new(segments: Vec<(usize, usize)>, len: usize) -> Result<Self> {
        let mut prev_end = 0;
        for (i, &(s, e)) in segments.iter().enumerate() {
            if s >= e || e > len || (i > 0 && s < prev_end) {
                return Err(Error::config(format!("invalid segment ({s}, {e}) for length {len}")));
            }
            prev_end = e;
        }
        Ok(Self { segments })
    }

    pub fn total_len(&self) -> usize {
        self.segments.iter().map(|(s, e)| e - s).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }
}

/// Energy-based speech activity detection.
///
/// A frame is active when its RMS is within `threshold_db` of the loudest
/// frame. A run of active frames `i..=j` is mapped to the samples not
/// covered by the neighbouring inactive frames, i.e. from the end of frame
/// `i - 1` to the start of frame `j + 1`.
pub fn detect_speech<T: Scalar>(w: &Waveform<T>, cfg: &SadConfig) -> Result<SadSegments> {
    let frame = ms_to_samples(cfg.frame_ms)?;
    let hop = ms_to_samples(cfg.hop_ms)?;
    let min_len = ms_to_samples(cfg.min_segment_ms)?;
    if frame == 0 || hop == 0 || hop > frame {
        return Err(Error::config("SAD needs 0 < hop <= frame"));
    }
    if !(cfg.threshold_db < 0.0) {
        return Err(Error::config("SAD threshold must be negative (relative to peak)"));
    }
    let x = w.samples();
    let len = x.len();
    if len == 0 {
        return Ok(SadSegments::default());
    }
    let n_frames = if len <= frame { 1 } else { 1 + (len - frame).div_ceil(hop) };
    let rms: Vec<f64> = (0..n_frames)
        .map(|i| {
            let s = i * hop;
            let e = (s + frame).min(len);
            let energy: f64 = x[s..e].iter().map(|v| v.as_f64() * v.as_f64()).sum();
            (energy / (e - s) as f64).sqrt()
        })
        .collect();
    let peak = rms.iter().cloned().fold(0.0, f64::max);
    if peak <= 0.0 {
        return Ok(SadSegments::default());
    }
    let floor = peak * 10f64.powf(cfg.threshold_db / 20.0);
    let active: Vec<bool> = rms.iter().map(|&r| r > floor).collect();

    let mut raw: Vec<(usize, usize)> = Vec::new();
    let mut i = 0;
    while i < n_frames {
        if !active[i] {
            i += 1;
            continue;
        }
        let mut j = i;
        while j + 1 < n_frames && active[j + 1] {
            j += 1;
        }
        let mut start = if i == 0 { 0 } else { ((i - 1) * hop + frame).min(len) };
        let mut end = if j + 1 < n_frames { (j + 1) * hop } else { len };
        if start >= end {
            start = i * hop;
            end = (j * hop + frame).min(len);
        }
        raw.push((start, end));
        i = j + 1;
    }

    let mut merged: Vec<(usize, usize)> = Vec::with_capacity(raw.len());
    for (s, e) in raw {
        match merged.last_mut() {
            Some(last) if s <= last.1 => last.1 = last.1.max(e),
            _ => merged.push((s, e)),
        }
    }
    merged.retain(|(s, e)| e - s >= min_len);
    Ok(SadSegments { segments: merged })
}

/// Concatenate the detected segments in temporal order.
pub fn splice_active<T: Scalar>(w: &Waveform<T>, segs: &SadSegments) -> Result<Waveform<T>> {
    let x = w.samples();
    let mut out = Vec::with_capacity(segs.total_len());
    let mut prev_end = 0;
    for (i, &(s, e)) in segs.segments.iter().enumerate() {
        if s >= e || e > x.len() || (i > 0 && s < prev_end) {
            return Err(Error::config(format!("segment ({s}, {e}) invalid for length {}", x.len())));
        }
        out.extend_from_slice(&x[s..e]);
        prev_end = e;
    }
    Ok(Waveform::from_finite(out))
}

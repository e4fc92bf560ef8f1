//! Onset prompting: enrollment fitting, glue signals and prompted pairs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{normalize_gain, GainScales, Waveform};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Constant-valued separator placed between enrollment and mixture.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlueSpec {
    pub length_ms: f64,
    pub value: f64,
}

impl Default for GlueSpec {
    fn default() -> Self {
        Self { length_ms: 32.0, value: 0.0 }
    }
}

impl GlueSpec {
    /// No glue at all.
    pub fn none() -> Self {
        Self { length_ms: 0.0, value: 0.0 }
    }

    pub fn len_samples(&self) -> Result<usize> {
        if !(self.length_ms >= 0.0) || !self.value.is_finite() {
            return Err(Error::config(format!("invalid glue {self:?}")));
        }
        Ok((self.length_ms * 8.0).round() as usize)
    }
}

/// Where the enrollment goes relative to the mixture.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptStrategy {
    #[default]
    Prepend,
    Append,
    Split,
}

impl std::str::FromStr for PromptStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prepend" => Ok(Self::Prepend),
            "append" => Ok(Self::Append),
            "split" => Ok(Self::Split),
            other => Err(Error::config(format!("unknown strategy {other:?} (prepend|append|split)"))),
        }
    }
}

impl std::fmt::Display for PromptStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Prepend => "prepend",
            Self::Append => "append",
            Self::Split => "split",
        })
    }
}

/// Segment lengths of a prompted signal `[e_p; g; y; g; e_a]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBoundaries {
    pub enroll_pre_len: usize,
    pub glue1_len: usize,
    pub mixture_len: usize,
    pub glue2_len: usize,
    pub enroll_post_len: usize,
}

impl PromptBoundaries {
    pub fn total(&self) -> usize {
        self.enroll_pre_len + self.glue1_len + self.mixture_len + self.glue2_len + self.enroll_post_len
    }

    /// Half-open sample range of the mixture.
    pub fn mixture_range(&self) -> (usize, usize) {
        let start = self.enroll_pre_len + self.glue1_len;
        (start, start + self.mixture_len)
    }

    /// Half-open ranges of the enrollment pieces (possibly empty).
    pub fn enrollment_ranges(&self) -> [(usize, usize); 2] {
        let (_, mix_end) = self.mixture_range();
        let post = mix_end + self.glue2_len;
        [(0, self.enroll_pre_len), (post, post + self.enroll_post_len)]
    }

    /// Half-open ranges of the glue blocks (possibly empty).
    pub fn glue_ranges(&self) -> [(usize, usize); 2] {
        let (mix_start, mix_end) = self.mixture_range();
        [(self.enroll_pre_len, mix_start), (mix_end, mix_end + self.glue2_len)]
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.total() {
            return Err(Error::LengthMismatch { expected: self.total(), got: len });
        }
        Ok(())
    }
}

/// Network input and training target sharing one prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptedPair<T> {
    pub input: Waveform<T>,
    pub target: Waveform<T>,
    pub boundaries: PromptBoundaries,
    pub scales: GainScales<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitMode {
    /// Random crop of over-long enrollments.
    Train,
    /// Leading segment of over-long enrollments.
    Eval,
}

pub fn make_glue<T: Scalar>(spec: &GlueSpec) -> Result<Waveform<T>> {
    let n = spec.len_samples()?;
    Ok(Waveform::from_finite(vec![T::of(spec.value); n]))
}

fn crop<T: Scalar, R: Rng + ?Sized>(x: &[T], len: usize, mode: FitMode, rng: &mut R) -> Vec<T> {
    if x.len() <= len {
        return x.to_vec();
    }
    let start = match mode {
        FitMode::Train => rng.gen_range(0..=x.len() - len),
        FitMode::Eval => 0,
    };
    x[start..start + len].to_vec()
}

fn pad_left<T: Scalar>(x: Vec<T>, len: usize) -> Vec<T> {
    let mut out = vec![T::zero(); len - x.len()];
    out.extend(x);
    out
}

fn pad_right<T: Scalar>(mut x: Vec<T>, len: usize) -> Vec<T> {
    x.resize(len, T::zero());
    x
}

/// Bring an (already SAD-spliced) enrollment to exactly `target_len`
/// samples: short inputs are zero-padded on the left, long ones cropped.
pub fn fit_enrollment<T: Scalar, R: Rng + ?Sized>(
    e_active: &Waveform<T>,
    target_len: usize,
    mode: FitMode,
    rng: &mut R,
) -> Result<Waveform<T>> {
    fit_enrollment_for(PromptStrategy::Prepend, e_active, target_len, mode, rng)
}

/// Strategy-aware variant of [`fit_enrollment`].
///
/// Append pads on the right. Split crops `target_len` samples of content,
/// gives the first `ceil` half to the prepended side (left-padded to
/// `ceil(E/2)`) and the rest to the appended side (right-padded to
/// `floor(E/2)`), returning the two pieces back to back.
pub fn fit_enrollment_for<T: Scalar, R: Rng + ?Sized>(
    strategy: PromptStrategy,
    e_active: &Waveform<T>,
    target_len: usize,
    mode: FitMode,
    rng: &mut R,
) -> Result<Waveform<T>> {
    if target_len == 0 {
        return Err(Error::config("enrollment target length must be positive"));
    }
    if e_active.is_empty() {
        return Err(Error::SilentEnrollment);
    }
    let content = crop(e_active.samples(), target_len, mode, rng);
    let out = match strategy {
        PromptStrategy::Prepend => pad_left(content, target_len),
        PromptStrategy::Append => pad_right(content, target_len),
        PromptStrategy::Split => {
            let pre_len = target_len.div_ceil(2);
            let cut = content.len().div_ceil(2);
            let mut pre = pad_left(content[..cut].to_vec(), pre_len);
            pre.extend(pad_right(content[cut..].to_vec(), target_len - pre_len));
            pre
        }
    };
    Ok(Waveform::from_finite(out))
}

/// Build the prompted input/target pair.
///
/// `e` is the fitted enrollment (see [`fit_enrollment_for`]); an empty `e`
/// yields an enrollment-free pair whose enrollment scale is 1. Gains are
/// normalized here, before concatenation.
pub fn assemble<T: Scalar>(
    e: &Waveform<T>,
    y: &Waveform<T>,
    s: &Waveform<T>,
    glue: &GlueSpec,
    strategy: PromptStrategy,
) -> Result<PromptedPair<T>> {
    if y.is_empty() {
        return Err(Error::DegenerateInput("empty mixture".into()));
    }
    if y.len() != s.len() {
        return Err(Error::LengthMismatch { expected: y.len(), got: s.len() });
    }
    let (s, y, e, scales) = if e.is_empty() {
        let (s, y, _, sc) = normalize_gain(s, y, y)?;
        (s, y, e.clone(), GainScales { sigma_y: sc.sigma_y, sigma_e: T::one() })
    } else {
        normalize_gain(s, y, e)?
    };
    let g = make_glue::<T>(glue)?;
    let empty = Waveform::zeros(0);
    let (e_pre, e_post) = match strategy {
        PromptStrategy::Prepend => (e.clone(), empty.clone()),
        PromptStrategy::Append => (empty.clone(), e.clone()),
        PromptStrategy::Split => {
            let cut = e.len().div_ceil(2);
            (e.slice(0, cut), e.slice(cut, e.len()))
        }
    };
    let g1 = if matches!(strategy, PromptStrategy::Append) { &empty } else { &g };
    let g2 = if matches!(strategy, PromptStrategy::Prepend) { &empty } else { &g };
    let boundaries = PromptBoundaries {
        enroll_pre_len: e_pre.len(),
        glue1_len: g1.len(),
        mixture_len: y.len(),
        glue2_len: g2.len(),
        enroll_post_len: e_post.len(),
    };
    let input = Waveform::concat(&[&e_pre, g1, &y, g2, &e_post]);
    let target = Waveform::concat(&[&e_pre, g1, &s, g2, &e_post]);
    Ok(PromptedPair { input, target, boundaries, scales })
}

/// Mixture-range slice of a prompted-length signal.
pub fn strip_prompt<T: Scalar>(est: &Waveform<T>, b: &PromptBoundaries) -> Result<Waveform<T>> {
    b.check_len(est.len())?;
    let (a, z) = b.mixture_range();
    Ok(est.slice(a, z))
}

/// Undo gain normalization range by range; glue samples are left as is.
pub fn denormalize<T: Scalar>(est: &Waveform<T>, b: &PromptBoundaries, scales: &GainScales<T>) -> Result<Waveform<T>> {
    b.check_len(est.len())?;
    let mut x = est.samples().to_vec();
    let (a, z) = b.mixture_range();
    x[a..z].iter_mut().for_each(|v| *v = *v * scales.sigma_y);
    for (a, z) in b.enrollment_ranges() {
        x[a..z].iter_mut().for_each(|v| *v = *v * scales.sigma_e);
    }
    Ok(Waveform::from_finite(x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(n: usize, offset: f64) -> Waveform<f64> {
        Waveform::new((0..n).map(|i| ((i as f64 + offset) * 0.37).sin()).collect()).unwrap()
    }

    #[test]
    fn glue_examples() {
        let g: Waveform<f32> = make_glue(&GlueSpec::default()).unwrap();
        assert_eq!(g.len(), 256);
        assert!(g.samples().iter().all(|&v| v == 0.0));
        let g: Waveform<f32> = make_glue(&GlueSpec { value: 5.0, ..Default::default() }).unwrap();
        assert!(g.samples().iter().all(|&v| v == 5.0));
        assert!(make_glue::<f32>(&GlueSpec::none()).unwrap().is_empty());
        assert!(make_glue::<f32>(&GlueSpec { length_ms: -1.0, value: 0.0 }).is_err());
    }

    #[test]
    fn fit_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = ramp(8000, 0.0);
        assert_eq!(fit_enrollment(&e, 8000, FitMode::Eval, &mut rng).unwrap(), e);

        let short = ramp(3000, 0.0);
        let f = fit_enrollment(&short, 8000, FitMode::Train, &mut rng).unwrap();
        assert!(f.samples()[..5000].iter().all(|&v| v == 0.0));
        assert_eq!(&f.samples()[5000..], short.samples());

        let long = ramp(20000, 0.0);
        let f = fit_enrollment(&long, 8000, FitMode::Eval, &mut rng).unwrap();
        assert_eq!(f.samples(), &long.samples()[..8000]);

        assert!(matches!(fit_enrollment(&Waveform::<f64>::zeros(0), 10, FitMode::Eval, &mut rng), Err(Error::SilentEnrollment)));
    }

    #[test]
    fn split_fit_pads_outward() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let short = Waveform::new(vec![1.0, 2.0, 3.0]).unwrap();
        let f = fit_enrollment_for(PromptStrategy::Split, &short, 8, FitMode::Eval, &mut rng).unwrap();
        assert_eq!(f.samples(), &[0.0, 0.0, 1.0, 2.0, 3.0, 0.0, 0.0, 0.0]);
        let f = fit_enrollment_for(PromptStrategy::Append, &short, 5, FitMode::Eval, &mut rng).unwrap();
        assert_eq!(f.samples(), &[1.0, 2.0, 3.0, 0.0, 0.0]);
    }

    #[test]
    fn assemble_prepend_and_split_lengths() {
        let e = ramp(8000, 1.0);
        let y = ramp(32000, 2.0);
        let s = ramp(32000, 3.0);
        let p = assemble(&e, &y, &s, &GlueSpec::default(), PromptStrategy::Prepend).unwrap();
        assert_eq!(p.input.len(), 40256);
        assert_eq!(p.boundaries, PromptBoundaries { enroll_pre_len: 8000, glue1_len: 256, mixture_len: 32000, glue2_len: 0, enroll_post_len: 0 });

        let p = assemble(&e, &y, &s, &GlueSpec::default(), PromptStrategy::Split).unwrap();
        assert_eq!(p.input.len(), 40512);
        assert_eq!(p.boundaries, PromptBoundaries { enroll_pre_len: 4000, glue1_len: 256, mixture_len: 32000, glue2_len: 256, enroll_post_len: 4000 });
        let stripped = strip_prompt(&p.input, &p.boundaries).unwrap();
        assert_eq!(stripped.samples(), &p.input.samples()[4256..36256]);

        let p = assemble(&e, &y, &s, &GlueSpec::default(), PromptStrategy::Append).unwrap();
        assert_eq!(p.boundaries.mixture_range(), (0, 32000));
        assert_eq!(p.boundaries.glue_ranges(), [(0, 0), (32000, 32256)]);
    }

    #[test]
    fn empty_enrollment_gives_control_pair() {
        let y = ramp(1000, 2.0);
        let p = assemble(&Waveform::zeros(0), &y, &y, &GlueSpec::default(), PromptStrategy::Prepend).unwrap();
        assert_eq!(p.boundaries.enroll_pre_len, 0);
        assert_eq!(p.scales.sigma_e, 1.0);
        assert_eq!(p.input.len(), 1256);
    }

    #[test]
    fn denormalize_examples() {
        let b = PromptBoundaries { enroll_pre_len: 2, glue1_len: 1, mixture_len: 3, glue2_len: 0, enroll_post_len: 0 };
        let est = Waveform::new(vec![1.0; 6]).unwrap();
        assert_eq!(denormalize(&est, &b, &GainScales::unit()).unwrap(), est);
        let d = denormalize(&est, &b, &GainScales { sigma_y: 2.0, sigma_e: 1.0 }).unwrap();
        assert_eq!(d.samples(), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        let d = denormalize(&est, &b, &GainScales { sigma_y: 1.0, sigma_e: 3.0 }).unwrap();
        assert_eq!(d.samples(), &[3.0, 3.0, 1.0, 1.0, 1.0, 1.0]);
        assert!(denormalize(&Waveform::new(vec![1.0; 5]).unwrap(), &b, &GainScales::unit()).is_err());
        assert!(strip_prompt(&Waveform::new(vec![1.0; 7]).unwrap(), &b).is_err());
    }

    #[test]
    fn strategy_parse_roundtrip() {
        for s in [PromptStrategy::Prepend, PromptStrategy::Append, PromptStrategy::Split] {
            assert_eq!(s.to_string().parse::<PromptStrategy>().unwrap(), s);
        }
        assert!("both".parse::<PromptStrategy>().is_err());
    }
}

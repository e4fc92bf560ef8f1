//! Inference, SI-SDRi reporting, ablation grids and attention export.

mod ablation;
mod attention;
pub mod plot;

pub use ablation::{cache_dir_from_env, cache_key, run_ablation, train_cached, AblationAxis, AblationCell, AblationGrid, AblationTable, CACHE_ENV};
pub use attention::{export_attention, write_npy, AttentionExport, HeadSummary};

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::dsp::{seconds_to_samples, SadConfig, StftPlan, Waveform};
use crate::error::{Error, Result};
use crate::model::{stft_config, ModelVariant, SeparatorModel};
use crate::prompt::{assemble, denormalize, fit_enrollment_for, strip_prompt, FitMode, GlueSpec, PromptStrategy, PromptedPair};
use crate::scalar::Scalar;
use crate::synthgen::{RecordSource, Split};
use crate::train::{active_enrollment, estimate_graph, si_sdr};

/// Test-time prompt settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractConfig {
    pub enroll_len_s: f64,
    pub glue: GlueSpec,
    pub strategy: PromptStrategy,
    pub sad_enabled: bool,
    pub sad: SadConfig,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        crate::train::TrainConfig::default().extract_config()
    }
}

/// Mixture-range estimate of `pair` in the original signal scale.
fn estimate<T: Scalar>(model: &SeparatorModel<T>, plan: &Arc<StftPlan<T>>, pair: &PromptedPair<T>) -> Result<Waveform<T>> {
    let mut g = Graph::new();
    let v = estimate_graph(model, plan, pair, &mut g)?;
    let out = Waveform::new(g.value(v).data.clone())?;
    match model.config.variant {
        ModelVariant::Lext => strip_prompt(&denormalize(&out, &pair.boundaries, &pair.scales)?, &pair.boundaries),
        ModelVariant::FixedEmbedBaseline => Ok(out.scaled(pair.scales.sigma_y)),
    }
}

fn plan<T: Scalar>() -> Result<Arc<StftPlan<T>>> {
    Ok(Arc::new(StftPlan::new(stft_config())?))
}

/// Extract the enrolled speaker from mixture `y`.
///
/// SAD (when enabled), first-segment enrollment fitting, prompt assembly,
/// the network, gain restoration and prompt removal; the result has the
/// length of `y`.
pub fn extract<T: Scalar>(model: &SeparatorModel<T>, y: &Waveform<T>, e_raw: &Waveform<T>, cfg: &ExtractConfig) -> Result<Waveform<T>> {
    if y.is_empty() || e_raw.is_empty() {
        return Err(Error::DegenerateInput("mixture and enrollment must be nonempty".into()));
    }
    let active = active_enrollment(e_raw, cfg.sad_enabled, &cfg.sad)?;
    // eval-mode fitting never draws from the rng
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    let e = fit_enrollment_for(cfg.strategy, &active, seconds_to_samples(cfg.enroll_len_s), FitMode::Eval, &mut rng)?;
    let pair = assemble(&e, y, y, &cfg.glue, cfg.strategy)?;
    estimate(model, &plan()?, &pair)
}

/// Run the prompted model on `y` alone (no enrollment, no glue): the
/// control condition for the enrollment's contribution.
pub fn extract_without_enrollment<T: Scalar>(model: &SeparatorModel<T>, y: &Waveform<T>) -> Result<Waveform<T>> {
    if model.config.variant != ModelVariant::Lext {
        return Err(Error::config("the no-enrollment control needs the prompted variant"));
    }
    let pair = assemble(&Waveform::zeros(0), y, y, &GlueSpec::none(), PromptStrategy::Prepend)?;
    estimate(model, &plan()?, &pair)
}

/// `si_sdr(est, ref) - si_sdr(mix, ref)`.
pub fn si_sdri<T: Scalar>(est: &Waveform<T>, reference: &Waveform<T>, mix: &Waveform<T>) -> Result<f64> {
    Ok(si_sdr(est, reference)? - si_sdr(mix, reference)?)
}

/// Default bin edges: failures below 0 dB, then 5 dB steps to 25 dB.
pub const DEFAULT_EDGES: [f64; 8] = [f64::NEG_INFINITY, 0.0, 5.0, 10.0, 15.0, 20.0, 25.0, f64::INFINITY];

/// JSON has no infinities: non-finite values are written as the strings
/// `"inf"`, `"-inf"` and `"nan"`.
mod json_f64 {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    fn to_repr(v: f64) -> Repr {
        match v {
            v if v.is_finite() => Repr::Num(v),
            v if v.is_nan() => Repr::Text("nan".into()),
            v if v > 0.0 => Repr::Text("inf".into()),
            _ => Repr::Text("-inf".into()),
        }
    }

    fn from_repr<E: serde::de::Error>(r: Repr) -> Result<f64, E> {
        match r {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(E::custom(format!("not a number: {other:?}"))),
            },
        }
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        to_repr(*v).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        from_repr(Repr::deserialize(d)?)
    }

    pub mod vec {
        use super::*;

        pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
            v.iter().map(|&x| to_repr(x)).collect::<Vec<_>>().serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
            Vec::<Repr>::deserialize(d)?.into_iter().map(from_repr).collect()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// Bin boundaries including the infinite ends; bin `i` is `[edges[i], edges[i+1])`.
    #[serde(with = "json_f64::vec")]
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// Fraction of scores below 0 dB.
    pub failure_rate: f64,
}

/// Histogram of `scores`. Missing infinite outer edges are added, so the
/// leftmost bin is always open below.
pub fn histogram(scores: &[f64], edges: &[f64]) -> Result<Histogram> {
    if edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::config("histogram edges must be strictly increasing"));
    }
    let mut e = edges.to_vec();
    if e.first() != Some(&f64::NEG_INFINITY) {
        e.insert(0, f64::NEG_INFINITY);
    }
    if e.last() != Some(&f64::INFINITY) {
        e.push(f64::INFINITY);
    }
    let mut counts = vec![0; e.len() - 1];
    for &s in scores {
        // partition_point finds the first edge above s; NaN lands in the failure bin
        let i = e.partition_point(|&x| x <= s).clamp(1, e.len() - 1) - 1;
        counts[i] += 1;
    }
    let failed = scores.iter().filter(|&&s| !(s >= 0.0)).count();
    let failure_rate = if scores.is_empty() { 0.0 } else { failed as f64 / scores.len() as f64 };
    Ok(Histogram { edges: e, counts, failure_rate })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub record_id: String,
    pub target_speaker: u32,
    pub si_sdr_mix: f64,
    pub si_sdr_est: f64,
    pub si_sdri: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    #[serde(with = "json_f64")]
    pub mean_si_sdri: f64,
    pub failure_rate: f64,
    pub histogram: Histogram,
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn from_rows(rows: Vec<EvalRow>, config: serde_json::Value) -> Result<Self> {
        let scores: Vec<f64> = rows.iter().map(|r| r.si_sdri).collect();
        let mean_si_sdri = if scores.is_empty() { f64::NAN } else { scores.iter().sum::<f64>() / scores.len() as f64 };
        let histogram = histogram(&scores, &DEFAULT_EDGES)?;
        Ok(Self { failure_rate: histogram.failure_rate, rows, mean_si_sdri, histogram, config })
    }

    /// One-line summary, e.g. for the CLI.
    pub fn summary(&self) -> String {
        format!(
            "records {} mean SI-SDRi {:.2} dB failure rate {:.1}%",
            self.rows.len(),
            self.mean_si_sdri,
            100.0 * self.failure_rate
        )
    }

    /// Write `eval.csv` (one row per record) and `eval.jsonl` (rows, then a
    /// summary record) into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut csv = csv::Writer::from_path(dir.join("eval.csv"))?;
        for r in &self.rows {
            csv.serialize(r)?;
        }
        csv.flush()?;
        let mut w = BufWriter::new(fs::File::create(dir.join("eval.jsonl"))?);
        for r in &self.rows {
            writeln!(w, "{}", serde_json::to_string(r)?)?;
        }
        let summary = serde_json::json!({
            "summary": {
                "records": self.rows.len(),
                "mean_si_sdri": self.mean_si_sdri,
                "failure_rate": self.failure_rate,
                "histogram": self.histogram,
                "config": self.config,
            }
        });
        writeln!(w, "{summary}")?;
        w.flush()?;
        Ok(())
    }
}

/// Which records to score and how.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub extract: ExtractConfig,
    /// Score only the first this-many records.
    pub max_records: Option<usize>,
    /// Score the no-enrollment control instead of the prompted model.
    pub no_enrollment: bool,
}

/// Target speaker slot and enrollment index used for record `i`: targets
/// alternate between the two speakers, enrollments cycle through the pool.
pub fn eval_choice(i: usize, pool_len: usize) -> (usize, usize) {
    (i % 2, (i / 2) % pool_len.max(1))
}

/// Score `model` on `split` of `source`.
pub fn evaluate<T: Scalar>(
    model: &SeparatorModel<T>,
    source: &dyn RecordSource<T>,
    split: Split,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let n = source.num_records(split).min(cfg.max_records.unwrap_or(usize::MAX));
    let rows: Vec<Result<EvalRow>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let rec = source.record(split, i)?;
            let (k, j) = eval_choice(i, rec.enrollments[0].len().min(rec.enrollments[1].len()));
            let reference = &rec.sources[k];
            let est = if cfg.no_enrollment {
                extract_without_enrollment(model, &rec.mixture)?
            } else {
                let e = rec.enrollments[k].get(j).ok_or_else(|| Error::config(format!("record {} lacks enrollments", rec.id)))?;
                extract(model, &rec.mixture, e, &cfg.extract)?
            };
            let si_sdr_mix = si_sdr(&rec.mixture, reference)?;
            let si_sdr_est = si_sdr(&est, reference)?;
            Ok(EvalRow { record_id: rec.id.clone(), target_speaker: rec.speaker_ids[k], si_sdr_mix, si_sdr_est, si_sdri: si_sdr_est - si_sdr_mix })
        })
        .collect();
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let config = serde_json::json!({ "split": split, "eval": cfg, "model": model.config, "step_count": model.step_count });
    EvalReport::from_rows(rows, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};

    #[test]
    fn histogram_examples() {
        let h = histogram(&[10.0; 5], &[0.0, 5.0, 15.0, 25.0]).unwrap();
        assert_eq!(h.counts, vec![0, 0, 5, 0, 0]);
        let h = histogram(&[], &DEFAULT_EDGES).unwrap();
        assert!(h.counts.iter().all(|&c| c == 0));
        assert_eq!(h.failure_rate, 0.0);
        let h = histogram(&[-1.0, 1.0], &DEFAULT_EDGES).unwrap();
        assert_eq!(h.failure_rate, 0.5);
        assert_eq!(h.counts[0], 1);
        assert_eq!(h.counts[1], 1);
        assert!(histogram(&[1.0], &[5.0, 0.0]).is_err());
    }

    #[test]
    fn histogram_json_keeps_infinite_edges() {
        let h = histogram(&[1.0, 30.0], &DEFAULT_EDGES).unwrap();
        let text = serde_json::to_string(&h).unwrap();
        assert!(text.contains("\"-inf\"") && text.contains("\"inf\""));
        assert_eq!(serde_json::from_str::<Histogram>(&text).unwrap(), h);
    }

    #[test]
    fn si_sdri_of_mixture_is_zero() {
        let r = Waveform::new(vec![1.0, 2.0, 3.0]).unwrap();
        let mix = Waveform::new(vec![2.0, 1.0, 4.0]).unwrap();
        assert_eq!(si_sdri(&mix, &r, &mix).unwrap(), 0.0);
        let est = Waveform::new(vec![2.0, 3.0, 4.0]).unwrap();
        let want = si_sdr(&est, &r).unwrap() - si_sdr(&mix, &r).unwrap();
        assert_eq!(si_sdri(&est, &r, &mix).unwrap(), want);
        assert_eq!(si_sdri(&r, &r, &mix).unwrap(), 60.0 - si_sdr(&mix, &r).unwrap());
    }

    #[test]
    fn extract_keeps_length_and_is_deterministic() {
        let m = init_model::<f32>(ModelConfig::micro(), 1).unwrap();
        let y = Waveform::new((0..5841).map(|i| ((i as f32) * 0.05).sin() + 0.3 * ((i as f32) * 0.31).cos()).collect()).unwrap();
        let e = Waveform::new((0..3000).map(|i| ((i as f32) * 0.07).sin()).collect()).unwrap();
        let cfg = ExtractConfig { enroll_len_s: 0.25, ..Default::default() };
        let a = extract(&m, &y, &e, &cfg).unwrap();
        let b = extract(&m, &y, &e, &cfg).unwrap();
        assert_eq!(a.len(), y.len());
        assert_eq!(a, b);
        assert_eq!(extract_without_enrollment(&m, &y).unwrap().len(), y.len());
        let silent = Waveform::zeros(800);
        assert!(matches!(extract(&m, &y, &silent, &cfg), Err(Error::SilentEnrollment)));
    }
}

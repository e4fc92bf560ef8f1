//! Attention-map export: `.npy` arrays, PNG heatmaps and a JSON summary.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use npyz::WriterBuilder;
use serde::{Deserialize, Serialize};

use super::ExtractConfig;
use crate::dsp::{seconds_to_samples, StftPlan, Waveform};
use crate::error::{Error, Result};
use crate::model::{attention_maps, stft_config, FrameRanges, ModelVariant, SeparatorModel};
use crate::prompt::{assemble, fit_enrollment_for, FitMode};
use crate::scalar::Scalar;
use crate::train::active_enrollment;

/// Mixture-to-enrollment attention of one head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadSummary {
    pub block: usize,
    pub head: usize,
    /// Mean mass mixture queries put on enrollment keys.
    pub enrollment_mass: f64,
    /// `enrollment_frames / frames`, the mass of a uniform row.
    pub uniform_baseline: f64,
    pub array: PathBuf,
    pub image: PathBuf,
}

impl HeadSummary {
    pub fn above_uniform(&self) -> bool {
        self.enrollment_mass > self.uniform_baseline
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionExport {
    pub frames: usize,
    pub ranges: FrameRanges,
    pub heads: Vec<HeadSummary>,
}

impl AttentionExport {
    pub fn heads_of_block(&self, block: usize) -> impl Iterator<Item = &HeadSummary> {
        self.heads.iter().filter(move |h| h.block == block)
    }
}

/// Write a row-major `f64` array with the given shape in NumPy format.
pub fn write_npy(path: &Path, data: &[f64], shape: &[usize]) -> Result<()> {
    if shape.iter().product::<usize>() != data.len() {
        return Err(Error::shape(format!("npy shape {shape:?} does not hold {} values", data.len())));
    }
    let shape: Vec<u64> = shape.iter().map(|&s| s as u64).collect();
    let mut w = npyz::WriteOptions::new().default_dtype().shape(&shape).writer(BufWriter::new(fs::File::create(path)?)).begin_nd()?;
    w.extend(data.iter().copied())?;
    w.finish()?;
    Ok(())
}

/// Run the prompted model on `(y, e_raw)` and write every block/head map
/// to `out_dir` as `attn_b{block}_h{head}.npy` and `.png`, plus
/// `attention.json` with the frame ranges and per-head enrollment mass.
pub fn export_attention<T: Scalar>(
    model: &SeparatorModel<T>,
    y: &Waveform<T>,
    e_raw: &Waveform<T>,
    cfg: &ExtractConfig,
    out_dir: &Path,
) -> Result<AttentionExport> {
    if model.config.variant != ModelVariant::Lext {
        return Err(Error::config("attention export needs the prompted variant"));
    }
    let active = active_enrollment(e_raw, cfg.sad_enabled, &cfg.sad)?;
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    let e = fit_enrollment_for(cfg.strategy, &active, seconds_to_samples(cfg.enroll_len_s), FitMode::Eval, &mut rng)?;
    let pair = assemble(&e, y, y, &cfg.glue, cfg.strategy)?;
    let plan = StftPlan::<T>::new(stft_config())?;
    let spec = plan.analyze(pair.input.samples())?;
    let maps = attention_maps(model, &spec, Some(&pair.boundaries))?;
    let ranges = maps.ranges.expect("boundaries were supplied");
    fs::create_dir_all(out_dir)?;
    let r = &ranges;
    let mut marks: Vec<usize> = [r.enrollment_pre, r.glue1, r.mixture, r.glue2, r.enrollment_post].iter().flat_map(|&(a, b)| [a, b]).collect();
    marks.sort_unstable();
    marks.dedup();
    let t = maps.frames;
    let scale = (512 / t.max(1)).clamp(1, 4);
    let mut heads = Vec::new();
    for (b, block) in maps.maps.iter().enumerate() {
        for (h, m) in block.iter().enumerate() {
            let array = PathBuf::from(format!("attn_b{b}_h{h}.npy"));
            let image = PathBuf::from(format!("attn_b{b}_h{h}.png"));
            write_npy(&out_dir.join(&array), m, &[t, t])?;
            super::plot::heatmap(&out_dir.join(&image), m, t, &marks, scale)?;
            let (enrollment_mass, uniform_baseline) = maps.enrollment_mass(b, h).unwrap_or((0.0, 0.0));
            heads.push(HeadSummary { block: b, head: h, enrollment_mass, uniform_baseline, array, image });
        }
    }
    let export = AttentionExport { frames: t, ranges, heads };
    fs::write(out_dir.join("attention.json"), serde_json::to_vec_pretty(&export)?)?;
    Ok(export)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};

    #[test]
    fn npy_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.npy");
        let data = vec![0.5, -1.0, 2.25, 3.0, 4.0, 5.0];
        write_npy(&p, &data, &[2, 3]).unwrap();
        let f = npyz::NpyFile::new(fs::File::open(&p).unwrap()).unwrap();
        assert_eq!(f.shape(), &[2, 3]);
        assert_eq!(f.into_vec::<f64>().unwrap(), data);
        assert!(write_npy(&p, &data, &[4, 2]).is_err());
    }

    #[test]
    fn micro_model_writes_one_map_per_block_and_head() {
        let dir = tempfile::tempdir().unwrap();
        let m = init_model::<f32>(ModelConfig::micro(), 2).unwrap();
        let y = Waveform::new((0..2400).map(|i| ((i as f32) * 0.05).sin()).collect()).unwrap();
        let e = Waveform::new((0..4000).map(|i| ((i as f32) * 0.11).sin()).collect()).unwrap();
        let cfg = ExtractConfig { enroll_len_s: 0.25, ..Default::default() };
        let x = export_attention(&m, &y, &e, &cfg, dir.path()).unwrap();
        assert_eq!(x.heads.len(), 4);
        let npy = fs::read_dir(dir.path()).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "npy")).count();
        assert_eq!(npy, 4);
        // 2000 enrollment samples, 256 glue samples at hop 64
        let plan = StftPlan::<f32>::new(stft_config()).unwrap();
        assert_eq!(x.ranges.enrollment_pre, (0, plan.frame_of_sample(2000)));
        assert_eq!(x.ranges.mixture.0, plan.frame_of_sample(2256));
        for h in &x.heads {
            assert!(h.enrollment_mass > 0.0 && h.enrollment_mass < 1.0);
            assert!(h.uniform_baseline > 0.0);
        }
        assert!(dir.path().join("attention.json").exists());
    }
}

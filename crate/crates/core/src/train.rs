//! Masked SI-SDR loss, example sampling and the optimization loop.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{accumulate_grads, si_sdr_raw, zero_grads, Adam, AdamConfig, Graph, Tensor, Var, SI_SDR_CLAMP_DB};
use crate::dsp::{detect_speech, seconds_to_samples, splice_active, SadConfig, StftPlan, Waveform};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalConfig, ExtractConfig};
use crate::model::{init_model, load_checkpoint, save_checkpoint, stft_config, Checkpoint, ModelConfig, ModelVariant, SeparatorModel};
use crate::prompt::{assemble, fit_enrollment_for, strip_prompt, FitMode, GlueSpec, PromptStrategy, PromptedPair};
use crate::scalar::Scalar;
use crate::synthgen::{derive_rng, MixtureRecord, RecordSource, Split};

const TAG_SHUFFLE: u64 = 11;
const TAG_SAMPLE: u64 = 12;

/// SI-SDR in dB, clamped to `[-60, 60]`.
///
/// `alpha = <est, ref> / |ref|^2`, value `10 log10(|alpha ref|^2 / |alpha ref - est|^2)`.
pub fn si_sdr<T: Scalar>(est: &Waveform<T>, reference: &Waveform<T>) -> Result<f64> {
    if est.len() != reference.len() {
        return Err(Error::LengthMismatch { expected: reference.len(), got: est.len() });
    }
    if reference.is_empty() {
        return Err(Error::DegenerateInput("empty signals".into()));
    }
    if reference.samples().iter().all(|v| *v == T::zero()) {
        return Err(Error::DegenerateInput("reference is all zeros".into()));
    }
    let raw = si_sdr_raw(est.samples(), reference.samples());
    // 0/0 only happens for an all-zero estimate
    Ok(if raw.is_nan() { -SI_SDR_CLAMP_DB } else { raw.clamp(-SI_SDR_CLAMP_DB, SI_SDR_CLAMP_DB) })
}

/// Negative SI-SDR of the mixture-range part of a full-length estimate.
pub fn masked_loss<T: Scalar>(est_aug: &Waveform<T>, pair: &PromptedPair<T>) -> Result<f64> {
    let est = strip_prompt(est_aug, &pair.boundaries)?;
    let target = strip_prompt(&pair.target, &pair.boundaries)?;
    Ok(-si_sdr(&est, &target)?)
}

/// Training hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Enrollment length E in seconds.
    pub enroll_len_s: f64,
    pub mixture_seg_s: f64,
    pub glue: GlueSpec,
    pub strategy: PromptStrategy,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub grad_clip_norm: Option<f64>,
    pub seed: u64,
    pub sad_enabled: bool,
    pub sad: SadConfig,
    pub model: ModelConfig,
    /// Optimizer steps per epoch; one pass over the training split when unset.
    pub steps_per_epoch: Option<usize>,
    pub max_steps: Option<u64>,
    /// Validate on the first this-many valid records (all when unset).
    pub valid_records: Option<usize>,
    /// Halve the learning rate after this many epochs without a new best.
    pub lr_halving_patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            enroll_len_s: 1.0,
            mixture_seg_s: 4.0,
            glue: GlueSpec::default(),
            strategy: PromptStrategy::Prepend,
            batch_size: 4,
            learning_rate: 1e-3,
            max_epochs: 10,
            grad_clip_norm: Some(5.0),
            seed: 0,
            sad_enabled: true,
            sad: SadConfig::default(),
            model: ModelConfig::desk(),
            steps_per_epoch: None,
            max_steps: None,
            valid_records: None,
            lr_halving_patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.enroll_len_s > 0.0 && self.enroll_len_s.is_finite()) {
            return Err(Error::config("enroll_len_s must be positive"));
        }
        if !(self.mixture_seg_s > 0.0 && self.mixture_seg_s.is_finite()) {
            return Err(Error::config("mixture_seg_s must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::config("steps_per_epoch must be positive"));
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c > 0.0) {
                return Err(Error::config("grad_clip_norm must be positive when set"));
            }
        }
        if self.model.variant == ModelVariant::FixedEmbedBaseline && self.strategy != PromptStrategy::Prepend {
            return Err(Error::config("the fixed-embedding baseline takes no prompt strategy other than prepend"));
        }
        self.glue.len_samples()?;
        self.model.validate()
    }

    /// Inference settings matching this training run.
    pub fn extract_config(&self) -> ExtractConfig {
        ExtractConfig {
            enroll_len_s: self.enroll_len_s,
            glue: self.glue,
            strategy: self.strategy,
            sad_enabled: self.sad_enabled,
            sad: self.sad,
        }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.learning_rate, clip_norm: self.grad_clip_norm.unwrap_or(0.0), ..AdamConfig::default() }
    }
}

/// One sampled prompted pair with its provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample<T> {
    pub pair: PromptedPair<T>,
    pub record_index: usize,
    pub target_speaker: u32,
}

/// Speech-active part of an enrollment, or the enrollment itself when SAD
/// is off.
pub fn active_enrollment<T: Scalar>(e_raw: &Waveform<T>, sad_enabled: bool, sad: &SadConfig) -> Result<Waveform<T>> {
    if !sad_enabled {
        return Ok(e_raw.clone());
    }
    let segs = detect_speech(e_raw, sad)?;
    let active = splice_active(e_raw, &segs)?;
    if active.is_empty() {
        return Err(Error::SilentEnrollment);
    }
    Ok(active)
}

/// Draw a training example from `rec`: a uniformly chosen target speaker,
/// a jointly cropped mixture/source segment and a fitted enrollment from
/// the target's pool.
pub fn sample_example<T: Scalar, R: Rng + ?Sized>(
    rec: &MixtureRecord<T>,
    record_index: usize,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<TrainingExample<T>> {
    let k = rng.gen_range(0..2usize);
    let pool = &rec.enrollments[k];
    if pool.is_empty() {
        return Err(Error::config(format!("record {} has no enrollment for speaker {}", rec.id, rec.speaker_ids[k])));
    }
    let seg = seconds_to_samples(cfg.mixture_seg_s);
    let len = rec.mixture.len();
    if len < seg {
        return Err(Error::LengthMismatch { expected: seg, got: len });
    }
    let start = rng.gen_range(0..=len - seg);
    let y = rec.mixture.slice(start, start + seg);
    let s = rec.sources[k].slice(start, start + seg);
    let e_raw = &pool[rng.gen_range(0..pool.len())];
    let active = active_enrollment(e_raw, cfg.sad_enabled, &cfg.sad)?;
    let e = fit_enrollment_for(cfg.strategy, &active, seconds_to_samples(cfg.enroll_len_s), FitMode::Train, rng)?;
    let pair = assemble(&e, &y, &s, &cfg.glue, cfg.strategy)?;
    Ok(TrainingExample { pair, record_index, target_speaker: rec.speaker_ids[k] })
}

fn spec_input<T: Scalar>(g: &mut Graph<T>, plan: &StftPlan<T>, x: &[T]) -> Result<Var> {
    let spec = plan.analyze(x)?;
    Ok(g.input(Tensor::new(vec![spec.frames, spec.bins, 2], spec.to_interleaved())))
}

/// Time-domain output graph for `pair`: the full-length estimate for the
/// prompted model, the mixture-length estimate for the baseline.
pub fn estimate_graph<T: Scalar>(
    model: &SeparatorModel<T>,
    plan: &Arc<StftPlan<T>>,
    pair: &PromptedPair<T>,
    g: &mut Graph<T>,
) -> Result<Var> {
    match model.config.variant {
        ModelVariant::Lext => {
            let x = spec_input(g, plan, pair.input.samples())?;
            let fv = model.forward_graph(g, x)?;
            Ok(g.synthesize(fv.output, plan.clone(), pair.input.len()))
        }
        ModelVariant::FixedEmbedBaseline => {
            let mix = strip_prompt(&pair.input, &pair.boundaries)?;
            let [(a, b), (c, d)] = pair.boundaries.enrollment_ranges();
            let x = pair.input.samples();
            let enroll: Vec<T> = x[a..b].iter().chain(&x[c..d]).copied().collect();
            if enroll.is_empty() {
                return Err(Error::config("the fixed-embedding baseline needs an enrollment"));
            }
            let xm = spec_input(g, plan, mix.samples())?;
            let xe = spec_input(g, plan, &enroll)?;
            let fv = model.forward_fixed_embed_graph(g, xm, xe)?;
            Ok(g.synthesize(fv.output, plan.clone(), mix.len()))
        }
    }
}

/// Loss graph of one example; returns the graph and its scalar root.
pub fn loss_graph<T: Scalar>(model: &SeparatorModel<T>, plan: &Arc<StftPlan<T>>, pair: &PromptedPair<T>) -> Result<(Graph<T>, Var)> {
    let mut g = Graph::new();
    let est = estimate_graph(model, plan, pair, &mut g)?;
    let target = pair.target.samples();
    let range = pair.boundaries.mixture_range();
    let loss = match model.config.variant {
        ModelVariant::Lext => g.neg_si_sdr(est, target, range),
        ModelVariant::FixedEmbedBaseline => g.neg_si_sdr(est, &target[range.0..range.1], (0, range.1 - range.0)),
    };
    Ok((g, loss))
}

/// Loss and parameter gradients (f64, one vector per slot) of one example.
pub fn example_gradients<T: Scalar>(
    model: &SeparatorModel<T>,
    plan: &Arc<StftPlan<T>>,
    pair: &PromptedPair<T>,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let (g, loss) = loss_graph(model, plan, pair)?;
    let value = g.value(loss).data[0].as_f64();
    let grads = g.backward(loss);
    let mut acc = zero_grads(&model.params);
    accumulate_grads(&g, &grads, &mut acc, 1.0);
    Ok((value, acc))
}

/// Progress record written once per epoch (and for the final step).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: u64,
    /// Mean training loss over the epoch's steps.
    pub loss: f64,
    pub val_si_sdri: f64,
    pub best_val_si_sdri: f64,
    pub learning_rate: f64,
    pub elapsed_s: f64,
}

/// Resumable loop state stored in checkpoint metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct LoopState {
    train_config: TrainConfig,
    epoch: usize,
    best_val: Option<f64>,
    epochs_since_best: usize,
    history: Vec<EpochLog>,
}

/// Result of a training run.
pub struct TrainOutcome<T> {
    /// Parameters with the best validation score.
    pub best: Checkpoint<T>,
    /// State after the last step, with optimizer moments.
    pub last: Checkpoint<T>,
    pub best_val_si_sdri: f64,
    pub history: Vec<EpochLog>,
}

/// Stateful optimizer loop over a record source.
pub struct Trainer<'a, T: Scalar> {
    cfg: TrainConfig,
    source: &'a dyn RecordSource<T>,
    plan: Arc<StftPlan<T>>,
    pub model: SeparatorModel<T>,
    opt: Adam,
    state: LoopState,
    best: Option<SeparatorModel<T>>,
    epoch_loss: (f64, usize),
    perm: Option<(usize, Vec<usize>)>,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    pub fn new(source: &'a dyn RecordSource<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if source.num_records(Split::Train) == 0 {
            return Err(Error::config("training split is empty"));
        }
        let model = init_model(cfg.model, cfg.seed)?;
        let opt = Adam::new(cfg.adam(), &model.params);
        let state = LoopState { train_config: cfg.clone(), epoch: 0, best_val: None, epochs_since_best: 0, history: Vec::new() };
        Ok(Self {
            plan: Arc::new(StftPlan::new(stft_config())?),
            source,
            model,
            opt,
            state,
            best: None,
            epoch_loss: (0.0, 0),
            perm: None,
            cfg,
        })
    }

    /// Continue from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(source: &'a dyn RecordSource<T>, ckpt: Checkpoint<T>) -> Result<Self> {
        let state: LoopState = serde_json::from_value(ckpt.extra.get("train_state").cloned().unwrap_or_default())
            .map_err(|e| Error::Checkpoint(format!("no resumable training state: {e}")))?;
        let mut t = Self::new(source, state.train_config.clone())?;
        if ckpt.model.config != t.cfg.model {
            return Err(Error::Checkpoint("model config differs from the stored training config".into()));
        }
        t.opt = ckpt.optimizer.ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state".into()))?;
        t.model = ckpt.model;
        t.state = state;
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn step_count(&self) -> u64 {
        self.model.step_count
    }

    pub fn learning_rate(&self) -> f64 {
        self.opt.config.lr
    }

    pub fn steps_per_epoch(&self) -> usize {
        let n = self.source.num_records(Split::Train);
        self.cfg.steps_per_epoch.unwrap_or_else(|| n.div_ceil(self.cfg.batch_size))
    }

    /// Snapshot with optimizer state and loop metadata.
    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            model: self.model.clone(),
            optimizer: Some(self.opt.clone()),
            extra: serde_json::json!({ "train_state": self.state }),
        }
    }

    fn epoch_order(&mut self, epoch: usize) -> &[usize] {
        if self.perm.as_ref().map(|p| p.0) != Some(epoch) {
            let n = self.source.num_records(Split::Train);
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut derive_rng(self.cfg.seed, TAG_SHUFFLE, epoch as u64));
            self.perm = Some((epoch, order));
        }
        &self.perm.as_ref().unwrap().1
    }

    /// Examples of global step `step`; a pure function of the seed and step.
    pub fn batch_for_step(&mut self, step: u64) -> Result<Vec<TrainingExample<T>>> {
        let spe = self.steps_per_epoch() as u64;
        let b = self.cfg.batch_size;
        let epoch = (step / spe) as usize;
        let within = (step % spe) as usize;
        let order = self.epoch_order(epoch).to_vec();
        (0..b)
            .map(|i| {
                let idx = order[(within * b + i) % order.len()];
                let rec = self.source.record(Split::Train, idx)?;
                let mut rng = derive_rng(self.cfg.seed, TAG_SAMPLE, step * b as u64 + i as u64);
                sample_example(&rec, idx, &self.cfg, &mut rng)
            })
            .collect()
    }

    /// One optimizer update on `batch`; returns the mean loss.
    pub fn step_on(&mut self, batch: &[TrainingExample<T>]) -> Result<f64> {
        let model = &self.model;
        let plan = &self.plan;
        let results: Vec<Result<(f64, Vec<Vec<f64>>)>> = batch.par_iter().map(|ex| example_gradients(model, plan, &ex.pair)).collect();
        let w = 1.0 / batch.len() as f64;
        let mut acc = zero_grads(&self.model.params);
        let mut loss = 0.0;
        // summed in batch order so the update does not depend on scheduling
        for (ex, r) in batch.iter().zip(results) {
            let (l, g) = r?;
            if !l.is_finite() || g.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::Divergence(format!(
                    "non-finite loss or gradient at step {} (record {}, target speaker {})",
                    self.model.step_count, ex.record_index, ex.target_speaker
                )));
            }
            loss += w * l;
            for (a, gi) in acc.iter_mut().zip(g) {
                for (x, y) in a.iter_mut().zip(gi) {
                    *x += w * y;
                }
            }
        }
        self.opt.update(&mut self.model.params, &acc);
        if !self.model.params.all_finite() {
            return Err(Error::Divergence(format!("parameters became non-finite at step {}", self.model.step_count)));
        }
        self.model.step_count += 1;
        self.epoch_loss.0 += loss;
        self.epoch_loss.1 += 1;
        Ok(loss)
    }

    /// Sample the next batch and update on it.
    pub fn step(&mut self) -> Result<f64> {
        let batch = self.batch_for_step(self.model.step_count)?;
        self.step_on(&batch)
    }

    /// Mean validation SI-SDRi of the current parameters.
    pub fn validate(&self) -> Result<f64> {
        let cfg = EvalConfig { extract: self.cfg.extract_config(), max_records: self.cfg.valid_records, no_enrollment: false };
        Ok(evaluate(&self.model, self.source, Split::Valid, &cfg)?.mean_si_sdri)
    }

    /// Validate, track the best model and apply the lr schedule. Returns
    /// the log entry and whether this epoch set a new best.
    fn finish_epoch(&mut self, started: Instant) -> Result<(EpochLog, bool)> {
        let val = if self.source.num_records(Split::Valid) > 0 { self.validate()? } else { -self.epoch_loss.0 };
        let improved = self.state.best_val.map_or(true, |b| val > b);
        if improved {
            self.state.best_val = Some(val);
            self.state.epochs_since_best = 0;
            self.best = Some(self.model.clone());
        } else {
            self.state.epochs_since_best += 1;
            if let Some(p) = self.cfg.lr_halving_patience {
                if self.state.epochs_since_best >= p {
                    self.opt.config.lr *= 0.5;
                    self.state.epochs_since_best = 0;
                }
            }
        }
        let log = EpochLog {
            epoch: self.state.epoch,
            step: self.model.step_count,
            loss: if self.epoch_loss.1 > 0 { self.epoch_loss.0 / self.epoch_loss.1 as f64 } else { f64::NAN },
            val_si_sdri: val,
            best_val_si_sdri: self.state.best_val.unwrap_or(val),
            learning_rate: self.opt.config.lr,
            elapsed_s: started.elapsed().as_secs_f64(),
        };
        self.state.history.push(log.clone());
        self.state.epoch += 1;
        self.epoch_loss = (0.0, 0);
        Ok((log, improved))
    }

    /// Train until `max_epochs` or `max_steps`, validating every epoch.
    ///
    /// With `out_dir`, writes `train_log.jsonl`, `best.ckpt` on every new
    /// best and `last.ckpt` after every epoch.
    pub fn run(mut self, out_dir: Option<&Path>) -> Result<TrainOutcome<T>> {
        let started = Instant::now();
        let mut log = match out_dir {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                Some(BufWriter::new(fs::OpenOptions::new().create(true).append(true).open(dir.join("train_log.jsonl"))?))
            }
            None => None,
        };
        if let (None, Some(_), Some(dir)) = (&self.best, self.state.best_val, out_dir) {
            let p = best_checkpoint_path(dir);
            if p.exists() {
                self.best = Some(load_checkpoint(&p)?.model);
            }
        }
        let spe = self.steps_per_epoch() as u64;
        let max_steps = self.cfg.max_steps.unwrap_or(u64::MAX);
        while self.state.epoch < self.cfg.max_epochs && self.model.step_count < max_steps {
            let epoch_end = ((self.state.epoch as u64 + 1) * spe).min(max_steps);
            while self.model.step_count < epoch_end {
                self.step()?;
            }
            let (entry, improved) = self.finish_epoch(started)?;
            log::info!(
                "epoch {} step {} loss {:.3} val {:.3} dB (best {:.3})",
                entry.epoch,
                entry.step,
                entry.loss,
                entry.val_si_sdri,
                entry.best_val_si_sdri
            );
            if let (Some(w), Some(dir)) = (log.as_mut(), out_dir) {
                writeln!(w, "{}", serde_json::to_string(&entry)?)?;
                w.flush()?;
                if improved {
                    let best = Checkpoint { model: self.model.clone(), optimizer: None, extra: self.meta() };
                    save_checkpoint(&best_checkpoint_path(dir), &best)?;
                }
                save_checkpoint(&dir.join("last.ckpt"), &self.checkpoint())?;
            }
        }
        let last = self.checkpoint();
        let best = Checkpoint { model: self.best.take().unwrap_or_else(|| self.model.clone()), optimizer: None, extra: self.meta() };
        Ok(TrainOutcome { best, last, best_val_si_sdri: self.state.best_val.unwrap_or(f64::NAN), history: self.state.history })
    }

    fn meta(&self) -> serde_json::Value {
        let train_seconds = self.state.history.last().map(|h| h.elapsed_s);
        serde_json::json!({ "train_config": self.cfg, "best_val_si_sdri": self.state.best_val, "train_seconds": train_seconds })
    }
}

/// Train from scratch; see [`Trainer::run`].
pub fn train<T: Scalar>(source: &dyn RecordSource<T>, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome<T>> {
    Trainer::new(source, cfg.clone())?.run(out_dir)
}

/// Path of the best checkpoint written by [`train`] into `dir`.
pub fn best_checkpoint_path(dir: &Path) -> PathBuf {
    dir.join("best.ckpt")
}

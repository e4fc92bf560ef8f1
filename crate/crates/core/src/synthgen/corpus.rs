use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::mix::{add_noise, mix_two, reverberate, MixtureRecord};
use super::voice::{pink_noise_bursts, synth_utterance, SpeakerProfile};
use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::wav::{read_wav, write_wav, WavEncoding};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    #[default]
    Anechoic,
    Noisy,
    NoisyReverberant,
}

/// Corpus generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// Speakers shared by the train and valid splits.
    pub train_valid_speakers: usize,
    /// Unseen speakers used only by the test split.
    pub test_speakers: usize,
    pub train_mixtures: usize,
    pub valid_mixtures: usize,
    pub test_mixtures: usize,
    pub utterances_per_speaker: usize,
    pub utterance_s: (f64, f64),
    /// Enrollment utterances recorded per speaker and record.
    pub enroll_pool: usize,
    pub scenario: Scenario,
    pub sir_db: (f64, f64),
    pub snr_db: (f64, f64),
    pub t60_s: (f64, f64),
    /// When set, every enrollment starts with a low-level noise floor that
    /// makes up at least this fraction of it.
    pub enroll_leading_silence: Option<f64>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            train_valid_speakers: 40,
            test_speakers: 12,
            train_mixtures: 2000,
            valid_mixtures: 200,
            test_mixtures: 200,
            utterances_per_speaker: 20,
            utterance_s: (4.0, 6.0),
            enroll_pool: 2,
            scenario: Scenario::Anechoic,
            sir_db: (-5.0, 5.0),
            snr_db: (-6.0, 3.0),
            t60_s: (0.2, 1.0),
            enroll_leading_silence: None,
        }
    }
}

impl CorpusConfig {
    pub fn mixtures(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_mixtures,
            Split::Valid => self.valid_mixtures,
            Split::Test => self.test_mixtures,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_valid_speakers < 2 || self.test_speakers < 2 {
            return Err(Error::config("each speaker set needs at least 2 speakers for disjoint splits"));
        }
        if self.enroll_pool < 2 {
            return Err(Error::config("enrollment pool must hold at least 2 utterances"));
        }
        if self.utterances_per_speaker < self.enroll_pool + 1 {
            return Err(Error::config("need more utterances per speaker than the enrollment pool"));
        }
        let (a, b) = self.utterance_s;
        if !(a > 0.0 && a <= b) {
            return Err(Error::config("utterance duration range must be positive and ordered"));
        }
        for (name, (lo, hi)) in [("sir_db", self.sir_db), ("snr_db", self.snr_db), ("t60_s", self.t60_s)] {
            if !(lo <= hi) {
                return Err(Error::config(format!("{name} range is not ordered")));
            }
        }
        if self.scenario == Scenario::NoisyReverberant && !(self.t60_s.0 >= 0.05 && self.t60_s.1 <= 2.0) {
            return Err(Error::config("t60 range must lie in [0.05, 2.0] s"));
        }
        if let Some(f) = self.enroll_leading_silence {
            if !(0.0..0.95).contains(&f) {
                return Err(Error::config("leading-silence fraction must lie in [0, 0.95)"));
            }
        }
        Ok(())
    }

    fn speaker_range(&self, split: Split) -> std::ops::Range<usize> {
        match split {
            Split::Train | Split::Valid => 0..self.train_valid_speakers,
            Split::Test => self.train_valid_speakers..self.train_valid_speakers + self.test_speakers,
        }
    }
}

/// Everything needed to rebuild one record from the utterance bank.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordSpec {
    pub id: String,
    pub split: Split,
    pub speaker_ids: [u32; 2],
    pub utterances: [usize; 2],
    pub enroll_utterances: [Vec<usize>; 2],
    /// Leading noise-floor samples per enrollment.
    pub enroll_silence: [Vec<usize>; 2],
    pub sir_db: f64,
    pub noise_snr_db: Option<f64>,
    pub t60_s: Option<f64>,
    pub seed: u64,
}

/// Anything that can hand out mixture records by split and index.
pub trait RecordSource<T: Scalar>: Sync {
    fn num_records(&self, split: Split) -> usize;
    fn record(&self, split: Split, index: usize) -> Result<MixtureRecord<T>>;

    /// Stable identity of the generated data (generator settings and seed),
    /// used to key cached checkpoints. `None` disables caching.
    fn fingerprint(&self) -> Option<String> {
        None
    }
}

fn fingerprint_of(config: &CorpusConfig, seed: u64) -> Option<String> {
    serde_json::to_string(&(config, seed)).ok()
}

const TAG_SPEAKERS: u64 = 1;
const TAG_BANK: u64 = 2;
const TAG_RECORD: u64 = 3;
const TAG_AUDIO: u64 = 4;

/// Independent stream for `(seed, tag, index)`.
pub(crate) fn derive_rng(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index);
    rng
}

/// In-memory synthetic corpus: speaker profiles, a per-speaker utterance
/// bank and record specs that index into it.
pub struct Corpus<T> {
    pub config: CorpusConfig,
    pub seed: u64,
    pub speakers: Vec<SpeakerProfile>,
    bank: Vec<Vec<Waveform<T>>>,
    records: [Vec<RecordSpec>; 3],
}

fn split_index(split: Split) -> usize {
    match split {
        Split::Train => 0,
        Split::Valid => 1,
        Split::Test => 2,
    }
}

fn noise_floor<T: Scalar>(len: usize, rng: &mut ChaCha8Rng) -> impl Iterator<Item = T> + '_ {
    (0..len).map(move |_| T::of(1e-3 * rng.gen_range(-1.0..1.0)))
}

impl<T: Scalar> Corpus<T> {
    pub fn generate(config: CorpusConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let n_spk = config.train_valid_speakers + config.test_speakers;
        let mut rng = derive_rng(seed, TAG_SPEAKERS, 0);
        let speakers: Vec<SpeakerProfile> = (0..n_spk).map(|i| SpeakerProfile::random(i as u32, &mut rng)).collect();
        for (i, a) in speakers.iter().enumerate() {
            a.validate()?;
            if speakers[..i].iter().any(|b| b.f0_base == a.f0_base && b.formants == a.formants) {
                return Err(Error::config("speaker profiles collide; pick another seed"));
            }
        }
        let ups = config.utterances_per_speaker;
        let (lo, hi) = config.utterance_s;
        let bank: Vec<Vec<Waveform<T>>> = speakers
            .par_iter()
            .map(|p| {
                (0..ups)
                    .map(|u| {
                        let mut r = derive_rng(seed, TAG_BANK, (p.speaker_id as u64) << 20 | u as u64);
                        let dur = if hi > lo { r.gen_range(lo..hi) } else { lo };
                        synth_utterance(p, dur, &mut r)
                    })
                    .collect()
            })
            .collect();

        let mut records: [Vec<RecordSpec>; 3] = Default::default();
        for split in Split::ALL {
            let range = config.speaker_range(split);
            records[split_index(split)] = (0..config.mixtures(split))
                .map(|i| {
                    let mut r = derive_rng(seed, TAG_RECORD, ((split_index(split) as u64) << 32) | i as u64);
                    let pick = sample(&mut r, range.len(), 2);
                    let spk = [range.start + pick.index(0), range.start + pick.index(1)];
                    let mut utts = [0; 2];
                    let mut pools: [Vec<usize>; 2] = Default::default();
                    let mut silence: [Vec<usize>; 2] = Default::default();
                    for k in 0..2 {
                        let chosen = sample(&mut r, ups, config.enroll_pool + 1);
                        utts[k] = chosen.index(0);
                        pools[k] = chosen.iter().skip(1).collect();
                        silence[k] = pools[k]
                            .iter()
                            .map(|&u| match config.enroll_leading_silence {
                                Some(frac) => {
                                    let f = r.gen_range(frac..(frac + 0.2).min(0.95));
                                    let speech = bank[spk[k]][u].len() as f64;
                                    (speech * f / (1.0 - f)).ceil() as usize
                                }
                                None => 0,
                            })
                            .collect();
                    }
                    let sir_db = r.gen_range(config.sir_db.0..=config.sir_db.1);
                    let noise_snr_db = match config.scenario {
                        Scenario::Anechoic => None,
                        _ => Some(r.gen_range(config.snr_db.0..=config.snr_db.1)),
                    };
                    let t60_s = match config.scenario {
                        Scenario::NoisyReverberant => Some(r.gen_range(config.t60_s.0..=config.t60_s.1)),
                        _ => None,
                    };
                    RecordSpec {
                        id: format!("{}-{i:05}", split.name()),
                        split,
                        speaker_ids: [spk[0] as u32, spk[1] as u32],
                        utterances: utts,
                        enroll_utterances: pools,
                        enroll_silence: silence,
                        sir_db,
                        noise_snr_db,
                        t60_s,
                        seed: r.gen(),
                    }
                })
                .collect();
        }
        Ok(Self { config, seed, speakers, bank, records })
    }

    pub fn specs(&self, split: Split) -> &[RecordSpec] {
        &self.records[split_index(split)]
    }

    pub fn utterance(&self, speaker: u32, index: usize) -> &Waveform<T> {
        &self.bank[speaker as usize][index]
    }

    fn enrollment(&self, spec: &RecordSpec, k: usize, j: usize) -> Waveform<T> {
        let speech = self.utterance(spec.speaker_ids[k], spec.enroll_utterances[k][j]);
        let lead = spec.enroll_silence[k][j];
        if lead == 0 {
            return speech.clone();
        }
        let mut r = derive_rng(spec.seed, TAG_AUDIO, 100 + (k * 16 + j) as u64);
        let mut x: Vec<T> = noise_floor(lead, &mut r).collect();
        x.extend_from_slice(speech.samples());
        Waveform::from_finite(x)
    }

    /// Materialize a record from its spec.
    pub fn build_record(&self, spec: &RecordSpec) -> Result<MixtureRecord<T>> {
        let s1 = self.utterance(spec.speaker_ids[0], spec.utterances[0]);
        let s2 = self.utterance(spec.speaker_ids[1], spec.utterances[1]);
        let mut rng = derive_rng(spec.seed, TAG_AUDIO, 0);
        let mut rec = match spec.t60_s {
            None => mix_two(s1, s2, spec.sir_db)?,
            Some(t60) => {
                // impose the SIR on the direct paths, then mix the wet signals with the same gain
                let n = s1.len().min(s2.len());
                let (w1, d1) = reverberate(&s1.slice(0, n), t60, &mut rng)?;
                let (w2, d2) = reverberate(&s2.slice(0, n), t60, &mut rng)?;
                let dry = mix_two(&d1, &d2, spec.sir_db)?;
                let gain = dry.sources[1].power().as_f64().sqrt() / d2.power().as_f64().sqrt();
                let mixture = w1.samples().iter().zip(w2.samples()).map(|(&a, &b)| a + T::of(gain * b.as_f64())).collect();
                MixtureRecord { mixture: Waveform::from_finite(mixture), t60_s: Some(t60), ..dry }
            }
        };
        if let Some(snr) = spec.noise_snr_db {
            let noise = pink_noise_bursts(rec.mixture.len(), &mut rng);
            rec = add_noise(rec, &noise, snr)?;
        }
        rec.id = spec.id.clone();
        rec.speaker_ids = spec.speaker_ids;
        rec.sir_db = spec.sir_db;
        rec.seed = spec.seed;
        rec.enrollments = [0, 1].map(|k| (0..spec.enroll_utterances[k].len()).map(|j| self.enrollment(spec, k, j)).collect());
        Ok(rec)
    }
}

impl<T: Scalar> RecordSource<T> for Corpus<T> {
    fn fingerprint(&self) -> Option<String> {
        fingerprint_of(&self.config, self.seed)
    }

    fn num_records(&self, split: Split) -> usize {
        self.specs(split).len()
    }

    fn record(&self, split: Split, index: usize) -> Result<MixtureRecord<T>> {
        let spec = self
            .specs(split)
            .get(index)
            .ok_or_else(|| Error::config(format!("{} has no record {index}", split.name())))?;
        self.build_record(spec)
    }
}

/// First line of a manifest: the generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub generator_config: CorpusConfig,
    /// The configuration file exactly as supplied, when there was one.
    pub config_text: Option<String>,
    pub seed: u64,
    pub speakers: Vec<SpeakerProfile>,
}

/// One manifest line: a record spec plus its audio files (relative paths).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    #[serde(flatten)]
    pub spec: RecordSpec,
    pub mixture: PathBuf,
    pub sources: [PathBuf; 2],
    pub enrollments: [Vec<PathBuf>; 2],
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// Generate a corpus and write it under `out_dir` as float WAV files plus a
/// line-delimited manifest. Returns the manifest path.
pub fn build_dataset(cfg: &CorpusConfig, seed: u64, out_dir: &Path, config_text: Option<&str>) -> Result<PathBuf> {
    let corpus = Corpus::<f32>::generate(cfg.clone(), seed)?;
    write_corpus(&corpus, out_dir, config_text)
}

pub fn write_corpus(corpus: &Corpus<f32>, out_dir: &Path, config_text: Option<&str>) -> Result<PathBuf> {
    for split in Split::ALL {
        fs::create_dir_all(out_dir.join(split.name()))?;
    }
    fs::create_dir_all(out_dir.join("enroll"))?;
    let enc = WavEncoding::Float32;
    let bank_path = |spk: u32, u: usize| PathBuf::from("enroll").join(format!("spk{spk:03}_utt{u:03}.wav"));
    // shared bank utterances are written once, before the parallel pass
    let mut shared = std::collections::BTreeSet::new();
    for split in Split::ALL {
        for spec in corpus.specs(split) {
            for k in 0..2 {
                for (j, &u) in spec.enroll_utterances[k].iter().enumerate() {
                    if spec.enroll_silence[k][j] == 0 {
                        shared.insert((spec.speaker_ids[k], u));
                    }
                }
            }
        }
    }
    for &(spk, u) in &shared {
        write_wav(&out_dir.join(bank_path(spk, u)), corpus.utterance(spk, u), enc)?;
    }
    let mut entries = Vec::new();
    for split in Split::ALL {
        let built: Vec<Result<ManifestEntry>> = corpus
            .specs(split)
            .par_iter()
            .map(|spec| {
                let rec = corpus.build_record(spec)?;
                let dir = PathBuf::from(split.name());
                let mixture = dir.join(format!("{}_mix.wav", spec.id));
                write_wav(&out_dir.join(&mixture), &rec.mixture, enc)?;
                let sources = [0, 1].map(|k| dir.join(format!("{}_s{}.wav", spec.id, k + 1)));
                for k in 0..2 {
                    write_wav(&out_dir.join(&sources[k]), &rec.sources[k], enc)?;
                }
                let mut enrollments: [Vec<PathBuf>; 2] = Default::default();
                for k in 0..2 {
                    for (j, &u) in spec.enroll_utterances[k].iter().enumerate() {
                        let rel = if spec.enroll_silence[k][j] == 0 {
                            bank_path(spec.speaker_ids[k], u)
                        } else {
                            let rel = dir.join(format!("{}_e{}_{j}.wav", spec.id, k + 1));
                            write_wav(&out_dir.join(&rel), &rec.enrollments[k][j], enc)?;
                            rel
                        };
                        enrollments[k].push(rel);
                    }
                }
                Ok(ManifestEntry { spec: spec.clone(), mixture, sources, enrollments })
            })
            .collect();
        for e in built {
            entries.push(e?);
        }
    }
    let header = ManifestHeader {
        generator_config: corpus.config.clone(),
        config_text: config_text.map(str::to_owned),
        seed: corpus.seed,
        speakers: corpus.speakers.clone(),
    };
    let path = out_dir.join(MANIFEST_FILE);
    let mut w = BufWriter::new(fs::File::create(&path)?);
    serde_json::to_writer(&mut w, &header)?;
    writeln!(w)?;
    for e in &entries {
        serde_json::to_writer(&mut w, e)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(path)
}

/// Records read lazily from a manifest written by [`build_dataset`].
pub struct ManifestDataset {
    pub root: PathBuf,
    pub header: ManifestHeader,
    entries: [Vec<ManifestEntry>; 3],
}

impl ManifestDataset {
    pub fn open(manifest: &Path) -> Result<Self> {
        let f = BufReader::new(fs::File::open(manifest)?);
        let mut lines = f.lines();
        let first = lines.next().ok_or_else(|| Error::config(format!("{} is empty", manifest.display())))??;
        let header: ManifestHeader = serde_json::from_str(&first)?;
        let mut entries: [Vec<ManifestEntry>; 3] = Default::default();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e: ManifestEntry = serde_json::from_str(&line)?;
            entries[split_index(e.spec.split)].push(e);
        }
        let root = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { root, header, entries })
    }

    pub fn entries(&self, split: Split) -> &[ManifestEntry] {
        &self.entries[split_index(split)]
    }
}

impl<T: Scalar> RecordSource<T> for ManifestDataset {
    fn fingerprint(&self) -> Option<String> {
        fingerprint_of(&self.header.generator_config, self.header.seed)
    }

    fn num_records(&self, split: Split) -> usize {
        self.entries(split).len()
    }

    fn record(&self, split: Split, index: usize) -> Result<MixtureRecord<T>> {
        let e = self
            .entries(split)
            .get(index)
            .ok_or_else(|| Error::config(format!("{} has no record {index}", split.name())))?;
        let load = |p: &PathBuf| read_wav::<T>(&self.root.join(p));
        Ok(MixtureRecord {
            id: e.spec.id.clone(),
            speaker_ids: e.spec.speaker_ids,
            mixture: load(&e.mixture)?,
            sources: [load(&e.sources[0])?, load(&e.sources[1])?],
            enrollments: [
                e.enrollments[0].iter().map(load).collect::<Result<_>>()?,
                e.enrollments[1].iter().map(load).collect::<Result<_>>()?,
            ],
            sir_db: e.spec.sir_db,
            noise_snr_db: e.spec.noise_snr_db,
            t60_s: e.spec.t60_s,
            seed: e.spec.seed,
        })
    }
}

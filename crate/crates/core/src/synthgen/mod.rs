//! Synthetic two-speaker corpora: source-filter voices, mixing, noise and
//! reverberation.

mod corpus;
mod mix;
mod voice;

pub use corpus::{
    build_dataset, write_corpus, Corpus, CorpusConfig, ManifestDataset, ManifestEntry, ManifestHeader, RecordSource, RecordSpec, Scenario,
    Split, MANIFEST_FILE,
};
pub(crate) use corpus::derive_rng;
pub use mix::{add_noise, mix_two, reverberate, synth_rir, MixtureRecord};
pub use voice::{pink_noise_bursts, synth_utterance, SpeakerProfile};

use lext::model::{load_checkpoint, ModelConfig};
use lext::synthgen::{Corpus, CorpusConfig};
use lext::train::{best_checkpoint_path, TrainConfig, Trainer};

fn tiny_corpus() -> Corpus<f32> {
    let cc = CorpusConfig {
        train_valid_speakers: 4,
        test_speakers: 2,
        train_mixtures: 6,
        valid_mixtures: 2,
        test_mixtures: 1,
        utterances_per_speaker: 4,
        utterance_s: (0.8, 1.0),
        ..Default::default()
    };
    Corpus::generate(cc, 3).unwrap()
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        model: ModelConfig::micro(),
        mixture_seg_s: 0.25,
        enroll_len_s: 0.125,
        batch_size: 2,
        steps_per_epoch: Some(2),
        max_epochs: 4,
        seed: 11,
        ..Default::default()
    }
}

#[test]
fn same_seed_same_losses() {
    let corpus = tiny_corpus();
    let run = || {
        let mut t = Trainer::new(&corpus, tiny_config()).unwrap();
        (0..3).map(|_| t.step().unwrap()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn resume_reproduces_the_next_step() {
    let corpus = tiny_corpus();
    let mut a = Trainer::new(&corpus, tiny_config()).unwrap();
    a.step().unwrap();
    a.step().unwrap();
    let ckpt = a.checkpoint();
    let next = a.step().unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    lext::model::save_checkpoint(&path, &ckpt).unwrap();
    let mut b = Trainer::resume(&corpus, load_checkpoint(&path).unwrap()).unwrap();
    assert_eq!(b.step_count(), 2);
    assert_eq!(b.step().unwrap(), next);
    assert!(a.model == b.model);
}

#[test]
fn best_so_far_is_monotone_and_saved() {
    let corpus = tiny_corpus();
    let dir = tempfile::tempdir().unwrap();
    let out = Trainer::new(&corpus, tiny_config()).unwrap().run(Some(dir.path())).unwrap();
    assert_eq!(out.history.len(), 4);
    for pair in out.history.windows(2) {
        assert!(pair[1].best_val_si_sdri >= pair[0].best_val_si_sdri);
    }
    let top = out.history.iter().map(|h| h.val_si_sdri).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(out.best_val_si_sdri, top);
    let saved = load_checkpoint::<f32>(&best_checkpoint_path(dir.path())).unwrap();
    assert!(saved.model == out.best.model);
    assert_eq!(out.last.model.step_count, 8);
}

#[test]
fn interrupted_run_finishes_like_an_uninterrupted_one() {
    let corpus = tiny_corpus();
    let full = Trainer::new(&corpus, tiny_config()).unwrap().run(None).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let half = TrainConfig { max_epochs: 2, ..tiny_config() };
    Trainer::new(&corpus, half).unwrap().run(Some(dir.path())).unwrap();
    let mut ckpt = load_checkpoint::<f32>(&dir.path().join("last.ckpt")).unwrap();
    // extend the stored schedule to the full run
    ckpt.extra["train_state"]["train_config"]["max_epochs"] = 4.into();
    let resumed = Trainer::resume(&corpus, ckpt).unwrap().run(Some(dir.path())).unwrap();
    assert!(resumed.last.model == full.last.model);
    assert_eq!(resumed.best_val_si_sdri, full.best_val_si_sdri);
    assert!(resumed.best.model == full.best.model);
}

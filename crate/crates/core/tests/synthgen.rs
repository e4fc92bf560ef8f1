use std::collections::HashSet;

use lext::synthgen::{build_dataset, Corpus, CorpusConfig, ManifestDataset, RecordSource, Scenario, SpeakerProfile, Split};
use lext::dsp::Waveform;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;

fn small(scenario: Scenario) -> CorpusConfig {
    CorpusConfig {
        train_valid_speakers: 6,
        test_speakers: 3,
        train_mixtures: 12,
        valid_mixtures: 4,
        test_mixtures: 4,
        utterances_per_speaker: 4,
        utterance_s: (1.0, 1.5),
        scenario,
        ..Default::default()
    }
}

#[test]
fn splits_are_speaker_disjoint_with_enrollment_pools() {
    let c = Corpus::<f32>::generate(small(Scenario::Anechoic), 3).unwrap();
    let ids = |s: Split| c.specs(s).iter().flat_map(|r| r.speaker_ids).collect::<HashSet<_>>();
    let tv: HashSet<u32> = ids(Split::Train).union(&ids(Split::Valid)).copied().collect();
    assert!(ids(Split::Test).is_disjoint(&tv));
    assert_eq!(c.specs(Split::Train).len(), 12);
    for split in Split::ALL {
        for spec in c.specs(split) {
            assert_ne!(spec.speaker_ids[0], spec.speaker_ids[1]);
            for k in 0..2 {
                assert!(spec.enroll_utterances[k].len() >= 2);
                assert!(!spec.enroll_utterances[k].contains(&spec.utterances[k]));
            }
        }
    }
}

#[test]
fn anechoic_and_noisy_mixtures_are_consistent() {
    for scenario in [Scenario::Anechoic, Scenario::Noisy, Scenario::NoisyReverberant] {
        let c = Corpus::<f64>::generate(small(scenario), 5).unwrap();
        for i in 0..4 {
            let r = c.record(Split::Train, i).unwrap();
            assert_eq!(r.mixture.len(), r.sources[0].len());
            let p = |w: &Waveform<f64>| w.samples().iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
            let sir = 10.0 * (p(&r.sources[0]) / p(&r.sources[1])).log10();
            assert!((sir - r.sir_db).abs() < 1e-6, "{scenario:?}: {sir} vs {}", r.sir_db);
            let resid: f64 = r
                .mixture
                .samples()
                .iter()
                .zip(r.sources[0].samples())
                .zip(r.sources[1].samples())
                .map(|((m, a), b)| (m - a - b).abs())
                .fold(0.0, f64::max);
            match scenario {
                Scenario::Anechoic => assert!(resid < 1e-6),
                _ => assert!(resid > 1e-3),
            }
        }
    }
}

#[test]
fn manifests_are_deterministic_and_reloadable() {
    let cfg = small(Scenario::Noisy);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = build_dataset(&cfg, 11, a.path(), Some("# echoed")).unwrap();
    let mb = build_dataset(&cfg, 11, b.path(), Some("# echoed")).unwrap();
    assert_eq!(std::fs::read(&ma).unwrap(), std::fs::read(&mb).unwrap());
    let ds = ManifestDataset::open(&ma).unwrap();
    assert_eq!(ds.header.config_text.as_deref(), Some("# echoed"));
    assert_eq!(ds.header.generator_config, cfg);
    let mem = Corpus::<f32>::generate(cfg, 11).unwrap();
    for split in Split::ALL {
        assert_eq!(RecordSource::<f32>::num_records(&ds, split), mem.num_records(split));
    }
    let from_disk: lext::synthgen::MixtureRecord<f32> = ds.record(Split::Test, 1).unwrap();
    assert_eq!(from_disk, mem.record(Split::Test, 1).unwrap());
    let wa = std::fs::read(a.path().join("test/test-00001_mix.wav")).unwrap();
    let wb = std::fs::read(b.path().join("test/test-00001_mix.wav")).unwrap();
    assert_eq!(wa, wb);
}

#[test]
fn leading_silence_variant() {
    let cfg = CorpusConfig { enroll_leading_silence: Some(0.5), ..small(Scenario::Anechoic) };
    let c = Corpus::<f64>::generate(cfg, 2).unwrap();
    let r = c.record(Split::Test, 0).unwrap();
    for pool in &r.enrollments {
        for e in pool {
            let first_loud = e.samples().iter().position(|v| v.abs() > 0.01).unwrap();
            assert!(first_loud as f64 >= 0.5 * e.len() as f64);
        }
    }
}

#[test]
fn sir_distribution_is_uniform() {
    let cfg = CorpusConfig {
        train_valid_speakers: 4,
        test_speakers: 2,
        train_mixtures: 600,
        valid_mixtures: 1,
        test_mixtures: 1,
        utterances_per_speaker: 3,
        utterance_s: (0.2, 0.3),
        ..Default::default()
    };
    let c = Corpus::<f32>::generate(cfg, 9).unwrap();
    let mut sirs: Vec<f64> = c.specs(Split::Train).iter().map(|r| r.sir_db).collect();
    sirs.sort_by(f64::total_cmp);
    let n = sirs.len() as f64;
    let ks = sirs
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let cdf = (v + 5.0) / 10.0;
            (cdf - i as f64 / n).abs().max((cdf - (i + 1) as f64 / n).abs())
        })
        .fold(0.0, f64::max);
    assert!(ks < 0.1, "KS {ks}");
    assert!(sirs[0] >= -5.0 && sirs[sirs.len() - 1] <= 5.0);
}

fn long_run_spectrum(w: &Waveform<f64>) -> Vec<f64> {
    let n = 1024;
    let mut acc = vec![0.0; n / 2];
    let mut planner = rustfft::FftPlanner::new();
    let fft = planner.plan_fft_forward(n);
    for frame in w.samples().chunks_exact(n) {
        let mut buf: Vec<Complex<f64>> = frame.iter().map(|&v| Complex::new(v, 0.0)).collect();
        fft.process(&mut buf);
        for k in 0..n / 2 {
            acc[k] += buf[k].norm_sqr();
        }
    }
    acc
}

#[test]
fn distinct_profiles_have_distinct_fundamentals() {
    let low = SpeakerProfile { speaker_id: 0, f0_base: 100.0, f0_jitter: 0.04, formants: [500.0, 1500.0, 2500.0], harmonic_rolloff: 6.0 };
    let high = SpeakerProfile { speaker_id: 1, f0_base: 230.0, f0_jitter: 0.04, formants: [700.0, 1200.0, 2800.0], harmonic_rolloff: 6.0 };
    let a = long_run_spectrum(&lext::synthgen::synth_utterance(&low, 8.0, &mut ChaCha8Rng::seed_from_u64(1)));
    let b = long_run_spectrum(&lext::synthgen::synth_utterance(&high, 8.0, &mut ChaCha8Rng::seed_from_u64(1)));
    // bin of 100 Hz at 8 kHz / 1024
    let k = (100.0 * 1024.0 / 8000.0) as usize;
    let band = |s: &[f64]| s[k - 1..=k + 1].iter().sum::<f64>();
    let diff_db = 10.0 * (band(&a) / band(&b)).log10();
    assert!(diff_db > 10.0, "{diff_db} dB");
}

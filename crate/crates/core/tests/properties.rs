use proptest::prelude::*;

use lext::dsp::{normalize_gain, StftConfig, StftPlan, Waveform};
use lext::eval::{extract, histogram, ExtractConfig, DEFAULT_EDGES};
use lext::model::{init_model, load_checkpoint, save_checkpoint, Checkpoint, ModelConfig};
use lext::prompt::{assemble, denormalize, strip_prompt, GlueSpec, PromptStrategy};
use lext::train::{masked_loss, si_sdr};

fn signal(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, len).prop_filter("needs variance", |v| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() > 1e-3
    })
}

fn strategy() -> impl Strategy<Value = PromptStrategy> {
    prop_oneof![Just(PromptStrategy::Prepend), Just(PromptStrategy::Append), Just(PromptStrategy::Split)]
}

fn w(x: Vec<f64>) -> Waveform<f64> {
    Waveform::new(x).unwrap()
}

proptest! {
    #[test]
    fn si_sdr_is_scale_invariant(r in signal(8..300), noise in signal(8..300), c in 1e-3f64..1e3, d in 1e-3f64..1e3) {
        let n = r.len().min(noise.len());
        let r = w(r[..n].to_vec());
        let est = w(r.samples().iter().zip(&noise).map(|(a, b)| a + 0.3 * b).collect());
        let base = si_sdr(&est, &r).unwrap();
        prop_assert!((si_sdr(&est.scaled(c), &r).unwrap() - base).abs() < 1e-8);
        prop_assert!((si_sdr(&est, &r.scaled(d)).unwrap() - base).abs() < 1e-8);
    }

    #[test]
    fn stft_round_trip_preserves_length(x in signal(1..2000)) {
        let plan = StftPlan::<f64>::new(StftConfig::default()).unwrap();
        let spec = plan.analyze(&x).unwrap();
        let y = plan.synthesize(&spec.to_interleaved(), spec.frames, x.len()).unwrap();
        prop_assert_eq!(y.len(), x.len());
        for (a, b) in x.iter().zip(&y) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn assembled_prompt_strips_back_to_the_mixture(
        e in signal(0..400), y in signal(1..400), s in signal(1..400), glue_ms in 0.0f64..40.0, strat in strategy()
    ) {
        let n = y.len().min(s.len());
        let (y, s) = (w(y[..n].to_vec()), w(s[..n].to_vec()));
        let e = w(e);
        let pair = assemble(&e, &y, &s, &GlueSpec { length_ms: glue_ms, value: 0.0 }, strat).unwrap();
        let b = pair.boundaries;
        prop_assert_eq!(b.total(), pair.input.len());
        prop_assert_eq!(pair.target.len(), pair.input.len());
        prop_assert_eq!(b.enroll_pre_len + b.enroll_post_len, e.len());
        let stripped = strip_prompt(&pair.input, &b).unwrap();
        let restored = denormalize(&pair.input, &b, &pair.scales).unwrap();
        prop_assert_eq!(stripped.len(), n);
        for (a, o) in strip_prompt(&restored, &b).unwrap().samples().iter().zip(y.samples()) {
            prop_assert!((a - o).abs() < 1e-9);
        }
    }

    #[test]
    fn masked_loss_ignores_everything_outside_the_mixture(
        e in signal(1..200), y in signal(16..200), junk in -100.0f64..100.0, strat in strategy()
    ) {
        let y = w(y);
        let pair = assemble(&w(e), &y, &y, &GlueSpec::default(), strat).unwrap();
        let est = pair.input.scaled(0.7);
        let (a, z) = pair.boundaries.mixture_range();
        let mut poked = est.samples().to_vec();
        for (i, v) in poked.iter_mut().enumerate() {
            if i < a || i >= z {
                *v += junk;
            }
        }
        prop_assert_eq!(masked_loss(&est, &pair).unwrap(), masked_loss(&w(poked), &pair).unwrap());
    }

    #[test]
    fn gain_normalization_is_invertible(s in signal(4..300), e in signal(4..300), g in 1e-3f64..1e3) {
        let y = w(s.iter().map(|v| v * g).collect());
        let s = w(s.iter().map(|v| v * g * 0.5).collect());
        let e = w(e);
        let (sn, yn, en, sc) = normalize_gain(&s, &y, &e).unwrap();
        for (orig, norm, k) in [(&s, &sn, sc.sigma_y), (&y, &yn, sc.sigma_y), (&e, &en, sc.sigma_e)] {
            for (a, b) in orig.samples().iter().zip(norm.samples()) {
                prop_assert!((b * k - a).abs() <= 1e-9 * a.abs().max(1.0));
            }
        }
    }

    #[test]
    fn histogram_counts_every_score(scores in prop::collection::vec(-80.0f64..80.0, 0..200)) {
        let h = histogram(&scores, &DEFAULT_EDGES).unwrap();
        prop_assert_eq!(h.counts.iter().sum::<usize>(), scores.len());
        prop_assert_eq!(h.counts.len() + 1, h.edges.len());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn extraction_keeps_length_and_is_deterministic(y in signal(64..3000), e in signal(64..3000), strat in strategy(), seed in 0u64..4) {
        let model = init_model::<f32>(ModelConfig::micro(), seed).unwrap();
        let y = w(y).cast::<f32>();
        let e = w(e).cast::<f32>();
        let cfg = ExtractConfig { strategy: strat, sad_enabled: false, enroll_len_s: 0.1, ..ExtractConfig::default() };
        let a = extract(&model, &y, &e, &cfg).unwrap();
        let b = extract(&model, &y, &e, &cfg).unwrap();
        prop_assert_eq!(a.len(), y.len());
        prop_assert_eq!(a.samples(), b.samples());
    }

    #[test]
    fn checkpoints_round_trip_bit_identically(seed in 0u64..1000) {
        let dir = tempfile::tempdir().unwrap();
        let model = init_model::<f32>(ModelConfig::micro(), seed).unwrap();
        let ckpt = Checkpoint { model, optimizer: None, extra: serde_json::json!({ "seed": seed }) };
        let (p1, p2) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        save_checkpoint(&p1, &ckpt).unwrap();
        let back: Checkpoint<f32> = load_checkpoint(&p1).unwrap();
        prop_assert!(back == ckpt);
        save_checkpoint(&p2, &back).unwrap();
        prop_assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }
}

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"
seed = 7

[corpus]
train_valid_speakers = 4
test_speakers = 2
train_mixtures = 4
valid_mixtures = 2
test_mixtures = 2
utterances_per_speaker = 4
utterance_s = [1.0, 1.2]

[train]
mixture_seg_s = 0.5
enroll_len_s = 0.25
batch_size = 1
max_steps = 2
steps_per_epoch = 1
max_epochs = 2

[train.model]
embed_dim = 16
num_blocks = 2
attention_heads = 2
hidden_units = 32
variant = "lext"
"#;

fn lext(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lext")).args(args).env("RUST_LOG", "warn").env_remove("LEXT_CACHE_DIR").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = lext(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn error_record(out: &Output) -> Value {
    let err = String::from_utf8_lossy(&out.stderr);
    let line = err.lines().rev().find(|l| l.starts_with('{')).expect("error record");
    serde_json::from_str(line).unwrap()
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_lists_every_flag() {
    let top = ok(&["--help"]);
    for cmd in ["gen-data", "train", "eval", "ablate", "export-attn", "plot"] {
        let sub = ok(&[cmd, "--help"]);
        for flag in sub.split_whitespace().filter(|w| w.starts_with("--")).map(|w| w.trim_end_matches(',')) {
            if flag == "--help" || flag == "--version" {
                continue;
            }
            assert!(top.contains(flag), "{flag} of {cmd} missing from top-level help");
        }
    }
    for flag in ["--checkpoint", "--manifest", "--enroll-len", "--strategy", "--glue-value", "--no-sad", "--out-dir", "--seed", "--resample"] {
        assert!(top.contains(flag), "{flag}");
    }
}

#[test]
fn usage_errors_exit_2() {
    let out = lext(&["train", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_record(&out)["error"]["kind"], "usage");
    let out = lext(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let out = lext(&["gen-data", "--out-dir", s(dir.path()), "--set", "nonsense"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = lext(&["gen-data", "--out-dir", s(dir.path()), "--set", "corpus.enroll_pool=1"]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_record(&out)["error"]["code"], 3);
    let out = lext(&["gen-data", "--out-dir", s(dir.path()), "--set", "corpus.no_such_key=1"]);
    assert_eq!(out.status.code(), Some(3));
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[train]\nbatch_size = 0\n").unwrap();
    let out = lext(&["train", "--config", s(&cfg), "--out-dir", s(&dir.path().join("t"))]);
    assert_eq!(out.status.code(), Some(3));
    fs::write(&cfg, "[train]\nunknown = 1\n").unwrap();
    let out = lext(&["train", "--config", s(&cfg), "--out-dir", s(&dir.path().join("t"))]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["gen-data", "--config", s(&cfg), "--seed", "7", "--out-dir", s(&a)]);
    ok(&["gen-data", "--config", s(&cfg), "--seed", "7", "--out-dir", s(&b)]);
    let (mut ta, mut tb) = (tree(&a), tree(&b));
    // the run record holds the differing output path in argv
    let ra: Value = serde_json::from_slice(&ta.remove(Path::new("run.json")).unwrap()).unwrap();
    let rb: Value = serde_json::from_slice(&tb.remove(Path::new("run.json")).unwrap()).unwrap();
    assert_eq!(ra["config"], rb["config"]);
    assert_eq!(ra["seed"], 7);
    assert!(ra["version"].is_string());
    assert!(ta.contains_key(Path::new("manifest.jsonl")));
    assert!(ta == tb, "dataset trees differ");
}

#[test]
fn train_eval_export_plot_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let data = dir.path().join("data");
    ok(&["gen-data", "--config", s(&cfg), "--out-dir", s(&data)]);
    let manifest = data.join("manifest.jsonl");

    let run = dir.path().join("run");
    let out = ok(&["train", "--config", s(&cfg), "--manifest", s(&manifest), "--out-dir", s(&run)]);
    assert!(out.contains("best validation SI-SDRi"));
    for f in ["best.ckpt", "last.ckpt", "train_log.jsonl", "run.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);

    let ev = dir.path().join("eval");
    let ckpt = run.join("best.ckpt");
    let out = ok(&["eval", "--checkpoint", s(&ckpt), "--manifest", s(&manifest), "--out-dir", s(&ev), "--enroll-len", "0.5"]);
    assert!(out.contains("mean SI-SDRi"), "{out}");
    let csv = fs::read_to_string(ev.join("eval.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    let rec: Value = serde_json::from_str(&fs::read_to_string(ev.join("run.json")).unwrap()).unwrap();
    assert_eq!(rec["config"]["train"]["enroll_len_s"], 0.5);
    assert_eq!(rec["config"]["train"]["model"]["embed_dim"], 16);

    let est = dir.path().join("extract");
    let mix = data.join("test").join("test_0000_mix.wav");
    let mix = if mix.exists() { mix } else { first_with_suffix(&data.join("test"), "_mix.wav") };
    let enr = first_with_suffix(&data.join("enroll"), ".wav");
    ok(&["eval", "--checkpoint", s(&ckpt), "--mixture", s(&mix), "--enrollment", s(&enr), "--out-dir", s(&est)]);
    assert!(est.join("estimate.wav").exists());

    let att = dir.path().join("attn");
    let out = ok(&["export-attn", "--checkpoint", s(&ckpt), "--manifest", s(&manifest), "--out-dir", s(&att)]);
    assert_eq!(out.lines().count(), 4);
    let npy = fs::read_dir(&att).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "npy")).count();
    assert_eq!(npy, 4);
    assert!(att.join("attention.json").exists() && att.join("run.json").exists());

    let out = ok(&["plot", "--input", s(&run.join("train_log.jsonl")), s(&ev.join("eval.jsonl"))]);
    assert_eq!(out.lines().count(), 2);
    assert!(run.join("train_curve.png").exists() && ev.join("histogram.png").exists());
    let out = lext(&["plot", "--input", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
}

fn first_with_suffix(dir: &Path, suffix: &str) -> PathBuf {
    let mut v: Vec<PathBuf> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).filter(|p| s(p).ends_with(suffix)).collect();
    v.sort();
    v.remove(0)
}

#[test]
fn ablate_writes_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    let tiny = TINY.replace("max_steps = 2", "max_steps = 1").replace("max_epochs = 2", "max_epochs = 1");
    fs::write(&cfg, tiny).unwrap();
    let out_dir = dir.path().join("abl");
    let out = ok(&["ablate", "--config", s(&cfg), "--axis", "enroll_len", "--values", "0.25,0.5,1.0,2.0", "--out-dir", s(&out_dir), "--max-records", "1"]);
    assert_eq!(out.lines().count(), 4);
    let csv = fs::read_to_string(out_dir.join("ablation.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    let values: Vec<&str> = rows.iter().map(|r| r.split(',').nth(1).unwrap()).collect();
    assert_eq!(values, ["0.25", "0.5", "1.0", "2.0"]);
    assert!(out_dir.join("ablation.png").exists() && out_dir.join("run.json").exists());
}

#[test]
fn cached_ablation_matches_fresh() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    let tiny = TINY.replace("max_steps = 2", "max_steps = 1").replace("max_epochs = 2", "max_epochs = 1");
    fs::write(&cfg, tiny).unwrap();
    let cache = dir.path().join("cache");
    let run = |name: &str| {
        let out_dir = dir.path().join(name);
        let out = Command::new(env!("CARGO_BIN_EXE_lext"))
            .args(["ablate", "--config", s(&cfg), "--axis", "sad_enabled", "--values", "true,false", "--out-dir", s(&out_dir), "--max-records", "1"])
            .env("LEXT_CACHE_DIR", &cache)
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let t: Value = serde_json::from_str(&fs::read_to_string(out_dir.join("ablation.json")).unwrap()).unwrap();
        t
    };
    let fresh = run("a");
    let cached = run("b");
    for (f, c) in fresh["cells"].as_array().unwrap().iter().zip(cached["cells"].as_array().unwrap()) {
        assert_eq!(f["cached"], false);
        assert_eq!(c["cached"], true);
        assert_eq!(f["mean_si_sdri"], c["mean_si_sdri"]);
        assert_eq!(f["cache_key"], c["cache_key"]);
    }
    assert_eq!(fs::read_dir(&cache).unwrap().count(), 2);
}

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use lext::eval::{
    cache_dir_from_env, evaluate, export_attention, extract, extract_without_enrollment, plot, run_ablation, AblationAxis, AblationGrid,
    AblationTable, EvalConfig, ExtractConfig, Histogram,
};
use lext::model::{load_checkpoint, Checkpoint};
use lext::prompt::{GlueSpec, PromptStrategy};
use lext::synthgen::{build_dataset, Corpus, ManifestDataset, RecordSource, Split};
use lext::train::{TrainConfig, Trainer};
use lext::wav::{read_wav, read_wav_resampled, write_wav, WavEncoding};
use lext::{Real, Signal};
use serde_json::{json, Value};

use crate::config::{RunConfig, RunRecord};
use crate::CliError;

#[derive(Parser, Debug)]
#[command(name = "lext", version, about = "Onset-prompted target speaker extraction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic corpus (WAV files plus manifest.jsonl).
    GenData(GenDataArgs),
    /// Train a model; writes best.ckpt, last.ckpt and train_log.jsonl.
    Train(TrainArgs),
    /// Score a checkpoint on a split, or extract from a mixture/enrollment pair.
    Eval(EvalArgs),
    /// Train and score one model per value of a single config axis.
    Ablate(AblateArgs),
    /// Write attention maps of one prompted input.
    ExportAttn(ExportArgs),
    /// Render PNG plots from train_log.jsonl, eval.jsonl or ablation.json.
    Plot(PlotArgs),
}

#[derive(Args, Debug)]
pub struct Common {
    /// TOML config file with optional [corpus], [train] and [eval] tables.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config override, e.g. --set train.max_steps=100 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed for data generation and training (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug, Default)]
pub struct PromptFlags {
    /// Enrollment length in seconds.
    #[arg(long)]
    enroll_len: Option<f64>,
    /// prepend, append or split.
    #[arg(long)]
    strategy: Option<PromptStrategy>,
    /// Glue value, or "absent" for no glue.
    #[arg(long)]
    glue_value: Option<String>,
    /// Skip speech activity detection on the enrollment.
    #[arg(long)]
    no_sad: bool,
}

impl PromptFlags {
    fn apply(&self, t: &mut TrainConfig) -> Result<(), CliError> {
        if let Some(e) = self.enroll_len {
            t.enroll_len_s = e;
        }
        if let Some(s) = self.strategy {
            t.strategy = s;
        }
        if let Some(g) = &self.glue_value {
            t.glue = if g == "absent" {
                GlueSpec::none()
            } else {
                let value = g.parse::<f64>().map_err(|_| CliError::usage(format!("--glue-value {g:?} is neither a number nor \"absent\"")))?;
                let length_ms = if t.glue.length_ms > 0.0 { t.glue.length_ms } else { GlueSpec::default().length_ms };
                GlueSpec { length_ms, value }
            };
        }
        if self.no_sad {
            t.sad_enabled = false;
        }
        Ok(())
    }
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    prompt: PromptFlags,
    /// Dataset manifest; without it the corpus is generated in memory from the config.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Continue from a last.ckpt written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    prompt: PromptFlags,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// train, valid or test.
    #[arg(long, value_parser = parse_split)]
    split: Option<Split>,
    #[arg(long)]
    max_records: Option<usize>,
    /// Score the no-enrollment control instead.
    #[arg(long)]
    no_enrollment: bool,
    /// Extract from this mixture WAV instead of scoring a split.
    #[arg(long, requires = "enrollment")]
    mixture: Option<PathBuf>,
    /// Enrollment WAV for --mixture.
    #[arg(long, requires = "mixture")]
    enrollment: Option<PathBuf>,
    /// Convert WAV inputs at other sample rates instead of rejecting them.
    #[arg(long)]
    resample: bool,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    prompt: PromptFlags,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// enroll_len, strategy, glue_value or sad_enabled.
    #[arg(long)]
    axis: AblationAxis,
    /// Comma-separated axis values.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<String>,
    #[arg(long)]
    max_records: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    prompt: PromptFlags,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, value_parser = parse_split)]
    split: Option<Split>,
    /// Record index within the split.
    #[arg(long, default_value_t = 0)]
    record: usize,
    #[arg(long, requires = "enrollment")]
    mixture: Option<PathBuf>,
    #[arg(long, requires = "mixture")]
    enrollment: Option<PathBuf>,
    #[arg(long)]
    resample: bool,
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    /// Files to plot.
    #[arg(long, required = true, num_args = 1..)]
    input: Vec<PathBuf>,
    /// Defaults to each input's directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn parse_split(s: &str) -> Result<Split, String> {
    Split::ALL.into_iter().find(|x| x.name() == s).ok_or_else(|| format!("unknown split {s:?} (train|valid|test)"))
}

/// Resolved configuration plus the raw file text for the run record.
struct Resolved {
    cfg: RunConfig,
    text: Option<String>,
}

fn resolve(common: &Common, base_train: Option<TrainConfig>, prompt: Option<&PromptFlags>) -> Result<Resolved, CliError> {
    let (mut cfg, text) = RunConfig::load(common.config.as_deref(), &[])?;
    if let (None, Some(t)) = (&common.config, base_train) {
        cfg.train = t;
    }
    for o in &common.overrides {
        cfg = cfg.with_override(o)?;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.train.seed = cfg.seed;
    if let Some(p) = prompt {
        p.apply(&mut cfg.train)?;
    }
    cfg.validate()?;
    Ok(Resolved { cfg, text })
}

fn record(command: &str, argv: &[String], r: &Resolved, details: Value, dir: &Path) -> Result<(), CliError> {
    RunRecord {
        command,
        argv: argv.to_vec(),
        seed: r.cfg.seed,
        version: env!("CARGO_PKG_VERSION"),
        config: &r.cfg,
        config_text: r.text.as_deref(),
        details,
    }
    .write(dir)
}

fn source(manifest: Option<&Path>, cfg: &RunConfig) -> Result<Box<dyn RecordSource<Real>>, CliError> {
    Ok(match manifest {
        Some(m) => Box::new(ManifestDataset::open(m)?),
        None => Box::new(Corpus::<Real>::generate(cfg.corpus.clone(), cfg.seed)?),
    })
}

fn read_input(path: &Path, resample: bool) -> Result<Signal, CliError> {
    Ok(if resample { read_wav_resampled(path)? } else { read_wav(path)? })
}

/// Training config stored in a checkpoint's metadata, if any.
fn stored_train_config(ckpt: &Checkpoint<Real>) -> Option<TrainConfig> {
    ckpt.extra.get("train_config").or_else(|| ckpt.extra.pointer("/train_state/train_config")).and_then(|v| serde_json::from_value(v.clone()).ok())
}

impl Cli {
    pub fn run(self, argv: Vec<String>) -> Result<(), CliError> {
        match self.command {
            Command::GenData(a) => gen_data(a, &argv),
            Command::Train(a) => train(a, &argv),
            Command::Eval(a) => eval(a, &argv),
            Command::Ablate(a) => ablate(a, &argv),
            Command::ExportAttn(a) => export(a, &argv),
            Command::Plot(a) => plot_files(a, &argv),
        }
    }
}

fn gen_data(a: GenDataArgs, argv: &[String]) -> Result<(), CliError> {
    let r = resolve(&a.common, None, None)?;
    let dir = &a.common.out_dir;
    let manifest = build_dataset(&r.cfg.corpus, r.cfg.seed, dir, r.text.as_deref())?;
    record("gen-data", argv, &r, json!({ "manifest": manifest }), dir)?;
    println!("wrote {}", manifest.display());
    Ok(())
}

fn train(a: TrainArgs, argv: &[String]) -> Result<(), CliError> {
    let resumed = a.resume.as_deref().map(load_checkpoint::<Real>).transpose()?;
    let r = resolve(&a.common, resumed.as_ref().and_then(stored_train_config), Some(&a.prompt))?;
    let data = source(a.manifest.as_deref(), &r.cfg)?;
    let dir = &a.common.out_dir;
    record("train", argv, &r, json!({ "manifest": a.manifest, "resume": a.resume }), dir)?;
    let trainer = match resumed {
        Some(ckpt) => Trainer::resume(data.as_ref(), ckpt)?,
        None => Trainer::new(data.as_ref(), r.cfg.train.clone())?,
    };
    let out = trainer.run(Some(dir))?;
    println!("steps {} best validation SI-SDRi {:.2} dB", out.last.model.step_count, out.best_val_si_sdri);
    Ok(())
}

fn eval(a: EvalArgs, argv: &[String]) -> Result<(), CliError> {
    let ckpt = load_checkpoint::<Real>(&a.checkpoint)?;
    let r = resolve(&a.common, stored_train_config(&ckpt), Some(&a.prompt))?;
    let dir = &a.common.out_dir;
    let extract_cfg = r.cfg.train.extract_config();
    if let (Some(m), Some(e)) = (&a.mixture, &a.enrollment) {
        let y = read_input(m, a.resample)?;
        let est = if a.no_enrollment {
            extract_without_enrollment(&ckpt.model, &y)?
        } else {
            extract(&ckpt.model, &y, &read_input(e, a.resample)?, &extract_cfg)?
        };
        std::fs::create_dir_all(dir)?;
        let out = dir.join("estimate.wav");
        write_wav(&out, &est, WavEncoding::Float32)?;
        record("eval", argv, &r, json!({ "checkpoint": a.checkpoint, "mixture": m, "enrollment": e }), dir)?;
        println!("wrote {}", out.display());
        return Ok(());
    }
    let data = source(a.manifest.as_deref(), &r.cfg)?;
    let split = a.split.unwrap_or(r.cfg.eval.split);
    let ecfg = EvalConfig { extract: extract_cfg, max_records: a.max_records.or(r.cfg.eval.max_records), no_enrollment: a.no_enrollment };
    let report = evaluate(&ckpt.model, data.as_ref(), split, &ecfg)?;
    report.write(dir)?;
    record("eval", argv, &r, json!({ "checkpoint": a.checkpoint, "manifest": a.manifest, "split": split }), dir)?;
    println!("{}", report.summary());
    Ok(())
}

fn ablate(a: AblateArgs, argv: &[String]) -> Result<(), CliError> {
    let r = resolve(&a.common, None, Some(&a.prompt))?;
    let data = source(a.manifest.as_deref(), &r.cfg)?;
    let grid = AblationGrid { axis: a.axis, values: a.values.clone(), eval_split: r.cfg.eval.split, eval_records: a.max_records.or(r.cfg.eval.max_records) };
    grid.cell_configs(&r.cfg.train)?;
    let dir = &a.common.out_dir;
    let cache = cache_dir_from_env();
    record("ablate", argv, &r, json!({ "grid": grid, "manifest": a.manifest, "cache_dir": cache }), dir)?;
    let table = run_ablation(&grid, &r.cfg.train, data.as_ref(), cache.as_deref())?;
    table.write(dir)?;
    for c in &table.cells {
        match c.mean_si_sdri {
            Some(v) => println!("{}={} mean SI-SDRi {v:.2} dB ({:.0} s{})", table.axis, c.value, c.wall_clock_s, if c.cached { ", cached" } else { "" }),
            None => println!("{}={} failed: {}", table.axis, c.value, c.error.as_deref().unwrap_or("")),
        }
    }
    Ok(())
}

fn export(a: ExportArgs, argv: &[String]) -> Result<(), CliError> {
    let ckpt = load_checkpoint::<Real>(&a.checkpoint)?;
    let r = resolve(&a.common, stored_train_config(&ckpt), Some(&a.prompt))?;
    let (y, e, what) = match (&a.mixture, &a.enrollment) {
        (Some(m), Some(e)) => (read_input(m, a.resample)?, read_input(e, a.resample)?, json!({ "mixture": m, "enrollment": e })),
        _ => {
            let data = source(a.manifest.as_deref(), &r.cfg)?;
            let split = a.split.unwrap_or(r.cfg.eval.split);
            let rec = data.record(split, a.record)?;
            let (k, j) = lext::eval::eval_choice(a.record, rec.enrollments[0].len().min(rec.enrollments[1].len()));
            let e = rec.enrollments[k].get(j).cloned().ok_or_else(|| CliError::runtime("record has no enrollment"))?;
            (rec.mixture, e, json!({ "split": split, "record": a.record, "record_id": rec.id, "target_slot": k }))
        }
    };
    let ecfg: ExtractConfig = r.cfg.train.extract_config();
    let dir = &a.common.out_dir;
    let x = export_attention(&ckpt.model, &y, &e, &ecfg, dir)?;
    record("export-attn", argv, &r, json!({ "checkpoint": a.checkpoint, "input": what }), dir)?;
    for h in &x.heads {
        println!(
            "block {} head {} enrollment mass {:.4} uniform {:.4}{}",
            h.block,
            h.head,
            h.enrollment_mass,
            h.uniform_baseline,
            if h.above_uniform() { " above" } else { "" }
        );
    }
    Ok(())
}

fn plot_files(a: PlotArgs, argv: &[String]) -> Result<(), CliError> {
    let mut written = Vec::new();
    for input in &a.input {
        let dir = a.out_dir.clone().unwrap_or_else(|| input.parent().map(Path::to_path_buf).unwrap_or_default());
        let text = std::fs::read_to_string(input).map_err(|e| CliError::runtime(format!("{}: {e}", input.display())))?;
        let name = input.file_name().and_then(|n| n.to_str()).unwrap_or("");
        let out = if name.ends_with("train_log.jsonl") {
            let mut loss = Vec::new();
            let mut val = Vec::new();
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                let v: Value = serde_json::from_str(line).map_err(|e| CliError::runtime(e.to_string()))?;
                let step = v["step"].as_f64().unwrap_or(f64::NAN);
                loss.push((step, v["loss"].as_f64().unwrap_or(f64::NAN)));
                val.push((step, v["val_si_sdri"].as_f64().unwrap_or(f64::NAN)));
            }
            let out = dir.join("train_curve.png");
            plot::line_chart(&out, &[("loss".into(), loss), ("val si-sdri".into(), val)])?;
            out
        } else if name.ends_with("eval.jsonl") {
            let summary = text
                .lines()
                .filter_map(|l| serde_json::from_str::<Value>(l).ok())
                .find_map(|v| v.get("summary").cloned())
                .ok_or_else(|| CliError::runtime(format!("{}: no summary record", input.display())))?;
            let h: Histogram = serde_json::from_value(summary["histogram"].clone()).map_err(|e| CliError::runtime(e.to_string()))?;
            let bars: Vec<(String, Option<f64>)> = h
                .counts
                .iter()
                .enumerate()
                .map(|(i, &c)| {
                    let lo = h.edges[i];
                    (if lo.is_finite() { format!(">={lo}") } else { "<0".into() }, Some(c as f64))
                })
                .collect();
            let out = dir.join("histogram.png");
            plot::bar_chart(&out, &bars)?;
            out
        } else if name.ends_with("ablation.json") {
            let t: AblationTable = serde_json::from_str(&text).map_err(|e| CliError::runtime(e.to_string()))?;
            let out = dir.join("ablation.png");
            plot::bar_chart(&out, &t.cells.iter().map(|c| (c.value.clone(), c.mean_si_sdri)).collect::<Vec<_>>())?;
            out
        } else {
            return Err(CliError::usage(format!("{}: expected train_log.jsonl, eval.jsonl or ablation.json", input.display())));
        };
        println!("wrote {}", out.display());
        written.push(out);
    }
    // plots land beside other runs' outputs, so their record gets its own name
    for dir in written.iter().filter_map(|p| p.parent()) {
        let rec = json!({ "command": "plot", "argv": argv, "version": env!("CARGO_PKG_VERSION"), "inputs": a.input, "outputs": written });
        std::fs::write(dir.join("plot.json"), serde_json::to_vec_pretty(&rec).map_err(|e| CliError::runtime(e.to_string()))?)?;
    }
    Ok(())
}

//! One-axis ablation grids with a checkpoint cache.

use std::cmp::Ordering;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{evaluate, plot, EvalConfig, EvalReport};
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::prompt::{GlueSpec, PromptStrategy};
use crate::scalar::Scalar;
use crate::synthgen::{RecordSource, Split};
use crate::train::{train, TrainConfig};

/// Environment variable naming the checkpoint cache directory.
pub const CACHE_ENV: &str = "LEXT_CACHE_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    EnrollLenS,
    Strategy,
    /// `absent` removes the glue; a number sets its value at the base length.
    GlueValue,
    SadEnabled,
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "enroll_len_s" | "enroll_len" => Ok(Self::EnrollLenS),
            "strategy" => Ok(Self::Strategy),
            "glue_value" => Ok(Self::GlueValue),
            "sad_enabled" | "sad" => Ok(Self::SadEnabled),
            other => Err(Error::config(format!("unknown axis {other:?} (enroll_len_s|strategy|glue_value|sad_enabled)"))),
        }
    }
}

impl std::fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::EnrollLenS => "enroll_len_s",
            Self::Strategy => "strategy",
            Self::GlueValue => "glue_value",
            Self::SadEnabled => "sad_enabled",
        })
    }
}

fn parse_bool(v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        other => Err(Error::config(format!("expected a boolean, got {other:?}"))),
    }
}

fn parse_f64(v: &str) -> Result<f64> {
    v.trim().parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(|| Error::config(format!("expected a number, got {v:?}")))
}

impl AblationAxis {
    /// `base` with this axis set to `value`.
    pub fn apply(self, base: &TrainConfig, value: &str) -> Result<TrainConfig> {
        let mut cfg = base.clone();
        match self {
            Self::EnrollLenS => cfg.enroll_len_s = parse_f64(value)?,
            Self::Strategy => cfg.strategy = value.parse()?,
            Self::GlueValue => {
                cfg.glue = if value == "absent" {
                    GlueSpec::none()
                } else {
                    let length_ms = if base.glue.length_ms > 0.0 { base.glue.length_ms } else { GlueSpec::default().length_ms };
                    GlueSpec { length_ms, value: parse_f64(value)? }
                }
            }
            Self::SadEnabled => cfg.sad_enabled = parse_bool(value)?,
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn order(self, a: &str, b: &str) -> Ordering {
        let num = |v: &str| parse_f64(v).unwrap_or(f64::NEG_INFINITY);
        match self {
            Self::EnrollLenS | Self::GlueValue => num(a).total_cmp(&num(b)),
            Self::Strategy => {
                let rank = |v: &str| v.parse::<PromptStrategy>().map(|s| s as u8).unwrap_or(u8::MAX);
                rank(a).cmp(&rank(b))
            }
            Self::SadEnabled => parse_bool(a).ok().cmp(&parse_bool(b).ok()),
        }
    }
}

/// An axis and the values it takes; every other field comes from the base
/// configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub axis: AblationAxis,
    pub values: Vec<String>,
    pub eval_split: Split,
    pub eval_records: Option<usize>,
}

impl AblationGrid {
    pub fn new(axis: AblationAxis, values: impl IntoIterator<Item = impl Into<String>>) -> Self {
        Self { axis, values: values.into_iter().map(Into::into).collect(), eval_split: Split::Test, eval_records: None }
    }

    /// Check every value against `base`; returns the per-cell configs.
    pub fn cell_configs(&self, base: &TrainConfig) -> Result<Vec<TrainConfig>> {
        if self.values.is_empty() {
            return Err(Error::config("ablation grid has no values"));
        }
        for (i, v) in self.values.iter().enumerate() {
            if self.values[..i].contains(v) {
                return Err(Error::config(format!("duplicate grid value {v:?}")));
            }
        }
        self.values.iter().map(|v| self.axis.apply(base, v)).collect()
    }
}

/// One grid cell's outcome. Failed cells carry `error` and no scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub value: String,
    pub mean_si_sdri: Option<f64>,
    pub failure_rate: Option<f64>,
    pub records: usize,
    pub wall_clock_s: f64,
    pub cached: bool,
    pub cache_key: String,
    pub error: Option<String>,
    #[serde(skip)]
    pub report: Option<EvalReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub cells: Vec<AblationCell>,
}

impl AblationTable {
    pub fn cell(&self, value: &str) -> Option<&AblationCell> {
        self.cells.iter().find(|c| c.value == value)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["axis", "value", "mean_si_sdri", "failure_rate", "records", "wall_clock_s", "cached", "cache_key", "error"])?;
        let opt = |x: Option<f64>| x.map(|v| format!("{v:.4}")).unwrap_or_default();
        for c in &self.cells {
            w.write_record([
                self.axis.to_string(),
                c.value.clone(),
                opt(c.mean_si_sdri),
                opt(c.failure_rate),
                c.records.to_string(),
                format!("{:.2}", c.wall_clock_s),
                c.cached.to_string(),
                c.cache_key.clone(),
                c.error.clone().unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// `ablation.csv`, `ablation.json` and `ablation.png` in `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.write_csv(&dir.join("ablation.csv"))?;
        fs::write(dir.join("ablation.json"), serde_json::to_vec_pretty(self)?)?;
        let bars: Vec<(String, Option<f64>)> = self.cells.iter().map(|c| (c.value.clone(), c.mean_si_sdri)).collect();
        plot::bar_chart(&dir.join("ablation.png"), &bars)
    }
}

/// Hex SHA-256 over the training config and the data fingerprint.
pub fn cache_key(cfg: &TrainConfig, fingerprint: &str) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(cfg)?);
    h.update([0u8]);
    h.update(fingerprint.as_bytes());
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Cache directory from [`CACHE_ENV`], if set and nonempty.
pub fn cache_dir_from_env() -> Option<PathBuf> {
    std::env::var_os(CACHE_ENV).filter(|v| !v.is_empty()).map(PathBuf::from)
}

/// Best checkpoint of training `cfg` on `source`, loaded from `cache` when
/// an entry for the config and data exists and stored there otherwise.
/// The flag tells whether the cache was hit.
pub fn train_cached<T: Scalar>(cfg: &TrainConfig, source: &dyn RecordSource<T>, cache: Option<&Path>) -> Result<(Checkpoint<T>, bool)> {
    let path = match (cache, source.fingerprint()) {
        (Some(dir), Some(fp)) => Some(dir.join(format!("{}.ckpt", cache_key(cfg, &fp)?))),
        _ => None,
    };
    if let Some(p) = path.as_ref().filter(|p| p.exists()) {
        return Ok((load_checkpoint::<T>(p)?, true));
    }
    let outcome = train(source, cfg, None)?;
    if let Some(p) = &path {
        save_checkpoint(p, &outcome.best)?;
    }
    Ok((outcome.best, false))
}

/// Train (or load from `cache`) and evaluate one model per grid value.
///
/// Cells whose training diverges are kept in the table with an error.
/// The cache is only used when the source has a fingerprint.
pub fn run_ablation<T: Scalar>(
    grid: &AblationGrid,
    base: &TrainConfig,
    source: &dyn RecordSource<T>,
    cache: Option<&Path>,
) -> Result<AblationTable> {
    let configs = grid.cell_configs(base)?;
    let fingerprint = source.fingerprint();
    let cache = cache.filter(|_| fingerprint.is_some());
    let mut cells = Vec::new();
    for (value, cfg) in grid.values.iter().zip(&configs) {
        let key = cache_key(cfg, fingerprint.as_deref().unwrap_or(""))?;
        let t0 = Instant::now();
        log::info!("ablation {}={value}", grid.axis);
        let scored = train_cached(cfg, source, cache).and_then(|(ckpt, cached)| {
            let ecfg = EvalConfig { extract: cfg.extract_config(), max_records: grid.eval_records, no_enrollment: false };
            Ok((evaluate(&ckpt.model, source, grid.eval_split, &ecfg)?, cached))
        });
        let wall_clock_s = t0.elapsed().as_secs_f64();
        let cell = match scored {
            Ok((report, cached)) => AblationCell {
                value: value.clone(),
                mean_si_sdri: Some(report.mean_si_sdri),
                failure_rate: Some(report.failure_rate),
                records: report.rows.len(),
                wall_clock_s,
                cached,
                cache_key: key,
                error: None,
                report: Some(report),
            },
            Err(e @ Error::Divergence(_)) => AblationCell {
                value: value.clone(),
                mean_si_sdri: None,
                failure_rate: None,
                records: 0,
                wall_clock_s,
                cached: false,
                cache_key: key,
                error: Some(e.to_string()),
                report: None,
            },
            Err(e) => return Err(e),
        };
        cells.push(cell);
    }
    cells.sort_by(|a, b| grid.axis.order(&a.value, &b.value));
    Ok(AblationTable { axis: grid.axis, cells })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_names_parse() {
        assert_eq!("enroll_len".parse::<AblationAxis>().unwrap(), AblationAxis::EnrollLenS);
        assert_eq!("glue_value".parse::<AblationAxis>().unwrap(), AblationAxis::GlueValue);
        assert!("depth".parse::<AblationAxis>().is_err());
    }

    #[test]
    fn cells_share_other_fields() {
        let base = TrainConfig::default();
        let g = AblationGrid::new(AblationAxis::GlueValue, ["absent", "0.0", "5.0"]);
        let cfgs = g.cell_configs(&base).unwrap();
        assert_eq!(cfgs[0].glue, GlueSpec::none());
        assert_eq!(cfgs[2].glue, GlueSpec { length_ms: 32.0, value: 5.0 });
        for c in &cfgs {
            assert_eq!(TrainConfig { glue: base.glue, ..c.clone() }, base);
        }
        assert!(AblationGrid::new(AblationAxis::EnrollLenS, ["1.0", "1.0"]).cell_configs(&base).is_err());
        assert!(AblationGrid::new(AblationAxis::EnrollLenS, ["x"]).cell_configs(&base).is_err());
        assert!(AblationGrid::new(AblationAxis::SadEnabled, Vec::<String>::new()).cell_configs(&base).is_err());
    }

    #[test]
    fn ordering_follows_axis_values() {
        let ax = AblationAxis::GlueValue;
        let mut v = vec!["5.0", "absent", "0.0"];
        v.sort_by(|a, b| ax.order(a, b));
        assert_eq!(v, ["absent", "0.0", "5.0"]);
        let ax = AblationAxis::EnrollLenS;
        let mut v = vec!["2.0", "0.25", "1.0"];
        v.sort_by(|a, b| ax.order(a, b));
        assert_eq!(v, ["0.25", "1.0", "2.0"]);
    }

    #[test]
    fn cache_key_depends_on_config_and_data() {
        let a = TrainConfig::default();
        let b = TrainConfig { seed: 1, ..a.clone() };
        assert_eq!(cache_key(&a, "x").unwrap(), cache_key(&a, "x").unwrap());
        assert_ne!(cache_key(&a, "x").unwrap(), cache_key(&b, "x").unwrap());
        assert_ne!(cache_key(&a, "x").unwrap(), cache_key(&a, "y").unwrap());
        assert_eq!(cache_key(&a, "x").unwrap().len(), 64);
    }
}

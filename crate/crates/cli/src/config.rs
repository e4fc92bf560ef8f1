//! Run configuration: TOML file, `key=value` overrides and the
//! reproducibility record written beside every output.

use std::fs;
use std::path::Path;

use lext::synthgen::{CorpusConfig, Split};
use lext::train::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub split: Split,
    pub max_records: Option<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { split: Split::Test, max_records: None }
    }
}

/// Everything a command can be configured with. `seed` drives both the
/// corpus generator and training.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
}

impl RunConfig {
    /// Load `path` (TOML) or start from defaults, then apply overrides.
    /// Returns the config and the file text, if any.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<(Self, Option<String>), CliError> {
        let (mut cfg, text) = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::config(format!("{}: {e}", p.display())))?;
                let cfg: RunConfig = toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", p.display())))?;
                (cfg, Some(text))
            }
            None => (RunConfig::default(), None),
        };
        for o in overrides {
            cfg = cfg.with_override(o)?;
        }
        Ok((cfg, text))
    }

    /// Apply one `dotted.key=value` override. The key must already exist;
    /// the value is read as a TOML literal, or as a bare string.
    pub fn with_override(&self, spec: &str) -> Result<Self, CliError> {
        let (key, raw) = spec.split_once('=').ok_or_else(|| CliError::usage(format!("override {spec:?} is not key=value")))?;
        let mut root = serde_json::to_value(self).map_err(|e| CliError::config(e.to_string()))?;
        let mut node = &mut root;
        for part in key.trim().split('.') {
            node = node
                .as_object_mut()
                .and_then(|m| m.get_mut(part))
                .ok_or_else(|| CliError::config(format!("unknown config key {key:?}")))?;
        }
        *node = parse_literal(raw.trim());
        serde_json::from_value(root).map_err(|e| CliError::config(format!("override {spec:?}: {e}")))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.corpus.validate()?;
        self.train.validate()?;
        Ok(())
    }
}

fn parse_literal(raw: &str) -> Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => serde_json::to_value(t.remove("v")).unwrap_or(Value::Null),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// `run.json`: enough to repeat the command.
#[derive(Serialize)]
pub struct RunRecord<'a> {
    pub command: &'a str,
    pub argv: Vec<String>,
    pub seed: u64,
    pub version: &'static str,
    pub config: &'a RunConfig,
    pub config_text: Option<&'a str>,
    pub details: Value,
}

pub const RUN_RECORD_FILE: &str = "run.json";

impl RunRecord<'_> {
    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(RUN_RECORD_FILE), serde_json::to_vec_pretty(self).map_err(|e| CliError::config(e.to_string()))?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_require_existing_keys() {
        let c = RunConfig::default();
        let c2 = c.with_override("train.enroll_len_s=0.25").unwrap();
        assert_eq!(c2.train.enroll_len_s, 0.25);
        let c3 = c.with_override("train.max_steps=10").unwrap();
        assert_eq!(c3.train.max_steps, Some(10));
        let c4 = c.with_override("train.strategy=split").unwrap();
        assert_eq!(c4.train.strategy, lext::prompt::PromptStrategy::Split);
        let c5 = c.with_override("corpus.utterance_s=[1.0, 2.0]").unwrap();
        assert_eq!(c5.corpus.utterance_s, (1.0, 2.0));
        assert!(c.with_override("train.nonsense=1").is_err());
        assert!(c.with_override("train.enroll_len_s").is_err());
        assert!(c.with_override("train.batch_size=many").is_err());
    }

    #[test]
    fn toml_roundtrip() {
        let c = RunConfig::default().with_override("train.max_steps=5").unwrap();
        let text = toml::to_string(&c).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, c);
        assert!(toml::from_str::<RunConfig>("bogus = 1").is_err());
    }
}

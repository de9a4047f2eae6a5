//! `key = value` run configuration: model settings plus training settings.

use std::path::Path;

use fullglow::model::config::{format_f64, parse_kv, parse_value, MODEL_KEYS};
use fullglow::model::ModelConfig;
use fullglow::train::TrainConfig;
use fullglow::{Error, Result};

pub const TRAIN_KEYS: [&str; 8] =
    ["lr", "batch_size", "iterations", "checkpoint_interval", "checkpointing", "seed", "linear_decay", "init_batch"];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Applies one setting; unknown keys are configuration errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if self.model.set(key, value)? {
            return Ok(());
        }
        let t = &mut self.train;
        match key {
            "lr" => t.learning_rate = parse_value(key, value)?,
            "batch_size" => t.batch_size = parse_value(key, value)?,
            "iterations" => t.iterations = parse_value(key, value)?,
            "checkpoint_interval" => t.checkpoint_interval = parse_value(key, value)?,
            "checkpointing" => t.checkpointing = parse_value(key, value)?,
            "seed" => t.seed = parse_value(key, value)?,
            "linear_decay" => t.linear_decay = parse_value(key, value)?,
            "init_batch" => t.init_batch = parse_value(key, value)?,
            _ => {
                return Err(Error::config(format!(
                    "unknown key {key:?}; known keys: {}, {}",
                    MODEL_KEYS.join(", "),
                    TRAIN_KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Parses a whole file, collecting every bad line before failing.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let problems: Vec<String> = parse_kv(text)?
            .into_iter()
            .filter_map(|(k, v)| cfg.set(&k, &v).err().map(|e| e.to_string()))
            .collect();
        if problems.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::config(problems.join("; ")))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| e.at(&path.display().to_string()))
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::config(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Validates both halves, reporting every offending key.
    pub fn validate(&self) -> Result<()> {
        let problems: Vec<String> = [self.model.validate(), self.train.validate()]
            .into_iter()
            .filter_map(|r| r.err())
            .map(|e| match e {
                Error::Config(m) => m,
                other => other.to_string(),
            })
            .collect();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::config(problems.join("; ")))
        }
    }

    pub fn to_text(&self) -> String {
        let t = &self.train;
        let mut out = self.model.to_text();
        for (k, v) in [
            ("lr", format_f64(t.learning_rate)),
            ("batch_size", t.batch_size.to_string()),
            ("iterations", t.iterations.to_string()),
            ("checkpoint_interval", t.checkpoint_interval.to_string()),
            ("checkpointing", t.checkpointing.to_string()),
            ("seed", t.seed.to_string()),
            ("linear_decay", t.linear_decay.to_string()),
            ("init_batch", t.init_batch.to_string()),
        ] {
            out.push_str(&format!("{k}={v}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.apply_overrides(&["lr=0.0003".into(), "conditioning_mode=unconditional".into(), "seed=9".into()]).unwrap();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::parse("n_blocks=2\nlearning_rate=0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
    }

    #[test]
    fn validation_lists_every_offending_key() {
        let cfg = RunConfig::parse("image_size=20\nlr=-1\n").unwrap();
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("image_size") && msg.contains("lr"), "{msg}");
    }
}

//! Human-editable run configuration: UTF-8 `key = value` lines with `#`
//! comments. Unknown keys are rejected by name; every omitted key keeps
//! its documented default.

use std::path::PathBuf;

use crate::autosize::AutosizeScope;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::prox::RegKind;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { model: ModelConfig::default(), train: TrainConfig::default(), data_dir: None }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| Error::Config(format!("key `{key}`: cannot parse value `{value}`")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut config = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got `{raw}`", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            config.set(key, value)?;
        }
        config.model.validate()?;
        config.train.validate()?;
        Ok(config)
    }

    pub fn load(path: &std::path::Path) -> Result<RunConfig> {
        RunConfig::parse(&std::fs::read_to_string(path)?)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            // model
            "num_layers" => self.model.num_layers = parse_num(key, value)?,
            "d_model" => self.model.d_model = parse_num(key, value)?,
            "num_heads" => self.model.num_heads = parse_num(key, value)?,
            "d_ffn" => self.model.d_ffn = parse_num(key, value)?,
            "vocab_size" => self.model.vocab_size = parse_num(key, value)?,
            "max_positions" => self.model.max_positions = parse_num(key, value)?,
            "dropout" => self.model.dropout = parse_num(key, value)?,
            "label_smoothing" => {
                self.model.label_smoothing = parse_num(key, value)?;
                self.train.label_smoothing = self.model.label_smoothing;
            }
            // trainer
            "learning_rate" => self.train.learning_rate = parse_num(key, value)?,
            "adam_beta1" => self.train.adam_beta1 = parse_num(key, value)?,
            "adam_beta2" => self.train.adam_beta2 = parse_num(key, value)?,
            "adam_eps" => self.train.adam_eps = parse_num(key, value)?,
            "clip_norm" => self.train.clip_norm = parse_num(key, value)?,
            "lambda" => self.train.lambda = parse_num(key, value)?,
            "regularizer" => {
                self.train.reg_kind = match value {
                    "l21" => RegKind::L21,
                    "linf1" => RegKind::LInf1,
                    other => {
                        return Err(Error::Config(format!(
                            "key `regularizer`: expected l21 or linf1, got `{other}`"
                        )))
                    }
                }
            }
            "scope" => self.train.scope = AutosizeScope::parse(value)?,
            "batch_tokens" => self.train.batch_tokens = parse_num(key, value)?,
            "lr_decay" => self.train.lr_decay = parse_num(key, value)?,
            "lr_patience" => self.train.lr_patience = parse_num(key, value)?,
            "lr_floor" => self.train.lr_floor = parse_num(key, value)?,
            "max_epochs" => self.train.max_epochs = parse_num(key, value)?,
            "seed" => self.train.seed = parse_num(key, value)?,
            // data
            "data_dir" => self.data_dir = Some(PathBuf::from(value)),
            other => return Err(Error::UnknownConfigKey { key: other.to_string() }),
        }
        Ok(())
    }

    /// The documented default configuration, suitable as a starting file.
    pub fn default_file() -> String {
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        format!(
            "# model architecture\n\
             num_layers = {}\n\
             d_model = {}\n\
             num_heads = {}\n\
             d_ffn = {}\n\
             vocab_size = {}\n\
             max_positions = {}\n\
             dropout = {}\n\
             label_smoothing = {}\n\
             \n\
             # optimization\n\
             learning_rate = {:e}\n\
             adam_beta1 = {}\n\
             adam_beta2 = {}\n\
             adam_eps = {:e}\n\
             clip_norm = {}\n\
             batch_tokens = {}\n\
             lr_decay = {}\n\
             lr_patience = {}\n\
             lr_floor = {:e}\n\
             max_epochs = {}\n\
             seed = {}\n\
             \n\
             # auto-sizing: one lambda shared by every regularized matrix\n\
             lambda = {}\n\
             regularizer = {}\n\
             scope = {}\n\
             \n\
             # data directory holding train/valid/test.src|.tgt and vocab.txt\n\
             # data_dir = ./data\n",
            m.num_layers,
            m.d_model,
            m.num_heads,
            m.d_ffn,
            m.vocab_size,
            m.max_positions,
            m.dropout,
            m.label_smoothing,
            t.learning_rate,
            t.adam_beta1,
            t.adam_beta2,
            t.adam_eps,
            t.clip_norm,
            t.batch_tokens,
            t.lr_decay,
            t.lr_patience,
            t.lr_floor,
            t.max_epochs,
            t.seed,
            t.lambda,
            t.reg_kind.name(),
            t.scope.name(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_the_default_file() {
        let text = RunConfig::default_file();
        let config = RunConfig::parse(&text).unwrap();
        let d = RunConfig::default();
        assert_eq!(config.model, d.model);
        assert_eq!(config.train.learning_rate, d.train.learning_rate);
        assert_eq!(config.train.clip_norm, d.train.clip_norm);
        assert_eq!(config.train.lr_floor, d.train.lr_floor);
        assert_eq!(config.train.batch_tokens, d.train.batch_tokens);
    }

    #[test]
    fn documented_defaults_hold() {
        let d = RunConfig::default();
        assert_eq!(d.model.d_model, 512);
        assert_eq!(d.model.num_heads, 8);
        assert_eq!(d.model.d_ffn, 2048);
        assert_eq!(d.model.num_layers, 6);
        assert_eq!(d.model.dropout, 0.1);
        assert_eq!(d.model.label_smoothing, 0.1);
        assert_eq!(d.train.learning_rate, 1e-4);
        assert_eq!(d.train.clip_norm, 0.1);
        assert_eq!(d.train.lr_floor, 1e-5);
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let err = RunConfig::parse("warmup_steps = 4000\n").unwrap_err();
        assert!(err.to_string().contains("warmup_steps"));
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let config = RunConfig::parse(
            "# a comment\n\
             \n\
             d_model = 64  # trailing comment\n\
             num_heads = 4\n\
             lambda = 0.25\n\
             regularizer = linf1\n\
             scope = encoder\n",
        )
        .unwrap();
        assert_eq!(config.model.d_model, 64);
        assert_eq!(config.train.lambda, 0.25);
        assert_eq!(config.train.reg_kind, RegKind::LInf1);
        assert_eq!(config.train.scope, AutosizeScope::Encoder);
    }

    #[test]
    fn bad_values_name_the_key() {
        let err = RunConfig::parse("d_model = twelve\n").unwrap_err();
        assert!(err.to_string().contains("d_model"));
        let err = RunConfig::parse("regularizer = l3\n").unwrap_err();
        assert!(err.to_string().contains("regularizer"));
        let err = RunConfig::parse("d_model\n").unwrap_err();
        assert!(err.to_string().contains("key = value"));
    }

    #[test]
    fn invalid_combinations_fail_validation() {
        // lr floor above the learning rate
        assert!(RunConfig::parse("learning_rate = 1e-6\n").is_err());
        // d_model not divisible by heads
        assert!(RunConfig::parse("d_model = 30\nnum_heads = 4\n").is_err());
    }
}

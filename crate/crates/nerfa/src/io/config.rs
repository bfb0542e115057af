//! Flat `key = value` run configuration.
//!
//! The key set is closed: exactly the fifteen keys below are recognized,
//! anything else is a hard error, and every key left out falls back to its
//! default. Blank lines and `#` comments are allowed. Strictness is
//! deliberate; a typoed key silently reverting to a default would make
//! experiment configs lie.

use crate::attention::AttentionMode;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Variant};
use crate::train::TrainConfig;

/// Everything a run needs: model shape, sampling counts, and schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub variant: Variant,
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub n_p: usize,
    pub n_r: usize,
    pub lr0: f64,
    pub decay: f64,
    pub iterations: u64,
    pub seed: u64,
    pub near: f64,
    pub far: f64,
    pub freq_pos: usize,
    pub freq_dir: usize,
    pub attention_mode: AttentionMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            variant: Variant::Nerfa,
            d: 64,
            heads: 8,
            layers: 1,
            n_p: 128,
            n_r: 64,
            lr0: 5e-4,
            decay: 5e-5,
            iterations: 2000,
            seed: 0,
            near: 2.0,
            far: 6.0,
            freq_pos: 10,
            freq_dir: 4,
            attention_mode: AttentionMode::Projected,
        }
    }
}

impl RunConfig {
    /// Parses config text. Unknown or repeated keys are errors naming the
    /// key; missing keys take defaults.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut config = RunConfig::default();
        let mut seen: Vec<&str> = Vec::new();
        for (line_no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected 'key = value', got '{raw}'",
                    line_no + 1
                )));
            };
            let key = key.trim();
            let value = value.trim();
            if seen.contains(&key) {
                return Err(Error::Config(format!("key '{key}' given twice")));
            }
            config.assign(key, value)?;
            seen.push(key);
        }
        Ok(config)
    }

    fn assign(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "variant" => self.variant = Variant::from_name(value)?,
            "d" => self.d = parse_num(key, value)?,
            "heads" => self.heads = parse_num(key, value)?,
            "layers" => self.layers = parse_num(key, value)?,
            "n_p" => self.n_p = parse_num(key, value)?,
            "n_r" => self.n_r = parse_num(key, value)?,
            "lr0" => self.lr0 = parse_num(key, value)?,
            "decay" => self.decay = parse_num(key, value)?,
            "iterations" => self.iterations = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "near" => self.near = parse_num(key, value)?,
            "far" => self.far = parse_num(key, value)?,
            "freq_pos" => self.freq_pos = parse_num(key, value)?,
            "freq_dir" => self.freq_dir = parse_num(key, value)?,
            "attention_mode" => self.attention_mode = AttentionMode::from_name(value)?,
            other => {
                return Err(Error::Config(format!(
                    "unknown config key '{other}' (known keys: {})",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Serializes every key in a fixed order; `parse` round-trips it.
    pub fn to_text(&self) -> String {
        format!(
            "variant = {}\n\
             d = {}\n\
             heads = {}\n\
             layers = {}\n\
             n_p = {}\n\
             n_r = {}\n\
             lr0 = {}\n\
             decay = {}\n\
             iterations = {}\n\
             seed = {}\n\
             near = {}\n\
             far = {}\n\
             freq_pos = {}\n\
             freq_dir = {}\n\
             attention_mode = {}\n",
            self.variant.name(),
            self.d,
            self.heads,
            self.layers,
            self.n_p,
            self.n_r,
            self.lr0,
            self.decay,
            self.iterations,
            self.seed,
            self.near,
            self.far,
            self.freq_pos,
            self.freq_dir,
            self.attention_mode.name(),
        )
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            variant: self.variant,
            d: self.d,
            heads: self.heads,
            layers: self.layers,
            freq_pos: self.freq_pos,
            freq_dir: self.freq_dir,
            attention_mode: self.attention_mode,
            seed: self.seed,
        }
    }

    pub fn train_config(&self, eval_every: u64) -> TrainConfig {
        TrainConfig {
            n_p: self.n_p,
            n_r: self.n_r,
            lr0: self.lr0,
            decay: self.decay,
            iterations: self.iterations,
            seed: self.seed,
            near: self.near,
            far: self.far,
            eval_every,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.train_config(1).validate()
    }
}

const KEYS: [&str; 15] = [
    "variant",
    "d",
    "heads",
    "layers",
    "n_p",
    "n_r",
    "lr0",
    "decay",
    "iterations",
    "seed",
    "near",
    "far",
    "freq_pos",
    "freq_dir",
    "attention_mode",
];

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for key '{key}'")))
}

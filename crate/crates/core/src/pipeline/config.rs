use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::OptimizerConfig;

/// Hyperparameters for both training stages.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub gamma: f64,
    pub num_concepts: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda_r: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            momentum: 0.9,
            weight_decay: 5e-4,
            gamma: 1.0,
            num_concepts: 6,
            epochs: 200,
            batch_size: 32,
            lambda_r: 1.0,
            seed: 0,
        }
    }
}

/// Config keys, in serialization order.
pub const KEYS: [&str; 9] = [
    "learning_rate",
    "momentum",
    "weight_decay",
    "gamma",
    "num_concepts",
    "epochs",
    "batch_size",
    "lambda_r",
    "seed",
];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

impl TrainConfig {
    /// Desk-scale reference run: 5 concepts, 50 epochs per stage.
    pub fn reference(seed: u64) -> Self {
        Self {
            learning_rate: 0.02,
            num_concepts: 5,
            epochs: 50,
            seed,
            ..Self::default()
        }
    }

    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer().validate().map_err(|e| Error::Config(e.to_string()))?;
        let fail = |msg: String| Err(Error::Config(msg));
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return fail(format!("gamma must be non-negative, got {}", self.gamma));
        }
        if !(self.lambda_r >= 0.0 && self.lambda_r.is_finite()) {
            return fail(format!("lambda_r must be non-negative, got {}", self.lambda_r));
        }
        if self.num_concepts < 2 {
            return fail(format!("num_concepts must be at least 2, got {}", self.num_concepts));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return fail("epochs and batch_size must be positive".into());
        }
        Ok(())
    }

    /// Sets one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "learning_rate" => self.learning_rate = parse_value(key, value)?,
            "momentum" => self.momentum = parse_value(key, value)?,
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            "gamma" => self.gamma = parse_value(key, value)?,
            "num_concepts" => self.num_concepts = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "lambda_r" => self.lambda_r = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and lines
    /// starting with `#` are ignored; unknown keys are rejected.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    /// Defaults overridden by `text`, then validated.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical text form; floats use shortest round-trip formatting.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let values = [
            self.learning_rate.to_string(),
            self.momentum.to_string(),
            self.weight_decay.to_string(),
            self.gamma.to_string(),
            self.num_concepts.to_string(),
            self.epochs.to_string(),
            self.batch_size.to_string(),
            self.lambda_r.to_string(),
            self.seed.to_string(),
        ];
        for (k, v) in KEYS.iter().zip(values) {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = TrainConfig::default();
        assert_eq!(c.learning_rate, 1e-4);
        assert_eq!(c.momentum, 0.9);
        assert_eq!(c.weight_decay, 5e-4);
        assert_eq!(c.gamma, 1.0);
        assert_eq!(c.num_concepts, 6);
        assert_eq!(c.epochs, 200);
        assert_eq!(c.batch_size, 32);
        assert_eq!(c.lambda_r, 1.0);
    }

    #[test]
    fn text_round_trip() {
        let mut c = TrainConfig::reference(42);
        c.gamma = 1e6;
        c.learning_rate = 0.1 + 0.2;
        assert_eq!(TrainConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = TrainConfig::parse("epochs = 3\nlearnig_rate = 0.1\n").unwrap_err();
        assert!(matches!(err, Error::Config(msg) if msg.contains("learnig_rate")));
    }

    #[test]
    fn comments_and_malformed_lines() {
        let c = TrainConfig::parse("# comment\n\nepochs = 7\n").unwrap();
        assert_eq!(c.epochs, 7);
        assert!(TrainConfig::parse("epochs 7").is_err());
        assert!(TrainConfig::parse("epochs = seven").is_err());
        assert!(TrainConfig::parse("num_concepts = 1").is_err());
    }
}

//! Flat `key = value` configuration with `#` comments.
//!
//! Precedence is applied by the caller: built-in defaults, then a config
//! file via [`Config::apply_text`], then individual overrides via
//! [`Config::set`].

use std::fmt::Write as _;

use crate::data::DataCounts;
use crate::error::{Error, Result};
use crate::model::{BridgeKind, ModelConfig};
use crate::optim::AdamWConfig;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageSettings {
    pub steps: usize,
    pub lr: f64,
    pub warmup_ratio: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Indexed by stage − 1.
    pub stages: [StageSettings; 3],
    pub batch_size: usize,
    pub grad_clip: f64,
    pub adamw: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        // Reference recipe: lr 1e-4 / 1e-4 / 2e-5 with warmup 0.1 / 0.1 / 0.05,
        // one epoch over 10M / 2M / 3M samples at batch 8192 / 1024 / 1024.
        // The toy model trains from scratch on far fewer samples, hence the
        // larger rates and step budgets below.
        Self {
            stages: [
                StageSettings {
                    steps: 500,
                    lr: 2e-3,
                    warmup_ratio: 0.1,
                },
                StageSettings {
                    steps: 500,
                    lr: 2e-3,
                    warmup_ratio: 0.1,
                },
                StageSettings {
                    steps: 1000,
                    lr: 1e-3,
                    warmup_ratio: 0.05,
                },
            ],
            batch_size: 32,
            grad_clip: 1.0,
            adamw: AdamWConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataCounts,
    pub seed: u64,
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

impl Config {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Applies every `key = value` line; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        if let Some(rest) = key.strip_prefix("train.stage") {
            let (idx, field) = rest
                .split_once('.')
                .ok_or_else(|| Error::Config(format!("unknown key `{key}`")))?;
            let idx: usize = parse(key, idx)?;
            if !(1..=3).contains(&idx) {
                return Err(Error::Config(format!("unknown stage in `{key}`")));
            }
            let s = &mut self.train.stages[idx - 1];
            match field {
                "steps" => s.steps = parse(key, value)?,
                "lr" => s.lr = parse(key, value)?,
                "warmup" => s.warmup_ratio = parse(key, value)?,
                _ => return Err(Error::Config(format!("unknown key `{key}`"))),
            }
            return Ok(());
        }
        match key {
            "seed" => self.seed = parse(key, value)?,
            "model.arch" => m.bridge = value.parse()?,
            "model.image_size" => {
                m.image_width = parse(key, value)?;
                m.image_height = m.image_width;
            }
            "model.channels" => m.channels = parse(key, value)?,
            "model.patch" => m.patch = parse(key, value)?,
            "model.enc_width" => m.enc_width = parse(key, value)?,
            "model.enc_layers" => m.enc_layers = parse(key, value)?,
            "model.enc_heads" => m.enc_heads = parse(key, value)?,
            "model.visual_vocab" => m.visual_vocab = parse(key, value)?,
            "model.llm_width" => m.llm_width = parse(key, value)?,
            "model.llm_layers" => m.llm_layers = parse(key, value)?,
            "model.llm_heads" => m.llm_heads = parse(key, value)?,
            "model.text_vocab" => m.text_vocab = parse(key, value)?,
            "model.max_seq" => m.max_seq = parse(key, value)?,
            "model.mlp_ratio" => m.mlp_ratio = parse(key, value)?,
            "model.connector_bias" => m.connector_bias = parse(key, value)?,
            "model.init_std" => m.init_std = parse(key, value)?,
            "train.batch_size" => self.train.batch_size = parse(key, value)?,
            "train.grad_clip" => self.train.grad_clip = parse(key, value)?,
            "train.weight_decay" => self.train.adamw.weight_decay = parse(key, value)?,
            "train.beta1" => self.train.adamw.beta1 = parse(key, value)?,
            "train.beta2" => self.train.adamw.beta2 = parse(key, value)?,
            "train.eps" => self.train.adamw.eps = parse(key, value)?,
            "data.captions" => self.data.captions = parse(key, value)?,
            "data.descriptions" => self.data.descriptions = parse(key, value)?,
            "data.instructions" => self.data.instructions = parse(key, value)?,
            "data.heldout" => self.data.heldout = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Model keys only, in a fixed order; embedded in checkpoints.
    pub fn model_text(model: &ModelConfig) -> String {
        let mut s = String::new();
        let m = model;
        let bridge = match m.bridge {
            BridgeKind::Ovis => "ovis",
            BridgeKind::Connector => "connector",
        };
        // Writing to a String cannot fail.
        let _ = writeln!(s, "model.arch = {bridge}");
        let _ = writeln!(s, "model.image_size = {}", m.image_width);
        let _ = writeln!(s, "model.channels = {}", m.channels);
        let _ = writeln!(s, "model.patch = {}", m.patch);
        let _ = writeln!(s, "model.enc_width = {}", m.enc_width);
        let _ = writeln!(s, "model.enc_layers = {}", m.enc_layers);
        let _ = writeln!(s, "model.enc_heads = {}", m.enc_heads);
        let _ = writeln!(s, "model.visual_vocab = {}", m.visual_vocab);
        let _ = writeln!(s, "model.llm_width = {}", m.llm_width);
        let _ = writeln!(s, "model.llm_layers = {}", m.llm_layers);
        let _ = writeln!(s, "model.llm_heads = {}", m.llm_heads);
        let _ = writeln!(s, "model.text_vocab = {}", m.text_vocab);
        let _ = writeln!(s, "model.max_seq = {}", m.max_seq);
        let _ = writeln!(s, "model.mlp_ratio = {}", m.mlp_ratio);
        let _ = writeln!(s, "model.connector_bias = {}", m.connector_bias);
        let _ = writeln!(s, "model.init_std = {:?}", m.init_std);
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("seed = {}\n", self.seed);
        s.push_str(&Self::model_text(&self.model));
        for (i, st) in self.train.stages.iter().enumerate() {
            let _ = writeln!(s, "train.stage{}.steps = {}", i + 1, st.steps);
            let _ = writeln!(s, "train.stage{}.lr = {:?}", i + 1, st.lr);
            let _ = writeln!(s, "train.stage{}.warmup = {:?}", i + 1, st.warmup_ratio);
        }
        let t = &self.train;
        let _ = writeln!(s, "train.batch_size = {}", t.batch_size);
        let _ = writeln!(s, "train.grad_clip = {:?}", t.grad_clip);
        let _ = writeln!(s, "train.weight_decay = {:?}", t.adamw.weight_decay);
        let _ = writeln!(s, "train.beta1 = {:?}", t.adamw.beta1);
        let _ = writeln!(s, "train.beta2 = {:?}", t.adamw.beta2);
        let _ = writeln!(s, "train.eps = {:?}", t.adamw.eps);
        let d = &self.data;
        let _ = writeln!(s, "data.captions = {}", d.captions);
        let _ = writeln!(s, "data.descriptions = {}", d.descriptions);
        let _ = writeln!(s, "data.instructions = {}", d.instructions);
        let _ = writeln!(s, "data.heldout = {}", d.heldout);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = Config::default();
        cfg.seed = 42;
        cfg.model.bridge = BridgeKind::Connector;
        cfg.train.stages[2].lr = 3.5e-4;
        cfg.data.heldout = 9;
        assert_eq!(Config::from_text(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn comments_and_errors() {
        let cfg = Config::from_text("# header\n\nseed = 3 # trailing\ntrain.stage2.steps=7\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.train.stages[1].steps, 7);
        assert!(Config::from_text("nonsense").is_err());
        assert!(Config::from_text("model.unknown = 1").is_err());
        assert!(Config::from_text("train.stage4.lr = 1").is_err());
        assert!(Config::from_text("seed = x").is_err());
    }

    #[test]
    fn defaults_match_reference_hyperparameters() {
        let t = TrainConfig::default();
        assert_eq!(t.grad_clip, 1.0);
        assert_eq!(t.adamw.weight_decay, 0.0);
        assert_eq!(
            t.stages.map(|s| s.steps),
            [500, 500, 1000]
        );
        assert_eq!(t.stages.map(|s| s.warmup_ratio), [0.1, 0.1, 0.05]);
        assert_eq!(t.batch_size, 32);
    }
}

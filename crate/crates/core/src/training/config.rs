//! Training configuration and its flat `key = value` text format.

use crate::error::{Error, Result};
use crate::losses::{KlEstimator, LossWeights};
use crate::networks::{Activation, MixtureLogitMode, NetSpec};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub k: usize,
    pub latent_dim: usize,
    pub patch_size: usize,
    pub channel_widths: Vec<usize>,
    pub activation: Activation,
    pub mixture_logits: MixtureLogitMode,
    pub patches_per_image: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate_gen: f64,
    pub learning_rate_disc: f64,
    pub temperature_start: f64,
    pub temperature_end: f64,
    pub kl_estimator: KlEstimator,
    pub kl_samples: usize,
    /// Global-norm gradient clip applied per phase (0 disables).
    pub max_grad_norm: f64,
    pub seed: u64,
    pub checkpoint_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            weights: LossWeights::default(),
            k: 25,
            latent_dim: 64,
            patch_size: 32,
            channel_widths: vec![16, 32, 64],
            activation: Activation::LeakyRelu,
            mixture_logits: MixtureLogitMode::Input,
            patches_per_image: 8,
            batch_size: 8,
            steps: 2000,
            learning_rate_gen: 1e-4,
            learning_rate_disc: 4e-4,
            temperature_start: 1.0,
            temperature_end: 0.3,
            kl_estimator: KlEstimator::Mc,
            kl_samples: 1,
            max_grad_norm: 10.0,
            seed: 0,
            checkpoint_interval: 500,
        }
    }
}

/// Canonical key order for the text format (also the checkpoint embedding).
const KEYS: &[&str] = &[
    "lambda0",
    "lambda1",
    "lambda2",
    "lambda3",
    "lambda4",
    "k",
    "latent_dim",
    "patch_size",
    "channel_widths",
    "activation",
    "mixture_logits",
    "patches_per_image",
    "batch_size",
    "steps",
    "learning_rate_gen",
    "learning_rate_disc",
    "temperature_start",
    "temperature_end",
    "kl_estimator",
    "kl_samples",
    "max_grad_norm",
    "seed",
    "checkpoint_interval",
];

impl TrainConfig {
    pub fn to_net_spec(&self) -> NetSpec {
        NetSpec {
            patch_size: self.patch_size,
            latent_dim: self.latent_dim,
            num_components: self.k,
            channel_widths: self.channel_widths.clone(),
            activation: self.activation,
            logit_mode: self.mixture_logits,
        }
    }

    /// Collects every invalid field instead of stopping at the first.
    pub fn validate(&self) -> Result<()> {
        let mut bad: Vec<String> = Vec::new();
        if let Err(e) = self.weights.validate() {
            bad.push(e.to_string());
        }
        if let Err(e) = self.to_net_spec().validate() {
            bad.push(e.to_string());
        }
        for (name, v) in [
            ("patches_per_image", self.patches_per_image),
            ("batch_size", self.batch_size),
            ("steps", self.steps),
            ("kl_samples", self.kl_samples),
            ("checkpoint_interval", self.checkpoint_interval),
        ] {
            if v == 0 {
                bad.push(format!("{name} must be >= 1"));
            }
        }
        // zero rates are admitted so a step can be exercised without updates
        for (name, v) in [
            ("learning_rate_gen", self.learning_rate_gen),
            ("learning_rate_disc", self.learning_rate_disc),
        ] {
            if !v.is_finite() || !(0.0..1.0).contains(&v) {
                bad.push(format!("{name} must be in [0, 1), got {v}"));
            }
        }
        for (name, v) in [
            ("temperature_start", self.temperature_start),
            ("temperature_end", self.temperature_end),
        ] {
            if !v.is_finite() || v <= 0.0 {
                bad.push(format!("{name} must be positive, got {v}"));
            }
        }
        if !self.max_grad_norm.is_finite() || self.max_grad_norm < 0.0 {
            bad.push(format!(
                "max_grad_norm must be finite and >= 0, got {}",
                self.max_grad_norm
            ));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::config(bad.join("; ")))
        }
    }

    /// Linear temperature schedule from start to end over the configured steps.
    pub fn temperature_at(&self, step: u64) -> f64 {
        if self.steps <= 1 {
            return self.temperature_end;
        }
        let frac = (step as f64 / (self.steps - 1) as f64).clamp(0.0, 1.0);
        self.temperature_start * (1.0 - frac) + self.temperature_end * frac
    }

    fn get(&self, key: &str) -> String {
        match key {
            "lambda0" => self.weights.lambda0.to_string(),
            "lambda1" => self.weights.lambda1.to_string(),
            "lambda2" => self.weights.lambda2.to_string(),
            "lambda3" => self.weights.lambda3.to_string(),
            "lambda4" => self.weights.lambda4.to_string(),
            "k" => self.k.to_string(),
            "latent_dim" => self.latent_dim.to_string(),
            "patch_size" => self.patch_size.to_string(),
            "channel_widths" => self
                .channel_widths
                .iter()
                .map(|w| w.to_string())
                .collect::<Vec<_>>()
                .join(","),
            "activation" => self.activation.name().to_string(),
            "mixture_logits" => self.mixture_logits.name().to_string(),
            "patches_per_image" => self.patches_per_image.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "steps" => self.steps.to_string(),
            "learning_rate_gen" => self.learning_rate_gen.to_string(),
            "learning_rate_disc" => self.learning_rate_disc.to_string(),
            "temperature_start" => self.temperature_start.to_string(),
            "temperature_end" => self.temperature_end.to_string(),
            "kl_estimator" => self.kl_estimator.name().to_string(),
            "kl_samples" => self.kl_samples.to_string(),
            "max_grad_norm" => self.max_grad_norm.to_string(),
            "seed" => self.seed.to_string(),
            "checkpoint_interval" => self.checkpoint_interval.to_string(),
            _ => unreachable!("unknown key {key}"),
        }
    }

    /// Set one field from its canonical text key (the config-file key set;
    /// also used for CLI flag overrides).
    pub fn set_key(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse::<T>()
                .map_err(|_| Error::config(format!("{key}: cannot parse '{value}'")))
        }
        match key {
            "lambda0" => self.weights.lambda0 = num(key, value)?,
            "lambda1" => self.weights.lambda1 = num(key, value)?,
            "lambda2" => self.weights.lambda2 = num(key, value)?,
            "lambda3" => self.weights.lambda3 = num(key, value)?,
            "lambda4" => self.weights.lambda4 = num(key, value)?,
            "k" => self.k = num(key, value)?,
            "latent_dim" => self.latent_dim = num(key, value)?,
            "patch_size" => self.patch_size = num(key, value)?,
            "channel_widths" => {
                let widths: Result<Vec<usize>> = value
                    .split(',')
                    .map(|s| num::<usize>(key, s.trim()))
                    .collect();
                self.channel_widths = widths?;
            }
            "activation" => self.activation = Activation::parse(value)?,
            "mixture_logits" => self.mixture_logits = MixtureLogitMode::parse(value)?,
            "patches_per_image" => self.patches_per_image = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "steps" => self.steps = num(key, value)?,
            "learning_rate_gen" => self.learning_rate_gen = num(key, value)?,
            "learning_rate_disc" => self.learning_rate_disc = num(key, value)?,
            "temperature_start" => self.temperature_start = num(key, value)?,
            "temperature_end" => self.temperature_end = num(key, value)?,
            "kl_estimator" => self.kl_estimator = KlEstimator::parse(value)?,
            "kl_samples" => self.kl_samples = num(key, value)?,
            "max_grad_norm" => self.max_grad_norm = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "checkpoint_interval" => self.checkpoint_interval = num(key, value)?,
            other => return Err(Error::config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Serialize as canonical `key = value` lines.
    pub fn to_config_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            out.push_str(key);
            out.push_str(" = ");
            out.push_str(&self.get(key));
            out.push('\n');
        }
        out
    }

    /// Parse `key = value` lines (UTF-8, `#` comments, blank lines allowed).
    /// Unlisted keys keep their defaults. Every problem is reported at once.
    pub fn from_config_text(text: &str) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        let mut bad: Vec<String> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bad.push(format!("line {}: expected 'key = value'", lineno + 1));
                continue;
            };
            if let Err(e) = cfg.set_key(key.trim(), value.trim()) {
                bad.push(e.to_string());
            }
        }
        if !bad.is_empty() {
            return Err(Error::config(bad.join("; ")));
        }
        if let Err(e) = cfg.validate() {
            return Err(e);
        }
        Ok(cfg)
    }

    /// Names of fields that differ from `other` (for resume compatibility
    /// diagnostics).
    pub fn diff(&self, other: &TrainConfig) -> Vec<&'static str> {
        KEYS.iter()
            .filter(|k| self.get(k) != other.get(k))
            .copied()
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip_preserves_config() {
        let mut cfg = TrainConfig::default();
        cfg.k = 8;
        cfg.channel_widths = vec![8, 16];
        cfg.kl_estimator = KlEstimator::Matched;
        cfg.learning_rate_gen = 0.0;
        let text = cfg.to_config_text();
        let back = TrainConfig::from_config_text(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn comments_and_partial_files_parse() {
        let cfg = TrainConfig::from_config_text("# tiny run\nk = 3\nsteps = 7 # short\n").unwrap();
        assert_eq!(cfg.k, 3);
        assert_eq!(cfg.steps, 7);
        assert_eq!(cfg.patch_size, TrainConfig::default().patch_size);
    }

    #[test]
    fn every_invalid_field_is_reported() {
        let err = TrainConfig::from_config_text(
            "steps = 0\nlearning_rate_gen = 2\ntemperature_start = -1\n",
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("steps"), "{msg}");
        assert!(msg.contains("learning_rate_gen"), "{msg}");
        assert!(msg.contains("temperature_start"), "{msg}");
    }

    #[test]
    fn unknown_key_is_rejected() {
        assert!(TrainConfig::from_config_text("bogus = 3\n").is_err());
    }

    #[test]
    fn diff_names_changed_fields() {
        let a = TrainConfig::default();
        let mut b = a.clone();
        b.k = 7;
        b.seed = 9;
        assert_eq!(a.diff(&b), vec!["k", "seed"]);
        assert!(a.diff(&a).is_empty());
    }

    #[test]
    fn temperature_schedule_is_linear() {
        let mut cfg = TrainConfig::default();
        cfg.steps = 101;
        cfg.temperature_start = 1.0;
        cfg.temperature_end = 0.3;
        assert_eq!(cfg.temperature_at(0), 1.0);
        assert!((cfg.temperature_at(50) - 0.65).abs() < 1e-12);
        assert_eq!(cfg.temperature_at(100), 0.3);
        assert_eq!(cfg.temperature_at(500), 0.3);
    }
}

//! Flat `key = value` configuration: a config file plus `--set` overrides,
//! merged over stage defaults. Unknown keys are rejected and every
//! effective value is echoed, so a run's exact configuration is always in
//! its log header.

use ckan_sr::data::DegradeConfig;
use ckan_sr::models::GeneratorConfig;
use ckan_sr::train::{Stage, TrainConfig};
use std::collections::BTreeMap;
use std::path::Path;

use crate::CliError;

pub const ENV_SEED: &str = "CKAN_SR_SEED";

/// Every addressable key. Dotted prefixes group by module.
const KNOWN_KEYS: &[&str] = &[
    "seed",
    "epochs",
    "patches_per_epoch",
    "patch_size",
    "opt.lr_g",
    "opt.lr_d",
    "opt.beta1",
    "opt.beta2",
    "opt.eps",
    "weights.pixel",
    "weights.perceptual",
    "weights.adversarial",
    "early_stop.psnr_guard_delta",
    "gen.base_channels",
    "gen.num_residual_blocks",
    "gen.upscale_factor",
    "gen.ckan_blocks",
    "ckan.chunk_pixels",
    "data.blur_sigma",
    "data.noise_std",
];

#[derive(Debug, Default)]
pub struct Settings {
    map: BTreeMap<String, String>,
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

impl Settings {
    /// Parse `key = value` lines; `#` starts a comment, blank lines allowed.
    pub fn parse_text(text: &str) -> Result<Settings, CliError> {
        let mut s = Settings::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| usage(format!("config line {}: expected key = value", no + 1)))?;
            s.insert(k.trim(), v.trim())?;
        }
        Ok(s)
    }

    pub fn load(
        config: Option<&Path>,
        sets: &[String],
        seed_flag: Option<u64>,
    ) -> Result<Settings, CliError> {
        let mut s = match config {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Runtime(format!("read {}: {e}", p.display())))?;
                Settings::parse_text(&text)?
            }
            None => Settings::default(),
        };
        for item in sets {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| usage(format!("--set {item}: expected key=value")))?;
            s.insert(k.trim(), v.trim())?;
        }
        if let Some(seed) = seed_flag {
            s.insert("seed", &seed.to_string())?;
        }
        // the environment override wins over file and flags
        if let Ok(env_seed) = std::env::var(ENV_SEED) {
            let parsed: u64 = env_seed
                .parse()
                .map_err(|_| usage(format!("{ENV_SEED}={env_seed}: not an unsigned integer")))?;
            s.insert("seed", &parsed.to_string())?;
        }
        Ok(s)
    }

    fn insert(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        if !KNOWN_KEYS.contains(&key) {
            return Err(usage(format!(
                "unknown config key {key:?}; known keys: {}",
                KNOWN_KEYS.join(", ")
            )));
        }
        self.map.insert(key.to_string(), value.to_string());
        Ok(())
    }

    fn get_parsed<T: std::str::FromStr>(&self, key: &str, what: &str) -> Result<Option<T>, CliError> {
        match self.map.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse::<T>()
                .map(Some)
                .map_err(|_| usage(format!("{key} = {raw}: expected {what}"))),
        }
    }

    fn get_bool(&self, key: &str) -> Result<Option<bool>, CliError> {
        match self.map.get(key).map(String::as_str) {
            None => Ok(None),
            Some("true" | "1" | "yes") => Ok(Some(true)),
            Some("false" | "0" | "no") => Ok(Some(false)),
            Some(raw) => Err(usage(format!("{key} = {raw}: expected a boolean"))),
        }
    }

    /// Stage defaults overridden by whatever was set.
    pub fn train_config(&self, stage: Stage) -> Result<TrainConfig, CliError> {
        let mut cfg = match stage {
            Stage::Pretrain => TrainConfig::pretrain_default(),
            Stage::Adversarial => TrainConfig::adversarial_default(),
        };
        if let Some(v) = self.get_parsed::<u64>("seed", "an unsigned integer")? {
            cfg.seed = v;
        }
        if let Some(v) = self.get_parsed::<u64>("epochs", "an unsigned integer")? {
            cfg.epochs = v;
        }
        if let Some(v) = self.get_parsed::<u64>("patches_per_epoch", "an unsigned integer")? {
            cfg.patches_per_epoch = v;
        }
        if let Some(v) = self.get_parsed::<usize>("patch_size", "an unsigned integer")? {
            cfg.patch_size = v;
        }
        if let Some(v) = self.get_parsed::<f64>("opt.lr_g", "a number")? {
            cfg.lr_g = v;
        }
        if let Some(v) = self.get_parsed::<f64>("opt.lr_d", "a number")? {
            cfg.lr_d = v;
        }
        if let Some(v) = self.get_parsed::<f64>("opt.beta1", "a number")? {
            cfg.beta1 = v;
        }
        if let Some(v) = self.get_parsed::<f64>("opt.beta2", "a number")? {
            cfg.beta2 = v;
        }
        if let Some(v) = self.get_parsed::<f64>("opt.eps", "a number")? {
            cfg.eps_opt = v;
        }
        let mut w = cfg.weights;
        if let Some(v) = self.get_parsed::<f64>("weights.pixel", "a number")? {
            w.pixel = v;
        }
        if let Some(v) = self.get_parsed::<f64>("weights.perceptual", "a number")? {
            w.perceptual = v;
        }
        if let Some(v) = self.get_parsed::<f64>("weights.adversarial", "a number")? {
            w.adversarial = v;
        }
        cfg.weights = w;
        if let Some(v) = self.get_parsed::<f64>("early_stop.psnr_guard_delta", "a number")? {
            cfg.psnr_guard_delta = v;
        }
        cfg.chunk_pixels = self.get_parsed::<usize>("ckan.chunk_pixels", "an unsigned integer")?;
        cfg.generator = self.generator_config()?;
        Ok(cfg)
    }

    pub fn generator_config(&self) -> Result<GeneratorConfig, CliError> {
        let mut g = GeneratorConfig::default();
        if let Some(v) = self.get_parsed::<usize>("gen.base_channels", "an unsigned integer")? {
            g.base_channels = v;
        }
        if let Some(v) =
            self.get_parsed::<usize>("gen.num_residual_blocks", "an unsigned integer")?
        {
            g.num_residual_blocks = v;
        }
        if let Some(v) = self.get_parsed::<usize>("gen.upscale_factor", "an unsigned integer")? {
            g.upscale_factor = v;
        }
        if let Some(v) = self.get_bool("gen.ckan_blocks")? {
            g.ckan_blocks = v;
        }
        Ok(g)
    }

    /// Training degradation; scale always mirrors `gen.upscale_factor`.
    pub fn degrade_config(&self, scale: usize, seed: u64) -> Result<DegradeConfig, CliError> {
        Ok(DegradeConfig {
            scale,
            blur_sigma: self.get_parsed::<f64>("data.blur_sigma", "a number")?,
            noise_std: self.get_parsed::<f64>("data.noise_std", "a number")?,
            seed,
        })
    }

    /// One `key = value` line per known key with its effective value.
    pub fn echo_effective(&self, cfg: &TrainConfig, degrade: &DegradeConfig) -> Vec<String> {
        let w = cfg.weights;
        let fmt_opt = |v: Option<f64>| v.map_or("none".to_string(), |x| x.to_string());
        let chunk = cfg
            .chunk_pixels
            .map_or("default".to_string(), |c| c.to_string());
        vec![
            format!("seed = {}", cfg.seed),
            format!("epochs = {}", cfg.epochs),
            format!("patches_per_epoch = {}", cfg.patches_per_epoch),
            format!("patch_size = {}", cfg.patch_size),
            format!("opt.lr_g = {}", cfg.lr_g),
            format!("opt.lr_d = {}", cfg.lr_d),
            format!("opt.beta1 = {}", cfg.beta1),
            format!("opt.beta2 = {}", cfg.beta2),
            format!("opt.eps = {}", cfg.eps_opt),
            format!("weights.pixel = {}", w.pixel),
            format!("weights.perceptual = {}", w.perceptual),
            format!("weights.adversarial = {}", w.adversarial),
            format!("early_stop.psnr_guard_delta = {}", cfg.psnr_guard_delta),
            format!("gen.base_channels = {}", cfg.generator.base_channels),
            format!(
                "gen.num_residual_blocks = {}",
                cfg.generator.num_residual_blocks
            ),
            format!("gen.upscale_factor = {}", cfg.generator.upscale_factor),
            format!("gen.ckan_blocks = {}", cfg.generator.ckan_blocks),
            format!("ckan.chunk_pixels = {chunk}"),
            format!("data.blur_sigma = {}", fmt_opt(degrade.blur_sigma)),
            format!("data.noise_std = {}", fmt_opt(degrade.noise_std)),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_overrides() {
        let s = Settings::parse_text(
            "# header\nseed = 9\nepochs = 3 # trailing\n\nweights.pixel = 0.5\n",
        )
        .unwrap();
        let cfg = s.train_config(Stage::Pretrain).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.weights.pixel, 0.5);
        // untouched keys keep defaults
        assert_eq!(cfg.lr_g, 1e-4);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(matches!(
            Settings::parse_text("nope = 1\n"),
            Err(CliError::Usage(_))
        ));
        let s = Settings::parse_text("epochs = many\n").unwrap();
        assert!(matches!(
            s.train_config(Stage::Pretrain),
            Err(CliError::Usage(_))
        ));
        assert!(matches!(
            Settings::parse_text("seed 9\n"),
            Err(CliError::Usage(_))
        ));
    }

    #[test]
    fn echo_covers_every_known_key() {
        let s = Settings::default();
        let cfg = s.train_config(Stage::Pretrain).unwrap();
        let dg = s.degrade_config(4, cfg.seed).unwrap();
        let lines = s.echo_effective(&cfg, &dg);
        assert_eq!(lines.len(), KNOWN_KEYS.len());
        for key in KNOWN_KEYS {
            assert!(
                lines.iter().any(|l| l.starts_with(&format!("{key} = "))),
                "missing {key}"
            );
        }
    }
}

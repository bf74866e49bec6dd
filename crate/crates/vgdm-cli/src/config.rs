//! Flat `key=value` run-configuration files.
//!
//! `#` starts a comment (full line or trailing), blank lines are skipped.
//! Every key is checked against the declared schema: unknown keys are
//! rejected, duplicates are rejected, the required keys must be present, and
//! each value is type-checked. Errors name the offending key.

use std::collections::HashSet;
use std::path::Path;

use vgdm_core::losses::LossWeights;
use vgdm_core::training::TrainConfig;
use vgdm_core::DenoiserConfig;

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

/// Parsed run configuration with every schema key resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // Model.
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub window_size: usize,
    pub mlp_ratio: f64,
    // Schedule.
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    // Training.
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub ema_decay: f64,
    pub seed: u64,
    pub log_every: usize,
    pub lambda_bce: f64,
    pub lambda_dice: f64,
    pub lambda_boundary: f64,
    pub dice_smooth: f64,
    /// Z-score each channel over its nonzero support before training.
    pub normalize: bool,
    // Phantom generation.
    pub phantom_channels: usize,
    pub phantom_tumor_min: usize,
    pub phantom_tumor_max: usize,
    pub phantom_radius_min: f64,
    pub phantom_radius_max: f64,
    pub phantom_noise_sigma: f64,
    pub phantom_contrast: Vec<f64>,
}

const REQUIRED_KEYS: &[&str] = &["steps", "batch_size", "learning_rate", "timesteps"];

const KNOWN_KEYS: &[&str] = &[
    "patch_size",
    "embed_dim",
    "depth",
    "num_heads",
    "window_size",
    "mlp_ratio",
    "timesteps",
    "beta_start",
    "beta_end",
    "steps",
    "batch_size",
    "learning_rate",
    "ema_decay",
    "seed",
    "log_every",
    "lambda_bce",
    "lambda_dice",
    "lambda_boundary",
    "dice_smooth",
    "normalize",
    "phantom_channels",
    "phantom_tumor_min",
    "phantom_tumor_max",
    "phantom_radius_min",
    "phantom_radius_max",
    "phantom_noise_sigma",
    "phantom_contrast",
];

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            patch_size: 4,
            embed_dim: 64,
            depth: 4,
            num_heads: 4,
            window_size: 4,
            mlp_ratio: 4.0,
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            steps: 1000,
            batch_size: 4,
            learning_rate: 2e-4,
            ema_decay: 0.995,
            seed: 0,
            log_every: 50,
            lambda_bce: 1.0,
            lambda_dice: 1.0,
            lambda_boundary: 0.01,
            dice_smooth: 1.0,
            normalize: false,
            phantom_channels: 4,
            phantom_tumor_min: 1,
            phantom_tumor_max: 3,
            phantom_radius_min: 2.0,
            phantom_radius_max: 5.0,
            phantom_noise_sigma: 0.05,
            phantom_contrast: vec![1.8, -1.4, 1.6, 2.2],
        }
    }
}

impl RunConfig {
    pub fn parse_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
        Self::parse_str(&text)
    }

    pub fn parse_str(text: &str) -> Result<Self, ConfigError> {
        let mut config = RunConfig::default();
        let mut seen: HashSet<String> = HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                ConfigError(format!("line {}: '{raw}' is not key=value", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            if !KNOWN_KEYS.contains(&key) {
                return Err(ConfigError(format!("unknown key '{key}'")));
            }
            if !seen.insert(key.to_string()) {
                return Err(ConfigError(format!("duplicate key '{key}'")));
            }
            config.set(key, value)?;
        }
        for key in REQUIRED_KEYS {
            if !seen.contains(*key) {
                return Err(ConfigError(format!("missing required key '{key}'")));
            }
        }
        Ok(config)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str, ty: &str) -> Result<T, ConfigError> {
            value
                .parse()
                .map_err(|_| ConfigError(format!("key '{key}': '{value}' is not {ty}")))
        }
        fn parse_list(key: &str, value: &str) -> Result<Vec<f64>, ConfigError> {
            value
                .split(',')
                .map(|v| parse::<f64>(key, v.trim(), "a real number"))
                .collect()
        }
        match key {
            "patch_size" => self.patch_size = parse(key, value, "a positive integer")?,
            "embed_dim" => self.embed_dim = parse(key, value, "a positive integer")?,
            "depth" => self.depth = parse(key, value, "a positive integer")?,
            "num_heads" => self.num_heads = parse(key, value, "a positive integer")?,
            "window_size" => self.window_size = parse(key, value, "a positive integer")?,
            "mlp_ratio" => self.mlp_ratio = parse(key, value, "a real number")?,
            "timesteps" => self.timesteps = parse(key, value, "a positive integer")?,
            "beta_start" => self.beta_start = parse(key, value, "a real number")?,
            "beta_end" => self.beta_end = parse(key, value, "a real number")?,
            "steps" => self.steps = parse(key, value, "a positive integer")?,
            "batch_size" => self.batch_size = parse(key, value, "a positive integer")?,
            "learning_rate" => self.learning_rate = parse(key, value, "a real number")?,
            "ema_decay" => self.ema_decay = parse(key, value, "a real number")?,
            "seed" => self.seed = parse(key, value, "an unsigned integer")?,
            "log_every" => self.log_every = parse(key, value, "a positive integer")?,
            "lambda_bce" => self.lambda_bce = parse(key, value, "a real number")?,
            "lambda_dice" => self.lambda_dice = parse(key, value, "a real number")?,
            "lambda_boundary" => self.lambda_boundary = parse(key, value, "a real number")?,
            "dice_smooth" => self.dice_smooth = parse(key, value, "a real number")?,
            "normalize" => self.normalize = parse(key, value, "true or false")?,
            "phantom_channels" => self.phantom_channels = parse(key, value, "a positive integer")?,
            "phantom_tumor_min" => {
                self.phantom_tumor_min = parse(key, value, "a positive integer")?
            }
            "phantom_tumor_max" => {
                self.phantom_tumor_max = parse(key, value, "a positive integer")?
            }
            "phantom_radius_min" => self.phantom_radius_min = parse(key, value, "a real number")?,
            "phantom_radius_max" => self.phantom_radius_max = parse(key, value, "a real number")?,
            "phantom_noise_sigma" => self.phantom_noise_sigma = parse(key, value, "a real number")?,
            "phantom_contrast" => self.phantom_contrast = parse_list(key, value)?,
            other => return Err(ConfigError(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    pub fn denoiser_config(&self, image_size: usize, in_channels: usize) -> DenoiserConfig {
        DenoiserConfig {
            image_size,
            in_channels,
            patch_size: self.patch_size,
            embed_dim: self.embed_dim,
            depth: self.depth,
            num_heads: self.num_heads,
            window_size: self.window_size,
            mlp_ratio: self.mlp_ratio,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            ema_decay: self.ema_decay,
            loss_weights: LossWeights {
                lambda_bce: self.lambda_bce,
                lambda_dice: self.lambda_dice,
                lambda_boundary: self.lambda_boundary,
            },
            dice_smooth: self.dice_smooth,
            timesteps: self.timesteps,
            beta_start: self.beta_start,
            beta_end: self.beta_end,
            seed: self.seed,
            log_every: self.log_every,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "steps=10\nbatch_size=2\nlearning_rate=0.001\ntimesteps=50\n";

    #[test]
    fn minimal_config_parses_with_defaults() {
        let c = RunConfig::parse_str(MINIMAL).unwrap();
        assert_eq!(c.steps, 10);
        assert_eq!(c.embed_dim, 64);
        assert_eq!(c.lambda_boundary, 0.01);
    }

    #[test]
    fn comments_and_whitespace() {
        let text = "# full line comment\n steps = 10 # trailing\nbatch_size=2\nlearning_rate=1e-3\ntimesteps=50\n\n";
        let c = RunConfig::parse_str(text).unwrap();
        assert_eq!(c.steps, 10);
        assert_eq!(c.learning_rate, 1e-3);
    }

    #[test]
    fn unknown_missing_duplicate_and_badly_typed_keys() {
        let err = RunConfig::parse_str(&format!("{MINIMAL}bogus=1\n")).unwrap_err();
        assert!(err.0.contains("unknown key 'bogus'"), "{err}");

        let err = RunConfig::parse_str("steps=10\nbatch_size=2\nlearning_rate=1e-3\n").unwrap_err();
        assert!(err.0.contains("missing required key 'timesteps'"), "{err}");

        let err = RunConfig::parse_str(&format!("{MINIMAL}steps=11\n")).unwrap_err();
        assert!(err.0.contains("duplicate key 'steps'"), "{err}");

        let err =
            RunConfig::parse_str("steps=ten\nbatch_size=2\nlearning_rate=1e-3\ntimesteps=50\n")
                .unwrap_err();
        assert!(err.0.contains("key 'steps'"), "{err}");
    }

    #[test]
    fn contrast_list_parses() {
        let text = format!("{MINIMAL}phantom_contrast=1.0, -2.0, 0.5\n");
        let c = RunConfig::parse_str(&text).unwrap();
        assert_eq!(c.phantom_contrast, vec![1.0, -2.0, 0.5]);
    }
}

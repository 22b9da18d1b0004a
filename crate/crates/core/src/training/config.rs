use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Training hyper-parameters. Field names double as config-file keys.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Short side after resizing, before cropping.
    pub input_size: usize,
    pub crop: usize,
    pub batch: usize,
    pub total_iters: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub patch_size: usize,
    pub cluster_k: usize,
    pub num_patches: usize,
    pub lambda_c: f64,
    pub lambda_s: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            input_size: 512,
            crop: 256,
            batch: 4,
            total_iters: 50_000,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            patch_size: 8,
            cluster_k: 3,
            num_patches: 20,
            lambda_c: 30.0,
            lambda_s: 1.0,
            seed: 0,
            checkpoint_every: 5_000,
        }
    }
}

/// Every accepted config-file key, in file order.
pub const TRAIN_CONFIG_KEYS: [&str; 15] = [
    "input_size",
    "crop",
    "batch",
    "total_iters",
    "lr",
    "beta1",
    "beta2",
    "adam_eps",
    "patch_size",
    "cluster_k",
    "num_patches",
    "lambda_c",
    "lambda_s",
    "seed",
    "checkpoint_every",
];

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_size", self.input_size),
            ("crop", self.crop),
            ("batch", self.batch),
            ("patch_size", self.patch_size),
            ("cluster_k", self.cluster_k),
            ("num_patches", self.num_patches),
            ("checkpoint_every", self.checkpoint_every),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("`{k}` must be positive")));
        }
        let reals = [
            ("lr", self.lr),
            ("lambda_c", self.lambda_c),
            ("lambda_s", self.lambda_s),
            ("adam_eps", self.adam_eps),
        ];
        if let Some((k, _)) = reals.iter().find(|(_, v)| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!(
                "`{k}` must be finite and non-negative"
            )));
        }
        for (k, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("`{k}` must lie in [0, 1)")));
            }
        }
        if self.crop > self.input_size {
            return Err(Error::Config(format!(
                "crop {} is larger than input_size {}",
                self.crop, self.input_size
            )));
        }
        if self.cluster_k > self.num_patches {
            return Err(Error::Cardinality(format!(
                "cluster_k = {} exceeds num_patches = {}",
                self.cluster_k, self.num_patches
            )));
        }
        Ok(())
    }

    /// Sets one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "input_size" => self.input_size = parse(key, value)?,
            "crop" => self.crop = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "total_iters" => self.total_iters = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "adam_eps" => self.adam_eps = parse(key, value)?,
            "patch_size" => self.patch_size = parse(key, value)?,
            "cluster_k" => self.cluster_k = parse(key, value)?,
            "num_patches" => self.num_patches = parse(key, value)?,
            "lambda_c" => self.lambda_c = parse(key, value)?,
            "lambda_s" => self.lambda_s = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (key, value) in parse_key_values(text)? {
            self.set(&key, &value)?;
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_str(&text)
            .map_err(|e| e.context(format!("reading {}", path.display())))?;
        Ok(cfg)
    }

    /// Renders the config in the file format.
    pub fn to_key_values(&self) -> String {
        let values = [
            self.input_size.to_string(),
            self.crop.to_string(),
            self.batch.to_string(),
            self.total_iters.to_string(),
            self.lr.to_string(),
            self.beta1.to_string(),
            self.beta2.to_string(),
            self.adam_eps.to_string(),
            self.patch_size.to_string(),
            self.cluster_k.to_string(),
            self.num_patches.to_string(),
            self.lambda_c.to_string(),
            self.lambda_s.to_string(),
            self.seed.to_string(),
            self.checkpoint_every.to_string(),
        ];
        let mut out = String::new();
        for (k, v) in TRAIN_CONFIG_KEYS.iter().zip(values) {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

/// Parses a flat `key = value` file. Blank lines and `#` comments (whole-line
/// or trailing) are ignored; later keys override earlier ones when applied.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {}: expected `key = value`",
                no + 1
            )));
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", no + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn round_trips_through_text() {
        let mut cfg = TrainConfig {
            lr: 3e-4,
            seed: 99,
            ..TrainConfig::default()
        };
        cfg.batch = 2;
        let mut back = TrainConfig::default();
        back.apply_str(&cfg.to_key_values()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn comments_and_errors() {
        let mut cfg = TrainConfig::default();
        cfg.apply_str("# header\n\ncrop = 128  # smaller\nlr=0.001\n")
            .unwrap();
        assert_eq!((cfg.crop, cfg.lr), (128, 0.001));
        assert!(matches!(cfg.apply_str("nope = 1"), Err(Error::Config(_))));
        assert!(matches!(cfg.apply_str("crop = big"), Err(Error::Config(_))));
        assert!(matches!(cfg.apply_str("crop 12"), Err(Error::Config(_))));
    }

    #[test]
    fn validation() {
        let cfg = TrainConfig {
            cluster_k: 30,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Cardinality(_))));
        let cfg = TrainConfig {
            crop: 600,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}

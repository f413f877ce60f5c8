//! Training configuration and its `key=value` file format.
//!
//! Blank lines and everything after `#` are ignored. Keys are the field
//! names of [`TrainConfig`]; `channels` takes four comma-separated widths.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{io_err, Error, Result};
use crate::losses::LossWeights;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub image_size: usize,
    pub groups_per_batch: usize,
    pub group_cap: usize,
    pub epochs: usize,
    pub lr: f64,
    pub lr_drop_epochs: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub beta: f64,
    pub alpha: f64,
    pub weights: LossWeights,
    pub seed: u64,
    pub enable_mcm: bool,
    pub enable_ail: bool,
    pub enable_gcam: bool,
    pub mcm_clamp: bool,
    pub augment: bool,
    pub channels: [usize; 4],
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            image_size: 64,
            groups_per_batch: 2,
            group_cap: 16,
            epochs: 200,
            lr: 1e-4,
            lr_drop_epochs: 20,
            weight_decay: 1e-2,
            clip_norm: 5.0,
            beta: 0.1,
            alpha: 0.1,
            weights: LossWeights::default(),
            seed: 0,
            enable_mcm: true,
            enable_ail: true,
            enable_gcam: true,
            mcm_clamp: false,
            augment: true,
            channels: [16, 32, 64, 128],
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

impl TrainConfig {
    /// Sets one field by its name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "image_size" => self.image_size = parse(key, v)?,
            "groups_per_batch" => self.groups_per_batch = parse(key, v)?,
            "group_cap" => self.group_cap = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "lr_drop_epochs" => self.lr_drop_epochs = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "clip_norm" => self.clip_norm = parse(key, v)?,
            "beta" => self.beta = parse(key, v)?,
            "alpha" => self.alpha = parse(key, v)?,
            "lambda1" => self.weights.bce = parse(key, v)?,
            "lambda2" => self.weights.iou = parse(key, v)?,
            "lambda3" => self.weights.mcm = parse(key, v)?,
            "lambda4" => self.weights.adv = parse(key, v)?,
            "lambda5" => self.weights.disc = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "enable_mcm" => self.enable_mcm = parse(key, v)?,
            "enable_ail" => self.enable_ail = parse(key, v)?,
            "enable_gcam" => self.enable_gcam = parse(key, v)?,
            "mcm_clamp" => self.mcm_clamp = parse(key, v)?,
            "augment" => self.augment = parse(key, v)?,
            "channels" => {
                let parts = v
                    .split(',')
                    .map(|p| parse::<usize>(key, p.trim()))
                    .collect::<Result<Vec<_>>>()?;
                self.channels = parts
                    .try_into()
                    .map_err(|_| Error::Config(format!("channels needs four widths, got {v:?}")))?;
            }
            other => return Err(Error::Config(format!("unknown configuration key {other:?}"))),
        }
        Ok(())
    }

    /// Applies every `key=value` line of `text`.
    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", i + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg = TrainConfig::default();
        cfg.apply_str(&text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return Err(Error::Config(format!("image_size {} is not a positive multiple of 32", self.image_size)));
        }
        if self.groups_per_batch == 0 {
            return Err(Error::Config("groups_per_batch must be at least 1".into()));
        }
        if self.group_cap < 2 {
            return Err(Error::Config("group_cap must be at least 2".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        if self.channels.contains(&0) {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta) || self.alpha <= 0.0 {
            return Err(Error::Config(format!("beta {} / alpha {} out of range", self.beta, self.alpha)));
        }
        self.weights.validate()
    }

    /// Learning rate for a 0-based epoch: divided by 10 over the final
    /// `lr_drop_epochs` epochs.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch + self.lr_drop_epochs >= self.epochs {
            self.lr / 10.0
        } else {
            self.lr
        }
    }

    /// The configuration as `key=value` lines, readable by [`TrainConfig::apply_str`].
    pub fn to_key_values(&self) -> String {
        let c = self.channels;
        let mut s = String::new();
        let pairs: [(&str, String); 22] = [
            ("image_size", self.image_size.to_string()),
            ("groups_per_batch", self.groups_per_batch.to_string()),
            ("group_cap", self.group_cap.to_string()),
            ("epochs", self.epochs.to_string()),
            ("lr", self.lr.to_string()),
            ("lr_drop_epochs", self.lr_drop_epochs.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("beta", self.beta.to_string()),
            ("alpha", self.alpha.to_string()),
            ("lambda1", self.weights.bce.to_string()),
            ("lambda2", self.weights.iou.to_string()),
            ("lambda3", self.weights.mcm.to_string()),
            ("lambda4", self.weights.adv.to_string()),
            ("lambda5", self.weights.disc.to_string()),
            ("seed", self.seed.to_string()),
            ("enable_mcm", self.enable_mcm.to_string()),
            ("enable_ail", self.enable_ail.to_string()),
            ("enable_gcam", self.enable_gcam.to_string()),
            ("mcm_clamp", self.mcm_clamp.to_string()),
            ("augment", self.augment.to_string()),
            ("channels", format!("{},{},{},{}", c[0], c[1], c[2], c[3])),
        ];
        for (k, v) in pairs {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_file_with_comments() {
        let mut c = TrainConfig::default();
        c.apply_str("# header\nepochs = 3 # short\n\nlambda4=0\nchannels=2,4,8,16\nenable_ail=false\n")
            .unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.weights.adv, 0.0);
        assert_eq!(c.channels, [2, 4, 8, 16]);
        assert!(!c.enable_ail);
        assert!(c.apply_str("nope=1").is_err());
        assert!(c.apply_str("epochs").is_err());
    }

    #[test]
    fn key_values_round_trip() {
        let mut c = TrainConfig {
            lr: 3e-4,
            seed: 9,
            ..Default::default()
        };
        c.weights.mcm = 0.25;
        let mut back = TrainConfig::default();
        back.apply_str(&c.to_key_values()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn lr_drops_for_final_epochs() {
        let c = TrainConfig {
            epochs: 30,
            ..Default::default()
        };
        assert_eq!(c.lr_at(9), 1e-4);
        assert_eq!(c.lr_at(10), 1e-5);
        assert_eq!(c.lr_at(29), 1e-5);
    }
}

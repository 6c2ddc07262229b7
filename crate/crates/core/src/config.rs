//! Flat `key = value` run configuration.
//!
//! Sources are layered: built-in defaults, then a config file, then
//! `PATHONET_<KEY>` environment variables, then command-line flags (applied
//! by the caller through [`RunConfig::set`]). Unknown keys are errors at
//! every layer. Blank lines and lines starting with `#` are ignored.
//!
//! | key              | default             |
//! |------------------|---------------------|
//! | `widths`         | `16,32,64,128`      |
//! | `variance`       | `9`                 |
//! | `peak`           | `255`               |
//! | `center_value`   | `2250`              |
//! | `thresholds`     | `120,180,40`        |
//! | `match_radius`   | `6`                 |
//! | `min_separation` | `5`                 |
//! | `seed_source`    | `distance`          |
//! | `base_lr`        | `0.0001`            |
//! | `decay_factor`   | `0.1`               |
//! | `decay_every`    | `10`                |
//! | `epochs`         | `30`                |
//! | `batch_size`     | `1`                 |
//! | `train_fraction` | `0.7`               |
//! | `tile_size`      | `256`               |
//! | `seed`           | unset               |

use std::str::FromStr;

use crate::labelgen::LabelRenderConfig;
use crate::model::{ArchDescriptor, DEFAULT_WIDTHS};
use crate::postprocess::{PostprocessConfig, SeedSource, DEFAULT_THRESHOLDS};
use crate::tensor::LrSchedule;

pub const ENV_PREFIX: &str = "PATHONET_";

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("bad value {value:?} for {key}: {reason}")]
    Value { key: String, value: String, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub widths: Vec<usize>,
    pub variance: f64,
    pub peak: f64,
    pub center_value: f64,
    pub thresholds: [f64; 3],
    pub match_radius: f64,
    pub min_separation: f64,
    pub seed_source: SeedSource,
    pub base_lr: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub train_fraction: f64,
    pub tile_size: u32,
    pub seed: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let label = LabelRenderConfig::default();
        let lr = LrSchedule::default();
        Self {
            widths: DEFAULT_WIDTHS.to_vec(),
            variance: label.variance,
            peak: label.peak,
            center_value: label.center_value,
            thresholds: DEFAULT_THRESHOLDS,
            match_radius: 6.0,
            min_separation: 5.0,
            seed_source: SeedSource::DistanceMaxima,
            base_lr: lr.base_lr,
            decay_factor: lr.decay_factor,
            decay_every: lr.decay_every,
            epochs: 30,
            batch_size: 1,
            train_fraction: 0.7,
            tile_size: 256,
            seed: None,
        }
    }
}

pub const KEYS: [&str; 16] = [
    "widths",
    "variance",
    "peak",
    "center_value",
    "thresholds",
    "match_radius",
    "min_separation",
    "seed_source",
    "base_lr",
    "decay_factor",
    "decay_every",
    "epochs",
    "batch_size",
    "train_fraction",
    "tile_size",
    "seed",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::Value {
        key: key.into(),
        value: value.into(),
        reason: format!("expected {}", std::any::type_name::<T>()),
    })
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, ConfigError> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn positive(key: &str, value: &str, v: f64) -> Result<f64, ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(ConfigError::Value {
            key: key.into(),
            value: value.into(),
            reason: "must be positive".into(),
        })
    }
}

/// Comma-separated per-class thresholds, each in `[0, 255]`.
pub fn parse_thresholds(value: &str) -> Result<[f64; 3], ConfigError> {
    let key = "thresholds";
    let v: Vec<f64> = parse_list(key, value)?;
    let arr: [f64; 3] = v.try_into().map_err(|_| ConfigError::Value {
        key: key.into(),
        value: value.into(),
        reason: "expected three comma-separated values".into(),
    })?;
    if arr.iter().any(|t| !(0.0..=255.0).contains(t)) {
        return Err(ConfigError::Value {
            key: key.into(),
            value: value.into(),
            reason: "thresholds must lie in [0, 255]".into(),
        });
    }
    Ok(arr)
}

impl RunConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let value = value.trim();
        match key {
            "widths" => {
                let w = parse_list(key, value)?;
                ArchDescriptor::new(&w).map_err(|e| ConfigError::Value {
                    key: key.into(),
                    value: value.into(),
                    reason: e.to_string(),
                })?;
                self.widths = w;
            }
            "variance" => self.variance = positive(key, value, parse(key, value)?)?,
            "peak" => self.peak = positive(key, value, parse(key, value)?)?,
            "center_value" => self.center_value = positive(key, value, parse(key, value)?)?,
            "thresholds" => self.thresholds = parse_thresholds(value)?,
            "match_radius" => self.match_radius = positive(key, value, parse(key, value)?)?,
            "min_separation" => {
                let v: f64 = parse(key, value)?;
                if !(v >= 1.0) {
                    return Err(ConfigError::Value {
                        key: key.into(),
                        value: value.into(),
                        reason: "must be at least 1".into(),
                    });
                }
                self.min_separation = v;
            }
            "seed_source" => {
                self.seed_source = match value {
                    "distance" => SeedSource::DistanceMaxima,
                    "density" => SeedSource::DensityMaxima,
                    _ => {
                        return Err(ConfigError::Value {
                            key: key.into(),
                            value: value.into(),
                            reason: "expected `distance` or `density`".into(),
                        })
                    }
                }
            }
            "base_lr" => self.base_lr = positive(key, value, parse(key, value)?)?,
            "decay_factor" => {
                let v: f64 = parse(key, value)?;
                if !(v > 0.0 && v <= 1.0) {
                    return Err(ConfigError::Value {
                        key: key.into(),
                        value: value.into(),
                        reason: "must lie in (0, 1]".into(),
                    });
                }
                self.decay_factor = v;
            }
            "decay_every" => self.decay_every = positive(key, value, parse::<usize>(key, value)? as f64)? as usize,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = positive(key, value, parse::<usize>(key, value)? as f64)? as usize,
            "train_fraction" => {
                let v: f64 = parse(key, value)?;
                if !(0.0..=1.0).contains(&v) {
                    return Err(ConfigError::Value {
                        key: key.into(),
                        value: value.into(),
                        reason: "must lie in [0, 1]".into(),
                    });
                }
                self.train_fraction = v;
            }
            "tile_size" => self.tile_size = positive(key, value, parse::<u32>(key, value)? as f64)? as u32,
            "seed" => self.seed = Some(parse(key, value)?),
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: line.into(),
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Applies every `PATHONET_<KEY>` variable; other prefixed names are
    /// rejected. Variables are applied in key order.
    pub fn apply_env<I>(&mut self, vars: I) -> Result<(), ConfigError>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut found: Vec<(String, String)> = vars
            .into_iter()
            .filter_map(|(k, v)| k.strip_prefix(ENV_PREFIX).map(|k| (k.to_ascii_lowercase(), v)))
            .collect();
        found.sort();
        for (k, v) in found {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let list = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let widths: Vec<String> = self.widths.iter().map(usize::to_string).collect();
        s += &format!("widths = {}\n", widths.join(","));
        s += &format!("variance = {}\n", self.variance);
        s += &format!("peak = {}\n", self.peak);
        s += &format!("center_value = {}\n", self.center_value);
        s += &format!("thresholds = {}\n", list(&self.thresholds));
        s += &format!("match_radius = {}\n", self.match_radius);
        s += &format!("min_separation = {}\n", self.min_separation);
        let src = match self.seed_source {
            SeedSource::DistanceMaxima => "distance",
            SeedSource::DensityMaxima => "density",
        };
        s += &format!("seed_source = {src}\n");
        s += &format!("base_lr = {}\n", self.base_lr);
        s += &format!("decay_factor = {}\n", self.decay_factor);
        s += &format!("decay_every = {}\n", self.decay_every);
        s += &format!("epochs = {}\n", self.epochs);
        s += &format!("batch_size = {}\n", self.batch_size);
        s += &format!("train_fraction = {}\n", self.train_fraction);
        s += &format!("tile_size = {}\n", self.tile_size);
        if let Some(seed) = self.seed {
            s += &format!("seed = {seed}\n");
        }
        s
    }

    pub fn label(&self) -> LabelRenderConfig {
        LabelRenderConfig {
            variance: self.variance,
            peak: self.peak,
            center_value: self.center_value,
            ..Default::default()
        }
    }

    pub fn postprocess(&self) -> PostprocessConfig {
        PostprocessConfig {
            thresholds: self.thresholds,
            min_separation: self.min_separation,
            seed_source: self.seed_source,
        }
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base_lr: self.base_lr,
            decay_factor: self.decay_factor,
            decay_every: self.decay_every,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip() {
        let mut c = RunConfig::default();
        c.apply_text("# comment\nthresholds = 100, 150, 35\nseed=7\nseed_source = density\n").unwrap();
        assert_eq!(c.thresholds, [100.0, 150.0, 35.0]);
        assert_eq!(c.seed, Some(7));
        let mut d = RunConfig::default();
        d.apply_text(&c.to_text()).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn unknown_and_malformed() {
        let mut c = RunConfig::default();
        assert_eq!(c.apply_text("sigma = 3"), Err(ConfigError::UnknownKey("sigma".into())));
        assert!(matches!(c.apply_text("widths"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(c.set("widths", "4,8,17,32"), Err(ConfigError::Value { .. })));
        assert!(matches!(c.set("thresholds", "1,2"), Err(ConfigError::Value { .. })));
        assert!(matches!(c.set("thresholds", "1,2,300"), Err(ConfigError::Value { .. })));
    }

    #[test]
    fn env_layer() {
        let mut c = RunConfig::default();
        c.apply_env([
            ("PATHONET_EPOCHS".to_string(), "3".to_string()),
            ("HOME".to_string(), "/root".to_string()),
        ])
        .unwrap();
        assert_eq!(c.epochs, 3);
        assert!(c
            .apply_env([("PATHONET_COLOUR".to_string(), "red".to_string())])
            .is_err());
    }
}

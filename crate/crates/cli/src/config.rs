//! Experiment configuration (TOML).

use potq::data::{self, Dataset};
use potq::optim::SgdConfig;
use potq::qat::QatConfig;
use potq::qinference::IntegerOptions;
use potq::shift_mac::OverflowMode;
use potq::{Error, ModelSpec, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    /// Model initialisation and synthetic data seed.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub model: ModelSpec,
    pub dataset: DatasetConfig,
    /// Float pre-training schedule.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<SgdConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qat: Option<QatConfig>,
    #[serde(default)]
    pub mac: MacSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Directory holding `train-*` / `test-*` IDX files.
    Idx { dir: PathBuf },
    /// `label,v0,v1,...` rows.
    Csv {
        train: PathBuf,
        test: PathBuf,
        sample_shape: [usize; 3],
    },
    Blobs {
        classes: usize,
        train_per_class: usize,
        test_per_class: usize,
        sample_shape: [usize; 3],
        spread: f32,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Calibration {
    MaxAbs,
    #[default]
    Headroom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MacSection {
    #[serde(default = "default_act_bits")]
    pub act_bits: u8,
    /// Overrides both register widths of every MAC kind; set both or neither.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intermediate_width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accumulator_width: Option<u32>,
    #[serde(default)]
    pub overflow: OverflowMode,
    #[serde(default)]
    pub calibration: Calibration,
    /// Target fraction of the accumulator range for headroom calibration.
    #[serde(default = "default_fill")]
    pub headroom_fill: f64,
    /// Training samples used for calibration; all of them when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration_samples: Option<usize>,
}

fn default_act_bits() -> u8 {
    8
}

fn default_fill() -> f64 {
    0.8
}

impl Default for MacSection {
    fn default() -> Self {
        Self {
            act_bits: default_act_bits(),
            intermediate_width: None,
            accumulator_width: None,
            overflow: OverflowMode::default(),
            calibration: Calibration::default(),
            headroom_fill: default_fill(),
            calibration_samples: None,
        }
    }
}

impl MacSection {
    pub fn options(&self) -> Result<IntegerOptions> {
        let widths = match (self.intermediate_width, self.accumulator_width) {
            (Some(i), Some(a)) => Some((i, a)),
            (None, None) => None,
            _ => {
                return Err(Error::Config(
                    "mac.intermediate_width and mac.accumulator_width must be set together".into(),
                ))
            }
        };
        Ok(IntegerOptions {
            act_bits: self.act_bits,
            widths,
            overflow: self.overflow,
        })
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if c.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} unsupported (expected {CONFIG_VERSION})",
                c.version
            )));
        }
        c.mac.options()?;
        if !(2..=16).contains(&c.mac.act_bits) {
            return Err(Error::Config(format!("mac.act_bits {} outside 2..=16", c.mac.act_bits)));
        }
        Ok(c)
    }

    /// Reads `path`, resolves relative paths against its directory and checks
    /// that referenced inputs exist.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut c = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut c.output_dir);
        match &mut c.dataset {
            DatasetConfig::Idx { dir } => resolve(dir),
            DatasetConfig::Csv { train, test, .. } => {
                resolve(train);
                resolve(test);
            }
            DatasetConfig::Blobs { .. } => {}
        }
        for p in c.dataset.paths() {
            if !p.exists() {
                return Err(Error::Config(format!("dataset path {} does not exist", p.display())));
            }
        }
        Ok(c)
    }

    #[cfg(test)]
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn train(&self) -> Result<&SgdConfig> {
        self.train.as_ref().ok_or_else(|| Error::Config("missing [train] section".into()))
    }

    pub fn qat(&self) -> Result<&QatConfig> {
        self.qat.as_ref().ok_or_else(|| Error::Config("missing [qat] section".into()))
    }

    /// Loads `(train, test)` and checks them against the model input.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        let (train, test) = match &self.dataset {
            DatasetConfig::Idx { dir } => data::load_idx_dir(dir)?,
            DatasetConfig::Csv {
                train,
                test,
                sample_shape,
            } => (data::load_csv(train, *sample_shape)?, data::load_csv(test, *sample_shape)?),
            &DatasetConfig::Blobs {
                classes,
                train_per_class,
                test_per_class,
                sample_shape,
                spread,
            } => {
                // One draw keeps train and test around the same centres.
                let all = data::gaussian_blobs(
                    classes,
                    train_per_class + test_per_class,
                    sample_shape,
                    spread,
                    self.seed,
                )?;
                let n_train = classes * train_per_class;
                let idx: Vec<usize> = (0..all.len()).collect();
                let split = |ids: &[usize]| {
                    let (x, y) = all.batch(ids);
                    Dataset::new(x.data().to_vec(), y, sample_shape)
                };
                (split(&idx[..n_train])?, split(&idx[n_train..])?)
            }
        };
        if train.sample_shape() != self.model.input {
            return Err(Error::Config(format!(
                "dataset samples are {:?} but the model expects {:?}",
                train.sample_shape(),
                self.model.input
            )));
        }
        Ok((train, test))
    }
}

impl DatasetConfig {
    fn paths(&self) -> Vec<&Path> {
        match self {
            Self::Idx { dir } => vec![dir],
            Self::Csv { train, test, .. } => vec![train, test],
            Self::Blobs { .. } => vec![],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = include_str!("../../../configs/desk.toml");

    #[test]
    fn sample_config_parses_and_round_trips() {
        let c = ExperimentConfig::parse(SAMPLE).unwrap();
        let text = c.to_toml().unwrap();
        let again = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.to_toml().unwrap(), text);
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = SAMPLE.replace("seed = 0", "seed = 0\nlearning_rate = 1");
        assert!(matches!(ExperimentConfig::parse(&text), Err(Error::Config(_))));
    }

    #[test]
    fn half_specified_widths_rejected() {
        let text = SAMPLE.replace("act_bits = 8", "act_bits = 8\nintermediate_width = 16");
        assert!(matches!(ExperimentConfig::parse(&text), Err(Error::Config(_))));
    }
}

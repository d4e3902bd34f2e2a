//! Run configuration: a TOML file plus command-line overrides.
//!
//! Relative paths inside the file resolve against the file's directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use sparsenet_core::data::{load_mnist_idx, pattern_dataset, sparsify_mnist, SparseDataset};
use sparsenet_core::model::{build_octnet3, ArchitectureSpec, ExecMode, Variant};
use sparsenet_core::train::{RegularizerConfig, TrainConfig};
use sparsenet_core::{AttentionVariant, DensityBound};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    #[serde(default = "one")]
    pub threads: usize,
    pub out: Option<PathBuf>,
    pub data: Option<DataConfig>,
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub bench: BenchConfig,
    #[serde(default)]
    pub mem: MemConfig,
    #[serde(skip)]
    base_dir: PathBuf,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// IDX files, plain or gzipped.
    Mnist {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        /// Centered crop side; omit to keep the full image.
        crop: Option<usize>,
        train_limit: Option<usize>,
        test_limit: Option<usize>,
    },
    /// Oriented-stroke images in four classes.
    Patterns {
        train_samples: usize,
        test_samples: usize,
        side: usize,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Option<String>,
    #[serde(default)]
    pub rho: Vec<DensityBound>,
    pub attention: Option<AttentionVariant>,
    pub architecture: Option<ArchitectureSpec>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epsilon: f64,
    pub lambda: f64,
    pub o: f64,
    pub b1: f64,
    pub b2: f64,
    /// Also write `checkpoint_epoch_<n>.bin` after every epoch.
    pub checkpoint_every_epoch: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let reg = RegularizerConfig::default();
        Self {
            epochs: 10,
            batch_size: 32,
            learning_rate: 0.01,
            epsilon: 0.01,
            lambda: reg.lambda,
            o: reg.o,
            b1: reg.b1,
            b2: reg.b2,
            checkpoint_every_epoch: false,
        }
    }
}

/// A data density: a fixed fraction or `"1/r"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DensitySpec {
    Fixed(f64),
    InverseResolution,
}

impl DensitySpec {
    pub fn at(self, r: usize) -> f64 {
        match self {
            DensitySpec::Fixed(v) => v,
            DensitySpec::InverseResolution => 1.0 / r as f64,
        }
    }
}

impl<'de> Deserialize<'de> for DensitySpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Value(f64),
            Word(String),
        }
        match Repr::deserialize(d)? {
            Repr::Value(v) if v > 0.0 && v <= 1.0 => Ok(DensitySpec::Fixed(v)),
            Repr::Value(v) => Err(serde::de::Error::custom(format!("density {v} outside (0, 1]"))),
            Repr::Word(w) if w == "1/r" => Ok(DensitySpec::InverseResolution),
            Repr::Word(w) => Err(serde::de::Error::custom(format!("expected a density or \"1/r\", got {w:?}"))),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub resolutions: Vec<usize>,
    pub rank: usize,
    pub rho_d: Vec<DensitySpec>,
    pub rho_f: Vec<f64>,
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    /// Output density bound; `"1/r"` by default.
    pub rho_up: DensitySpec,
    /// Largest dense input (elements) the oracle is run on.
    pub oracle_max_elements: u64,
    /// Rows whose estimated footprint exceeds this are skipped.
    pub max_bytes: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            resolutions: vec![16, 32],
            rank: 3,
            rho_d: vec![DensitySpec::InverseResolution],
            rho_f: vec![0.1, 0.3, 0.5, 1.0],
            batch: 1,
            in_channels: 1,
            out_channels: 8,
            kernel: 3,
            rho_up: DensitySpec::InverseResolution,
            oracle_max_elements: 1 << 16,
            max_bytes: 1 << 32,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MemConfig {
    pub resolutions: Vec<u64>,
    pub rank: u32,
    pub batch: u64,
    pub channels: u64,
}

impl Default for MemConfig {
    fn default() -> Self {
        Self {
            resolutions: vec![32, 64, 128, 256, 512],
            rank: 3,
            batch: 32,
            channels: 8,
        }
    }
}

/// Flag values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

impl RunConfig {
    pub fn parse(text: &str, base_dir: &Path) -> CliResult<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(config_err)?;
        cfg.base_dir = base_dir.to_path_buf();
        Ok(cfg)
    }

    /// Loads `path`, or the defaults when no file is given.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> CliResult<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                let base = p.parent().unwrap_or(Path::new(".")).to_path_buf();
                Self::parse(&text, &base)?
            }
            None => Self::parse("", Path::new("."))?,
        };
        if let Some(seed) = overrides.seed {
            cfg.seed = Some(seed);
        }
        if let Some(t) = overrides.threads {
            cfg.threads = t;
        }
        if let Some(out) = &overrides.out {
            cfg.out = Some(out.clone());
        } else if let Some(out) = cfg.out.take() {
            cfg.out = Some(cfg.resolve(&out));
        }
        if cfg.threads == 0 {
            return Err(CliError::Config("threads must be at least 1".into()));
        }
        Ok(cfg)
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn seed(&self) -> CliResult<u64> {
        self.seed
            .ok_or_else(|| CliError::Config("a seed is required (config `seed` or --seed)".into()))
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("."))
    }

    pub fn exec_mode(&self) -> ExecMode {
        if self.threads > 1 {
            ExecMode::Parallel
        } else {
            ExecMode::Sequential
        }
    }

    pub fn train_config(&self) -> CliResult<TrainConfig> {
        let t = &self.train;
        let cfg = TrainConfig {
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            epsilon: t.epsilon,
            regularizer: RegularizerConfig {
                lambda: t.lambda,
                o: t.o,
                b1: t.b1,
                b2: t.b2,
            },
            seed: self.seed()?,
        };
        cfg.validate().map_err(config_err)?;
        Ok(cfg)
    }

    /// Every input file named by the data section must exist.
    pub fn check_files(&self) -> CliResult<()> {
        if let Some(DataConfig::Mnist {
            train_images,
            train_labels,
            test_images,
            test_labels,
            ..
        }) = &self.data
        {
            for p in [train_images, train_labels, test_images, test_labels] {
                let p = self.resolve(p);
                if !p.is_file() {
                    return Err(CliError::Config(format!("missing data file {}", p.display())));
                }
            }
        }
        Ok(())
    }

    /// Training and test splits.
    pub fn datasets(&self) -> CliResult<(SparseDataset, SparseDataset)> {
        let data = self
            .data
            .as_ref()
            .ok_or_else(|| CliError::Config("missing [data] section".into()))?;
        self.check_files()?;
        match data {
            DataConfig::Mnist {
                train_images,
                train_labels,
                test_images,
                test_labels,
                crop,
                train_limit,
                test_limit,
            } => {
                let load = |img: &PathBuf, lbl: &PathBuf, limit: &Option<usize>| -> CliResult<SparseDataset> {
                    let set = load_mnist_idx(self.resolve(img), self.resolve(lbl))?;
                    let ds = sparsify_mnist(&set, *crop)?;
                    Ok(match limit {
                        Some(n) => ds.truncated(*n),
                        None => ds,
                    })
                };
                Ok((
                    load(train_images, train_labels, train_limit)?,
                    load(test_images, test_labels, test_limit)?,
                ))
            }
            DataConfig::Patterns {
                train_samples,
                test_samples,
                side,
            } => {
                let seed = self.seed()?;
                let train = pattern_dataset(*train_samples, *side, seed).map_err(config_err)?;
                let test = pattern_dataset(*test_samples, *side, seed.wrapping_add(1)).map_err(config_err)?;
                Ok((train, test))
            }
        }
    }

    /// The network description for `classes` output classes.
    pub fn architecture(&self, classes: usize) -> CliResult<ArchitectureSpec> {
        let m = self
            .model
            .as_ref()
            .ok_or_else(|| CliError::Config("missing [model] section".into()))?;
        let mut spec = match (&m.variant, &m.architecture) {
            (Some(v), None) => {
                let variant: Variant = v.parse().map_err(config_err)?;
                build_octnet3(variant, &m.rho, classes).map_err(config_err)?
            }
            (None, Some(a)) => {
                if !m.rho.is_empty() {
                    return Err(CliError::Config("`rho` applies only with `variant`".into()));
                }
                a.clone()
            }
            _ => return Err(CliError::Config("[model] needs exactly one of `variant` and `architecture`".into())),
        };
        if let Some(att) = m.attention {
            spec.attention = att;
        }
        if spec.classes != classes {
            return Err(CliError::Config(format!(
                "architecture has {} classes but the data has {classes}",
                spec.classes
            )));
        }
        spec.validate().map_err(config_err)?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let cfg = RunConfig::load(
            None,
            &Overrides {
                seed: Some(9),
                threads: Some(2),
                out: None,
            },
        )
        .unwrap();
        assert_eq!(cfg.seed().unwrap(), 9);
        assert_eq!(cfg.exec_mode(), ExecMode::Parallel);
        assert_eq!(cfg.mem.resolutions, vec![32, 64, 128, 256, 512]);
        assert_eq!(cfg.train.learning_rate, 0.01);
    }

    #[test]
    fn missing_seed_is_a_config_error() {
        let cfg = RunConfig::parse("", Path::new(".")).unwrap();
        assert_eq!(cfg.seed().unwrap_err().exit_code(), 1);
    }

    #[test]
    fn model_from_variant() {
        let cfg = RunConfig::parse(
            "seed = 1\n[model]\nvariant = \"24^2\"\nrho = [\"unbounded\"]\n",
            Path::new("."),
        )
        .unwrap();
        let spec = cfg.architecture(10).unwrap();
        assert_eq!(spec.input_spatial, vec![24, 24]);
        assert!(spec.sparse_bounds().iter().all(|b| *b == DensityBound::Unbounded));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(RunConfig::parse("sed = 1", Path::new(".")).is_err());
        assert!(RunConfig::parse("[bench]\nrho_d = [\"1/q\"]", Path::new(".")).is_err());
        let cfg = RunConfig::parse("[model]\nvariant = \"7^2\"\n", Path::new(".")).unwrap();
        assert!(cfg.architecture(10).is_err());
        let cfg = RunConfig::parse(
            "[data]\nsource = \"mnist\"\ntrain_images = \"nope\"\ntrain_labels = \"nope\"\ntest_images = \"nope\"\ntest_labels = \"nope\"\n",
            Path::new("/nonexistent"),
        )
        .unwrap();
        assert_eq!(cfg.check_files().unwrap_err().exit_code(), 1);
    }
}

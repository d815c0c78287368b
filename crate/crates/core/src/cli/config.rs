use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::GenConfig;
use crate::error::{Error, Result};
use crate::eval::Constraint;
use crate::models::{ClassifierConfig, WeightNetConfig, DEFAULT_CLASSIFIER_HIDDEN, DEFAULT_WEIGHTNET_HIDDEN};
use crate::trainer::{EvalSpec, TrainerConfig};

/// Where the data comes from: generated from a config, or an existing
/// dataset directory (relative paths resolve against the config file).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Generate(GenConfig),
    Path(PathBuf),
}

fn d_classifier_hidden() -> Vec<usize> {
    vec![DEFAULT_CLASSIFIER_HIDDEN]
}
fn d_weightnet_hidden() -> Vec<usize> {
    vec![DEFAULT_WEIGHTNET_HIDDEN]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierSection {
    #[serde(default = "d_classifier_hidden")]
    pub hidden_sizes: Vec<usize>,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        Self {
            hidden_sizes: d_classifier_hidden(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightNetSection {
    #[serde(default = "d_weightnet_hidden")]
    pub hidden_sizes: Vec<usize>,
    #[serde(default)]
    pub scalar_mode: bool,
}

impl Default for WeightNetSection {
    fn default() -> Self {
        Self {
            hidden_sizes: d_weightnet_hidden(),
            scalar_mode: false,
        }
    }
}

fn d_k_values() -> Vec<usize> {
    vec![10, 20, 50]
}
fn d_constraints() -> Vec<Constraint> {
    Constraint::ALL.to_vec()
}
fn d_test_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "d_k_values", alias = "K_values")]
    pub k_values: Vec<usize>,
    #[serde(default = "d_constraints", alias = "strategies")]
    pub constraints: Vec<Constraint>,
    /// Fraction of scenes held out for testing.
    #[serde(default = "d_test_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub split_seed: u64,
    /// Also write `chart.svg` for each run.
    #[serde(default = "d_true")]
    pub chart: bool,
}

fn d_true() -> bool {
    true
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            k_values: d_k_values(),
            constraints: d_constraints(),
            test_fraction: d_test_fraction(),
            split_seed: 0,
            chart: true,
        }
    }
}

impl EvalSection {
    pub fn spec(&self) -> EvalSpec {
        EvalSpec {
            k_values: self.k_values.clone(),
            constraints: self.constraints.clone(),
        }
    }
}

/// Weight-net hidden layouts for the architecture ablation.
pub fn default_architectures() -> Vec<Vec<usize>> {
    vec![vec![50], vec![100], vec![200], vec![100, 100], vec![10, 10], vec![10, 10, 10]]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSection {
    #[serde(default = "default_architectures")]
    pub architectures: Vec<Vec<usize>>,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            architectures: default_architectures(),
        }
    }
}

fn d_output_dir() -> PathBuf {
    PathBuf::from("out")
}
fn d_seeds() -> Vec<u64> {
    vec![0]
}

/// One JSON document describing a whole experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    #[serde(default)]
    pub classifier: ClassifierSection,
    #[serde(default)]
    pub weightnet: WeightNetSection,
    #[serde(default)]
    pub trainer: TrainerConfig,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default = "d_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "d_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub ablation: AblationSection,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Argument("seeds must not be empty".into()));
        }
        let k = &self.eval.k_values;
        if k.is_empty() || k.contains(&0) || k.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Argument("K values must be positive and strictly increasing".into()));
        }
        if self.eval.constraints.is_empty() {
            return Err(Error::Argument("at least one constraint is required".into()));
        }
        if !(0.0..1.0).contains(&self.eval.test_fraction) || self.eval.test_fraction == 0.0 {
            return Err(Error::Argument("test_fraction must lie in (0, 1)".into()));
        }
        if self.ablation.architectures.iter().any(|a| a.is_empty() || a.contains(&0)) {
            return Err(Error::Argument("ablation architectures need positive hidden sizes".into()));
        }
        if let DatasetSource::Generate(g) = &self.dataset {
            g.validate()?;
        }
        self.trainer.validate()
    }

    /// Classifier for a dataset with `dim` features and `classes` labels.
    pub fn classifier(&self, dim: usize, classes: usize, seed: u64) -> ClassifierConfig {
        ClassifierConfig {
            input_dim: dim,
            hidden_sizes: self.classifier.hidden_sizes.clone(),
            num_classes: classes,
            seed: derive_seed(seed, 1),
        }
    }

    pub fn weightnet(&self, classes: usize, hidden: &[usize], seed: u64) -> WeightNetConfig {
        WeightNetConfig {
            num_classes: classes,
            hidden_sizes: hidden.to_vec(),
            scalar_mode: self.weightnet.scalar_mode,
            seed: derive_seed(seed, 2),
        }
    }
}

/// Independent sub-seeds of a run seed for the parts that need their own
/// stream (splitmix64 finaliser over `seed + stream`).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed.wrapping_add(stream.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn load_experiment(path: &Path) -> Result<ExperimentConfig> {
    let text = read(path)?;
    let mut cfg: ExperimentConfig = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    if let DatasetSource::Path(p) = &cfg.dataset {
        if p.is_relative() {
            let base = path.parent().unwrap_or(Path::new("."));
            cfg.dataset = DatasetSource::Path(base.join(p));
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Accepts either a bare generator config or an experiment config whose
/// dataset is generated.
pub fn load_gen_config(path: &Path) -> Result<(GenConfig, Option<PathBuf>)> {
    let text = read(path)?;
    if let Ok(g) = serde_json::from_str::<GenConfig>(&text) {
        g.validate()?;
        return Ok((g, None));
    }
    let cfg: ExperimentConfig = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    match cfg.dataset {
        DatasetSource::Generate(g) => {
            g.validate()?;
            Ok((g, Some(cfg.output_dir)))
        }
        DatasetSource::Path(_) => Err(Error::Argument(
            "config points at an existing dataset; nothing to generate".into(),
        )),
    }
}

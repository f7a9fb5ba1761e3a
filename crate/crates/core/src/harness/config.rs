use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::model::{OmegaConfig, DEFAULT_WIDTHS};
use crate::pretext::{LossConfig, TaskId};
use crate::tensor::DType;
use crate::transfer::TransferConfig;
use crate::tte::TteConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub widths: Vec<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            widths: DEFAULT_WIDTHS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Image directory; the synthetic shape set is used when absent.
    pub path: Option<PathBuf>,
    pub count: usize,
    pub size: usize,
    /// Generator seed; follows the run seed when absent.
    pub seed: Option<u64>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            path: None,
            count: 5000,
            size: 32,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretextConfig {
    pub grid: [usize; 2],
    pub permutations: usize,
    pub loss: LossConfig,
}

impl Default for PretextConfig {
    fn default() -> Self {
        PretextConfig {
            grid: [2, 2],
            permutations: 24,
            loss: LossConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub tasks: Vec<TaskId>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub dtype: DType,
    pub output_dir: PathBuf,
    pub encoder: EncoderConfig,
    pub dataset: DatasetConfig,
    pub pretext: PretextConfig,
    pub tte: TteConfig,
    pub omega: OmegaConfig,
    pub transfer: TransferConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            tasks: TaskId::ALL.to_vec(),
            epochs: 10,
            batch_size: 64,
            learning_rate: 0.01,
            momentum: 0.9,
            dtype: DType::F32,
            output_dir: PathBuf::from("runs"),
            encoder: EncoderConfig::default(),
            dataset: DatasetConfig::default(),
            pretext: PretextConfig::default(),
            tte: TteConfig::default(),
            omega: OmegaConfig::default(),
            transfer: TransferConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::Config("at least one task is required".into()));
        }
        let mut seen = self.tasks.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.tasks.len() {
            return Err(Error::Config("tasks must not repeat".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("need learning_rate > 0 and momentum in [0, 1)".into()));
        }
        if self.encoder.widths.is_empty() || self.encoder.widths.contains(&0) {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        if self.dataset.count == 0 || self.dataset.size == 0 {
            return Err(Error::Config("dataset count and size must be positive".into()));
        }
        let stride = 1 << self.encoder.widths.len();
        let [rows, cols] = self.pretext.grid;
        if self.dataset.size % stride != 0 {
            return Err(Error::Config(format!(
                "image size {} is not divisible by the encoder stride {stride}",
                self.dataset.size
            )));
        }
        if self.tasks.contains(&TaskId::Jigsaw)
            && (rows == 0 || cols == 0 || self.dataset.size % rows != 0 || (self.dataset.size / rows) % stride != 0
                || self.dataset.size % cols != 0 || (self.dataset.size / cols) % stride != 0)
        {
            return Err(Error::Config(format!(
                "jigsaw grid {rows}x{cols} does not split {0}x{0} images into encoder-sized patches",
                self.dataset.size
            )));
        }
        if self.tte.enabled && self.tte.history == 0 {
            return Err(Error::Config("tte.history must be at least 1".into()));
        }
        self.transfer.validate()
    }

    /// Short digest of the canonical serialized config. The seed, output
    /// directory and downstream stage sections are left out, so every stage
    /// of one pretraining setup shares a run directory.
    pub fn hash(&self) -> String {
        let mut canon = self.clone();
        canon.seed = 0;
        canon.output_dir = PathBuf::new();
        canon.transfer = TransferConfig::default();
        canon.eval = EvalConfig::default();
        let json = serde_json::to_string(&canon).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))[..12].to_string()
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(format!("{}-s{}", self.hash(), self.seed))
    }

    pub fn dataset_seed(&self) -> u64 {
        self.dataset.seed.unwrap_or(self.seed)
    }

    /// Applies `a.b.c=value` overrides; values parse as TOML and fall back to
    /// plain strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut tree = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            set_path(&mut tree, key.trim(), parse_value(raw.trim()))?;
        }
        let cfg: ExperimentConfig = tree.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(tree: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut node = tree;
    for p in parents {
        node = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{p}` in `{key}` is not a section")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.batch_size, 64);
        assert_eq!(cfg.momentum, 0.9);
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides() {
        let cfg = ExperimentConfig::default()
            .with_overrides(&["epochs=3", "tasks=[\"r\", \"j\"]", "tte.enabled=false", "omega.metric=jsd"])
            .unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.tasks, vec![TaskId::Reconstruction, TaskId::Jigsaw]);
        assert!(!cfg.tte.enabled);
        assert_eq!(cfg.omega.metric, crate::divergence::Metric::Jsd);
        assert!(ExperimentConfig::default().with_overrides(&["epochs=0"]).is_err());
        assert!(ExperimentConfig::default().with_overrides(&["nonsense=1"]).is_err());
        assert!(ExperimentConfig::default().with_overrides(&["epochs"]).is_err());
    }

    #[test]
    fn hash_ignores_seed_and_output() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig {
            seed: 9,
            output_dir: "elsewhere".into(),
            ..a.clone()
        };
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.run_dir(), b.run_dir());
        let c = ExperimentConfig { epochs: 2, ..a.clone() };
        assert_ne!(a.hash(), c.hash());
        let d = a.with_overrides(&["eval.probe=false", "transfer.epochs=1"]).unwrap();
        assert_eq!(a.hash(), d.hash());
    }

    #[test]
    fn rejects_bad_grids() {
        let cfg = ExperimentConfig {
            pretext: PretextConfig {
                grid: [3, 3],
                ..PretextConfig::default()
            },
            ..ExperimentConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}

//! Config-driven orchestration: pretraining, transfer, evaluation and plots.
//!
//! Every artifact of a run lives under `<output_dir>/<config-hash>-s<seed>/`.

mod config;
mod evaluate;
mod plot;
mod pretrain;
mod transfer;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::data::{load_image_dir, synthetic_shapes, Dataset};
use crate::error::{Error, Result};
use crate::store::{load_snapshot, SnapshotId};
use crate::tensor::ParameterSet;

pub use config::{DatasetConfig, EncoderConfig, ExperimentConfig, PretextConfig};
pub use evaluate::{run_eval, EvalOutcome, EvalReport, REPORT_FILE, RETRIEVAL_FILE};
pub use plot::{coefficient_of_variation, impact_cv, plot_impact, read_impact, ImpactSummary};
pub use pretrain::{run_pretrain, write_impact, PretrainOutcome, CONFIG_FILE, IMPACT_CSV, LOSS_LOG};
pub use transfer::{run_transfer, TransferOutcome, TransferReport};

pub const CHECKPOINT_DIR: &str = "checkpoints";

/// Paths and checkpoint ids written by one stage of a run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunArtifacts {
    pub run_dir: PathBuf,
    pub config: PathBuf,
    pub fused: Option<SnapshotId>,
    pub epoch_snapshots: Vec<SnapshotId>,
    pub branch_snapshots: BTreeMap<String, SnapshotId>,
    pub header_snapshots: BTreeMap<String, SnapshotId>,
    pub target: Option<SnapshotId>,
    pub loss_ledger: Option<PathBuf>,
    pub impact_trace: Option<PathBuf>,
    pub reports: Vec<PathBuf>,
}

impl RunArtifacts {
    /// Every file or directory this record points at.
    pub fn paths(&self) -> Vec<PathBuf> {
        let ckpt = checkpoint_dir(&self.run_dir);
        let mut out = vec![self.run_dir.clone(), self.config.clone()];
        let ids = self
            .fused
            .iter()
            .chain(&self.epoch_snapshots)
            .chain(self.branch_snapshots.values())
            .chain(self.header_snapshots.values())
            .chain(&self.target);
        out.extend(ids.map(|id| ckpt.join(&id.0)));
        out.extend(self.loss_ledger.iter().chain(&self.impact_trace).chain(&self.reports).cloned());
        out
    }
}

pub fn checkpoint_dir(run_dir: &Path) -> PathBuf {
    run_dir.join(CHECKPOINT_DIR)
}

pub fn artifacts_path(run_dir: &Path, stage: &str) -> PathBuf {
    run_dir.join(format!("artifacts-{stage}.json"))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("artifact record serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    if !path.is_file() {
        return Err(Error::NotFound(format!("{}", path.display())));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Corrupt {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    match &cfg.dataset.path {
        Some(dir) => load_image_dir(dir, cfg.dataset.size),
        None => synthetic_shapes(cfg.dataset.count, cfg.dataset.size, cfg.dataset_seed()),
    }
}

/// Loads a snapshot given its directory path.
pub fn load_snapshot_dir(path: &Path) -> Result<ParameterSet> {
    let (dir, id) = match (path.parent(), path.file_name()) {
        (Some(dir), Some(id)) => (dir, id.to_string_lossy().into_owned()),
        _ => return Err(Error::NotFound(format!("snapshot at {}", path.display()))),
    };
    Ok(load_snapshot(&SnapshotId(id), dir)?.0)
}

/// Explicit checkpoint if given, else the fused encoder of this config's run.
pub fn resolve_encoder_checkpoint(cfg: &ExperimentConfig, explicit: Option<&Path>) -> Result<PathBuf> {
    if let Some(p) = explicit {
        return Ok(p.to_path_buf());
    }
    let run_dir = cfg.run_dir();
    let record: RunArtifacts = read_json(&artifacts_path(&run_dir, "pretrain"))
        .map_err(|_| Error::NotFound(format!("pretraining artifacts under {}; run pretrain first", run_dir.display())))?;
    let id = record
        .fused
        .ok_or_else(|| Error::NotFound("fused encoder in pretraining artifacts".into()))?;
    Ok(checkpoint_dir(&run_dir).join(id.0))
}

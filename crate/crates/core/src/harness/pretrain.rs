use std::collections::BTreeMap;
use std::fs;
use std::io::Write;

use rand::seq::SliceRandom;
use serde::Serialize;

use super::{artifacts_path, checkpoint_dir, load_dataset, write_json, ExperimentConfig, RunArtifacts};
use crate::error::{Error, Result};
use crate::model::{train_pass, Encoder, PassSettings, TaskBranch, TaskHeader};
use crate::pretext::{build_permutation_set, PretextSource, TaskId};
use crate::seed::{derive_seed, rng_for, stream};
use crate::store::{save_snapshot, SnapshotId, SnapshotMeta, SnapshotRing};
use crate::tensor::ParameterSet;
use crate::tte::{
    fuse_epoch, impact_trace, mean_fusion, moving_average, select_tte_layers, temporal_gradient, Baseline,
    EnsembleCoefficients, ImpactTrace, LayerPolicy, LossLedger,
};

pub const LOSS_LOG: &str = "loss_log.jsonl";
pub const IMPACT_CSV: &str = "impact.csv";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Serialize)]
struct LossLine {
    epoch: u64,
    task: TaskId,
    loss: f64,
    total_loss: f64,
    alpha: Option<f64>,
    beta: Option<f64>,
}

/// Everything a pretraining run produced, in memory as well as on disk.
#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub artifacts: RunArtifacts,
    pub encoder: Encoder,
    pub ledger: LossLedger,
    pub impact: ImpactTrace,
    /// Encoder emitted after the last epoch.
    pub fused: ParameterSet,
    /// Each task's encoder weights after its last branch pass.
    pub branches: BTreeMap<TaskId, ParameterSet>,
    pub headers: BTreeMap<TaskId, TaskHeader>,
    pub coefficients: Vec<EnsembleCoefficients>,
}

fn policy_for(cfg: &ExperimentConfig, encoder: &Encoder) -> LayerPolicy {
    match &cfg.tte.layers {
        Some(layers) => LayerPolicy::new(layers.iter().cloned()),
        None => select_tte_layers(&encoder.net.arch_description()),
    }
}

fn task_order(cfg: &ExperimentConfig, epoch: u64) -> Vec<TaskId> {
    let mut order = cfg.tasks.clone();
    order.sort();
    order.shuffle(&mut rng_for(cfg.seed, &[stream::TASK_ORDER, epoch]));
    order
}

fn codes(order: &[TaskId]) -> Vec<String> {
    order.iter().map(|t| t.code().to_string()).collect()
}

/// Branch-and-merge pretraining. Each epoch every task trains a clone of the
/// shared encoder (or, for the independent baseline, its own encoder); the
/// clones are then merged by the ensemble or by equal-weight averaging.
pub fn run_pretrain(cfg: &ExperimentConfig) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let run_dir = cfg.run_dir();
    let ckpt = checkpoint_dir(&run_dir);
    fs::create_dir_all(&ckpt).map_err(|e| Error::io(&ckpt, e))?;
    let config_path = run_dir.join(CONFIG_FILE);
    fs::write(&config_path, cfg.to_toml()?).map_err(|e| Error::io(&config_path, e))?;

    let data = load_dataset(cfg)?;
    let encoder = Encoder::new(&cfg.encoder.widths)?;
    let [rows, cols] = cfg.pretext.grid;
    let perms = build_permutation_set(
        (rows, cols),
        cfg.pretext.permutations,
        derive_seed(cfg.seed, &[stream::PERMUTATIONS]),
    )?;
    let mut phi = encoder.init(cfg.seed, cfg.dtype);
    let policy = policy_for(cfg, &encoder);

    let mut branches = BTreeMap::new();
    let mut sources = BTreeMap::new();
    for &task in &cfg.tasks {
        let header = TaskHeader::new(task, &encoder, (data.h, data.w), perms.count(), (rows, cols), cfg.seed, cfg.dtype)?;
        branches.insert(task, TaskBranch::new(header, cfg.learning_rate, cfg.momentum));
        sources.insert(task, PretextSource::new(task, &data, &perms, cfg.seed));
    }
    let independent = !cfg.tte.enabled && cfg.tte.baseline == Baseline::Independent;
    let mut own: BTreeMap<TaskId, ParameterSet> = cfg.tasks.iter().map(|&t| (t, phi.clone())).collect();

    let mut coeffs = cfg.tte.coefficients(&cfg.tasks)?;
    let mut ring = SnapshotRing::new(cfg.tte.history.max(1))?;
    let mut ledger = LossLedger::new();
    let mut impact = ImpactTrace::default();
    let mut history = Vec::new();
    let mut epoch_snapshots = Vec::new();
    let mut emitted = phi.clone();
    let mut log_lines = Vec::new();

    for t in 1..=cfg.epochs as u64 {
        let order = task_order(cfg, t);
        let mut trained = BTreeMap::new();
        let mut losses = BTreeMap::new();
        for &task in &order {
            let wrap = |e: Error| Error::Training {
                epoch: t as usize,
                task: task.to_string(),
                source: Box::new(e),
            };
            let mut params = if independent { own[&task].clone() } else { phi.clone() };
            let settings = PassSettings {
                batch_size: cfg.batch_size,
                seed: cfg.seed,
                epoch: t,
                loss: &cfg.pretext.loss,
                omega: &cfg.omega,
            };
            let branch = branches.get_mut(&task).expect("branch per task");
            let loss = train_pass(&encoder, &mut params, branch, &sources[&task], &settings).map_err(wrap)?;
            log::info!("epoch {t} task {task}: loss {loss:.6}");
            losses.insert(task, loss);
            trained.insert(task, params);
        }
        let total = ledger.record(t, losses.clone(), &cfg.tasks)?;

        let (mu, next_phi) = if cfg.tte.enabled {
            let fused = fuse_epoch(&phi, &trained, &order, &ledger, &coeffs, t, cfg.tte.mode, &policy)?;
            coeffs = fused.coefficients;
            ring.push(t, fused.phi.clone())?;
            emitted = moving_average(&ring)?;
            (fused.impact, fused.phi)
        } else {
            let deltas = trained
                .iter()
                .map(|(k, p)| {
                    let before = if independent { &own[k] } else { &phi };
                    Ok((*k, temporal_gradient(p, before, &policy, cfg.tte.mode)?))
                })
                .collect::<Result<BTreeMap<_, _>>>()?;
            let merged = mean_fusion(&trained.values().collect::<Vec<_>>())?;
            emitted = merged.clone();
            (impact_trace(&deltas)?, merged)
        };
        impact.append(t, &mu);
        history.push(coeffs.clone());
        for (&task, &loss) in &losses {
            log_lines.push(LossLine {
                epoch: t,
                task,
                loss,
                total_loss: total,
                alpha: cfg.tte.enabled.then(|| coeffs.alpha[&task]),
                beta: cfg.tte.enabled.then_some(coeffs.beta),
            });
        }
        let meta = SnapshotMeta::new(t, codes(&order), cfg.seed).with_note("role", "fused");
        epoch_snapshots.push(save_snapshot(&emitted, &meta, &ckpt)?);
        own = trained;
        phi = next_phi;
    }

    let last = cfg.epochs as u64;
    let order = codes(&task_order(cfg, last));
    let mut branch_snapshots = BTreeMap::new();
    let mut header_snapshots = BTreeMap::new();
    for (task, params) in &own {
        let meta = SnapshotMeta::new(last, order.clone(), cfg.seed).with_note("role", format!("branch-{task}"));
        branch_snapshots.insert(task.to_string(), save_snapshot(params, &meta, &ckpt)?);
        let meta = SnapshotMeta::new(last, order.clone(), cfg.seed).with_note("role", format!("header-{task}"));
        header_snapshots.insert(task.to_string(), save_snapshot(&branches[task].header.params, &meta, &ckpt)?);
    }

    let loss_log = run_dir.join(LOSS_LOG);
    let mut text = Vec::new();
    for line in &log_lines {
        serde_json::to_writer(&mut text, line).expect("loss line serializes");
        text.push(b'\n');
    }
    fs::write(&loss_log, text).map_err(|e| Error::io(&loss_log, e))?;
    let impact_path = run_dir.join(IMPACT_CSV);
    write_impact(&impact, &impact_path)?;

    let fused_id: SnapshotId = epoch_snapshots.last().cloned().expect("at least one epoch");
    let artifacts = RunArtifacts {
        run_dir: run_dir.clone(),
        config: config_path,
        fused: Some(fused_id),
        epoch_snapshots,
        branch_snapshots,
        header_snapshots,
        loss_ledger: Some(loss_log),
        impact_trace: Some(impact_path),
        ..RunArtifacts::default()
    };
    write_json(&artifacts_path(&run_dir, "pretrain"), &artifacts)?;
    let headers = branches.into_iter().map(|(k, b)| (k, b.header)).collect();
    Ok(PretrainOutcome {
        artifacts,
        encoder,
        ledger,
        impact,
        fused: emitted,
        branches: own,
        headers,
        coefficients: history,
    })
}

pub fn write_impact(trace: &ImpactTrace, path: &std::path::Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let io = |e: csv::Error| Error::InvalidArgument(format!("writing {}: {e}", path.display()));
    w.write_record(["epoch", "task", "impact"]).map_err(io)?;
    for (e, t, m) in &trace.records {
        w.write_record([e.to_string(), t.to_string(), format!("{m:e}")]).map_err(io)?;
    }
    let mut inner = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
    inner.flush().map_err(|e| Error::io(path, e))
}

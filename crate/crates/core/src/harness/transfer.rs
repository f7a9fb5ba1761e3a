use serde::{Deserialize, Serialize};

use super::{
    artifacts_path, checkpoint_dir, load_dataset, load_snapshot_dir, resolve_encoder_checkpoint, write_json,
    ExperimentConfig, RunArtifacts,
};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Encoder;
use crate::nn::Sgd;
use crate::seed::{rng_for, stream};
use crate::store::{content_digest, save_snapshot, SnapshotMeta};
use crate::transfer::{
    accuracy, evaluate_distill, reduced_alexnet, soft_target_logits, target_widths_for, train_adapter, train_fsp_epoch,
    train_student_epoch, AdapterNetwork, Labeled, TransferMethod,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub method: TransferMethod,
    pub teacher_digest_before: String,
    pub teacher_digest_after: String,
    /// Soft-target loss of the freshly initialized student, when distilling.
    pub initial_distill_loss: Option<f64>,
    pub final_distill_loss: Option<f64>,
    pub adapter_losses: Vec<f64>,
    pub fsp_losses: Vec<f64>,
    pub student_losses: Vec<f64>,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TransferOutcome {
    pub artifacts: RunArtifacts,
    pub report: TransferReport,
}

pub(crate) fn split(data: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    use rand::seq::SliceRandom;
    if data.n < 2 {
        return Err(Error::InvalidArgument("need at least two images to split".into()));
    }
    let mut order: Vec<usize> = (0..data.n).collect();
    order.shuffle(&mut rng_for(seed, &[stream::SPLIT]));
    let cut = ((data.n as f64 * train_fraction).round() as usize).clamp(1, data.n - 1);
    Ok((data.subset(&order[..cut]), data.subset(&order[cut..])))
}

/// Trains a reduced AlexNet target from the frozen encoder, by soft targets
/// through a label-trained adapter or by FSP matching, then label
/// fine-tuning. The encoder snapshot is only read.
pub fn run_transfer(cfg: &ExperimentConfig) -> Result<TransferOutcome> {
    cfg.validate()?;
    let tc = &cfg.transfer;
    let teacher_path = resolve_encoder_checkpoint(cfg, tc.checkpoint.as_deref())?;
    let teacher_params = load_snapshot_dir(&teacher_path)?;
    let encoder = Encoder::new(&cfg.encoder.widths)?;
    if teacher_params.arch_id() != encoder.arch_id() {
        return Err(Error::Misaligned(format!(
            "checkpoint is `{}`, config describes `{}`",
            teacher_params.arch_id(),
            encoder.arch_id()
        )));
    }
    let digest_before = content_digest(&teacher_params);

    let data = load_dataset(cfg)?;
    let labels = data.require_labels()?;
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let (train, test) = split(&data, cfg.eval.probe_config.train_fraction, cfg.seed)?;
    let (xtr, ytr) = (train.all(), train.require_labels()?.to_vec());
    let (xte, yte) = (test.all(), test.require_labels()?.to_vec());
    let labeled = Labeled { x: &xtr, labels: &ytr };

    let student = reduced_alexnet(target_widths_for(&encoder), tc.target_hidden, classes, (data.h, data.w))?;
    let mut params = student.init_params(&mut rng_for(cfg.seed, &[stream::TRANSFER, 5]), cfg.dtype);
    let mut opt = Sgd::new(tc.learning_rate, cfg.momentum);

    let mut report = TransferReport {
        method: tc.method,
        teacher_digest_before: digest_before,
        teacher_digest_after: String::new(),
        initial_distill_loss: None,
        final_distill_loss: None,
        adapter_losses: Vec::new(),
        fsp_losses: Vec::new(),
        student_losses: Vec::new(),
        train_accuracy: 0.0,
        test_accuracy: 0.0,
    };
    let mut adapter_params = None;
    match tc.method {
        TransferMethod::SoftTargets => {
            let latent = encoder.latent_dim(data.h, data.w);
            let mut adapter = AdapterNetwork::new(latent, &tc.adapter_dims, classes, cfg.seed, cfg.dtype)?;
            report.adapter_losses = train_adapter(
                &encoder,
                &teacher_params,
                &mut adapter,
                &labeled,
                tc.adapter_epochs,
                cfg.batch_size,
                tc.learning_rate,
                cfg.seed,
            )?;
            let probs = soft_target_logits(&encoder, &teacher_params, &adapter, &xtr)?;
            let teacher = (tc.distill_weight > 0.0).then_some((&probs, tc.temperature, tc.distill_weight));
            report.initial_distill_loss = Some(evaluate_distill(&student, &params, &xtr, &probs, tc.temperature)?);
            for e in 0..tc.epochs {
                let l = train_student_epoch(&student, &mut params, &mut opt, &labeled, teacher, cfg.batch_size, cfg.seed, e as u64)?;
                log::info!("transfer epoch {e}: loss {l:.6}");
                report.student_losses.push(l);
            }
            report.final_distill_loss = Some(evaluate_distill(&student, &params, &xtr, &probs, tc.temperature)?);
            adapter_params = Some(adapter.params);
        }
        TransferMethod::Fsp => {
            let mut fsp_opt = Sgd::new(tc.learning_rate, cfg.momentum);
            for e in 0..tc.fsp_epochs {
                let l = train_fsp_epoch(
                    &encoder,
                    &teacher_params,
                    &student,
                    &mut params,
                    &mut fsp_opt,
                    tc.fsp_pairs,
                    &labeled,
                    cfg.batch_size,
                    cfg.seed,
                    e as u64,
                )?;
                log::info!("fsp epoch {e}: loss {l:.6}");
                report.fsp_losses.push(l);
            }
            for e in 0..tc.epochs {
                let l = train_student_epoch(&student, &mut params, &mut opt, &labeled, None, cfg.batch_size, cfg.seed, e as u64)?;
                report.student_losses.push(l);
            }
        }
    }
    report.train_accuracy = accuracy(&student, &params, &xtr, &ytr)?;
    report.test_accuracy = accuracy(&student, &params, &xte, &yte)?;
    report.teacher_digest_after = content_digest(&load_snapshot_dir(&teacher_path)?);
    if report.teacher_digest_after != report.teacher_digest_before {
        return Err(Error::Corrupt {
            path: teacher_path,
            reason: "teacher checkpoint changed during transfer".into(),
        });
    }

    let run_dir = cfg.run_dir();
    let ckpt = checkpoint_dir(&run_dir);
    let config_path = run_dir.join("config-transfer.toml");
    std::fs::create_dir_all(&ckpt).map_err(|e| Error::io(&ckpt, e))?;
    std::fs::write(&config_path, cfg.to_toml()?).map_err(|e| Error::io(&config_path, e))?;
    let order = cfg.tasks.iter().map(|t| t.code().to_string()).collect::<Vec<_>>();
    let meta = SnapshotMeta::new(tc.epochs as u64, order.clone(), cfg.seed).with_note("role", "target");
    let target = save_snapshot(&params, &meta, &ckpt)?;
    let mut header_snapshots = std::collections::BTreeMap::new();
    if let Some(a) = &adapter_params {
        let meta = SnapshotMeta::new(tc.adapter_epochs as u64, order, cfg.seed).with_note("role", "adapter");
        header_snapshots.insert("adapter".to_string(), save_snapshot(a, &meta, &ckpt)?);
    }
    let report_path = run_dir.join("transfer_report.json");
    write_json(&report_path, &report)?;
    let artifacts = RunArtifacts {
        run_dir: run_dir.clone(),
        config: config_path,
        target: Some(target),
        header_snapshots,
        reports: vec![report_path],
        ..RunArtifacts::default()
    };
    write_json(&artifacts_path(&run_dir, "transfer"), &artifacts)?;
    Ok(TransferOutcome { artifacts, report })
}

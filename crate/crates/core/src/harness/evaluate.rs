use std::fmt::Write as _;
use std::fs;

use serde::{Deserialize, Serialize};

use super::{
    artifacts_path, load_dataset, load_snapshot_dir, resolve_encoder_checkpoint, write_json, ExperimentConfig,
    RunArtifacts,
};
use crate::error::{Error, Result};
use crate::eval::{cluster_metrics, dec_fit, embed, linear_probe, retrieval_grid, save_png, ClusterReport, ProbeReport};
use crate::model::Encoder;
use crate::seed::derive_seed;
use crate::tensor::ParameterSet;

pub const REPORT_FILE: &str = "eval_report.tsv";
pub const RETRIEVAL_FILE: &str = "retrieval.png";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub probe: Option<ProbeReport>,
    /// The same probe on a randomly initialized encoder.
    pub random_probe: Option<ProbeReport>,
    pub cluster: Option<ClusterReport>,
    pub dec_iterations: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub artifacts: RunArtifacts,
    pub report: EvalReport,
}

fn table(r: &EvalReport) -> String {
    let mut out = String::from("metric\tvalue\n");
    let mut row = |k: &str, v: f64| writeln!(out, "{k}\t{v:.6}").expect("write to string");
    if let Some(p) = &r.probe {
        row("probe_train_accuracy", p.train_accuracy);
        row("probe_test_accuracy", p.test_accuracy);
    }
    if let Some(p) = &r.random_probe {
        row("random_probe_test_accuracy", p.test_accuracy);
    }
    if let Some(c) = &r.cluster {
        row("nmi", c.nmi);
        row("ari", c.ari);
        row("recall_at_k", c.recall_at_k);
    }
    if let Some(i) = r.dec_iterations {
        row("dec_iterations", i as f64);
    }
    out
}

/// Probe and/or clustering evaluation of an encoder snapshot, with a
/// retrieval grid when clustering is requested.
pub fn run_eval(cfg: &ExperimentConfig) -> Result<EvalOutcome> {
    cfg.validate()?;
    let ec = &cfg.eval;
    let path = resolve_encoder_checkpoint(cfg, ec.checkpoint.as_deref())?;
    let params = load_snapshot_dir(&path)?;
    let encoder = Encoder::new(&cfg.encoder.widths)?;
    if params.arch_id() != encoder.arch_id() {
        return Err(Error::Misaligned(format!(
            "checkpoint is `{}`, config describes `{}`",
            params.arch_id(),
            encoder.arch_id()
        )));
    }
    let data = load_dataset(cfg)?;
    let labels = data.require_labels()?;
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let z = embed(&encoder, &params, &data)?;

    let run_dir = cfg.run_dir();
    fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
    let mut reports = Vec::new();
    let mut report = EvalReport {
        probe: None,
        random_probe: None,
        cluster: None,
        dec_iterations: None,
    };
    if ec.probe {
        report.probe = Some(linear_probe(&z, labels, classes, &ec.probe_config, cfg.seed)?);
        let random: ParameterSet = encoder.init(derive_seed(cfg.seed, &[u64::MAX]), cfg.dtype);
        let zr = embed(&encoder, &random, &data)?;
        report.random_probe = Some(linear_probe(&zr, labels, classes, &ec.probe_config, cfg.seed)?);
    }
    if ec.cluster {
        let k = ec.clusters.unwrap_or(classes);
        let fit = dec_fit(&z, k, &ec.dec, cfg.seed)?;
        report.cluster = Some(cluster_metrics(labels, &fit.labels, &z, ec.recall_k)?);
        report.dec_iterations = Some(fit.iterations);
        if ec.retrieval_queries > 0 {
            let step = (data.n / ec.retrieval_queries).max(1);
            let queries: Vec<usize> = (0..data.n).step_by(step).take(ec.retrieval_queries).collect();
            let grid = retrieval_grid(&data, &z, &queries, ec.recall_k)?;
            let png = run_dir.join(RETRIEVAL_FILE);
            save_png(&grid, &png)?;
            reports.push(png);
        }
    }
    let tsv = run_dir.join(REPORT_FILE);
    fs::write(&tsv, table(&report)).map_err(|e| Error::io(&tsv, e))?;
    let json = run_dir.join("eval_report.json");
    write_json(&json, &report)?;
    reports.splice(0..0, [tsv, json]);
    let config_path = run_dir.join("config-eval.toml");
    fs::write(&config_path, cfg.to_toml()?).map_err(|e| Error::io(&config_path, e))?;
    let artifacts = RunArtifacts {
        run_dir: run_dir.clone(),
        config: config_path,
        reports,
        ..RunArtifacts::default()
    };
    write_json(&artifacts_path(&run_dir, "eval"), &artifacts)?;
    Ok(EvalOutcome { artifacts, report })
}

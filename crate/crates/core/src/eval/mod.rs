//! Downstream evaluation of an encoder: linear probe accuracy, DEC
//! clustering with NMI/ARI/recall, and nearest-neighbour retrieval grids.

pub mod dec;
mod metrics;

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Encoder;
use crate::nn::{Batch, Gradients, Layer, Network, Sgd};
use crate::seed::{rng_for, stream};
use crate::tensor::{DType, ParameterSet, Tensor};
use crate::transfer::{cross_entropy_with_grad, encode};

pub use dec::{
    dec_fit, dec_objective_and_grad, dec_soft_assign, dec_target_distribution, hard_labels, kmeans_init,
    ClusterState, DecConfig, DecOutcome, DEFAULT_NU,
};
pub use metrics::{ari, cluster_metrics, nearest_neighbours, nmi, recall_at_k, ClusterReport, DEFAULT_RECALL_K};

/// Index of the largest value; the first one wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub train_fraction: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 30,
            learning_rate: 0.05,
            batch_size: 64,
            train_fraction: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Encoder snapshot directory; defaults to the run's fused encoder.
    pub checkpoint: Option<std::path::PathBuf>,
    pub probe: bool,
    pub cluster: bool,
    pub clusters: Option<usize>,
    pub recall_k: usize,
    pub retrieval_queries: usize,
    pub probe_config: ProbeConfig,
    pub dec: DecConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            checkpoint: None,
            probe: true,
            cluster: true,
            clusters: None,
            recall_k: DEFAULT_RECALL_K,
            retrieval_queries: 8,
            probe_config: ProbeConfig::default(),
            dec: DecConfig::default(),
        }
    }
}

/// Flattened encoder latents as an `[n, d]` tensor.
pub fn embed(encoder: &Encoder, params: &ParameterSet, data: &Dataset) -> Result<Tensor> {
    let z = encode(encoder, params, &data.all())?;
    let d = z.sample_len();
    Tensor::new(vec![z.n, d], z.data, DType::F64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub losses: Vec<f64>,
}

fn standardize(rows: &mut [f64], d: usize, train: &[usize]) {
    let n = train.len().max(1) as f64;
    let mut mean = vec![0.0; d];
    for &i in train {
        mean.iter_mut().zip(&rows[i * d..(i + 1) * d]).for_each(|(m, x)| *m += x / n);
    }
    let mut var = vec![0.0; d];
    for &i in train {
        for (j, x) in rows[i * d..(i + 1) * d].iter().enumerate() {
            var[j] += (x - mean[j]).powi(2) / n;
        }
    }
    let scale: Vec<f64> = var.iter().map(|v| if *v > 1e-12 { 1.0 / v.sqrt() } else { 0.0 }).collect();
    for row in rows.chunks_exact_mut(d) {
        for j in 0..d {
            row[j] = (row[j] - mean[j]) * scale[j];
        }
    }
}

fn probe_accuracy(net: &Network, params: &ParameterSet, x: &Batch, labels: &[usize]) -> Result<f64> {
    let out = net.infer(params, x)?;
    let c = out.sample_len();
    let hits = out
        .data
        .chunks_exact(c)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    Ok(hits as f64 / labels.len().max(1) as f64)
}

fn rows_of(features: &[f64], d: usize, idx: &[usize]) -> Batch {
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        data.extend_from_slice(&features[i * d..(i + 1) * d]);
    }
    Batch { n: idx.len(), h: 1, w: 1, c: d, data }
}

/// Softmax regression on frozen, standardized features. Standardization uses
/// training-split statistics only.
pub fn linear_probe(features: &Tensor, labels: &[usize], classes: usize, cfg: &ProbeConfig, seed: u64) -> Result<ProbeReport> {
    let (n, d) = match features.shape() {
        [n, d] => (*n, *d),
        s => return Err(Error::Shape(format!("features must be [n, d], got {s:?}"))),
    };
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} samples", labels.len())));
    }
    if !(cfg.train_fraction > 0.0 && cfg.train_fraction < 1.0) {
        return Err(Error::Config("probe train_fraction must lie in (0, 1)".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::InvalidArgument(format!("label {bad} outside {classes} classes")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, &[stream::SPLIT]));
    let cut = ((n as f64 * cfg.train_fraction).round() as usize).clamp(1, n - 1);
    let (train, test) = order.split_at(cut);

    let mut x = features.data().to_vec();
    standardize(&mut x, d, train);

    let net = Network::new(format!("probe-{d}-{classes}"), vec![Layer::dense("probe", d, classes)]);
    let mut params = net.init_params(&mut rng_for(seed, &[stream::PROBE, 0]), DType::F64);
    let mut opt = Sgd::new(cfg.learning_rate, 0.9);
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut idx = train.to_vec();
    for e in 0..cfg.epochs {
        idx.shuffle(&mut rng_for(seed, &[stream::PROBE, 1, e as u64]));
        let mut total = 0.0;
        for chunk in idx.chunks(cfg.batch_size.max(1)) {
            let xb = rows_of(&x, d, chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let tape = net.forward(&params, &xb)?;
            let (l, g) = cross_entropy_with_grad(tape.output(), &yb)?;
            let mut grads = Gradients::zeros_for(&params);
            net.backward(&params, &tape, g, &mut grads, false, &[])?;
            opt.step(&mut params, &grads)?;
            total += l * chunk.len() as f64;
        }
        losses.push(total / train.len() as f64);
    }
    let pick = |ids: &[usize]| (rows_of(&x, d, ids), ids.iter().map(|&i| labels[i]).collect::<Vec<_>>());
    let (xt, yt) = pick(train);
    let (xs, ys) = pick(test);
    Ok(ProbeReport {
        train_accuracy: probe_accuracy(&net, &params, &xt, &yt)?,
        test_accuracy: probe_accuracy(&net, &params, &xs, &ys)?,
        losses,
    })
}

/// One row per query: the query image followed by its `k` nearest neighbours
/// in embedding space, separated by a 2-pixel gap.
pub fn retrieval_grid(data: &Dataset, embeddings: &Tensor, queries: &[usize], k: usize) -> Result<image::RgbImage> {
    let d = match embeddings.shape() {
        [n, d] if *n == data.n => *d,
        s => return Err(Error::Shape(format!("embeddings {s:?} for {} images", data.n))),
    };
    if k == 0 || k >= data.n {
        return Err(Error::InvalidArgument(format!("k must be in 1..{}, got {k}", data.n)));
    }
    if let Some(&q) = queries.iter().find(|&&q| q >= data.n) {
        return Err(Error::InvalidArgument(format!("query {q} outside {} images", data.n)));
    }
    const GAP: usize = 2;
    let (h, w) = (data.h, data.w);
    let width = (k + 1) * (w + GAP) + GAP;
    let height = queries.len() * (h + GAP) + GAP;
    let mut img = image::RgbImage::from_pixel(width as u32, height as u32, image::Rgb([255, 255, 255]));
    for (row, &q) in queries.iter().enumerate() {
        let mut items = vec![q];
        items.extend(nearest_neighbours(embeddings.data(), d, q, k));
        for (col, &i) in items.iter().enumerate() {
            let (ox, oy) = (GAP + col * (w + GAP), GAP + row * (h + GAP));
            for (p, px) in data.image(i).chunks_exact(3).enumerate() {
                let rgb = [0, 1, 2].map(|c| (px[c].clamp(0.0, 1.0) * 255.0).round() as u8);
                img.put_pixel((ox + p % w) as u32, (oy + p / w) as u32, image::Rgb(rgb));
            }
        }
    }
    Ok(img)
}

pub fn save_png(img: &image::RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::InvalidArgument(format!("cannot encode {}: {other}", path.display())),
    })
}

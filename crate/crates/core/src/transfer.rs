//! Knowledge transfer from a frozen encoder: soft targets through an adapter
//! head, and flow-of-solution (FSP) matrix matching.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Encoder;
use crate::nn::{softmax_in_place, Batch, Gradients, Layer, Network, Op, Sgd, Tape};
use crate::seed::{rng_for, stream};
use crate::tensor::{DType, ParameterSet, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransferMethod {
    #[default]
    SoftTargets,
    Fsp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferConfig {
    pub method: TransferMethod,
    pub temperature: f64,
    pub fsp_pairs: usize,
    /// Weight of the distillation term next to label cross-entropy; 0 turns
    /// soft-target training into plain fine-tuning.
    pub distill_weight: f64,
    /// Hidden sizes of the adapter; the class count is appended.
    pub adapter_dims: Vec<usize>,
    pub adapter_epochs: usize,
    /// FSP matching epochs before label fine-tuning.
    pub fsp_epochs: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub target_hidden: usize,
    /// Snapshot directory of the teacher encoder; defaults to the run's fused encoder.
    pub checkpoint: Option<std::path::PathBuf>,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig {
            method: TransferMethod::SoftTargets,
            temperature: 4.0,
            fsp_pairs: 5,
            distill_weight: 1.0,
            adapter_dims: vec![128, 256],
            adapter_epochs: 5,
            fsp_epochs: 3,
            epochs: 5,
            learning_rate: 0.01,
            target_hidden: 64,
            checkpoint: None,
        }
    }
}

impl TransferConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.distill_weight < 0.0 {
            return Err(Error::Config("distill_weight must be non-negative".into()));
        }
        if self.adapter_dims.contains(&0) {
            return Err(Error::Config("adapter dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Dense head on the flattened encoder latent.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterNetwork {
    pub net: Network,
    pub params: ParameterSet,
    pub dims: Vec<usize>,
}

impl AdapterNetwork {
    pub fn new(latent_dim: usize, hidden: &[usize], classes: usize, seed: u64, dtype: DType) -> Result<Self> {
        if latent_dim == 0 || classes == 0 || hidden.contains(&0) {
            return Err(Error::Config("adapter dimensions must be positive".into()));
        }
        let dims: Vec<usize> = hidden.iter().copied().chain([classes]).collect();
        let mut layers = Vec::new();
        let mut din = latent_dim;
        for (i, &d) in dims.iter().enumerate() {
            let s = i + 1;
            layers.push(Layer::dense(format!("add{s}"), din, d));
            if s < dims.len() {
                layers.push(Layer::new(format!("add{s}_relu"), Op::Relu));
            }
            din = d;
        }
        let id = dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("-");
        let net = Network::new(format!("adapter-{latent_dim}-{id}"), layers);
        let params = net.init_params(&mut rng_for(seed, &[stream::TRANSFER, 1]), dtype);
        Ok(AdapterNetwork { net, params, dims })
    }

    pub fn input_dim(&self) -> usize {
        match self.net.layers[0].op {
            Op::Dense { din, .. } => din,
            _ => unreachable!("adapter starts with a dense layer"),
        }
    }
}

fn flatten(b: Batch) -> Result<Batch> {
    let per = b.sample_len();
    b.reshape_flat(per)
}

trait Flat {
    fn reshape_flat(self, per: usize) -> Result<Batch>;
}

impl Flat for Batch {
    fn reshape_flat(self, per: usize) -> Result<Batch> {
        let n = self.n;
        self.reshape(n, 1, 1, per)
    }
}

/// Flattened encoder latents; the encoder is only read.
pub fn encode(encoder: &Encoder, enc_params: &ParameterSet, x: &Batch) -> Result<Batch> {
    flatten(encoder.net.infer(enc_params, x)?)
}

fn softmax_rows(mut b: Batch) -> Batch {
    let c = b.sample_len();
    b.data.chunks_exact_mut(c).for_each(softmax_in_place);
    b
}

/// Class distribution of the frozen encoder followed by the adapter.
pub fn soft_target_logits(
    encoder: &Encoder,
    enc_params: &ParameterSet,
    adapter: &AdapterNetwork,
    x: &Batch,
) -> Result<Batch> {
    let z = encode(encoder, enc_params, x)?;
    if z.sample_len() != adapter.input_dim() {
        return Err(Error::Shape(format!(
            "latent has {} features, adapter expects {}",
            z.sample_len(),
            adapter.input_dim()
        )));
    }
    Ok(softmax_rows(adapter.net.infer(&adapter.params, &z)?))
}

/// Mean cross-entropy of logits against labels, with the logit gradient.
pub fn cross_entropy_with_grad(logits: &Batch, labels: &[usize]) -> Result<(f64, Batch)> {
    let c = logits.sample_len();
    if labels.len() != logits.n {
        return Err(Error::Shape(format!("{} labels for {} rows", labels.len(), logits.n)));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range for {c} classes")));
    }
    let n = logits.n as f64;
    let mut grad = softmax_rows(logits.clone());
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = &mut grad.data[i * c..(i + 1) * c];
        loss -= row[y].max(f64::MIN_POSITIVE).ln();
        row[y] -= 1.0;
        row.iter_mut().for_each(|v| *v /= n);
    }
    Ok((loss / n, grad))
}

fn check_pair(teacher: &Batch, student: &Batch) -> Result<()> {
    if teacher.n != student.n || teacher.sample_len() != student.sample_len() {
        return Err(Error::Shape(format!(
            "teacher {:?} and student {:?} disagree",
            teacher.shape(),
            student.shape()
        )));
    }
    Ok(())
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {t}")));
    }
    Ok(())
}

/// `p^(1/T)` renormalized, computed in log space.
fn soften(p: &[f64], t: f64) -> Vec<f64> {
    let logs: Vec<f64> = p.iter().map(|&v| if v > 0.0 { v.ln() / t } else { f64::NEG_INFINITY }).collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logs.iter().map(|&l| (l - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn log_softmax(z: &[f64], t: f64) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = z.iter().map(|v| ((v - max) / t).exp()).sum::<f64>().ln();
    z.iter().map(|v| (v - max) / t - lse).collect()
}

/// `T^2` times the mean cross-entropy between softened teacher
/// probabilities and softened student logits, with the logit gradient.
pub fn distill_loss_and_grad(teacher: &Batch, student_logits: &Batch, temperature: f64) -> Result<(f64, Batch)> {
    check_pair(teacher, student_logits)?;
    check_temperature(temperature)?;
    let c = teacher.sample_len();
    let n = teacher.n as f64;
    let t2 = temperature * temperature;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(student_logits.data.len());
    for i in 0..teacher.n {
        let p = soften(teacher.sample(i), temperature);
        let lq = log_softmax(student_logits.sample(i), temperature);
        loss -= p.iter().zip(&lq).filter(|(p, _)| **p > 0.0).map(|(p, l)| p * l).sum::<f64>();
        grad.extend(p.iter().zip(&lq).map(|(p, l)| temperature * (l.exp() - p) / n));
    }
    debug_assert_eq!(grad.len(), teacher.n * c);
    Ok((
        t2 * loss / n,
        Batch {
            data: grad,
            ..student_logits.clone()
        },
    ))
}

pub fn distill_loss(teacher: &Batch, student_logits: &Batch, temperature: f64) -> Result<f64> {
    Ok(distill_loss_and_grad(teacher, student_logits, temperature)?.0)
}

/// The minimum of [`distill_loss`] over student logits: `T^2` times the
/// mean entropy of the softened teacher.
pub fn softened_entropy(teacher: &Batch, temperature: f64) -> Result<f64> {
    check_temperature(temperature)?;
    let mut h = 0.0;
    for i in 0..teacher.n {
        let p = soften(teacher.sample(i), temperature);
        h -= p.iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum::<f64>();
    }
    Ok(temperature * temperature * h / teacher.n as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FspMatrix {
    pub values: Tensor,
    pub pair: (String, String),
}

fn fsp_raw(f1: &[f64], f2: &[f64], hw: usize, m: usize, n: usize) -> Vec<f64> {
    let mut g = vec![0.0; m * n];
    crate::nn::gemm_tn(m, hw, n, f1, f2, &mut g);
    g.iter_mut().for_each(|v| *v /= hw as f64);
    g
}

/// `G[i, j] = mean over positions of f1[s, i] * f2[s, j]`.
pub fn fsp_matrix(f1: &Tensor, f2: &Tensor) -> Result<FspMatrix> {
    let (h1, w1, m) = match f1.shape() {
        [h, w, m] => (*h, *w, *m),
        s => return Err(Error::Shape(format!("feature maps must be [h, w, c], got {s:?}"))),
    };
    let (h2, w2, n) = match f2.shape() {
        [h, w, n] => (*h, *w, *n),
        s => return Err(Error::Shape(format!("feature maps must be [h, w, c], got {s:?}"))),
    };
    if (h1, w1) != (h2, w2) {
        return Err(Error::Shape(format!("spatial extents {h1}x{w1} and {h2}x{w2} differ")));
    }
    let g = fsp_raw(f1.data(), f2.data(), h1 * w1, m, n);
    Ok(FspMatrix {
        values: Tensor::new(vec![m, n], g, DType::F64)?,
        pair: ("f1".into(), "f2".into()),
    })
}

fn check_fsp_lists(source: &[FspMatrix], target: &[FspMatrix]) -> Result<()> {
    if source.len() != target.len() || source.is_empty() {
        return Err(Error::Shape(format!(
            "{} source and {} target FSP matrices",
            source.len(),
            target.len()
        )));
    }
    for (s, t) in source.iter().zip(target) {
        if s.values.shape() != t.values.shape() {
            return Err(Error::Shape(format!(
                "FSP shapes {:?} and {:?} differ",
                s.values.shape(),
                t.values.shape()
            )));
        }
    }
    Ok(())
}

/// Mean over pairs of the mean squared element difference, with the
/// gradient with respect to each target matrix.
pub fn fsp_transfer_loss_and_grad(source: &[FspMatrix], target: &[FspMatrix]) -> Result<(f64, Vec<Vec<f64>>)> {
    check_fsp_lists(source, target)?;
    let pairs = source.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(target.len());
    for (s, t) in source.iter().zip(target) {
        let e = s.values.len() as f64;
        let mut sq = 0.0;
        grads.push(
            t.values
                .data()
                .iter()
                .zip(s.values.data())
                .map(|(a, b)| {
                    sq += (a - b) * (a - b);
                    2.0 * (a - b) / e / pairs
                })
                .collect(),
        );
        loss += sq / e;
    }
    Ok((loss / pairs, grads))
}

pub fn fsp_transfer_loss(source: &[FspMatrix], target: &[FspMatrix]) -> Result<f64> {
    Ok(fsp_transfer_loss_and_grad(source, target)?.0)
}

/// Five 3x3 convolutions (pooling after the first, second and fifth) and
/// three dense layers.
pub fn reduced_alexnet(widths: [usize; 5], hidden: usize, classes: usize, input: (usize, usize)) -> Result<Network> {
    if widths.contains(&0) || hidden == 0 || classes == 0 {
        return Err(Error::Config("target network sizes must be positive".into()));
    }
    let (h, w) = input;
    if h % 8 != 0 || w % 8 != 0 {
        return Err(Error::Config(format!("target input {h}x{w} must be divisible by 8")));
    }
    let mut layers = Vec::new();
    let mut cin = 3;
    for (i, &c) in widths.iter().enumerate() {
        let s = i + 1;
        layers.push(Layer::conv(format!("conv{s}"), cin, c, 3));
        layers.push(Layer::new(format!("relu{s}"), Op::Relu));
        if matches!(s, 1 | 2 | 5) {
            layers.push(Layer::new(format!("pool{s}"), Op::MaxPool2));
        }
        cin = c;
    }
    let flat = (h / 8) * (w / 8) * widths[4];
    layers.push(Layer::dense("fc6", flat, hidden));
    layers.push(Layer::new("relu6", Op::Relu));
    layers.push(Layer::dense("fc7", hidden, hidden));
    layers.push(Layer::new("relu7", Op::Relu));
    layers.push(Layer::dense("fc8", hidden, classes));
    let id = widths.iter().map(|w| w.to_string()).collect::<Vec<_>>().join("-");
    Ok(Network::new(format!("alexnet-w{id}-h{hidden}-k{classes}"), layers))
}

/// Target widths whose channel changes line up with the encoder's.
pub fn target_widths_for(encoder: &Encoder) -> [usize; 5] {
    let w = encoder.widths();
    let at = |i: usize| w[i.min(w.len() - 1)];
    [at(0), at(1), at(2), at(2), at(3)]
}

/// Convolutions that change the channel count, as activation indices of
/// their input and (pre-activation) output.
pub fn fsp_points(net: &Network) -> Vec<(usize, usize, String)> {
    net.layers
        .iter()
        .enumerate()
        .filter_map(|(i, l)| match l.op {
            Op::Conv { cin, cout, .. } if cin != cout => Some((i, i + 1, l.name.clone())),
            _ => None,
        })
        .collect()
}

/// Matched `(teacher, student)` points, shallow to deep, truncated to the
/// shorter list and to `wanted`.
pub fn match_fsp_points(
    teacher: &Network,
    student: &Network,
    wanted: usize,
) -> Result<Vec<((usize, usize, String), (usize, usize, String))>> {
    let (t, s) = (fsp_points(teacher), fsp_points(student));
    let n = t.len().min(s.len()).min(wanted);
    if n == 0 {
        return Err(Error::InvalidArgument("no FSP layer pairs to match".into()));
    }
    if n != wanted {
        log::warn!("using {n} FSP pairs instead of the configured {wanted}");
    }
    Ok(t.into_iter().zip(s).take(n).collect())
}

fn fsp_from_tape(tape: &Tape, sample: usize, (i, o, name): &(usize, usize, String)) -> Result<FspMatrix> {
    let (a, b) = (tape.activation(*i), tape.activation(*o));
    let hw = a.h * a.w;
    let g = fsp_raw(a.sample(sample), b.sample(sample), hw, a.c, b.c);
    Ok(FspMatrix {
        values: Tensor::new(vec![a.c, b.c], g, DType::F64)?,
        pair: (format!("{name}:in"), format!("{name}:out")),
    })
}

/// Per-sample teacher FSP matrices for a batch.
pub fn teacher_fsp(
    teacher: &Network,
    teacher_params: &ParameterSet,
    points: &[(usize, usize, String)],
    x: &Batch,
) -> Result<Vec<Vec<FspMatrix>>> {
    let tape = teacher.forward(teacher_params, x)?;
    (0..x.n)
        .map(|s| points.iter().map(|p| fsp_from_tape(&tape, s, p)).collect())
        .collect()
}

/// Batch-mean FSP loss of the student against precomputed teacher matrices,
/// with gradients for the student parameters.
pub fn fsp_stage_loss(
    student: &Network,
    student_params: &ParameterSet,
    points: &[(usize, usize, String)],
    teacher: &[Vec<FspMatrix>],
    x: &Batch,
) -> Result<(f64, Gradients)> {
    if teacher.len() != x.n {
        return Err(Error::Shape(format!("{} teacher entries for {} samples", teacher.len(), x.n)));
    }
    let tape = student.forward(student_params, x)?;
    let mut inject: Vec<(usize, Vec<f64>)> = Vec::new();
    for p in points {
        inject.push((p.0, vec![0.0; tape.activation(p.0).data.len()]));
        inject.push((p.1, vec![0.0; tape.activation(p.1).data.len()]));
    }
    let n = x.n as f64;
    let mut loss = 0.0;
    for (s, t_mats) in teacher.iter().enumerate() {
        let mats: Vec<FspMatrix> = points.iter().map(|p| fsp_from_tape(&tape, s, p)).collect::<Result<_>>()?;
        let (l, g_mats) = fsp_transfer_loss_and_grad(t_mats, &mats)?;
        loss += l / n;
        for (k, (p, dg)) in points.iter().zip(&g_mats).enumerate() {
            let (a, b) = (tape.activation(p.0), tape.activation(p.1));
            let (hw, m, c) = (a.h * a.w, a.c, b.c);
            let (fa, fb) = (a.sample(s), b.sample(s));
            // dF1 = F2 dG^T / hw, dF2 = F1 dG / hw
            let mut da = vec![0.0; hw * m];
            crate::nn::gemm_nt(hw, c, m, fb, dg, &mut da);
            let mut db = vec![0.0; hw * c];
            crate::nn::gemm_nn(hw, m, c, fa, dg, &mut db);
            let scale = 1.0 / (hw as f64 * n);
            for (dst, v) in inject[2 * k].1[s * hw * m..(s + 1) * hw * m].iter_mut().zip(da) {
                *dst += v * scale;
            }
            for (dst, v) in inject[2 * k + 1].1[s * hw * c..(s + 1) * hw * c].iter_mut().zip(db) {
                *dst += v * scale;
            }
        }
    }
    let out = tape.output();
    let zero = Batch::zeros(out.n, out.h, out.w, out.c);
    let refs: Vec<(usize, &[f64])> = inject.iter().map(|(i, g)| (*i, g.as_slice())).collect();
    let mut grads = Gradients::zeros_for(student_params);
    student.backward(student_params, &tape, zero, &mut grads, false, &refs)?;
    Ok((loss, grads))
}

/// Labeled images used by the transfer and probe stages.
pub struct Labeled<'a> {
    pub x: &'a Batch,
    pub labels: &'a [usize],
}

impl Labeled<'_> {
    fn batches(&self, batch_size: usize, seed: u64, path: &[u64]) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.x.n).collect();
        order.shuffle(&mut rng_for(seed, path));
        order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
    }

    fn gather(&self, idx: &[usize]) -> (Batch, Vec<usize>) {
        let l = self.x.sample_len();
        let mut data = Vec::with_capacity(idx.len() * l);
        for &i in idx {
            data.extend_from_slice(self.x.sample(i));
        }
        (
            Batch {
                n: idx.len(),
                data,
                ..self.x.clone()
            },
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }
}

/// Trains the adapter on labels with cross-entropy; the encoder is read-only.
pub fn train_adapter(
    encoder: &Encoder,
    enc_params: &ParameterSet,
    adapter: &mut AdapterNetwork,
    data: &Labeled<'_>,
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    let z = encode(encoder, enc_params, data.x)?;
    let feats = Labeled { x: &z, labels: data.labels };
    let mut opt = Sgd::new(learning_rate, 0.9);
    let mut history = Vec::with_capacity(epochs);
    for e in 0..epochs {
        let mut total = 0.0;
        for idx in feats.batches(batch_size, seed, &[stream::TRANSFER, 2, e as u64]) {
            let (xb, yb) = feats.gather(&idx);
            let tape = adapter.net.forward(&adapter.params, &xb)?;
            let (l, g) = cross_entropy_with_grad(tape.output(), &yb)?;
            let mut grads = Gradients::zeros_for(&adapter.params);
            adapter.net.backward(&adapter.params, &tape, g, &mut grads, false, &[])?;
            opt.step(&mut adapter.params, &grads)?;
            total += l * idx.len() as f64;
        }
        history.push(total / data.x.n as f64);
    }
    Ok(history)
}

/// Mean distillation loss of `student` against fixed teacher probabilities.
pub fn evaluate_distill(
    student: &Network,
    params: &ParameterSet,
    x: &Batch,
    teacher: &Batch,
    temperature: f64,
) -> Result<f64> {
    let logits = flatten(student.infer(params, x)?)?;
    distill_loss(teacher, &logits, temperature)
}

/// One epoch of `distill_weight * distill + cross-entropy` on the student.
#[allow(clippy::too_many_arguments)]
pub fn train_student_epoch(
    student: &Network,
    params: &mut ParameterSet,
    opt: &mut Sgd,
    data: &Labeled<'_>,
    teacher: Option<(&Batch, f64, f64)>,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<f64> {
    let mut total = 0.0;
    for idx in data.batches(batch_size, seed, &[stream::TRANSFER, 3, epoch]) {
        let (xb, yb) = data.gather(&idx);
        let tape = student.forward(params, &xb)?;
        let logits = flatten(tape.output().clone())?;
        let (mut l, mut g) = cross_entropy_with_grad(&logits, &yb)?;
        if let Some((probs, temperature, weight)) = teacher {
            let rows = Labeled { x: probs, labels: data.labels }.gather(&idx).0;
            let (dl, dg) = distill_loss_and_grad(&rows, &logits, temperature)?;
            l += weight * dl;
            g.data.iter_mut().zip(&dg.data).for_each(|(a, b)| *a += weight * b);
        }
        let out = tape.output();
        let g = g.reshape(out.n, out.h, out.w, out.c)?;
        let mut grads = Gradients::zeros_for(params);
        student.backward(params, &tape, g, &mut grads, false, &[])?;
        opt.step(params, &grads)?;
        total += l * idx.len() as f64;
    }
    Ok(total / data.x.n as f64)
}

/// One epoch of FSP matching against the teacher encoder.
#[allow(clippy::too_many_arguments)]
pub fn train_fsp_epoch(
    teacher: &Encoder,
    teacher_params: &ParameterSet,
    student: &Network,
    params: &mut ParameterSet,
    opt: &mut Sgd,
    pairs: usize,
    data: &Labeled<'_>,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<f64> {
    let matched = match_fsp_points(&teacher.net, student, pairs)?;
    let (tp, sp): (Vec<_>, Vec<_>) = matched.into_iter().unzip();
    let mut total = 0.0;
    for idx in data.batches(batch_size, seed, &[stream::TRANSFER, 4, epoch]) {
        let (xb, _) = data.gather(&idx);
        let t = teacher_fsp(&teacher.net, teacher_params, &tp, &xb)?;
        let (l, grads) = fsp_stage_loss(student, params, &sp, &t, &xb)?;
        opt.step(params, &grads)?;
        total += l * idx.len() as f64;
    }
    Ok(total / data.x.n as f64)
}

pub fn accuracy(student: &Network, params: &ParameterSet, x: &Batch, labels: &[usize]) -> Result<f64> {
    let logits = flatten(student.infer(params, x)?)?;
    let c = logits.sample_len();
    let hits = labels
        .iter()
        .enumerate()
        .filter(|(i, &y)| {
            let row = &logits.data[i * c..(i + 1) * c];
            crate::eval::argmax(row) == y
        })
        .count();
    Ok(hits as f64 / labels.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(n: usize, c: usize, data: Vec<f64>) -> Batch {
        Batch::new(n, 1, 1, c, data).unwrap()
    }

    #[test]
    fn zero_adapter_is_uniform() {
        let e = Encoder::new(&[2, 3]).unwrap();
        let p = e.init(0, DType::F64);
        let mut a = AdapterNetwork::new(e.latent_dim(8, 8), &[5, 6], 4, 0, DType::F64).unwrap();
        for (_, t) in a.params.iter_mut() {
            t.update(|d| d.fill(0.0));
        }
        let x = crate::data::synthetic_shapes(3, 8, 1).unwrap().all();
        let q = soft_target_logits(&e, &p, &a, &x).unwrap();
        assert!(q.data.iter().all(|v| (v - 0.25).abs() < 1e-15));
        let bad = AdapterNetwork::new(7, &[5], 4, 0, DType::F64).unwrap();
        assert!(soft_target_logits(&e, &p, &bad, &x).is_err());
    }

    #[test]
    fn distill_examples() {
        let teacher = rows(2, 3, vec![0.7, 0.2, 0.1, 0.1, 0.1, 0.8]);
        let matched = Batch {
            data: teacher.data.iter().map(|v| v.ln()).collect(),
            ..teacher.clone()
        };
        for t in [1.0, 4.0] {
            let l = distill_loss(&teacher, &matched, t).unwrap();
            assert!((l - softened_entropy(&teacher, t).unwrap()).abs() < 1e-12);
        }
        let uniform = rows(1, 4, vec![0.25; 4]);
        let student = rows(1, 4, vec![3.0, -1.0, 0.5, 2.0]);
        assert!(distill_loss(&uniform, &student, 1.0).unwrap() >= 4f64.ln());
        let onehot = rows(1, 4, vec![0.0, 0.0, 1.0, 0.0]);
        let (ce, _) = cross_entropy_with_grad(&student, &[2]).unwrap();
        assert!((distill_loss(&onehot, &student, 1.0).unwrap() - ce).abs() < 1e-12);
        assert!(distill_loss(&onehot, &rows(1, 3, vec![0.0; 3]), 1.0).is_err());
    }

    #[test]
    fn fsp_examples() {
        let ones = Tensor::full(vec![3, 2, 2], 1.0, DType::F64);
        let ones3 = Tensor::full(vec![3, 2, 3], 1.0, DType::F64);
        let g = fsp_matrix(&ones, &ones3).unwrap();
        assert_eq!(g.values.shape(), &[2, 3]);
        assert!(g.values.data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
        let z = fsp_matrix(&ones, &Tensor::zeros(vec![3, 2, 3], DType::F64)).unwrap();
        assert!(z.values.data().iter().all(|&v| v == 0.0));
        assert!(fsp_matrix(&ones, &Tensor::zeros(vec![2, 2, 3], DType::F64)).is_err());

        let m = |v: f64| FspMatrix {
            values: Tensor::new(vec![1, 1], vec![v], DType::F64).unwrap(),
            pair: ("a".into(), "b".into()),
        };
        assert_eq!(fsp_transfer_loss(&[m(0.0)], &[m(2.0)]).unwrap(), 4.0);
        assert_eq!(fsp_transfer_loss(&[m(1.5)], &[m(1.5)]).unwrap(), 0.0);
        assert!(fsp_transfer_loss(&[m(1.0)], &[]).is_err());
    }

    #[test]
    fn alexnet_pairs_line_up_with_the_encoder() {
        let e = Encoder::new(&[4, 8, 16, 32]).unwrap();
        let net = reduced_alexnet(target_widths_for(&e), 16, 10, (32, 32)).unwrap();
        assert_eq!(net.output_shape([2, 32, 32, 3]).unwrap(), [2, 1, 1, 10]);
        let pairs = match_fsp_points(&e.net, &net, 5).unwrap();
        assert_eq!(pairs.len(), 4);
        for (t, s) in &pairs {
            let cin = |n: &Network, i: usize| match n.layers[i].op {
                Op::Conv { cin, cout, .. } => (cin, cout),
                _ => unreachable!(),
            };
            assert_eq!(cin(&e.net, t.0), cin(&net, s.0));
        }
    }
}

//! Central finite-difference checks for every hand-written gradient.
//!
//! Each case compares an analytic gradient with `(f(x+h) - f(x-h)) / (x+ - x-)`
//! over all inputs. Perturbed values go through the dtype's rounding, and the
//! denominator is the realized step, so 32-bit parameter sets are checked
//! against the step they actually took.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::divergence::{omega_with_grad_raw, DivergenceKind, Metric, TransformFilterConfig};
use crate::eval::{dec_objective_and_grad, dec_soft_assign, dec_target_distribution};
use crate::model::{task_step, Encoder, OmegaConfig, TaskHeader};
use crate::nn::{Batch, Gradients, Layer, Network, Op};
use crate::pretext::{LossConfig, TaskId, TaskTarget};
use crate::seed::rng_for;
use crate::tensor::{DType, ParameterSet, Tensor};
use crate::transfer::{distill_loss_and_grad, fsp_stage_loss, match_fsp_points, reduced_alexnet, teacher_fsp};
use crate::Result;

pub fn tolerance(dtype: DType) -> f64 {
    match dtype {
        DType::F64 => 1e-4,
        DType::F32 => 1e-3,
    }
}

fn step(dtype: DType) -> f64 {
    match dtype {
        DType::F64 => 1e-5,
        DType::F32 => 1e-4,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheck {
    pub name: String,
    pub inputs: usize,
    /// `|a - n| / max(|a|, |n|)` with Euclidean norms over all inputs.
    pub relative_error: f64,
    pub tolerance: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.relative_error <= self.tolerance
    }
}

pub fn numeric_gradient(f: impl Fn(&[f64]) -> Result<f64>, x: &[f64], dtype: DType) -> Result<Vec<f64>> {
    let h = step(dtype);
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let (up, down) = (dtype.round(x[i] + h), dtype.round(x[i] - h));
        probe[i] = up;
        let fu = f(&probe)?;
        probe[i] = down;
        let fd = f(&probe)?;
        probe[i] = x[i];
        out.push((fu - fd) / (up - down));
    }
    Ok(out)
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

pub fn compare(
    name: impl Into<String>,
    f: impl Fn(&[f64]) -> Result<f64>,
    x: &[f64],
    analytic: &[f64],
    dtype: DType,
) -> Result<GradCheck> {
    let numeric = numeric_gradient(f, x, dtype)?;
    Ok(GradCheck {
        name: name.into(),
        inputs: x.len(),
        relative_error: relative_error(analytic, &numeric),
        tolerance: tolerance(dtype),
    })
}

fn random_batch(rng: &mut impl Rng, n: usize, h: usize, w: usize, c: usize, lo: f64, hi: f64) -> Batch {
    let data = (0..n * h * w * c).map(|_| rng.random_range(lo..hi)).collect();
    Batch { n, h, w, c, data }
}

fn split(flat: &[f64], at: usize, a: &ParameterSet, b: &ParameterSet) -> Result<(ParameterSet, ParameterSet)> {
    let (mut a, mut b) = (a.clone(), b.clone());
    a.assign_flat(&flat[..at])?;
    b.assign_flat(&flat[at..])?;
    Ok((a, b))
}

fn joined(a: &Gradients, b: &Gradients) -> Vec<f64> {
    let mut v = a.flatten();
    v.extend(b.flatten());
    v
}

/// Task loss plus regularizer through encoder and header parameters.
fn task_case(task: TaskId, omega: &OmegaConfig, dtype: DType, seed: u64, name: String) -> Result<GradCheck> {
    let mut rng = rng_for(seed, &[task.index()]);
    let encoder = Encoder::new(&[2, 3])?;
    let enc = encoder.init(seed, dtype);
    let loss = LossConfig::default();
    let (x, target, header) = match task {
        TaskId::Jigsaw => {
            let header = TaskHeader::new(task, &encoder, (8, 8), 3, (2, 2), seed, dtype)?;
            let x = random_batch(&mut rng, 8, 4, 4, 3, 0.0, 1.0);
            (x, TaskTarget::Labels(vec![2, 0]), header)
        }
        _ => {
            let header = TaskHeader::new(task, &encoder, (8, 8), 0, (1, 1), seed, dtype)?;
            let x = random_batch(&mut rng, 2, 8, 8, 3, 0.0, 1.0);
            let (c, lo) = if task == TaskId::Colorization { (2, -0.9) } else { (3, 0.05) };
            let y = random_batch(&mut rng, 2, 8, 8, c, lo, 0.95);
            (x, TaskTarget::Dense(y), header)
        }
    };
    let out = task_step(&encoder, &enc, &header, &x, &target, &loss, omega)?;
    let at = enc.num_values();
    let mut flat = enc.flatten();
    flat.extend(header.params.flatten());
    let f = |v: &[f64]| {
        let (e, hp) = split(v, at, &enc, &header.params)?;
        let mut hd = header.clone();
        hd.params = hp;
        Ok(task_step(&encoder, &e, &hd, &x, &target, &loss, omega)?.objective())
    };
    compare(name, f, &flat, &joined(&out.encoder_grads, &out.header_grads), dtype)
}

fn omega_latent_case(metric: Metric, dtype: DType, seed: u64) -> Result<GradCheck> {
    let mut rng = rng_for(seed, &[100]);
    let (hw, c) = (6, 5);
    let z: Vec<f64> = (0..hw * c).map(|_| dtype.round(rng.random_range(-1.5..1.5))).collect();
    let mut prior: Vec<f64> = (0..c).map(|_| rng.random_range(0.2..1.0)).collect();
    let s: f64 = prior.iter().sum();
    prior.iter_mut().for_each(|p| *p /= s);
    let kind = DivergenceKind::new(metric, 1e-8)?;
    let tf = TransformFilterConfig::default();
    let (_, g) = omega_with_grad_raw(&z, hw, c, &prior, kind, &tf)?;
    let f = |v: &[f64]| Ok(omega_with_grad_raw(v, hw, c, &prior, kind, &tf)?.0);
    compare(format!("omega/{metric}/latent"), f, &z, &g, dtype)
}

fn distill_case(dtype: DType, seed: u64) -> Result<GradCheck> {
    let mut rng = rng_for(seed, &[200]);
    let net = Network::new(
        "student",
        vec![
            Layer::dense("fc1", 12, 10),
            Layer::new("fc1_tanh", Op::Tanh),
            Layer::dense("fc2", 10, 5),
        ],
    );
    let params = net.init_params(&mut rng, dtype);
    let x = random_batch(&mut rng, 4, 1, 1, 12, -1.0, 1.0);
    let mut teacher = random_batch(&mut rng, 4, 1, 1, 5, 0.05, 1.0);
    for row in teacher.data.chunks_exact_mut(5) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    let t = 3.0;
    let tape = net.forward(&params, &x)?;
    let (_, g) = distill_loss_and_grad(&teacher, tape.output(), t)?;
    let mut grads = Gradients::zeros_for(&params);
    net.backward(&params, &tape, g, &mut grads, false, &[])?;
    let f = |v: &[f64]| {
        let mut p = params.clone();
        p.assign_flat(v)?;
        Ok(distill_loss_and_grad(&teacher, &net.infer(&p, &x)?, t)?.0)
    };
    compare("distill_loss", f, &params.flatten(), &grads.flatten(), dtype)
}

fn fsp_case(dtype: DType, seed: u64) -> Result<GradCheck> {
    let mut rng = rng_for(seed, &[300]);
    let teacher = Encoder::new(&[2, 3, 4])?;
    let tp = teacher.init(seed, dtype);
    let student = reduced_alexnet([2, 3, 4, 4, 4], 4, 3, (8, 8))?;
    let params = student.init_params(&mut rng, dtype);
    let x = random_batch(&mut rng, 2, 8, 8, 3, 0.0, 1.0);
    let (t_pts, s_pts): (Vec<_>, Vec<_>) = match_fsp_points(&teacher.net, &student, 3)?.into_iter().unzip();
    let target = teacher_fsp(&teacher.net, &tp, &t_pts, &x)?;
    let (_, grads) = fsp_stage_loss(&student, &params, &s_pts, &target, &x)?;
    let f = |v: &[f64]| {
        let mut p = params.clone();
        p.assign_flat(v)?;
        Ok(fsp_stage_loss(&student, &p, &s_pts, &target, &x)?.0)
    };
    compare("fsp_transfer_loss", f, &params.flatten(), &grads.flatten(), dtype)
}

fn dec_case(dtype: DType, seed: u64) -> Result<GradCheck> {
    let mut rng = rng_for(seed, &[400]);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let (n, k, d) = (12, 3, 4);
    let mut draw = |len: usize| -> Vec<f64> { (0..len).map(|_| dtype.round(normal.sample(&mut rng))).collect() };
    let z = Tensor::new(vec![n, d], draw(n * d), DType::F64)?;
    let mu = Tensor::new(vec![k, d], draw(k * d), DType::F64)?;
    let p = dec_target_distribution(&dec_soft_assign(&z, &mu, 1.0)?)?;
    let (_, gz, gmu) = dec_objective_and_grad(&z, &mu, &p, 1.0)?;
    let mut x = z.data().to_vec();
    x.extend_from_slice(mu.data());
    let mut analytic = gz;
    analytic.extend(gmu);
    let f = |v: &[f64]| {
        let zz = Tensor::new(vec![n, d], v[..n * d].to_vec(), DType::F64)?;
        let mm = Tensor::new(vec![k, d], v[n * d..].to_vec(), DType::F64)?;
        Ok(dec_objective_and_grad(&zz, &mm, &p, 1.0)?.0)
    };
    compare("dec_objective", f, &x, &analytic, dtype)
}

/// Every loss and regularizer gradient in the crate.
pub fn run_suite(dtype: DType, seed: u64) -> Result<Vec<GradCheck>> {
    let mut out = Vec::new();
    for task in TaskId::ALL {
        out.push(task_case(task, &OmegaConfig::disabled(), dtype, seed, format!("task/{task}"))?);
    }
    for metric in Metric::ALL {
        out.push(omega_latent_case(metric, dtype, seed)?);
        let omega = OmegaConfig {
            metric,
            ..OmegaConfig::default()
        };
        out.push(task_case(TaskId::Reconstruction, &omega, dtype, seed, format!("omega/{metric}/encoder"))?);
    }
    out.push(distill_case(dtype, seed)?);
    out.push(fsp_case(dtype, seed)?);
    out.push(dec_case(dtype, seed)?);
    Ok(out)
}

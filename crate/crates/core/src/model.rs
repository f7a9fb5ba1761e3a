//! Shared encoder, per-task headers and the branch training step.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::divergence::{omega_with_grad_raw, DivergenceKind, Metric, ProbabilityVector, TransformFilterConfig};
use crate::error::{Error, Result};
use crate::nn::{softmax_in_place, Batch, Gradients, Layer, Network, Op, Sgd};
use crate::pretext::{loss_and_grad, LossConfig, PretextSource, TaskId, TaskTarget};
use crate::seed::{rng_for, stream};
use crate::tensor::{DType, ParameterSet};

pub const DEFAULT_WIDTHS: [usize; 4] = [16, 32, 64, 128];
pub const SEGMENT_CLASSES: usize = 8;
pub const JIGSAW_HIDDEN: usize = 64;

/// Stack of `conv -> relu -> pool` stages with 3x3 kernels.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub net: Network,
    widths: Vec<usize>,
}

impl Encoder {
    pub fn new(widths: &[usize]) -> Result<Self> {
        if widths.is_empty() || widths.contains(&0) {
            return Err(Error::Config(format!("encoder widths must be positive, got {widths:?}")));
        }
        let mut layers = Vec::with_capacity(widths.len() * 3);
        let mut cin = 3;
        for (i, &w) in widths.iter().enumerate() {
            let s = i + 1;
            layers.push(Layer::conv(format!("conv{s}"), cin, w, 3));
            layers.push(Layer::new(format!("relu{s}"), Op::Relu));
            layers.push(Layer::new(format!("pool{s}"), Op::MaxPool2));
            cin = w;
        }
        let id = widths.iter().map(|w| w.to_string()).collect::<Vec<_>>().join("-");
        Ok(Encoder {
            net: Network::new(format!("enc-w{id}"), layers),
            widths: widths.to_vec(),
        })
    }

    pub fn arch_id(&self) -> &str {
        &self.net.arch_id
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn latent_channels(&self) -> usize {
        *self.widths.last().expect("non-empty widths")
    }

    /// Spatial reduction factor from input to latent.
    pub fn stride(&self) -> usize {
        1 << self.widths.len()
    }

    pub fn init(&self, seed: u64, dtype: DType) -> ParameterSet {
        self.net.init_params(&mut rng_for(seed, &[stream::ENCODER_INIT]), dtype)
    }

    /// Flattened latent size for an `h`x`w` input.
    pub fn latent_dim(&self, h: usize, w: usize) -> usize {
        (h / self.stride()) * (w / self.stride()) * self.latent_channels()
    }
}

fn decoder(encoder: &Encoder, out: usize) -> Vec<Layer> {
    let w = encoder.widths();
    let mut layers = Vec::new();
    for s in (1..=w.len()).rev() {
        let cout = if s == 1 { out } else { w[s - 2] };
        layers.push(Layer::new(format!("up{s}"), Op::Upsample2));
        layers.push(Layer::conv(format!("dconv{s}"), w[s - 1], cout, 3));
        if s > 1 {
            layers.push(Layer::new(format!("drelu{s}"), Op::Relu));
        }
    }
    layers
}

/// Task-specific head on top of the shared encoder latent.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskHeader {
    pub task: TaskId,
    pub net: Network,
    pub params: ParameterSet,
    encoder_arch: String,
    /// Patches per sample for the jigsaw head, 1 otherwise.
    patches: usize,
}

impl TaskHeader {
    /// `classes` and `grid` describe the jigsaw head and are ignored otherwise.
    pub fn new(
        task: TaskId,
        encoder: &Encoder,
        input_hw: (usize, usize),
        classes: usize,
        grid: (usize, usize),
        seed: u64,
        dtype: DType,
    ) -> Result<Self> {
        let (layers, patches) = match task {
            TaskId::Reconstruction => {
                let mut l = decoder(encoder, 3);
                l.push(Layer::new("out", Op::Sigmoid));
                (l, 1)
            }
            TaskId::Colorization => {
                let mut l = decoder(encoder, 2);
                l.push(Layer::new("out", Op::Tanh));
                (l, 1)
            }
            TaskId::Segmentation => {
                let mut l = decoder(encoder, SEGMENT_CLASSES);
                l.push(Layer::new("segment", Op::ChannelSoftmax));
                l.push(Layer::conv("render", SEGMENT_CLASSES, 3, 1));
                l.push(Layer::new("out", Op::Sigmoid));
                (l, 1)
            }
            TaskId::Jigsaw => {
                let (rows, cols) = grid;
                if classes == 0 || rows == 0 || cols == 0 {
                    return Err(Error::Config("jigsaw head needs classes and a grid".into()));
                }
                let patches = rows * cols;
                let (h, w) = input_hw;
                let din = patches * encoder.latent_dim(h / rows, w / cols);
                if din == 0 {
                    return Err(Error::Shape(format!("{h}x{w} patches vanish in the encoder")));
                }
                (
                    vec![
                        Layer::dense("fc1", din, JIGSAW_HIDDEN),
                        Layer::new("fc1_relu", Op::Relu),
                        Layer::dense("fc2", JIGSAW_HIDDEN, classes),
                    ],
                    patches,
                )
            }
        };
        let suffix = if task == TaskId::Jigsaw { classes.to_string() } else { String::new() };
        let net = Network::new(format!("{}-head{suffix}@{}", task.code(), encoder.arch_id()), layers);
        let params = net.init_params(&mut rng_for(seed, &[stream::HEADER_INIT, task.index()]), dtype);
        Ok(TaskHeader {
            task,
            net,
            params,
            encoder_arch: encoder.arch_id().to_string(),
            patches,
        })
    }

    pub fn encoder_arch(&self) -> &str {
        &self.encoder_arch
    }

    fn check_encoder(&self, enc: &ParameterSet) -> Result<()> {
        if enc.arch_id() != self.encoder_arch {
            return Err(Error::Misaligned(format!(
                "header for `{}` given encoder `{}`",
                self.encoder_arch,
                enc.arch_id()
            )));
        }
        Ok(())
    }

    /// Encoder latent as the header expects it.
    fn header_input(&self, z: Batch) -> Result<Batch> {
        if self.task != TaskId::Jigsaw {
            return Ok(z);
        }
        if z.n % self.patches != 0 {
            return Err(Error::Shape(format!(
                "{} patches is not a multiple of {}",
                z.n, self.patches
            )));
        }
        let per = self.patches * z.sample_len();
        let n = z.n / self.patches;
        z.reshape(n, 1, 1, per)
    }
}

/// Header prediction in its public form: images for r/s, chroma for c and
/// per-sample probability vectors for j.
pub fn forward_task(
    encoder: &Encoder,
    enc_params: &ParameterSet,
    header: &TaskHeader,
    x: &Batch,
) -> Result<Batch> {
    header.check_encoder(enc_params)?;
    let z = encoder.net.infer(enc_params, x)?;
    let mut out = header.net.infer(&header.params, &header.header_input(z)?)?;
    if header.task == TaskId::Jigsaw {
        let c = out.c;
        out.data.chunks_exact_mut(c).for_each(softmax_in_place);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OmegaConfig {
    pub enabled: bool,
    pub metric: Metric,
    pub epsilon: f64,
    /// Prior over latent channels; uniform when absent.
    pub prior: Option<Vec<f64>>,
    pub scale: f64,
    pub temperature: f64,
}

impl Default for OmegaConfig {
    fn default() -> Self {
        OmegaConfig {
            enabled: true,
            metric: Metric::Kld,
            epsilon: 1e-8,
            prior: None,
            scale: 1.0,
            temperature: 1.0,
        }
    }
}

impl OmegaConfig {
    pub fn disabled() -> Self {
        OmegaConfig {
            enabled: false,
            ..OmegaConfig::default()
        }
    }

    pub fn prior_for(&self, channels: usize) -> Result<ProbabilityVector> {
        let p = match &self.prior {
            None => ProbabilityVector::uniform(channels)?,
            Some(v) => ProbabilityVector::new(v.clone())?,
        };
        if p.dim() != channels {
            return Err(Error::Config(format!(
                "omega prior has {} entries but the latent has {channels} channels",
                p.dim()
            )));
        }
        Ok(p)
    }
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub task_loss: f64,
    pub omega: f64,
    pub encoder_grads: Gradients,
    pub header_grads: Gradients,
}

impl StepOutput {
    pub fn objective(&self) -> f64 {
        self.task_loss + self.omega
    }
}

/// Loss, regularizer and gradients for one batch. The regularizer is the
/// mean over latent maps (per sample, or per patch for j) times its scale.
pub fn task_step(
    encoder: &Encoder,
    enc_params: &ParameterSet,
    header: &TaskHeader,
    x: &Batch,
    target: &TaskTarget,
    loss_cfg: &LossConfig,
    omega: &OmegaConfig,
) -> Result<StepOutput> {
    header.check_encoder(enc_params)?;
    let enc_tape = encoder.net.forward(enc_params, x)?;
    let z = enc_tape.output().clone();
    let z_shape = z.shape();
    let head_tape = header.net.forward(&header.params, &header.header_input(z)?)?;
    let (task_loss, g_out) = loss_and_grad(header.task, head_tape.output(), target, loss_cfg)?;

    let mut header_grads = Gradients::zeros_for(&header.params);
    let gz = header
        .net
        .backward(&header.params, &head_tape, g_out, &mut header_grads, true, &[])?
        .expect("input gradient requested");
    let [m, lh, lw, c] = z_shape;
    let mut gz = gz.reshape(m, lh, lw, c)?;

    let mut omega_value = 0.0;
    if omega.enabled {
        let prior = omega.prior_for(c)?;
        let kind = DivergenceKind::new(omega.metric, omega.epsilon)?;
        let tf = TransformFilterConfig {
            temperature: omega.temperature,
        };
        let zs = enc_tape.output();
        let w = omega.scale / m as f64;
        for i in 0..m {
            let (v, g) = omega_with_grad_raw(zs.sample(i), lh * lw, c, prior.values(), kind, &tf)?;
            omega_value += w * v;
            let len = lh * lw * c;
            for (a, b) in gz.data[i * len..(i + 1) * len].iter_mut().zip(g) {
                *a += w * b;
            }
        }
    }

    let mut encoder_grads = Gradients::zeros_for(enc_params);
    encoder
        .net
        .backward(enc_params, &enc_tape, gz, &mut encoder_grads, false, &[])?;
    Ok(StepOutput {
        task_loss,
        omega: omega_value,
        encoder_grads,
        header_grads,
    })
}

/// A task's private training state, persisted across epochs.
#[derive(Debug, Clone)]
pub struct TaskBranch {
    pub header: TaskHeader,
    pub encoder_opt: Sgd,
    pub header_opt: Sgd,
}

impl TaskBranch {
    pub fn new(header: TaskHeader, learning_rate: f64, momentum: f64) -> Self {
        TaskBranch {
            header,
            encoder_opt: Sgd::new(learning_rate, momentum),
            header_opt: Sgd::new(learning_rate, momentum),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PassSettings<'a> {
    pub batch_size: usize,
    pub seed: u64,
    pub epoch: u64,
    pub loss: &'a LossConfig,
    pub omega: &'a OmegaConfig,
}

/// One shuffled pass over the source; returns the sample-weighted mean task
/// loss (the regularizer is optimized but not included).
pub fn train_pass(
    encoder: &Encoder,
    enc_params: &mut ParameterSet,
    branch: &mut TaskBranch,
    source: &PretextSource<'_>,
    s: &PassSettings<'_>,
) -> Result<f64> {
    if s.batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let task = branch.header.task;
    let mut order: Vec<usize> = (0..source.len()).collect();
    order.shuffle(&mut rng_for(s.seed, &[stream::BATCH_ORDER, s.epoch, task.index()]));
    let mut total = 0.0;
    for idx in order.chunks(s.batch_size) {
        let (x, y) = source.batch(idx, s.epoch)?;
        let out = task_step(encoder, enc_params, &branch.header, &x, &y, s.loss, s.omega)?;
        if !out.objective().is_finite() {
            return Err(Error::NonFinite {
                layer: format!("{task} loss"),
            });
        }
        total += out.task_loss * idx.len() as f64;
        branch.encoder_opt.step(enc_params, &out.encoder_grads)?;
        branch.header_opt.step(&mut branch.header.params, &out.header_grads)?;
    }
    if let Some(layer) = enc_params.find_non_finite() {
        return Err(Error::NonFinite {
            layer: layer.to_string(),
        });
    }
    Ok(total / source.len() as f64)
}

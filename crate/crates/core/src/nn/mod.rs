//! Small feed-forward networks with hand-written backpropagation.
//!
//! Activations are NHWC batches of `f64`. Parameters live outside the network
//! in a [`ParameterSet`], keyed `<layer>.weight` / `<layer>.bias`, so the same
//! network description can run on any aligned weight set (a task branch, a
//! fused snapshot, a moving average).

mod gemm;
mod optim;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{DType, ParameterSet, Tensor};

pub use optim::Sgd;

pub(crate) use gemm::{matmul_acc as gemm_nn, matmul_nt_acc as gemm_nt, matmul_tn_acc as gemm_tn};

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl Batch {
    pub fn new(n: usize, h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if n * h * w * c != data.len() {
            return Err(Error::Shape(format!(
                "batch [{n}, {h}, {w}, {c}] needs {} values, got {}",
                n * h * w * c,
                data.len()
            )));
        }
        Ok(Batch { n, h, w, c, data })
    }

    pub fn zeros(n: usize, h: usize, w: usize, c: usize) -> Self {
        Batch {
            n,
            h,
            w,
            c,
            data: vec![0.0; n * h * w * c],
        }
    }

    pub fn sample_len(&self) -> usize {
        self.h * self.w * self.c
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let s = self.sample_len();
        &self.data[i * s..(i + 1) * s]
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.h, self.w, self.c]
    }

    /// Reinterpret the same buffer under another shape with equal size.
    pub fn reshape(self, n: usize, h: usize, w: usize, c: usize) -> Result<Self> {
        Batch::new(n, h, w, c, self.data)
    }

    pub fn from_samples<'a>(
        samples: impl IntoIterator<Item = &'a Tensor>,
        h: usize,
        w: usize,
        c: usize,
    ) -> Result<Self> {
        let mut data = Vec::new();
        let mut n = 0;
        for t in samples {
            if t.len() != h * w * c {
                return Err(Error::Shape(format!(
                    "sample with shape {:?} in a [{h}, {w}, {c}] batch",
                    t.shape()
                )));
            }
            data.extend_from_slice(t.data());
            n += 1;
        }
        Batch::new(n, h, w, c, data)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv,
    Pool,
    Fc,
    Norm,
    Act,
    Upsample,
}

impl FromStr for LayerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "conv" => LayerKind::Conv,
            "pool" => LayerKind::Pool,
            "fc" => LayerKind::Fc,
            "norm" => LayerKind::Norm,
            "act" => LayerKind::Act,
            "upsample" => LayerKind::Upsample,
            other => return Err(Error::InvalidArgument(format!("unknown layer kind `{other}`"))),
        })
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LayerKind::Conv => "conv",
            LayerKind::Pool => "pool",
            LayerKind::Fc => "fc",
            LayerKind::Norm => "norm",
            LayerKind::Act => "act",
            LayerKind::Upsample => "upsample",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    /// Square kernel, stride 1, zero "same" padding.
    Conv { cin: usize, cout: usize, k: usize },
    Dense { din: usize, dout: usize },
    Relu,
    Sigmoid,
    Tanh,
    /// Softmax across channels at every pixel.
    ChannelSoftmax,
    MaxPool2,
    Upsample2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub op: Op,
    weight_key: String,
    bias_key: String,
}

impl Layer {
    pub fn new(name: impl Into<String>, op: Op) -> Self {
        let name = name.into();
        Layer {
            weight_key: format!("{name}.weight"),
            bias_key: format!("{name}.bias"),
            name,
            op,
        }
    }

    pub fn conv(name: impl Into<String>, cin: usize, cout: usize, k: usize) -> Self {
        Layer::new(name, Op::Conv { cin, cout, k })
    }

    pub fn dense(name: impl Into<String>, din: usize, dout: usize) -> Self {
        Layer::new(name, Op::Dense { din, dout })
    }

    pub fn kind(&self) -> LayerKind {
        match self.op {
            Op::Conv { .. } => LayerKind::Conv,
            Op::Dense { .. } => LayerKind::Fc,
            Op::MaxPool2 => LayerKind::Pool,
            Op::Upsample2 => LayerKind::Upsample,
            Op::Relu | Op::Sigmoid | Op::Tanh | Op::ChannelSoftmax => LayerKind::Act,
        }
    }

    pub fn weight_key(&self) -> &str {
        &self.weight_key
    }

    pub fn bias_key(&self) -> &str {
        &self.bias_key
    }

    fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>, usize)> {
        match self.op {
            Op::Conv { cin, cout, k } => Some((vec![k, k, cin, cout], vec![cout], k * k * cin)),
            Op::Dense { din, dout } => Some((vec![din, dout], vec![dout], din)),
            _ => None,
        }
    }

    fn output_shape(&self, n: usize, h: usize, w: usize, c: usize) -> Result<[usize; 4]> {
        let mismatch = |what: &str| {
            Err(Error::Shape(format!(
                "layer `{}` expects {what}, got [{n}, {h}, {w}, {c}]",
                self.name
            )))
        };
        match self.op {
            Op::Conv { cin, cout, .. } => {
                if c != cin {
                    return mismatch(&format!("{cin} channels"));
                }
                Ok([n, h, w, cout])
            }
            Op::Dense { din, dout } => {
                if h * w * c != din {
                    return mismatch(&format!("{din} features"));
                }
                Ok([n, 1, 1, dout])
            }
            Op::MaxPool2 => {
                if h % 2 != 0 || w % 2 != 0 {
                    return mismatch("even spatial size");
                }
                Ok([n, h / 2, w / 2, c])
            }
            Op::Upsample2 => Ok([n, h * 2, w * 2, c]),
            _ => Ok([n, h, w, c]),
        }
    }
}

/// Named parameter gradients, aligned with a [`ParameterSet`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Gradients(BTreeMap<String, Vec<f64>>);

impl Gradients {
    pub fn zeros_for(params: &ParameterSet) -> Self {
        Gradients(
            params
                .iter()
                .map(|(k, t)| (k.clone(), vec![0.0; t.len()]))
                .collect(),
        )
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.0.get(name).map(Vec::as_slice)
    }

    fn slot(&mut self, name: &str) -> Result<&mut Vec<f64>> {
        self.0
            .get_mut(name)
            .ok_or_else(|| Error::NotFound(format!("gradient slot `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<f64>)> {
        self.0.iter()
    }

    pub fn scale(&mut self, s: f64) {
        self.0.values_mut().flatten().for_each(|v| *v *= s);
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.0.values().flatten().copied().collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.0.values().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[derive(Debug, Clone)]
pub struct Tape {
    acts: Vec<Batch>,
    argmax: Vec<Option<Vec<usize>>>,
}

impl Tape {
    /// Activation entering layer `i`; index `len` is the network output.
    pub fn activation(&self, i: usize) -> &Batch {
        &self.acts[i]
    }

    pub fn output(&self) -> &Batch {
        self.acts.last().expect("tape holds at least the input")
    }

    pub fn into_output(mut self) -> Batch {
        self.acts.pop().expect("tape holds at least the input")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub arch_id: String,
    pub layers: Vec<Layer>,
}

impl Network {
    pub fn new(arch_id: impl Into<String>, layers: Vec<Layer>) -> Self {
        Network {
            arch_id: arch_id.into(),
            layers,
        }
    }

    pub fn arch_description(&self) -> Vec<(String, LayerKind)> {
        self.layers.iter().map(|l| (l.name.clone(), l.kind())).collect()
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    /// He-normal weights, zero biases.
    pub fn init_params(&self, rng: &mut impl Rng, dtype: DType) -> ParameterSet {
        let mut params = ParameterSet::new(self.arch_id.clone());
        for layer in &self.layers {
            if let Some((wshape, bshape, fan_in)) = layer.param_shapes() {
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
                let n: usize = wshape.iter().product();
                let w: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
                params.insert(
                    layer.weight_key.clone(),
                    Tensor::new(wshape, w, dtype).expect("shape from layer"),
                );
                params.insert(layer.bias_key.clone(), Tensor::zeros(bshape, dtype));
            }
        }
        params
    }

    pub fn check_params(&self, params: &ParameterSet) -> Result<()> {
        if params.arch_id() != self.arch_id {
            return Err(Error::Misaligned(format!(
                "network `{}` given weights for `{}`",
                self.arch_id,
                params.arch_id()
            )));
        }
        for layer in &self.layers {
            if let Some((wshape, bshape, _)) = layer.param_shapes() {
                for (key, shape) in [(&layer.weight_key, wshape), (&layer.bias_key, bshape)] {
                    let t = params.require(key)?;
                    if t.shape() != shape.as_slice() {
                        return Err(Error::Shape(format!(
                            "`{key}` has shape {:?}, expected {shape:?}",
                            t.shape()
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn output_shape(&self, input: [usize; 4]) -> Result<[usize; 4]> {
        let [mut n, mut h, mut w, mut c] = input;
        for layer in &self.layers {
            [n, h, w, c] = layer.output_shape(n, h, w, c)?;
        }
        Ok([n, h, w, c])
    }

    pub fn forward(&self, params: &ParameterSet, x: &Batch) -> Result<Tape> {
        self.check_params(params)?;
        self.output_shape(x.shape())?;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut argmax = Vec::with_capacity(self.layers.len());
        acts.push(x.clone());
        for layer in &self.layers {
            let input = acts.last().expect("non-empty");
            let (out, am) = forward_layer(layer, params, input)?;
            acts.push(out);
            argmax.push(am);
        }
        Ok(Tape { acts, argmax })
    }

    /// Forward pass keeping only the output.
    pub fn infer(&self, params: &ParameterSet, x: &Batch) -> Result<Batch> {
        Ok(self.forward(params, x)?.into_output())
    }

    /// Backpropagate `grad_out` through the recorded tape.
    ///
    /// `inject` adds extra gradient to intermediate activations: entry
    /// `(i, g)` is added to the gradient of the activation entering layer `i`.
    /// Parameter gradients are accumulated into `grads`; the input gradient is
    /// returned when `want_input_grad` is set.
    pub fn backward(
        &self,
        params: &ParameterSet,
        tape: &Tape,
        grad_out: Batch,
        grads: &mut Gradients,
        want_input_grad: bool,
        inject: &[(usize, &[f64])],
    ) -> Result<Option<Batch>> {
        let out = tape.output();
        if grad_out.shape() != out.shape() {
            return Err(Error::Shape(format!(
                "output gradient {:?} for output {:?}",
                grad_out.shape(),
                out.shape()
            )));
        }
        for (i, g) in inject {
            if *i > self.layers.len() || g.len() != tape.acts[*i].data.len() {
                return Err(Error::Shape(format!("gradient injection at activation {i}")));
            }
        }
        let mut g = grad_out;
        for (i, gi) in inject {
            if *i == self.layers.len() {
                g.data.iter_mut().zip(gi.iter()).for_each(|(a, b)| *a += b);
            }
        }
        for i in (0..self.layers.len()).rev() {
            let need_input = i > 0 || want_input_grad;
            let next = backward_layer(
                &self.layers[i],
                params,
                &tape.acts[i],
                &tape.acts[i + 1],
                tape.argmax[i].as_deref(),
                g,
                grads,
                need_input,
            )?;
            match next {
                Some(mut ng) => {
                    for (j, gj) in inject {
                        if *j == i {
                            ng.data.iter_mut().zip(gj.iter()).for_each(|(a, b)| *a += b);
                        }
                    }
                    g = ng;
                }
                None => return Ok(None),
            }
        }
        Ok(Some(g))
    }
}

fn forward_layer(
    layer: &Layer,
    params: &ParameterSet,
    x: &Batch,
) -> Result<(Batch, Option<Vec<usize>>)> {
    let [n, h, w, c] = layer.output_shape(x.n, x.h, x.w, x.c)?;
    let out = match layer.op {
        Op::Conv { cin, cout, k } => {
            let wt = params.require(&layer.weight_key)?.data();
            let bias = params.require(&layer.bias_key)?.data();
            let rows = x.n * x.h * x.w;
            let mut out = Vec::with_capacity(rows * cout);
            for _ in 0..rows {
                out.extend_from_slice(bias);
            }
            let kk = k * k * cin;
            if k == 1 {
                gemm::matmul_acc(rows, kk, cout, &x.data, wt, &mut out);
            } else {
                let col = gemm::im2col(x, k);
                gemm::matmul_acc(rows, kk, cout, &col, wt, &mut out);
            }
            out
        }
        Op::Dense { din, dout } => {
            let wt = params.require(&layer.weight_key)?.data();
            let bias = params.require(&layer.bias_key)?.data();
            let mut out = Vec::with_capacity(x.n * dout);
            for _ in 0..x.n {
                out.extend_from_slice(bias);
            }
            gemm::matmul_acc(x.n, din, dout, &x.data, wt, &mut out);
            out
        }
        Op::Relu => x.data.iter().map(|&v| v.max(0.0)).collect(),
        Op::Sigmoid => x.data.iter().map(|&v| sigmoid(v)).collect(),
        Op::Tanh => x.data.iter().map(|&v| v.tanh()).collect(),
        Op::ChannelSoftmax => {
            let mut out = x.data.clone();
            for px in out.chunks_exact_mut(x.c) {
                softmax_in_place(px);
            }
            out
        }
        Op::MaxPool2 => {
            let mut out = Vec::with_capacity(n * h * w * c);
            let mut am = Vec::with_capacity(n * h * w * c);
            for b in 0..n {
                for y in 0..h {
                    for xx in 0..w {
                        for ch in 0..c {
                            let mut best = f64::NEG_INFINITY;
                            let mut best_i = 0;
                            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                let i = ((b * x.h + 2 * y + dy) * x.w + 2 * xx + dx) * c + ch;
                                if x.data[i] > best {
                                    best = x.data[i];
                                    best_i = i;
                                }
                            }
                            out.push(best);
                            am.push(best_i);
                        }
                    }
                }
            }
            return Ok((Batch { n, h, w, c, data: out }, Some(am)));
        }
        Op::Upsample2 => {
            let mut out = Vec::with_capacity(n * h * w * c);
            for b in 0..n {
                for y in 0..h {
                    for xx in 0..w {
                        let i = ((b * x.h + y / 2) * x.w + xx / 2) * c;
                        out.extend_from_slice(&x.data[i..i + c]);
                    }
                }
            }
            out
        }
    };
    Ok((Batch { n, h, w, c, data: out }, None))
}

#[allow(clippy::too_many_arguments)]
fn backward_layer(
    layer: &Layer,
    params: &ParameterSet,
    x: &Batch,
    y: &Batch,
    argmax: Option<&[usize]>,
    gy: Batch,
    grads: &mut Gradients,
    need_input: bool,
) -> Result<Option<Batch>> {
    let shaped = |data: Vec<f64>| Batch {
        n: x.n,
        h: x.h,
        w: x.w,
        c: x.c,
        data,
    };
    let gx = match layer.op {
        Op::Conv { cin, cout, k } => {
            let rows = x.n * x.h * x.w;
            let kk = k * k * cin;
            let col_owned;
            let col: &[f64] = if k == 1 {
                &x.data
            } else {
                col_owned = gemm::im2col(x, k);
                &col_owned
            };
            gemm::matmul_tn_acc(kk, rows, cout, col, &gy.data, grads.slot(&layer.weight_key)?);
            let gb = grads.slot(&layer.bias_key)?;
            for row in gy.data.chunks_exact(cout) {
                gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
            }
            if !need_input {
                return Ok(None);
            }
            let wt = params.require(&layer.weight_key)?.data();
            let mut dcol = vec![0.0; rows * kk];
            gemm::matmul_nt_acc(rows, cout, kk, &gy.data, wt, &mut dcol);
            if k == 1 {
                dcol
            } else {
                gemm::col2im(&dcol, x, k)
            }
        }
        Op::Dense { din, dout } => {
            gemm::matmul_tn_acc(din, x.n, dout, &x.data, &gy.data, grads.slot(&layer.weight_key)?);
            let gb = grads.slot(&layer.bias_key)?;
            for row in gy.data.chunks_exact(dout) {
                gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
            }
            if !need_input {
                return Ok(None);
            }
            let wt = params.require(&layer.weight_key)?.data();
            let mut gx = vec![0.0; x.n * din];
            gemm::matmul_nt_acc(x.n, dout, din, &gy.data, wt, &mut gx);
            gx
        }
        _ if !need_input => return Ok(None),
        Op::Relu => x
            .data
            .iter()
            .zip(&gy.data)
            .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
            .collect(),
        Op::Sigmoid => y
            .data
            .iter()
            .zip(&gy.data)
            .map(|(&s, &g)| g * s * (1.0 - s))
            .collect(),
        Op::Tanh => y
            .data
            .iter()
            .zip(&gy.data)
            .map(|(&t, &g)| g * (1.0 - t * t))
            .collect(),
        Op::ChannelSoftmax => {
            let mut gx = vec![0.0; y.data.len()];
            for ((s, g), o) in y
                .data
                .chunks_exact(y.c)
                .zip(gy.data.chunks_exact(y.c))
                .zip(gx.chunks_exact_mut(y.c))
            {
                let dot: f64 = s.iter().zip(g).map(|(a, b)| a * b).sum();
                for ((oi, si), gi) in o.iter_mut().zip(s).zip(g) {
                    *oi = si * (gi - dot);
                }
            }
            gx
        }
        Op::MaxPool2 => {
            let am = argmax.ok_or_else(|| Error::InvalidArgument("pool tape lost".into()))?;
            let mut gx = vec![0.0; x.data.len()];
            for (&i, &g) in am.iter().zip(&gy.data) {
                gx[i] += g;
            }
            gx
        }
        Op::Upsample2 => {
            let c = x.c;
            let mut gx = vec![0.0; x.data.len()];
            for b in 0..y.n {
                for yy in 0..y.h {
                    for xx in 0..y.w {
                        let src = ((b * y.h + yy) * y.w + xx) * c;
                        let dst = ((b * x.h + yy / 2) * x.w + xx / 2) * c;
                        for ch in 0..c {
                            gx[dst + ch] += gy.data[src + ch];
                        }
                    }
                }
            }
            gx
        }
    };
    Ok(Some(shaped(gx)))
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    v.iter_mut().for_each(|x| *x /= sum);
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    out
}

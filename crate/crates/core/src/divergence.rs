//! Distribution metrics and the latent-feature regularizer.
//!
//! Feature maps `[h, w, c]` are turned into a probability vector over channels
//! (spatial mean, then a tempered softmax) and compared against a prior with
//! one of seven metrics. All metrics act on the smoothed and renormalized
//! vectors `(p + eps) / (1 + n * eps)`, so every value is finite and the
//! usual bounds (`hellinger <= 1`, `jsd <= ln 2`) hold up to rounding.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVector(Vec<f64>);

impl ProbabilityVector {
    pub const SUM_TOLERANCE: f64 = 1e-6;

    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("probability vector is empty".into()));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument(
                "probability entries must be finite and non-negative".into(),
            ));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(Error::InvalidArgument(format!(
                "probabilities sum to {sum}, expected 1"
            )));
        }
        Ok(ProbabilityVector(values))
    }

    pub fn uniform(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("uniform over zero outcomes".into()));
        }
        Ok(ProbabilityVector(vec![1.0 / dim as f64; dim]))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    Kld,
    ReverseKld,
    Jsd,
    Hellinger,
    Jeffrey,
    ChiSquared,
    Wasserstein,
}

impl Metric {
    pub const ALL: [Metric; 7] = [
        Metric::Kld,
        Metric::ReverseKld,
        Metric::Jsd,
        Metric::Hellinger,
        Metric::Jeffrey,
        Metric::ChiSquared,
        Metric::Wasserstein,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Kld => "kld",
            Metric::ReverseKld => "reverse-kld",
            Metric::Jsd => "jsd",
            Metric::Hellinger => "hellinger",
            Metric::Jeffrey => "jeffrey",
            Metric::ChiSquared => "chi-squared",
            Metric::Wasserstein => "wasserstein",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown metric `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DivergenceKind {
    pub metric: Metric,
    pub epsilon: f64,
}

impl DivergenceKind {
    pub fn new(metric: Metric, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "smoothing epsilon must be positive, got {epsilon}"
            )));
        }
        Ok(DivergenceKind { metric, epsilon })
    }
}

impl From<Metric> for DivergenceKind {
    fn from(metric: Metric) -> Self {
        DivergenceKind {
            metric,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformFilterConfig {
    pub temperature: f64,
}

impl Default for TransformFilterConfig {
    fn default() -> Self {
        TransformFilterConfig { temperature: 1.0 }
    }
}

impl TransformFilterConfig {
    fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

fn smooth(p: &[f64], eps: f64) -> Vec<f64> {
    let norm = 1.0 + p.len() as f64 * eps;
    p.iter().map(|v| (v + eps) / norm).collect()
}

fn kld_smoothed(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| a * (a.ln() - b.ln()))
        .sum()
}

fn cumulative_diff(p: &[f64], q: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    p.iter()
        .zip(q)
        .take(p.len().saturating_sub(1))
        .map(|(&a, &b)| {
            acc += a - b;
            acc
        })
        .collect()
}

fn hellinger_sq(p: &[f64], q: &[f64]) -> f64 {
    let h2: f64 = 0.5
        * p.iter()
            .zip(q)
            .map(|(&a, &b)| {
                let d = a.sqrt() - b.sqrt();
                d * d
            })
            .sum::<f64>();
    h2.min(1.0)
}

fn check_dims(p: &[f64], q: &[f64]) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!(
            "distributions of dimension {} and {}",
            p.len(),
            q.len()
        )));
    }
    Ok(())
}

/// Divergence on raw slices; callers guarantee both are distributions.
pub fn divergence_raw(kind: DivergenceKind, p: &[f64], q: &[f64]) -> Result<f64> {
    check_dims(p, q)?;
    let ps = smooth(p, kind.epsilon);
    let qs = smooth(q, kind.epsilon);
    let (p, q) = (&ps[..], &qs[..]);
    Ok(match kind.metric {
        Metric::Kld => kld_smoothed(p, q),
        Metric::ReverseKld => kld_smoothed(q, p),
        Metric::Jsd => {
            let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
            0.5 * kld_smoothed(p, &m) + 0.5 * kld_smoothed(q, &m)
        }
        Metric::Hellinger => hellinger_sq(p, q).sqrt(),
        Metric::Jeffrey => p
            .iter()
            .zip(q)
            .map(|(&a, &b)| (a - b) * (a.ln() - b.ln()))
            .sum(),
        Metric::ChiSquared => p
            .iter()
            .zip(q)
            .map(|(&a, &b)| (a - b) * (a - b) / b)
            .sum(),
        Metric::Wasserstein => cumulative_diff(p, q).iter().map(|c| c.abs()).sum(),
    })
}

/// Gradient of [`divergence_raw`] with respect to its first argument.
pub fn divergence_grad_raw(kind: DivergenceKind, p: &[f64], q: &[f64]) -> Result<Vec<f64>> {
    check_dims(p, q)?;
    let n = p.len();
    let scale = 1.0 / (1.0 + n as f64 * kind.epsilon);
    let ps = smooth(p, kind.epsilon);
    let qs = smooth(q, kind.epsilon);
    let (p, q) = (&ps[..], &qs[..]);
    let mut g: Vec<f64> = match kind.metric {
        Metric::Kld => p.iter().zip(q).map(|(&a, &b)| a.ln() - b.ln() + 1.0).collect(),
        Metric::ReverseKld => p.iter().zip(q).map(|(&a, &b)| -b / a).collect(),
        Metric::Jsd => p
            .iter()
            .zip(q)
            .map(|(&a, &b)| 0.5 * (a.ln() - (0.5 * (a + b)).ln()))
            .collect(),
        Metric::Hellinger => {
            let h = hellinger_sq(p, q).sqrt();
            if h == 0.0 {
                vec![0.0; n]
            } else {
                p.iter()
                    .zip(q)
                    .map(|(&a, &b)| 0.5 * (a.sqrt() - b.sqrt()) / a.sqrt() / (2.0 * h))
                    .collect()
            }
        }
        Metric::Jeffrey => p
            .iter()
            .zip(q)
            .map(|(&a, &b)| (a.ln() - b.ln()) + (a - b) / a)
            .collect(),
        Metric::ChiSquared => p.iter().zip(q).map(|(&a, &b)| 2.0 * (a - b) / b).collect(),
        Metric::Wasserstein => {
            let c = cumulative_diff(p, q);
            let mut g = vec![0.0; n];
            let mut acc = 0.0;
            for j in (0..c.len()).rev() {
                if c[j] != 0.0 {
                    acc += c[j].signum();
                }
                g[j] = acc;
            }
            g
        }
    };
    g.iter_mut().for_each(|v| *v *= scale);
    Ok(g)
}

pub fn divergence(kind: DivergenceKind, p: &ProbabilityVector, q: &ProbabilityVector) -> Result<f64> {
    divergence_raw(kind, p.values(), q.values())
}

fn softmax_tempered(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits
        .iter()
        .map(|&v| ((v - max) / temperature).exp())
        .collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn channel_means(z: &[f64], hw: usize, c: usize) -> Vec<f64> {
    let mut means = vec![0.0; c];
    for px in z.chunks_exact(c) {
        for (m, v) in means.iter_mut().zip(px) {
            *m += v;
        }
    }
    means.iter_mut().for_each(|m| *m /= hw as f64);
    means
}

/// Transform on a single `[h*w, c]` slice (channels innermost).
pub fn normalize_features_raw(
    z: &[f64],
    hw: usize,
    c: usize,
    cfg: &TransformFilterConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if c == 0 {
        return Err(Error::InvalidArgument("feature maps have no channels".into()));
    }
    if hw == 0 || z.is_empty() {
        return Err(Error::InvalidArgument("feature maps have empty spatial extent".into()));
    }
    if z.len() != hw * c {
        return Err(Error::Shape(format!("{} values for {hw}x{c} maps", z.len())));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite feature value".into()));
    }
    Ok(softmax_tempered(&channel_means(z, hw, c), cfg.temperature))
}

fn map_dims(z: &Tensor) -> Result<(usize, usize)> {
    match z.shape() {
        [h, w, c] => Ok((h * w, *c)),
        other => Err(Error::Shape(format!(
            "feature maps must be [height, width, channels], got {other:?}"
        ))),
    }
}

pub fn normalize_features(z: &Tensor, cfg: &TransformFilterConfig) -> Result<ProbabilityVector> {
    let (hw, c) = map_dims(z)?;
    Ok(ProbabilityVector(normalize_features_raw(z.data(), hw, c, cfg)?))
}

pub fn regularizer_omega(
    z: &Tensor,
    prior: &ProbabilityVector,
    kind: DivergenceKind,
    cfg: &TransformFilterConfig,
) -> Result<f64> {
    let v = normalize_features(z, cfg)?;
    if v.dim() != prior.dim() {
        return Err(Error::Shape(format!(
            "prior has {} entries for {} channels",
            prior.dim(),
            v.dim()
        )));
    }
    divergence(kind, &v, prior)
}

/// Value and gradient of the regularizer for one `[h*w, c]` map.
pub fn omega_with_grad_raw(
    z: &[f64],
    hw: usize,
    c: usize,
    prior: &[f64],
    kind: DivergenceKind,
    cfg: &TransformFilterConfig,
) -> Result<(f64, Vec<f64>)> {
    if prior.len() != c {
        return Err(Error::Shape(format!(
            "prior has {} entries for {c} channels",
            prior.len()
        )));
    }
    let v = normalize_features_raw(z, hw, c, cfg)?;
    let value = divergence_raw(kind, &v, prior)?;
    let gv = divergence_grad_raw(kind, &v, prior)?;
    let dot: f64 = v.iter().zip(&gv).map(|(a, b)| a * b).sum();
    let gmean: Vec<f64> = v
        .iter()
        .zip(&gv)
        .map(|(&vi, &gi)| vi * (gi - dot) / cfg.temperature / hw as f64)
        .collect();
    let mut grad = vec![0.0; z.len()];
    for px in grad.chunks_exact_mut(c) {
        px.copy_from_slice(&gmean);
    }
    Ok((value, grad))
}

/// Value and gradient with respect to `z` of [`regularizer_omega`].
pub fn regularizer_omega_with_grad(
    z: &Tensor,
    prior: &ProbabilityVector,
    kind: DivergenceKind,
    cfg: &TransformFilterConfig,
) -> Result<(f64, Vec<f64>)> {
    let (hw, c) = map_dims(z)?;
    omega_with_grad_raw(z.data(), hw, c, prior.values(), kind, cfg)
}

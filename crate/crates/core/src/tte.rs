//! Temporal task ensemble: per-epoch fusion of task-branch encoder weights.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::LayerKind;
use crate::pretext::{total_loss, TaskId};
use crate::store::SnapshotRing;
use crate::tensor::{layer_of, DType, ParameterSet, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeltaMode {
    #[default]
    Absolute,
    Signed,
}

/// What replaces the ensemble when it is disabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    /// Equal-weight mean of the task branches.
    #[default]
    Mean,
    /// No fusion: every task keeps training its own encoder.
    Independent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TteConfig {
    pub enabled: bool,
    pub mode: DeltaMode,
    pub m_max: f64,
    pub history: usize,
    /// Explicit layer names; derived from the architecture when absent.
    pub layers: Option<Vec<String>>,
    pub baseline: Baseline,
    pub alpha: BTreeMap<TaskId, f64>,
    pub beta: f64,
}

impl Default for TteConfig {
    fn default() -> Self {
        let c = EnsembleCoefficients::initial(&TaskId::ALL);
        TteConfig {
            enabled: true,
            mode: DeltaMode::Absolute,
            m_max: c.m_max,
            history: SnapshotRing::DEFAULT_CAPACITY,
            layers: None,
            baseline: Baseline::Mean,
            alpha: c.alpha,
            beta: c.beta,
        }
    }
}

impl TteConfig {
    pub fn coefficients(&self, tasks: &[TaskId]) -> Result<EnsembleCoefficients> {
        let alpha = tasks
            .iter()
            .map(|t| {
                self.alpha
                    .get(t)
                    .map(|a| (*t, *a))
                    .ok_or_else(|| Error::Config(format!("no initial alpha for task {t}")))
            })
            .collect::<Result<_>>()?;
        EnsembleCoefficients::new(alpha, self.beta, self.m_max)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LayerPolicy {
    selected: BTreeSet<String>,
}

impl LayerPolicy {
    pub fn new<S: Into<String>>(layers: impl IntoIterator<Item = S>) -> Self {
        LayerPolicy {
            selected: layers.into_iter().map(Into::into).collect(),
        }
    }

    pub fn contains(&self, layer: &str) -> bool {
        self.selected.contains(layer)
    }

    pub fn layers(&self) -> impl Iterator<Item = &String> {
        self.selected.iter()
    }

    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    fn check_subset(&self, params: &ParameterSet) -> Result<()> {
        let layers: BTreeSet<String> = params.layers().into_iter().collect();
        match self.selected.iter().find(|l| !layers.contains(*l)) {
            Some(l) => Err(Error::Misaligned(format!("policy layer `{l}` not in `{}`", params.arch_id()))),
            None => Ok(()),
        }
    }
}

/// Convolutions whose next non-activation, non-normalization layer is a pool.
pub fn select_tte_layers(arch: &[(String, LayerKind)]) -> LayerPolicy {
    let mut selected = Vec::new();
    for (i, (name, kind)) in arch.iter().enumerate() {
        if *kind != LayerKind::Conv {
            continue;
        }
        let next = arch[i + 1..]
            .iter()
            .map(|(_, k)| *k)
            .find(|k| !matches!(k, LayerKind::Act | LayerKind::Norm));
        if next == Some(LayerKind::Pool) {
            selected.push(name.clone());
        }
    }
    if selected.is_empty() {
        log::warn!("no convolution precedes a pooling layer; ensemble policy is empty");
    }
    LayerPolicy::new(selected)
}

/// Parses `(name, kind)` pairs; unknown kinds are an error.
pub fn parse_arch(desc: &[(&str, &str)]) -> Result<Vec<(String, LayerKind)>> {
    desc.iter()
        .map(|(n, k)| Ok((n.to_string(), k.parse::<LayerKind>()?)))
        .collect()
}

/// Per-entry deltas over the policy layers, kept in 64-bit precision.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaSet {
    pub entries: BTreeMap<String, Tensor>,
    pub mode: DeltaMode,
}

impl DeltaSet {
    pub fn num_values(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    fn layers(&self) -> BTreeSet<String> {
        self.entries.keys().map(|k| layer_of(k).to_string()).collect()
    }
}

fn elementwise(
    a: &ParameterSet,
    b: &ParameterSet,
    policy: &LayerPolicy,
    mode: DeltaMode,
    f: impl Fn(f64, f64) -> f64,
) -> Result<DeltaSet> {
    a.check_aligned(b)?;
    policy.check_subset(a)?;
    let mut entries = BTreeMap::new();
    for (name, ta) in a.iter() {
        if !policy.contains(layer_of(name)) {
            continue;
        }
        let tb = b.require(name)?;
        let d = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        entries.insert(name.clone(), Tensor::new(ta.shape().to_vec(), d, DType::F64)?);
    }
    Ok(DeltaSet { entries, mode })
}

pub fn temporal_gradient(
    phi_k_t: &ParameterSet,
    phi_prev: &ParameterSet,
    policy: &LayerPolicy,
    mode: DeltaMode,
) -> Result<DeltaSet> {
    match mode {
        DeltaMode::Absolute => elementwise(phi_k_t, phi_prev, policy, mode, |a, b| (a - b).abs()),
        DeltaMode::Signed => elementwise(phi_k_t, phi_prev, policy, mode, |a, b| a - b),
    }
}

/// `|a - b| / (|a| + |b|)`, with `0/0 = 0`; halved when the sums overflow.
pub fn canberra(a: f64, b: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    let (d, s) = ((a - b).abs(), a.abs() + b.abs());
    if d.is_finite() && s.is_finite() {
        return (d / s).min(1.0);
    }
    let (a, b) = (a / 2.0, b / 2.0);
    ((a - b).abs() / (a.abs() + b.abs())).min(1.0)
}

pub fn task_gradient(phi_first: &ParameterSet, phi_last: &ParameterSet, policy: &LayerPolicy) -> Result<DeltaSet> {
    elementwise(phi_first, phi_last, policy, DeltaMode::Absolute, canberra)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleCoefficients {
    pub alpha: BTreeMap<TaskId, f64>,
    pub beta: f64,
    pub m_max: f64,
}

impl EnsembleCoefficients {
    pub fn new(alpha: BTreeMap<TaskId, f64>, beta: f64, m_max: f64) -> Result<Self> {
        if alpha.values().any(|a| !(*a > 0.0 && a.is_finite())) || !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::Config("ensemble coefficients must be positive".into()));
        }
        if !(m_max > 0.0 && m_max < 1.0) {
            return Err(Error::Config(format!("m_max must lie in (0, 1), got {m_max}")));
        }
        Ok(EnsembleCoefficients { alpha, beta, m_max })
    }

    /// Starting values: 0.4 for reconstruction, 0.2 for the other tasks,
    /// `beta = 5e-3`, `m_max = 0.5`.
    pub fn initial(tasks: &[TaskId]) -> Self {
        let alpha = tasks
            .iter()
            .map(|&t| (t, if t == TaskId::Reconstruction { 0.4 } else { 0.2 }))
            .collect();
        EnsembleCoefficients {
            alpha,
            beta: 5e-3,
            m_max: 0.5,
        }
    }
}

/// Per-task losses for each epoch plus the epoch total.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossLedger {
    records: BTreeMap<u64, BTreeMap<TaskId, f64>>,
    totals: BTreeMap<u64, f64>,
}

impl LossLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Epochs must be contiguous; the total is computed over `enabled`.
    pub fn record(&mut self, epoch: u64, losses: BTreeMap<TaskId, f64>, enabled: &[TaskId]) -> Result<f64> {
        if let Some((&last, _)) = self.records.last_key_value() {
            if epoch != last + 1 {
                return Err(Error::InvalidArgument(format!(
                    "ledger epoch {epoch} does not follow {last}"
                )));
            }
        }
        let total = total_loss(&losses, enabled)?;
        self.records.insert(epoch, losses);
        self.totals.insert(epoch, total);
        Ok(total)
    }

    pub fn loss(&self, epoch: u64, task: TaskId) -> Option<f64> {
        self.records.get(&epoch)?.get(&task).copied()
    }

    pub fn total(&self, epoch: u64) -> Option<f64> {
        self.totals.get(&epoch).copied()
    }

    pub fn epochs(&self) -> impl Iterator<Item = u64> + '_ {
        self.records.keys().copied()
    }

    pub fn entries(&self) -> impl Iterator<Item = (u64, TaskId, f64)> + '_ {
        self.records
            .iter()
            .flat_map(|(&e, m)| m.iter().map(move |(&t, &l)| (e, t, l)))
    }

    pub fn num_records(&self) -> usize {
        self.records.values().map(BTreeMap::len).sum()
    }
}

fn decrease_factor(now: f64, before: f64, m_max: f64) -> f64 {
    let m = (now - before).min(0.0).clamp(-m_max, 0.0);
    1.0 + m
}

pub fn update_coefficients(c: &EnsembleCoefficients, ledger: &LossLedger, t: u64) -> Result<EnsembleCoefficients> {
    let missing = |what: String| Error::NotFound(format!("ledger entry for {what}"));
    let prev = t.checked_sub(1).ok_or_else(|| missing("epoch -1".into()))?;
    let mut alpha = BTreeMap::new();
    for (&task, &a) in &c.alpha {
        let now = ledger.loss(t, task).ok_or_else(|| missing(format!("epoch {t}, task {task}")))?;
        let before = ledger.loss(prev, task).ok_or_else(|| missing(format!("epoch {prev}, task {task}")))?;
        alpha.insert(task, a / decrease_factor(now, before, c.m_max));
    }
    let now = ledger.total(t).ok_or_else(|| missing(format!("total at epoch {t}")))?;
    let before = ledger.total(prev).ok_or_else(|| missing(format!("total at epoch {prev}")))?;
    Ok(EnsembleCoefficients {
        alpha,
        beta: c.beta / decrease_factor(now, before, c.m_max),
        m_max: c.m_max,
    })
}

/// Fused weights: selected layers get `phi_prev + sum_k alpha_k d_k + beta d_o`
/// (tasks in id order); every other entry is copied from `phi_last`.
pub fn ensemble_step(
    phi_prev: &ParameterSet,
    deltas: &BTreeMap<TaskId, DeltaSet>,
    task_delta: &DeltaSet,
    c: &EnsembleCoefficients,
    policy: &LayerPolicy,
    phi_last: &ParameterSet,
) -> Result<ParameterSet> {
    phi_prev.check_aligned(phi_last)?;
    policy.check_subset(phi_prev)?;
    let expected: BTreeSet<String> = policy.layers().cloned().collect();
    for (task, d) in deltas.iter().map(|(t, d)| (t.to_string(), d)).chain([("o".to_string(), task_delta)]) {
        if d.layers() != expected {
            return Err(Error::Misaligned(format!("delta for task {task} does not cover the policy layers")));
        }
    }
    let alphas: Vec<(f64, &DeltaSet)> = deltas
        .iter()
        .map(|(t, d)| {
            c.alpha
                .get(t)
                .map(|a| (*a, d))
                .ok_or_else(|| Error::InvalidArgument(format!("no coefficient for task {t}")))
        })
        .collect::<Result<_>>()?;

    let mut out = ParameterSet::new(phi_prev.arch_id());
    for (name, prev) in phi_prev.iter() {
        if !policy.contains(layer_of(name)) {
            out.insert(name.clone(), phi_last.require(name)?.clone());
            continue;
        }
        let mut acc = prev.data().to_vec();
        for (a, d) in &alphas {
            let d = d.entries.get(name).ok_or_else(|| Error::Misaligned(format!("delta missing `{name}`")))?;
            if d.len() != acc.len() {
                return Err(Error::Shape(format!("delta for `{name}` has wrong length")));
            }
            acc.iter_mut().zip(d.data()).for_each(|(w, v)| *w += a * v);
        }
        let d = task_delta
            .entries
            .get(name)
            .ok_or_else(|| Error::Misaligned(format!("task delta missing `{name}`")))?;
        if d.len() != acc.len() {
            return Err(Error::Shape(format!("task delta for `{name}` has wrong length")));
        }
        acc.iter_mut().zip(d.data()).for_each(|(w, v)| *w += c.beta * v);
        out.insert(name.clone(), Tensor::new(prev.shape().to_vec(), acc, prev.dtype())?);
    }
    Ok(out)
}

fn mean_of<'a>(sets: impl ExactSizeIterator<Item = &'a ParameterSet>) -> Result<ParameterSet> {
    let n = sets.len();
    let mut it = sets;
    let first = it.next().ok_or_else(|| Error::Empty("nothing to average".into()))?;
    let mut sums: Vec<Vec<f64>> = first.iter().map(|(_, t)| t.data().to_vec()).collect();
    for s in it {
        first.check_aligned(s)?;
        for (acc, (_, t)) in sums.iter_mut().zip(s.iter()) {
            acc.iter_mut().zip(t.data()).for_each(|(a, v)| *a += v);
        }
    }
    let mut out = ParameterSet::new(first.arch_id());
    for (acc, (name, t)) in sums.into_iter().zip(first.iter()) {
        let data = acc.into_iter().map(|v| v / n as f64).collect();
        out.insert(name.clone(), Tensor::new(t.shape().to_vec(), data, t.dtype())?);
    }
    Ok(out)
}

/// Element-wise mean over every snapshot currently in the ring.
pub fn moving_average(ring: &SnapshotRing) -> Result<ParameterSet> {
    if ring.is_empty() {
        return Err(Error::Empty("snapshot ring is empty".into()));
    }
    mean_of(ring.iter().map(|(_, p)| p).collect::<Vec<_>>().into_iter())
}

/// Equal-weight average of task branches (the non-ensemble baseline).
pub fn mean_fusion(branches: &[&ParameterSet]) -> Result<ParameterSet> {
    mean_of(branches.iter().copied())
}

/// Mean absolute delta per task.
pub fn impact_trace(deltas: &BTreeMap<TaskId, DeltaSet>) -> Result<BTreeMap<TaskId, f64>> {
    if deltas.is_empty() {
        return Err(Error::Empty("no deltas for the impact trace".into()));
    }
    deltas
        .iter()
        .map(|(t, d)| {
            let n = d.num_values();
            if n == 0 {
                return Err(Error::Empty(format!("delta set for task {t} is empty")));
            }
            let s: f64 = d.entries.values().flat_map(|e| e.data()).map(|v| v.abs()).sum();
            Ok((*t, s / n as f64))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImpactTrace {
    pub records: Vec<(u64, TaskId, f64)>,
}

impl ImpactTrace {
    pub fn append(&mut self, epoch: u64, mu: &BTreeMap<TaskId, f64>) {
        self.records.extend(mu.iter().map(|(&t, &m)| (epoch, t, m)));
    }

    pub fn by_epoch(&self) -> BTreeMap<u64, BTreeMap<TaskId, f64>> {
        let mut out: BTreeMap<u64, BTreeMap<TaskId, f64>> = BTreeMap::new();
        for &(e, t, m) in &self.records {
            out.entry(e).or_default().insert(t, m);
        }
        out
    }
}

/// Result of fusing one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedEpoch {
    pub phi: ParameterSet,
    pub coefficients: EnsembleCoefficients,
    pub impact: BTreeMap<TaskId, f64>,
}

/// One merge phase. `trained` holds every branch's weights after epoch `t`,
/// `order` is this epoch's task order and `ledger` already contains epoch `t`.
/// At `t = 1` the coefficients are used as given.
pub fn fuse_epoch(
    phi_prev: &ParameterSet,
    trained: &BTreeMap<TaskId, ParameterSet>,
    order: &[TaskId],
    ledger: &LossLedger,
    coefficients: &EnsembleCoefficients,
    t: u64,
    mode: DeltaMode,
    policy: &LayerPolicy,
) -> Result<FusedEpoch> {
    let (first, last) = match (order.first(), order.last()) {
        (Some(f), Some(l)) => (*f, *l),
        _ => return Err(Error::Empty("task order is empty".into())),
    };
    let get = |k: TaskId| {
        trained
            .get(&k)
            .ok_or_else(|| Error::NotFound(format!("trained weights for task {k}")))
    };
    let deltas = trained
        .iter()
        .map(|(k, p)| Ok((*k, temporal_gradient(p, phi_prev, policy, mode)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let task_delta = task_gradient(get(first)?, get(last)?, policy)?;
    let coefficients = if t <= 1 {
        coefficients.clone()
    } else {
        update_coefficients(coefficients, ledger, t)?
    };
    let phi = ensemble_step(phi_prev, &deltas, &task_delta, &coefficients, policy, get(last)?)?;
    let impact = impact_trace(&deltas)?;
    Ok(FusedEpoch {
        phi,
        coefficients,
        impact,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ps(values: &[f64]) -> ParameterSet {
        ParameterSet::new("a").with(
            "conv1.weight",
            Tensor::new(vec![values.len()], values.to_vec(), DType::F64).unwrap(),
        )
    }

    fn conv1() -> LayerPolicy {
        LayerPolicy::new(["conv1"])
    }

    fn values(d: &DeltaSet) -> Vec<f64> {
        d.entries["conv1.weight"].data().to_vec()
    }

    #[test]
    fn temporal_gradient_examples() {
        let (a, b) = (ps(&[1.0, -2.0]), ps(&[0.5, -1.0]));
        assert_eq!(values(&temporal_gradient(&a, &b, &conv1(), DeltaMode::Absolute).unwrap()), [0.5, 1.0]);
        assert_eq!(values(&temporal_gradient(&a, &b, &conv1(), DeltaMode::Signed).unwrap()), [0.5, -1.0]);
        assert_eq!(values(&temporal_gradient(&a, &a, &conv1(), DeltaMode::Absolute).unwrap()), [0.0, 0.0]);
        assert!(temporal_gradient(&a, &ps(&[1.0]), &conv1(), DeltaMode::Absolute).is_err());
        assert!(temporal_gradient(&a, &b, &LayerPolicy::new(["fc9"]), DeltaMode::Absolute).is_err());
    }

    #[test]
    fn canberra_examples() {
        assert_eq!(canberra(1.0, 3.0), 0.5);
        assert_eq!(canberra(0.0, 0.0), 0.0);
        assert_eq!(canberra(2.5, 2.5), 0.0);
        assert_eq!(canberra(1.0, -1.0), 1.0);
        assert_eq!(canberra(f64::MAX, -f64::MAX), 1.0);
        assert_eq!(canberra(5e-324, 0.0), 1.0);
        let d = task_gradient(&ps(&[1.0, 0.0]), &ps(&[3.0, 0.0]), &conv1()).unwrap();
        assert_eq!(values(&d), [0.5, 0.0]);
    }

    #[test]
    fn coefficient_examples() {
        let mut ledger = LossLedger::new();
        let t = [TaskId::Reconstruction, TaskId::Segmentation, TaskId::Colorization];
        ledger
            .record(1, [(t[0], 1.5), (t[1], 1.0), (t[2], 5.0)].into(), &t)
            .unwrap();
        ledger
            .record(2, [(t[0], 2.0), (t[1], 0.6), (t[2], 1.0)].into(), &t)
            .unwrap();
        let c = EnsembleCoefficients::new([(t[0], 0.4), (t[1], 0.2), (t[2], 0.2)].into(), 5e-3, 0.5).unwrap();
        let next = update_coefficients(&c, &ledger, 2).unwrap();
        assert_eq!(next.alpha[&t[0]], 0.4);
        assert!((next.alpha[&t[1]] - 0.2 / 0.6).abs() < 1e-15);
        assert!((next.alpha[&t[2]] - 0.4).abs() < 1e-15);
        // total fell 7.5 -> 3.6, clamped
        assert!((next.beta - 0.01).abs() < 1e-15);
        assert!(update_coefficients(&c, &ledger, 3).is_err());
        assert!(update_coefficients(&c, &ledger, 1).is_err());
    }

    #[test]
    fn ledger_rejects_gaps() {
        let mut l = LossLedger::new();
        let t = [TaskId::Jigsaw];
        l.record(1, [(t[0], 1.0)].into(), &t).unwrap();
        assert!(l.record(3, [(t[0], 1.0)].into(), &t).is_err());
        assert!(l.record(2, BTreeMap::new(), &t).is_err());
        assert_eq!(l.total(1), Some(1.0));
    }

    #[test]
    fn ensemble_step_example() {
        let prev = ps(&[0.0, 0.0]);
        let d = DeltaSet {
            entries: [("conv1.weight".to_string(), Tensor::new(vec![2], vec![0.5, 1.0], DType::F64).unwrap())].into(),
            mode: DeltaMode::Absolute,
        };
        let o = DeltaSet {
            entries: [("conv1.weight".to_string(), Tensor::new(vec![2], vec![0.5, 0.5], DType::F64).unwrap())].into(),
            mode: DeltaMode::Absolute,
        };
        let c = EnsembleCoefficients::initial(&[TaskId::Reconstruction]);
        let out = ensemble_step(&prev, &[(TaskId::Reconstruction, d.clone())].into(), &o, &c, &conv1(), &prev).unwrap();
        let v = out.get("conv1.weight").unwrap().data();
        assert!((v[0] - 0.2025).abs() < 1e-15 && (v[1] - 0.4025).abs() < 1e-15);

        let missing = EnsembleCoefficients::initial(&[TaskId::Jigsaw]);
        assert!(ensemble_step(&prev, &[(TaskId::Reconstruction, d)].into(), &o, &missing, &conv1(), &prev).is_err());
    }

    #[test]
    fn unselected_layers_come_from_the_last_task() {
        let mk = |w: f64, b: f64| {
            ParameterSet::new("a")
                .with("conv1.weight", Tensor::full(vec![2], w, DType::F32))
                .with("fc.weight", Tensor::full(vec![2], b, DType::F32))
        };
        let (prev, k, last) = (mk(0.0, 0.0), mk(1.0, 5.0), mk(2.0, 7.0));
        let trained: BTreeMap<_, _> = [(TaskId::Segmentation, k), (TaskId::Jigsaw, last)].into();
        let mut ledger = LossLedger::new();
        let tasks = [TaskId::Segmentation, TaskId::Jigsaw];
        ledger.record(1, [(tasks[0], 1.0), (tasks[1], 1.0)].into(), &tasks).unwrap();
        let c = EnsembleCoefficients::initial(&tasks);
        let f = fuse_epoch(&prev, &trained, &tasks, &ledger, &c, 1, DeltaMode::Absolute, &conv1()).unwrap();
        assert_eq!(f.phi.get("fc.weight").unwrap().data(), &[7.0, 7.0]);
        assert_eq!(f.impact[&TaskId::Jigsaw], 2.0);
        // 0.2 * 1 + 0.2 * 2 + 0.005 * (1/3)
        let expect = (0.6f64 + 0.005 / 3.0) as f32 as f64;
        assert_eq!(f.phi.get("conv1.weight").unwrap().data()[0], expect);
    }

    #[test]
    fn moving_average_examples() {
        let mut ring = SnapshotRing::new(5).unwrap();
        assert!(moving_average(&ring).is_err());
        ring.push(0, ps(&[0.0, 0.0])).unwrap();
        ring.push(1, ps(&[2.0, 4.0])).unwrap();
        assert_eq!(moving_average(&ring).unwrap().get("conv1.weight").unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn impact_examples() {
        let d = |v: Vec<f64>| DeltaSet {
            entries: [("conv1.weight".to_string(), Tensor::new(vec![v.len()], v, DType::F64).unwrap())].into(),
            mode: DeltaMode::Absolute,
        };
        let mu = impact_trace(&[(TaskId::Jigsaw, d(vec![0.5, 1.0])), (TaskId::Colorization, d(vec![0.0, 0.0]))].into()).unwrap();
        assert_eq!(mu[&TaskId::Jigsaw], 0.75);
        assert_eq!(mu[&TaskId::Colorization], 0.0);
        assert!(impact_trace(&BTreeMap::new()).is_err());
    }

    #[test]
    fn layer_selection() {
        let arch = parse_arch(&[
            ("conv1", "conv"),
            ("pool1", "pool"),
            ("conv2", "conv"),
            ("conv3", "conv"),
            ("pool2", "pool"),
            ("fc", "fc"),
        ])
        .unwrap();
        let p = select_tte_layers(&arch);
        assert_eq!(p.layers().cloned().collect::<Vec<_>>(), ["conv1", "conv3"]);
        let flat = parse_arch(&[("conv1", "conv"), ("fc", "fc")]).unwrap();
        assert!(select_tte_layers(&flat).is_empty());
        assert!(parse_arch(&[("x", "lstm")]).is_err());
        let enc = crate::model::Encoder::new(&[4, 8, 16, 16]).unwrap();
        assert_eq!(select_tte_layers(&enc.net.arch_description()).len(), 4);
    }

    proptest! {
        #[test]
        fn canberra_is_bounded(a in proptest::num::f64::NORMAL | proptest::num::f64::ZERO, b in proptest::num::f64::NORMAL | proptest::num::f64::ZERO) {
            let c = canberra(a, b);
            prop_assert!((0.0..=1.0).contains(&c));
        }

        #[test]
        fn coefficients_never_decrease(losses in proptest::collection::vec(0.0f64..10.0, 2..12)) {
            let mut ledger = LossLedger::new();
            let t = [TaskId::Colorization];
            for (i, l) in losses.iter().enumerate() {
                ledger.record(i as u64 + 1, [(t[0], *l)].into(), &t).unwrap();
            }
            let mut c = EnsembleCoefficients::initial(&t);
            for e in 2..=losses.len() as u64 {
                let next = update_coefficients(&c, &ledger, e).unwrap();
                prop_assert!(next.alpha[&t[0]] >= c.alpha[&t[0]] && next.beta >= c.beta);
                prop_assert!(next.alpha[&t[0]].is_finite());
                if losses[e as usize - 1] >= losses[e as usize - 2] {
                    prop_assert_eq!(next.alpha[&t[0]], c.alpha[&t[0]]);
                }
                c = next;
            }
        }

        #[test]
        fn absolute_updates_are_monotone(prev in proptest::collection::vec(-1.0f64..1.0, 4), k in proptest::collection::vec(-1.0f64..1.0, 4)) {
            let (p, q) = (ps(&prev), ps(&k));
            let tasks = [TaskId::Segmentation];
            let d = temporal_gradient(&q, &p, &conv1(), DeltaMode::Absolute).unwrap();
            let o = task_gradient(&q, &q, &conv1()).unwrap();
            let c = EnsembleCoefficients::initial(&tasks);
            let out = ensemble_step(&p, &[(tasks[0], d)].into(), &o, &c, &conv1(), &q).unwrap();
            for (a, b) in out.get("conv1.weight").unwrap().data().iter().zip(&prev) {
                prop_assert!(a >= b);
            }
        }
    }
}

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_RECALL_K: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub nmi: f64,
    pub ari: f64,
    pub recall_at_k: f64,
}

struct Contingency {
    n: usize,
    cells: Vec<(usize, usize, usize)>,
    rows: Vec<usize>,
    cols: Vec<usize>,
}

fn contingency(truth: &[usize], pred: &[usize]) -> Contingency {
    let mut cells: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut rows: BTreeMap<usize, usize> = BTreeMap::new();
    let mut cols: BTreeMap<usize, usize> = BTreeMap::new();
    for (&t, &p) in truth.iter().zip(pred) {
        *cells.entry((t, p)).or_default() += 1;
        *rows.entry(t).or_default() += 1;
        *cols.entry(p).or_default() += 1;
    }
    Contingency {
        n: truth.len(),
        cells: cells
            .into_iter()
            .map(|((t, p), c)| (c, rows[&t], cols[&p]))
            .collect(),
        rows: rows.into_values().collect(),
        cols: cols.into_values().collect(),
    }
}

/// Sum of terms in a canonical order, so relabeling clusters (which only
/// permutes the terms) gives a bit-identical result.
fn canonical_sum(mut terms: Vec<f64>) -> f64 {
    terms.sort_by(f64::total_cmp);
    terms.into_iter().sum()
}

fn entropy(counts: &[usize], n: usize) -> f64 {
    let n = n as f64;
    -canonical_sum(
        counts
            .iter()
            .map(|&c| {
                let p = c as f64 / n;
                p * p.ln()
            })
            .collect(),
    )
}

fn check_lengths(truth: &[usize], pred: &[usize]) -> Result<()> {
    if truth.len() != pred.len() {
        return Err(Error::Shape(format!("{} true labels vs {} predictions", truth.len(), pred.len())));
    }
    if truth.is_empty() {
        return Err(Error::Empty("no labels to compare".into()));
    }
    Ok(())
}

/// Mutual information normalized by the arithmetic mean of the entropies.
pub fn nmi(truth: &[usize], pred: &[usize]) -> Result<f64> {
    check_lengths(truth, pred)?;
    let c = contingency(truth, pred);
    if c.rows.len() == 1 {
        log::warn!("ground truth has a single class; NMI reported as 0");
        return Ok(0.0);
    }
    let n = c.n as f64;
    let mi = canonical_sum(
        c.cells
            .iter()
            .map(|&(nij, a, b)| {
                let nij = nij as f64;
                nij / n * (n * nij / (a as f64 * b as f64)).ln()
            })
            .collect(),
    );
    let (hu, hv) = (entropy(&c.rows, c.n), entropy(&c.cols, c.n));
    let denom = (hu + hv) / 2.0;
    if denom <= 0.0 {
        return Ok(0.0);
    }
    Ok((mi / denom).clamp(0.0, 1.0))
}

fn comb2(x: usize) -> f64 {
    (x as f64) * (x as f64 - 1.0) / 2.0
}

/// Adjusted Rand index (Hubert and Arabie).
pub fn ari(truth: &[usize], pred: &[usize]) -> Result<f64> {
    check_lengths(truth, pred)?;
    let c = contingency(truth, pred);
    // integer-valued sums are exact in f64 at these sizes
    let index: f64 = c.cells.iter().map(|&(nij, _, _)| comb2(nij)).sum();
    let a: f64 = c.rows.iter().map(|&x| comb2(x)).sum();
    let b: f64 = c.cols.iter().map(|&x| comb2(x)).sum();
    let total = comb2(c.n);
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = a * b / total;
    let max = (a + b) / 2.0;
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// Fraction of points whose `k` nearest neighbours (by Euclidean distance,
/// ties by index, excluding the point) contain a same-class item.
pub fn recall_at_k(embeddings: &Tensor, labels: &[usize], k: usize) -> Result<f64> {
    let (n, d) = match embeddings.shape() {
        [n, d] => (*n, *d),
        s => return Err(Error::Shape(format!("embeddings must be [n, d], got {s:?}"))),
    };
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} embeddings", labels.len())));
    }
    if k == 0 || k >= n {
        return Err(Error::InvalidArgument(format!("k must be in 1..{n}, got {k}")));
    }
    let hits = (0..n)
        .filter(|&i| {
            nearest_neighbours(embeddings.data(), d, i, k)
                .iter()
                .any(|&j| labels[j] == labels[i])
        })
        .count();
    Ok(hits as f64 / n as f64)
}

pub fn nearest_neighbours(data: &[f64], d: usize, query: usize, k: usize) -> Vec<usize> {
    let q = &data[query * d..(query + 1) * d];
    let mut dist: Vec<(f64, usize)> = data
        .chunks_exact(d)
        .enumerate()
        .filter(|(j, _)| *j != query)
        .map(|(j, x)| (x.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum(), j))
        .collect();
    dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    dist.into_iter().take(k).map(|(_, j)| j).collect()
}

pub fn cluster_metrics(truth: &[usize], pred: &[usize], embeddings: &Tensor, k: usize) -> Result<ClusterReport> {
    Ok(ClusterReport {
        nmi: nmi(truth, pred)?,
        ari: ari(truth, pred)?,
        recall_at_k: recall_at_k(embeddings, truth, k)?,
    })
}

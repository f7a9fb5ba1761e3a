use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{rng_for, stream};
use crate::tensor::{DType, Tensor};

pub const DEFAULT_NU: f64 = 1.0;

fn dims(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [n, d] => Ok((*n, *d)),
        s => Err(Error::Shape(format!("{what} must be [rows, dims], got {s:?}"))),
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    if !t.is_finite() {
        return Err(Error::InvalidArgument(format!("non-finite value in {what}")));
    }
    Ok(())
}

/// Student's t soft assignments, normalized per row. Computed in log space
/// so distant points still get a well-defined row.
pub fn dec_soft_assign(z: &Tensor, centers: &Tensor, nu: f64) -> Result<Tensor> {
    let (n, d) = dims(z, "embeddings")?;
    let (k, dc) = dims(centers, "centers")?;
    if k < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 clusters, got {k}")));
    }
    if d != dc {
        return Err(Error::Shape(format!("embedding dim {d} vs center dim {dc}")));
    }
    if !(nu > 0.0) {
        return Err(Error::InvalidArgument("degrees of freedom must be positive".into()));
    }
    check_finite(z, "embeddings")?;
    check_finite(centers, "centers")?;
    let power = -(nu + 1.0) / 2.0;
    let mut q = Vec::with_capacity(n * k);
    let mut logs = vec![0.0; k];
    for zi in z.data().chunks_exact(d) {
        for (j, mu) in centers.data().chunks_exact(d).enumerate() {
            logs[j] = power * (sq_dist(zi, mu) / nu).ln_1p();
        }
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
        let s: f64 = e.iter().sum();
        q.extend(e.into_iter().map(|v| v / s));
    }
    Tensor::new(vec![n, k], q, DType::F64)
}

/// `p_ij = (q_ij^2 / f_j) / sum_j' (q_ij'^2 / f_j')` with `f_j = sum_i q_ij`.
pub fn dec_target_distribution(q: &Tensor) -> Result<Tensor> {
    let (n, k) = dims(q, "soft assignments")?;
    let mut f = vec![0.0; k];
    for row in q.data().chunks_exact(k) {
        f.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
    if let Some(j) = f.iter().position(|&v| !(v > 0.0)) {
        return Err(Error::InvalidArgument(format!("cluster {j} has zero mass")));
    }
    let mut p = Vec::with_capacity(n * k);
    for row in q.data().chunks_exact(k) {
        let w: Vec<f64> = row.iter().zip(&f).map(|(q, f)| q * q / f).collect();
        let s: f64 = w.iter().sum();
        p.extend(w.into_iter().map(|v| v / s));
    }
    Tensor::new(vec![n, k], p, DType::F64)
}

/// k-means++ seeding followed by Lloyd iterations.
pub fn kmeans_init(z: &Tensor, k: usize, seed: u64) -> Result<Tensor> {
    let (n, d) = dims(z, "embeddings")?;
    if k == 0 || n < k {
        return Err(Error::InvalidArgument(format!("cannot pick {k} centers from {n} points")));
    }
    check_finite(z, "embeddings")?;
    let pts: Vec<&[f64]> = z.data().chunks_exact(d).collect();
    let mut rng = rng_for(seed, &[stream::KMEANS]);
    let mut centers: Vec<Vec<f64>> = vec![pts[rng.random_range(0..n)].to_vec()];
    let mut best: Vec<f64> = pts.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = best.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &b) in best.iter().enumerate() {
                if b > 0.0 && r < b {
                    pick = i;
                    break;
                }
                r -= b;
            }
            while best[pick] == 0.0 && pick > 0 {
                pick -= 1;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        let c = pts[pick].to_vec();
        best.iter_mut()
            .zip(&pts)
            .for_each(|(b, p)| *b = b.min(sq_dist(p, &c)));
        centers.push(c);
    }

    let mut assign = vec![usize::MAX; n];
    for _ in 0..300 {
        let mut changed = false;
        for (i, p) in pts.iter().enumerate() {
            let j = nearest(p, &centers);
            if assign[i] != j {
                assign[i] = j;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (p, &j) in pts.iter().zip(&assign) {
            sums[j].iter_mut().zip(p.iter()).for_each(|(a, b)| *a += b);
            counts[j] += 1;
        }
        for ((c, s), &m) in centers.iter_mut().zip(sums).zip(&counts) {
            if m > 0 {
                *c = s.into_iter().map(|v| v / m as f64).collect();
            }
        }
    }
    Tensor::new(vec![k, d], centers.concat(), DType::F64)
}

fn nearest(p: &[f64], centers: &[Vec<f64>]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (j, c) in centers.iter().enumerate() {
        let dist = sq_dist(p, c);
        if dist < best.0 {
            best = (dist, j);
        }
    }
    best.1
}

/// Mean `KL(P || Q)` over rows with gradients for embeddings and centers.
pub fn dec_objective_and_grad(
    z: &Tensor,
    centers: &Tensor,
    p: &Tensor,
    nu: f64,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let q = dec_soft_assign(z, centers, nu)?;
    let (n, d) = dims(z, "embeddings")?;
    let k = centers.shape()[0];
    if p.shape() != q.shape() {
        return Err(Error::Shape(format!("target {:?} vs assignments {:?}", p.shape(), q.shape())));
    }
    let c = (nu + 1.0) / nu / n as f64;
    let mut loss = 0.0;
    let mut gz = vec![0.0; n * d];
    let mut gmu = vec![0.0; k * d];
    for i in 0..n {
        let zi = &z.data()[i * d..(i + 1) * d];
        for j in 0..k {
            let (pij, qij) = (p.data()[i * k + j], q.data()[i * k + j]);
            if pij > 0.0 {
                loss += pij * (pij.ln() - qij.ln());
            }
            let mu = &centers.data()[j * d..(j + 1) * d];
            let w = c * (pij - qij) / (1.0 + sq_dist(zi, mu) / nu);
            for t in 0..d {
                let diff = w * (zi[t] - mu[t]);
                gz[i * d + t] += diff;
                gmu[j * d + t] -= diff;
            }
        }
    }
    Ok((loss / n as f64, gz, gmu))
}

pub fn hard_labels(q: &Tensor) -> Vec<usize> {
    let k = q.shape()[1];
    q.data().chunks_exact(k).map(super::argmax).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecConfig {
    pub nu: f64,
    pub max_iterations: usize,
    /// Iterations between target-distribution refreshes.
    pub update_interval: usize,
    pub learning_rate: f64,
    /// Stop when fewer than this fraction of labels change between refreshes.
    pub tolerance: f64,
}

impl Default for DecConfig {
    fn default() -> Self {
        DecConfig {
            nu: DEFAULT_NU,
            max_iterations: 200,
            update_interval: 10,
            learning_rate: 0.1,
            tolerance: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterState {
    pub centers: Tensor,
    pub q: Tensor,
    pub nu: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecOutcome {
    pub state: ClusterState,
    pub labels: Vec<usize>,
    pub iterations: usize,
    pub losses: Vec<f64>,
}

/// Clusters fixed embeddings: k-means initialization, then gradient descent
/// on the centers against a periodically refreshed target distribution.
pub fn dec_fit(z: &Tensor, k: usize, cfg: &DecConfig, seed: u64) -> Result<DecOutcome> {
    if cfg.update_interval == 0 {
        return Err(Error::Config("DEC update interval must be at least 1".into()));
    }
    let mut centers = kmeans_init(z, k, seed)?;
    let mut q = dec_soft_assign(z, &centers, cfg.nu)?;
    let mut p = dec_target_distribution(&q)?;
    let mut labels = hard_labels(&q);
    let mut velocity = vec![0.0; centers.len()];
    let mut losses = Vec::new();
    let mut iterations = 0;
    while iterations < cfg.max_iterations {
        if iterations > 0 && iterations % cfg.update_interval == 0 {
            q = dec_soft_assign(z, &centers, cfg.nu)?;
            p = dec_target_distribution(&q)?;
            let next = hard_labels(&q);
            let changed = next.iter().zip(&labels).filter(|(a, b)| a != b).count();
            labels = next;
            if (changed as f64) < cfg.tolerance * labels.len() as f64 {
                break;
            }
        }
        let (loss, _, gmu) = dec_objective_and_grad(z, &centers, &p, cfg.nu)?;
        losses.push(loss);
        velocity.iter_mut().zip(&gmu).for_each(|(v, g)| *v = 0.9 * *v + g);
        let lr = cfg.learning_rate;
        centers.update(|c| c.iter_mut().zip(&velocity).for_each(|(c, v)| *c -= lr * v));
        iterations += 1;
    }
    let q = dec_soft_assign(z, &centers, cfg.nu)?;
    let labels = hard_labels(&q);
    Ok(DecOutcome {
        state: ClusterState { centers, q, nu: cfg.nu },
        labels,
        iterations,
        losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest};

    fn t(rows: usize, cols: usize, v: Vec<f64>) -> Tensor {
        Tensor::new(vec![rows, cols], v, DType::F64).unwrap()
    }

    #[test]
    fn soft_assign_examples() {
        let centers = t(2, 1, vec![0.0, 2.0]);
        let q = dec_soft_assign(&t(1, 1, vec![1.0]), &centers, 1.0).unwrap();
        assert_eq!(q.data(), &[0.5, 0.5]);
        let q = dec_soft_assign(&t(3, 1, vec![0.0, 0.0, 0.0]), &t(2, 1, vec![0.0, 1.0]), 1.0).unwrap();
        for row in q.data().chunks(2) {
            assert!((row[0] - 2.0 / 3.0).abs() < 1e-15 && (row[1] - 1.0 / 3.0).abs() < 1e-15);
        }
        let far = dec_soft_assign(&t(1, 1, vec![0.0]), &t(2, 1, vec![0.0, 1e6]), 1.0).unwrap();
        assert!(far.data()[0] > 1.0 - 1e-9);
        let same = dec_soft_assign(&t(1, 1, vec![3.0]), &t(2, 1, vec![1.0, 1.0]), 1.0).unwrap();
        assert_eq!(same.data(), &[0.5, 0.5]);
        assert!(dec_soft_assign(&t(1, 1, vec![0.0]), &t(1, 1, vec![0.0]), 1.0).is_err());
    }

    #[test]
    fn target_distribution_examples() {
        let onehot = t(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(dec_target_distribution(&onehot).unwrap(), onehot);
        let uni = t(2, 2, vec![0.5; 4]);
        assert_eq!(dec_target_distribution(&uni).unwrap().data(), &[0.5; 4]);
        let q = t(2, 2, vec![0.8, 0.2, 0.2, 0.8]);
        let p = dec_target_distribution(&q).unwrap();
        assert!((p.data()[0] - 0.941).abs() < 1e-3 && (p.data()[1] - 0.059).abs() < 1e-3);
        assert!(dec_target_distribution(&t(2, 2, vec![1.0, 0.0, 1.0, 0.0])).is_err());
    }

    #[test]
    fn kmeans_examples() {
        let mut rng = rng_for(1, &[]);
        let mut v = Vec::new();
        for i in 0..200 {
            let m = if i % 2 == 0 { -5.0 } else { 5.0 };
            v.push(m + rng.random_range(-0.5..0.5));
            v.push(2.0 * m + rng.random_range(-0.5..0.5));
        }
        let c = kmeans_init(&t(200, 2, v), 2, 3).unwrap();
        let mut cs: Vec<_> = c.data().chunks(2).map(|r| r.to_vec()).collect();
        cs.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert!((cs[0][0] + 5.0).abs() < 0.1 && (cs[0][1] + 10.0).abs() < 0.1);
        assert!((cs[1][0] - 5.0).abs() < 0.1 && (cs[1][1] - 10.0).abs() < 0.1);

        let pts = t(3, 2, vec![0.0, 1.0, 5.0, 5.0, -3.0, 2.0]);
        let c = kmeans_init(&pts, 3, 0).unwrap();
        let mut got: Vec<_> = c.data().chunks(2).map(|r| r.to_vec()).collect();
        let mut want: Vec<_> = pts.data().chunks(2).map(|r| r.to_vec()).collect();
        got.sort_by(|a, b| a[0].total_cmp(&b[0]));
        want.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(got, want);

        let same = kmeans_init(&t(4, 1, vec![2.5; 4]), 1, 0).unwrap();
        assert_eq!(same.data(), &[2.5]);
        assert!(kmeans_init(&t(1, 1, vec![0.0]), 2, 0).is_err());
    }

    #[test]
    fn unbalanced_masses_can_flatten_a_row() {
        // cluster 0 carries most of the mass, so the first row flattens
        let q = t(3, 3, vec![0.5, 0.25, 0.25, 1.0, 0.0, 0.0, 0.625, 0.1875, 0.1875]);
        let p = dec_target_distribution(&q).unwrap();
        assert!(p.data()[0] < 0.5);
    }

    proptest! {
        #[test]
        fn balanced_rows_sum_to_one_and_sharpen(v in proptest::collection::vec(0.01f64..1.0, 3)) {
            // a row and its cyclic shifts give every cluster the same mass
            let s: f64 = v.iter().sum();
            let r: Vec<f64> = v.iter().map(|x| x / s).collect();
            let q = t(3, 3, (0..3).flat_map(|k| (0..3).map(move |j| (k, j))).map(|(k, j)| r[(j + k) % 3]).collect());
            let p = dec_target_distribution(&q).unwrap();
            for (qr, pr) in q.data().chunks(3).zip(p.data().chunks(3)) {
                prop_assert!((pr.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                let qm = qr.iter().cloned().fold(0.0, f64::max);
                let pm = pr.iter().cloned().fold(0.0, f64::max);
                prop_assert!(pm >= qm - 1e-9);
            }
        }
    }
}

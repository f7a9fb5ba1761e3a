use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::seed::rng_for;

/// Above this many grid cells the candidate pool is sampled, not enumerated.
const MAX_ENUMERATED_CELLS: usize = 9;
const SAMPLED_POOL: usize = 20_000;

/// Jigsaw permutations over a grid; entry 0 is always the identity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PermutationSet {
    grid: (usize, usize),
    perms: Vec<Vec<usize>>,
}

impl PermutationSet {
    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn count(&self) -> usize {
        self.perms.len()
    }

    pub fn get(&self, index: usize) -> &[usize] {
        &self.perms[index]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Vec<usize>> {
        self.perms.iter()
    }

    pub fn min_pairwise_hamming(&self) -> usize {
        let mut best = usize::MAX;
        for i in 0..self.perms.len() {
            for j in i + 1..self.perms.len() {
                best = best.min(hamming(&self.perms[i], &self.perms[j]));
            }
        }
        best
    }
}

fn hamming(a: &[usize], b: &[usize]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

fn factorial(n: usize) -> Option<u128> {
    (1..=n as u128).try_fold(1u128, |acc, k| acc.checked_mul(k))
}

fn all_permutations(n: usize) -> Vec<Vec<usize>> {
    // Heap-free lexicographic enumeration.
    let mut cur: Vec<usize> = (0..n).collect();
    let mut out = vec![cur.clone()];
    loop {
        let Some(i) = (0..n.saturating_sub(1)).rev().find(|&i| cur[i] < cur[i + 1]) else {
            return out;
        };
        let j = (i + 1..n).rev().find(|&j| cur[j] > cur[i]).expect("successor exists");
        cur.swap(i, j);
        cur[i + 1..].reverse();
        out.push(cur.clone());
    }
}

/// Greedy max-min-Hamming selection starting from the identity.
///
/// Each round adds the candidate whose smallest Hamming distance to the chosen
/// set is largest; ties are broken by the seeded RNG.
pub fn build_permutation_set(grid: (usize, usize), count: usize, seed: u64) -> Result<PermutationSet> {
    let (rows, cols) = grid;
    let n = rows * cols;
    if n == 0 {
        return Err(Error::InvalidArgument("empty jigsaw grid".into()));
    }
    if count == 0 {
        return Err(Error::InvalidArgument("permutation count must be at least 1".into()));
    }
    if let Some(total) = factorial(n) {
        if count as u128 > total {
            return Err(Error::InvalidArgument(format!(
                "{count} permutations requested but a {rows}x{cols} grid has only {total}"
            )));
        }
    }
    let identity: Vec<usize> = (0..n).collect();
    let mut rng = rng_for(seed, &[]);

    let mut candidates = if n <= MAX_ENUMERATED_CELLS {
        all_permutations(n)
    } else {
        let mut pool = vec![identity.clone()];
        while pool.len() < SAMPLED_POOL.max(count * 4) {
            let mut p = identity.clone();
            p.shuffle(&mut rng);
            pool.push(p);
        }
        pool.sort();
        pool.dedup();
        pool
    };
    if candidates.len() < count {
        return Err(Error::InvalidArgument(format!(
            "candidate pool of {} cannot supply {count} permutations",
            candidates.len()
        )));
    }

    let id_pos = candidates.iter().position(|p| *p == identity).expect("identity present");
    let first = candidates.swap_remove(id_pos);
    let mut min_dist: Vec<usize> = candidates.iter().map(|c| hamming(c, &first)).collect();
    let mut chosen = vec![first];
    let mut ties = Vec::new();
    while chosen.len() < count {
        let best = *min_dist.iter().max().expect("non-empty pool");
        ties.clear();
        ties.extend(
            min_dist
                .iter()
                .enumerate()
                .filter(|(_, &d)| d == best)
                .map(|(i, _)| i),
        );
        let pick = ties[rng.random_range(0..ties.len())];
        let next = candidates.swap_remove(pick);
        min_dist.swap_remove(pick);
        for (d, c) in min_dist.iter_mut().zip(&candidates) {
            *d = (*d).min(hamming(c, &next));
        }
        chosen.push(next);
    }
    Ok(PermutationSet { grid, perms: chosen })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_is_identity() {
        let s = build_permutation_set((2, 2), 1, 5).unwrap();
        assert_eq!(s.perms, vec![vec![0, 1, 2, 3]]);
    }

    #[test]
    fn exhaustive_2x2() {
        let s = build_permutation_set((2, 2), 24, 5).unwrap();
        let mut all = s.perms.clone();
        all.sort();
        assert_eq!(all, all_permutations(4));
        assert_eq!(s.get(0), &[0, 1, 2, 3]);
    }

    #[test]
    fn too_many_is_an_error() {
        assert!(build_permutation_set((2, 2), 25, 0).is_err());
        assert!(build_permutation_set((2, 2), 0, 0).is_err());
    }

    #[test]
    fn every_entry_is_a_bijection() {
        let s = build_permutation_set((2, 3), 30, 1).unwrap();
        for p in s.iter() {
            let mut q = p.clone();
            q.sort();
            assert_eq!(q, (0..6).collect::<Vec<_>>());
        }
        let mut uniq = s.perms.clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), 30);
    }

    #[test]
    fn large_grids_use_a_sampled_pool() {
        let s = build_permutation_set((4, 4), 10, 3).unwrap();
        assert_eq!(s.count(), 10);
        assert!(s.min_pairwise_hamming() >= 14);
    }
}

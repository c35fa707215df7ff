//! Brute-force reference implementations and random instance generators
//! shared by the integration tests. Everything here is written from the
//! definitions with plain loops and full sorts.

#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use xmatch::Matrix;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `rows x dim` gaussian matrix with unit rows.
pub fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> Matrix {
    let data: Vec<f64> = (0..rows * dim).map(|_| StandardNormal.sample(&mut *rng)).collect();
    Matrix::from_vec(rows, dim, data).unwrap().normalize_rows().unwrap()
}

/// Unit rows drawn around `groups` centroids so thresholds actually bite.
pub fn clustered_rows(rng: &mut ChaCha8Rng, rows: usize, dim: usize, groups: usize, spread: f64) -> (Matrix, Vec<u32>) {
    let centroids = unit_rows(rng, groups, dim);
    let labels: Vec<u32> = (0..rows).map(|_| rng.random_range(0..groups as u32)).collect();
    let mut data = Vec::with_capacity(rows * dim);
    for &l in &labels {
        for c in 0..dim {
            let z: f64 = StandardNormal.sample(&mut *rng);
            data.push(centroids.get(l as usize, c) + spread * z);
        }
    }
    (Matrix::from_vec(rows, dim, data).unwrap().normalize_rows().unwrap(), labels)
}

/// Unit rows whose entries come from a tiny alphabet, so that exact
/// similarity ties are common.
pub fn coarse_rows(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> Matrix {
    loop {
        let data: Vec<f64> = (0..rows * dim).map(|_| rng.random_range(-1i32..=1) as f64).collect();
        if let Ok(m) = Matrix::from_vec(rows, dim, data).unwrap().normalize_rows() {
            return m;
        }
    }
}

pub fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Per row, the set `{j : sim[i][j] > th} ∪ {i}`.
pub fn threshold_sets(sim: &[Vec<f64>], th: f64) -> Vec<BTreeSet<usize>> {
    sim.iter()
        .enumerate()
        .map(|(i, row)| {
            let mut s: BTreeSet<usize> = row.iter().enumerate().filter(|(_, &v)| v > th).map(|(j, _)| j).collect();
            s.insert(i);
            s
        })
        .collect()
}

pub fn intersect_sets(a: &[BTreeSet<usize>], b: &[BTreeSet<usize>]) -> Vec<BTreeSet<usize>> {
    a.iter().zip(b).map(|(x, y)| x.intersection(y).copied().collect()).collect()
}

/// Top-`k` by similarity (ties to the lower index) filtered by `> th`, plus self.
pub fn mine(query: &[Vec<f64>], bank: &[Vec<f64>], k: usize, th: f64, self_idx: &[usize]) -> Vec<Vec<usize>> {
    query
        .iter()
        .zip(self_idx)
        .map(|(q, &me)| {
            let mut scored: Vec<(f64, usize)> =
                bank.iter().enumerate().map(|(j, b)| (dot(q, b).clamp(-1.0, 1.0), j)).collect();
            scored.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap().then(x.1.cmp(&y.1)));
            let mut set: BTreeSet<usize> = scored.iter().take(k).filter(|(s, _)| *s > th).map(|&(_, j)| j).collect();
            set.insert(me);
            set.into_iter().collect()
        })
        .collect()
}

/// Column layout of the extended similarity: `(is_bank, dataset index)` per
/// column, and per row the columns whose dataset index was mined for it
/// (plus its own column).
pub fn extended_columns(sets: &[Vec<usize>], batch: &[usize]) -> (Vec<(bool, usize)>, Vec<Vec<usize>>) {
    let mut cols: Vec<(bool, usize)> = batch.iter().map(|&i| (false, i)).collect();
    let mut extra: Vec<usize> = sets.iter().flatten().copied().filter(|j| !batch.contains(j)).collect();
    extra.sort_unstable();
    extra.dedup();
    cols.extend(extra.iter().map(|&j| (true, j)));
    let jp = sets
        .iter()
        .enumerate()
        .map(|(i, set)| {
            let mut v: Vec<usize> = (0..cols.len()).filter(|&c| c == i || set.contains(&cols[c].1)).collect();
            v.sort_unstable();
            v
        })
        .collect();
    (cols, jp)
}

/// Relevance flags of the gallery ranked by descending similarity to `q`,
/// ties to the lower gallery index.
pub fn ranked_relevance(q: &[f64], ql: u32, gallery: &[Vec<f64>], gl: &[u32]) -> Vec<bool> {
    let mut idx: Vec<usize> = (0..gallery.len()).collect();
    let sims: Vec<f64> = gallery.iter().map(|g| dot(q, g)).collect();
    idx.sort_by(|&a, &b| sims[b].partial_cmp(&sims[a]).unwrap().then(a.cmp(&b)));
    idx.iter().map(|&g| gl[g] == ql).collect()
}

/// `(rank-1, rank-5, rank-10, mAP, mINP)` in percent.
pub fn retrieval_metrics(queries: &[Vec<f64>], ql: &[u32], gallery: &[Vec<f64>], gl: &[u32]) -> [f64; 5] {
    let n = queries.len() as f64;
    let mut out = [0.0; 5];
    for (q, &l) in queries.iter().zip(ql) {
        let rel = ranked_relevance(q, l, gallery, gl);
        let first = rel.iter().position(|&r| r).unwrap();
        for (slot, k) in [1usize, 5, 10].iter().enumerate() {
            if first < *k {
                out[slot] += 1.0;
            }
        }
        let positions: Vec<usize> = rel.iter().enumerate().filter(|(_, &r)| r).map(|(p, _)| p + 1).collect();
        let ap: f64 = positions.iter().enumerate().map(|(h, &p)| (h + 1) as f64 / p as f64).sum::<f64>()
            / positions.len() as f64;
        out[3] += ap;
        out[4] += positions.len() as f64 / *positions.last().unwrap() as f64;
    }
    out.map(|v| 100.0 * v / n)
}

/// Max absolute entrywise difference.
pub fn max_diff(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

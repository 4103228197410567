//! Independent reference implementations shared by the oracle tests and the
//! acceptance run.
#![allow(dead_code)]

use fedfr_core::data::VerificationPair;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

pub fn cos_dist(a: &[f64], b: &[f64]) -> f64 {
    1.0 - cosine(a, b)
}

/// Small integer coordinates so that duplicate points, and hence distance
/// ties, show up regularly.
pub fn instance(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec<f64>> {
    let dim = rng.random_range(2..=4);
    (0..n).map(|_| nonzero_point(rng, dim, 3)).collect()
}

fn nonzero_point(rng: &mut ChaCha8Rng, dim: usize, r: i32) -> Vec<f64> {
    loop {
        let p: Vec<f64> = (0..dim).map(|_| rng.random_range(-r..=r) as f64).collect();
        if p.iter().any(|v| *v != 0.0) {
            return p;
        }
    }
}

/// Components of the graph with an edge wherever the link rule holds,
/// found by labeling with a plain flood fill over an adjacency matrix.
pub fn oracle_first_level(points: &[Vec<f64>], d: f64) -> Vec<usize> {
    let n = points.len();
    if n == 1 {
        return vec![0];
    }
    let dist: Vec<Vec<f64>> = points
        .iter()
        .map(|a| points.iter().map(|b| cos_dist(a, b)).collect())
        .collect();
    let kappa: Vec<usize> = (0..n)
        .map(|i| {
            let mut best = usize::MAX;
            for j in 0..n {
                if j != i && (best == usize::MAX || dist[i][j] < dist[i][best]) {
                    best = j;
                }
            }
            best
        })
        .collect();
    let mut adj = vec![vec![false; n]; n];
    for i in 0..n {
        for j in 0..n {
            let linked = kappa[i] == j || kappa[j] == i || kappa[i] == kappa[j];
            adj[i][j] = i != j && linked && dist[i][j] < d;
        }
    }
    let mut label = vec![usize::MAX; n];
    let mut next = 0;
    for start in 0..n {
        if label[start] != usize::MAX {
            continue;
        }
        let mut stack = vec![start];
        label[start] = next;
        while let Some(u) = stack.pop() {
            for v in 0..n {
                if adj[u][v] && label[v] == usize::MAX {
                    label[v] = next;
                    stack.push(v);
                }
            }
        }
        next += 1;
    }
    label
}

pub struct Sweep {
    pub accuracy: f64,
    pub tar: Vec<f64>,
}

/// Tries every observed similarity as a threshold, plus one that accepts
/// nothing, and scores each from scratch.
pub fn sweep_oracle(scores: &[(f64, bool)], fars: &[f64]) -> Sweep {
    let mut thresholds: Vec<f64> = scores.iter().map(|s| s.0).collect();
    thresholds.push(f64::INFINITY);
    let genuine = scores.iter().filter(|s| s.1).count();
    let impostor = scores.len() - genuine;
    let mut accuracy: f64 = 0.0;
    let mut tar = vec![0.0; fars.len()];
    for &t in &thresholds {
        let accepted_genuine = scores.iter().filter(|s| s.1 && s.0 >= t).count();
        let accepted_impostor = scores.iter().filter(|s| !s.1 && s.0 >= t).count();
        let correct = accepted_genuine + (impostor - accepted_impostor);
        accuracy = accuracy.max(correct as f64 / scores.len() as f64);
        let far = accepted_impostor as f64 / impostor as f64;
        let this_tar = accepted_genuine as f64 / genuine as f64;
        for (slot, budget) in tar.iter_mut().zip(fars) {
            if far <= *budget && this_tar > *slot {
                *slot = this_tar;
            }
        }
    }
    Sweep { accuracy, tar }
}

/// A random pair set of at most 50 pairs over small integer embeddings.
pub fn pair_set(rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<VerificationPair>) {
    let n_emb = rng.random_range(2..=12);
    let embeddings: Vec<Vec<f64>> = (0..n_emb).map(|_| nonzero_point(rng, 3, 2)).collect();
    let n_pairs = rng.random_range(2..=50);
    let pairs = (0..n_pairs)
        .map(|_| VerificationPair {
            a: rng.random_range(0..n_emb),
            b: rng.random_range(0..n_emb),
            is_same: rng.random_bool(0.5),
        })
        .collect();
    (embeddings, pairs)
}

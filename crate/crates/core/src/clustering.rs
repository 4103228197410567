//! First-neighbor hierarchical clustering with an optional centroid-distance
//! gate, plus k-means and DBSCAN baselines and pairwise F-score.
//!
//! Every level links cluster `i` to `j` when they are first neighbors (one is
//! the other's nearest cluster, or both share the same nearest cluster) and,
//! with the gate enabled, their centroids are closer than `threshold_d`.
//! Connected components of those links form the next level. With an infinite
//! threshold this is plain FINCH.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng;

/// Dense cluster assignment: labels cover exactly `0..n_clusters`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub labels: Vec<usize>,
    pub n_clusters: usize,
}

impl Partition {
    /// Relabels arbitrary ids densely in order of first appearance.
    pub fn from_raw(raw: &[usize]) -> Self {
        let mut map = BTreeMap::new();
        let labels = raw
            .iter()
            .map(|r| {
                let next = map.len();
                *map.entry(*r).or_insert(next)
            })
            .collect();
        Partition {
            labels,
            n_clusters: map.len(),
        }
    }

    pub fn singletons(n: usize) -> Self {
        Partition {
            labels: (0..n).collect(),
            n_clusters: n,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_clusters];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }

    /// `point_index,cluster_label` CSV with a header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("point_index,cluster_label\n");
        for (i, l) in self.labels.iter().enumerate() {
            let _ = writeln!(out, "{i},{l}");
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some("point_index,cluster_label") => {}
            other => {
                return Err(Error::Parse {
                    location: "line 1".into(),
                    reason: format!("unexpected header {other:?}"),
                })
            }
        }
        let mut raw = Vec::new();
        for (i, line) in lines.enumerate() {
            let bad = |reason: String| Error::Parse {
                location: format!("line {}", i + 2),
                reason,
            };
            let (idx, label) = line.split_once(',').ok_or_else(|| bad("expected two fields".into()))?;
            let idx: usize = idx.parse().map_err(|e| bad(format!("point_index: {e}")))?;
            let label: usize = label.parse().map_err(|e| bad(format!("cluster_label: {e}")))?;
            if idx != i {
                return Err(bad(format!("point_index {idx} out of order")));
            }
            raw.push(label);
        }
        Ok(Partition::from_raw(&raw))
    }
}

/// Successively coarser partitions of the same points.
#[derive(Debug, Clone, PartialEq)]
pub struct Hierarchy {
    pub levels: Vec<Partition>,
    /// `centroids[l][c]` is the mean of the points in cluster `c` of level `l`.
    pub centroids: Vec<Vec<Vec<f64>>>,
}

impl Hierarchy {
    pub fn first(&self) -> &Partition {
        &self.levels[0]
    }

    pub fn terminal(&self) -> &Partition {
        self.levels.last().expect("hierarchy has at least one level")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterConfig {
    /// Merge gate on centroid distance; `f64::INFINITY` disables it.
    pub threshold_d: f64,
    pub metric: Metric,
    pub min_cluster_size: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            threshold_d: 0.9,
            metric: Metric::Cosine,
            min_cluster_size: 1,
        }
    }
}

impl ClusterConfig {
    pub fn unconstrained() -> Self {
        ClusterConfig {
            threshold_d: f64::INFINITY,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold_d > 0.0) {
            return Err(Error::config("cluster.threshold_d", "must be positive or inf"));
        }
        if self.min_cluster_size < 1 {
            return Err(Error::config("cluster.min_cluster_size", "must be at least 1"));
        }
        Ok(())
    }
}

#[inline]
fn cosine_with_norms(a: &[f64], b: &[f64], na: f64, nb: f64) -> f64 {
    1.0 - linalg::dot(a, b) / (na * nb)
}

pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("vectors of length {} and {}", a.len(), b.len())));
    }
    let (na, nb) = (linalg::norm(a), linalg::norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Numeric("cosine distance of a zero vector".into()));
    }
    Ok(cosine_with_norms(a, b, na, nb))
}

fn norms_of(points: &[Vec<f64>]) -> Result<Vec<f64>> {
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let n = linalg::norm(p);
            if n == 0.0 || !n.is_finite() {
                Err(Error::Numeric(format!("point {i} has norm {n}")))
            } else {
                Ok(n)
            }
        })
        .collect()
}

/// Index of each point's nearest other point; ties go to the smaller index.
pub fn first_neighbors(points: &[Vec<f64>]) -> Result<Vec<usize>> {
    if points.len() < 2 {
        return Err(Error::Size(format!(
            "first neighbors need at least 2 points, got {}",
            points.len()
        )));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Shape("points differ in dimension".into()));
    }
    let norms = norms_of(points)?;
    Ok((0..points.len())
        .into_par_iter()
        .map(|i| {
            let mut best = usize::MAX;
            let mut best_d = f64::INFINITY;
            for j in 0..points.len() {
                if j == i {
                    continue;
                }
                let d = cosine_with_norms(&points[i], &points[j], norms[i], norms[j]);
                if d < best_d || best == usize::MAX {
                    best = j;
                    best_d = d;
                }
            }
            best
        })
        .collect())
}

/// Link rule between clusters `i` and `j` given first neighbors `kappa`.
pub fn merge_condition(i: usize, j: usize, kappa: &[usize], centroids: &[Vec<f64>], d: f64) -> bool {
    if i == j {
        return false;
    }
    let neighbors = kappa[i] == j || kappa[j] == i || kappa[i] == kappa[j];
    if !neighbors {
        return false;
    }
    if d == f64::INFINITY {
        return true;
    }
    // A degenerate centroid yields NaN, which never passes the gate.
    let na = linalg::norm(&centroids[i]);
    let nb = linalg::norm(&centroids[j]);
    cosine_with_norms(&centroids[i], &centroids[j], na, nb) < d
}

/// Disjoint-set forest with path halving and union by size.
#[derive(Debug, Clone)]
pub struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        if self.size[ra] < self.size[rb] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra;
        self.size[ra] += self.size[rb];
        true
    }

    /// Component label of every element, dense in order of first appearance.
    pub fn components(&mut self) -> Partition {
        let roots: Vec<usize> = (0..self.parent.len()).map(|i| self.find(i)).collect();
        Partition::from_raw(&roots)
    }
}

fn mean_centroids(points: &[Vec<f64>], partition: &Partition) -> Vec<Vec<f64>> {
    let dim = points[0].len();
    let mut sums = vec![vec![0.0; dim]; partition.n_clusters];
    let mut counts = vec![0usize; partition.n_clusters];
    for (p, &l) in points.iter().zip(&partition.labels) {
        counts[l] += 1;
        for (s, v) in sums[l].iter_mut().zip(p) {
            *s += v;
        }
    }
    for (s, c) in sums.iter_mut().zip(counts) {
        for v in s.iter_mut() {
            *v /= c as f64;
        }
    }
    sums
}

/// One linking pass: components of the gated first-neighbor graph.
fn link_level(centroids: &[Vec<f64>], d: f64) -> Result<Partition> {
    let kappa = first_neighbors(centroids)?;
    let m = centroids.len();
    let mut uf = UnionFind::new(m);
    for i in 0..m {
        if merge_condition(i, kappa[i], &kappa, centroids, d) {
            uf.union(i, kappa[i]);
        }
    }
    // Pairs sharing a nearest cluster.
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &k) in kappa.iter().enumerate() {
        groups.entry(k).or_default().push(i);
    }
    for members in groups.values() {
        for (a_pos, &a) in members.iter().enumerate() {
            for &b in &members[a_pos + 1..] {
                if merge_condition(a, b, &kappa, centroids, d) {
                    uf.union(a, b);
                }
            }
        }
    }
    Ok(uf.components())
}

fn check_points(points: &[Vec<f64>]) -> Result<()> {
    if points.is_empty() {
        return Err(Error::Size("cannot cluster an empty point set".into()));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Shape("points differ in dimension".into()));
    }
    Ok(())
}

/// Distance-constrained FINCH, recursed until no link passes the gate or a
/// single cluster remains. If nothing merges at all, the hierarchy holds one
/// all-singleton level.
pub fn c_finch(points: &[Vec<f64>], cfg: &ClusterConfig) -> Result<Hierarchy> {
    cfg.validate()?;
    check_points(points)?;
    let n = points.len();
    let mut levels: Vec<Partition> = Vec::new();
    let mut centroids_per_level = Vec::new();
    let mut point_labels = Partition::singletons(n);
    let mut centroids: Vec<Vec<f64>> = points.to_vec();
    while centroids.len() > 1 {
        let merged = link_level(&centroids, cfg.threshold_d)?;
        if merged.n_clusters == centroids.len() {
            break;
        }
        let raw: Vec<usize> = point_labels.labels.iter().map(|&c| merged.labels[c]).collect();
        point_labels = Partition::from_raw(&raw);
        centroids = mean_centroids(points, &point_labels);
        levels.push(point_labels.clone());
        centroids_per_level.push(centroids.clone());
    }
    if levels.is_empty() {
        levels.push(Partition::singletons(n));
        centroids_per_level.push(points.to_vec());
    }
    Ok(Hierarchy {
        levels,
        centroids: centroids_per_level,
    })
}

/// Unconstrained FINCH, computed by joining every cluster with its first
/// neighbor. Kept separate from [`c_finch`] as a reference path.
pub fn finch(points: &[Vec<f64>]) -> Result<Hierarchy> {
    check_points(points)?;
    let n = points.len();
    let mut levels = Vec::new();
    let mut centroids_per_level = Vec::new();
    let mut assignment: Vec<usize> = (0..n).collect();
    let mut centroids: Vec<Vec<f64>> = points.to_vec();
    while centroids.len() > 1 {
        let kappa = first_neighbors(&centroids)?;
        let mut uf = UnionFind::new(centroids.len());
        for (i, &k) in kappa.iter().enumerate() {
            uf.union(i, k);
        }
        let merged = uf.components();
        if merged.n_clusters == centroids.len() {
            break;
        }
        let level = Partition::from_raw(&assignment.iter().map(|&c| merged.labels[c]).collect::<Vec<_>>());
        assignment = level.labels.clone();
        centroids = mean_centroids(points, &level);
        levels.push(level);
        centroids_per_level.push(centroids.clone());
    }
    if levels.is_empty() {
        levels.push(Partition::singletons(n));
        centroids_per_level.push(points.to_vec());
    }
    Ok(Hierarchy {
        levels,
        centroids: centroids_per_level,
    })
}

fn safe_cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (linalg::norm(a), linalg::norm(b));
    if na == 0.0 || nb == 0.0 {
        1.0
    } else {
        cosine_with_norms(a, b, na, nb)
    }
}

fn nearest(point: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.iter().enumerate() {
        let d = safe_cosine(point, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

pub const KMEANS_MAX_ITERS: usize = 100;
pub const KMEANS_TOL: f64 = 1e-9;

/// Lloyd's k-means under cosine distance with seeded farthest-point starts.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<Partition> {
    check_points(points)?;
    let n = points.len();
    if k < 1 || k > n {
        return Err(Error::config("kmeans.k", format!("must lie in [1, {n}], got {k}")));
    }
    let mut r = rng::stream(seed, rng::STREAM_KMEANS);
    let first = r.random_range(0..n);
    let mut centers = vec![points[first].clone()];
    let mut gap: Vec<f64> = points.iter().map(|p| safe_cosine(p, &points[first])).collect();
    while centers.len() < k {
        let mut pick = 0;
        for i in 1..n {
            if gap[i] > gap[pick] {
                pick = i;
            }
        }
        centers.push(points[pick].clone());
        for (g, p) in gap.iter_mut().zip(points) {
            *g = g.min(safe_cosine(p, &points[pick]));
        }
    }
    let mut assign = vec![0; n];
    for _ in 0..KMEANS_MAX_ITERS {
        for (a, p) in assign.iter_mut().zip(points) {
            *a = nearest(p, &centers).0;
        }
        let dim = points[0].len();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assign) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut movement: f64 = 0.0;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let new: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            movement = movement.max(linalg::sq_dist(&new, &centers[c]).sqrt());
            centers[c] = new;
        }
        if movement < KMEANS_TOL {
            break;
        }
    }
    for (a, p) in assign.iter_mut().zip(points) {
        *a = nearest(p, &centers).0;
    }
    Ok(Partition::from_raw(&assign))
}

/// DBSCAN under cosine distance (`≤ eps` is a neighbor, the point itself
/// included). Noise points become singleton clusters.
pub fn dbscan(points: &[Vec<f64>], eps: f64, min_pts: usize) -> Result<Partition> {
    check_points(points)?;
    if !(eps > 0.0) {
        return Err(Error::config("dbscan.eps", "must be positive"));
    }
    if min_pts < 1 {
        return Err(Error::config("dbscan.min_pts", "must be at least 1"));
    }
    let n = points.len();
    let norms = norms_of(points)?;
    let neighborhoods: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .filter(|&j| cosine_with_norms(&points[i], &points[j], norms[i], norms[j]) <= eps)
                .collect()
        })
        .collect();
    const UNSET: usize = usize::MAX;
    let mut labels = vec![UNSET; n];
    let mut noise = vec![false; n];
    let mut next = 0;
    for i in 0..n {
        if labels[i] != UNSET || noise[i] {
            continue;
        }
        if neighborhoods[i].len() < min_pts {
            noise[i] = true;
            continue;
        }
        let cluster = next;
        next += 1;
        labels[i] = cluster;
        let mut queue: std::collections::VecDeque<usize> = neighborhoods[i].iter().copied().collect();
        while let Some(q) = queue.pop_front() {
            if noise[q] {
                noise[q] = false;
                labels[q] = cluster;
            }
            if labels[q] != UNSET {
                continue;
            }
            labels[q] = cluster;
            if neighborhoods[q].len() >= min_pts {
                queue.extend(neighborhoods[q].iter().copied());
            }
        }
    }
    for l in labels.iter_mut().filter(|l| **l == UNSET) {
        *l = next;
        next += 1;
    }
    Ok(Partition::from_raw(&labels))
}

/// Pairwise F-measure of a predicted partition against ground truth.
pub fn pairwise_f_score(pred: &Partition, truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} truth labels",
            pred.len(),
            truth.len()
        )));
    }
    let pairs = |c: u64| c * c.saturating_sub(1) / 2;
    let mut joint: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut pred_sizes: BTreeMap<usize, u64> = BTreeMap::new();
    let mut truth_sizes: BTreeMap<usize, u64> = BTreeMap::new();
    for (&p, &t) in pred.labels.iter().zip(truth) {
        *joint.entry((p, t)).or_default() += 1;
        *pred_sizes.entry(p).or_default() += 1;
        *truth_sizes.entry(t).or_default() += 1;
    }
    let both: u64 = joint.values().map(|&c| pairs(c)).sum();
    let pred_pairs: u64 = pred_sizes.values().map(|&c| pairs(c)).sum();
    let truth_pairs: u64 = truth_sizes.values().map(|&c| pairs(c)).sum();
    if pred_pairs == 0 && truth_pairs == 0 {
        return Ok(1.0);
    }
    if both == 0 {
        return Ok(0.0);
    }
    let precision = both as f64 / pred_pairs as f64;
    let recall = both as f64 / truth_pairs as f64;
    Ok(2.0 * precision * recall / (precision + recall))
}

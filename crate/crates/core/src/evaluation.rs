//! Open-set verification (best-threshold accuracy, TAR at fixed FAR) and
//! rank-1 identification over cosine similarity of embeddings.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::data::{Dataset, Domain, DomainEval, VerificationPair};
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{self, BackboneParams};

/// FAR budgets reported for every domain.
pub const FAR_TARGETS: [f64; 3] = [0.1, 0.01, 0.001];

#[derive(Debug, Clone, PartialEq)]
pub struct VerificationReport {
    pub accuracy: f64,
    /// `(far, tar)` in the order requested.
    pub tar_at_far: Vec<(f64, f64)>,
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    linalg::dot(a, b) / (linalg::norm(a) * linalg::norm(b))
}

/// Threshold sweep over `(similarity, is_genuine)` scores.
///
/// A pair is accepted when its similarity is at least the threshold.
/// Candidate thresholds are every observed similarity plus one above them
/// all (accept nothing).
pub fn verification_from_scores(scores: &[(f64, bool)], fars: &[f64]) -> Result<VerificationReport> {
    let genuine = scores.iter().filter(|s| s.1).count();
    let impostor = scores.len() - genuine;
    if impostor == 0 {
        return Err(Error::Metric("no impostor pairs; FAR is undefined".into()));
    }
    if genuine == 0 {
        return Err(Error::Metric("no genuine pairs; TAR is undefined".into()));
    }
    if scores.iter().any(|s| !s.0.is_finite()) {
        return Err(Error::Metric("non-finite similarity".into()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));

    let (g_total, i_total) = (genuine as f64, impostor as f64);
    let mut best_correct = impostor;
    let mut tar_at = vec![0.0; fars.len()];
    let (mut ga, mut ia) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == t {
            if sorted[i].1 {
                ga += 1;
            } else {
                ia += 1;
            }
            i += 1;
        }
        best_correct = best_correct.max(ga + (impostor - ia));
        let far = ia as f64 / i_total;
        let tar = ga as f64 / g_total;
        for (slot, &budget) in tar_at.iter_mut().zip(fars) {
            if far <= budget && tar > *slot {
                *slot = tar;
            }
        }
    }
    Ok(VerificationReport {
        accuracy: best_correct as f64 / scores.len() as f64,
        tar_at_far: fars.iter().copied().zip(tar_at).collect(),
    })
}

pub fn verification_metrics(
    embeddings: &[Vec<f64>],
    pairs: &[VerificationPair],
    fars: &[f64],
) -> Result<VerificationReport> {
    let scores = pairs
        .par_iter()
        .map(|p| {
            let (a, b) = (
                embeddings
                    .get(p.a)
                    .ok_or_else(|| Error::Size(format!("pair index {} out of range", p.a)))?,
                embeddings
                    .get(p.b)
                    .ok_or_else(|| Error::Size(format!("pair index {} out of range", p.b)))?,
            );
            Ok((cosine_similarity(a, b), p.is_same))
        })
        .collect::<Result<Vec<_>>>()?;
    verification_from_scores(&scores, fars)
}

/// Fraction of queries whose most similar gallery entry has the same
/// identity. Ties go to the smaller gallery index.
pub fn identification_rank1(
    query: &[Vec<f64>],
    query_ids: &[usize],
    gallery: &[Vec<f64>],
    gallery_ids: &[usize],
) -> Result<f64> {
    if gallery.is_empty() {
        return Err(Error::Size("empty gallery".into()));
    }
    if query.is_empty() {
        return Err(Error::Size("empty query set".into()));
    }
    if query.len() != query_ids.len() || gallery.len() != gallery_ids.len() {
        return Err(Error::Shape("embeddings and identities differ in length".into()));
    }
    let hits: usize = query
        .par_iter()
        .zip(query_ids)
        .map(|(q, qid)| {
            let mut best = 0;
            let mut best_sim = f64::NEG_INFINITY;
            for (g, e) in gallery.iter().enumerate() {
                let s = cosine_similarity(q, e);
                if s > best_sim {
                    best = g;
                    best_sim = s;
                }
            }
            usize::from(gallery_ids[best] == *qid)
        })
        .sum();
    Ok(hits as f64 / query.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub domain: Domain,
    pub ver_accuracy: f64,
    /// TAR at each of [`FAR_TARGETS`].
    pub tar_at_far: [f64; 3],
    pub rank1: f64,
}

impl MetricsReport {
    /// Checks range and TAR monotonicity in the FAR budget.
    pub fn new(domain: Domain, ver_accuracy: f64, tar_at_far: [f64; 3], rank1: f64) -> Result<Self> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !in_unit(ver_accuracy) || !in_unit(rank1) || !tar_at_far.iter().all(|v| in_unit(*v)) {
            return Err(Error::Metric("metric outside [0, 1]".into()));
        }
        // FAR_TARGETS is decreasing, so TAR must be too.
        if !(tar_at_far[2] <= tar_at_far[1] && tar_at_far[1] <= tar_at_far[0]) {
            return Err(Error::Metric(format!("TAR not monotone in FAR: {tar_at_far:?}")));
        }
        Ok(MetricsReport {
            domain,
            ver_accuracy,
            tar_at_far,
            rank1,
        })
    }

    pub fn csv_header() -> &'static str {
        "domain,acc,tar_far_0.1,tar_far_0.01,tar_far_0.001,rank1"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.domain, self.ver_accuracy, self.tar_at_far[0], self.tar_at_far[1], self.tar_at_far[2], self.rank1
        )
    }

    /// Element-wise mean of reports from the same domain.
    pub fn mean(reports: &[MetricsReport]) -> Result<MetricsReport> {
        let first = reports
            .first()
            .ok_or_else(|| Error::Metric("no reports to average".into()))?;
        let n = reports.len() as f64;
        let avg = |f: &dyn Fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        MetricsReport::new(
            first.domain,
            avg(&|r| r.ver_accuracy),
            [
                avg(&|r| r.tar_at_far[0]),
                avg(&|r| r.tar_at_far[1]),
                avg(&|r| r.tar_at_far[2]),
            ],
            avg(&|r| r.rank1),
        )
    }
}

pub fn metrics_csv(reports: &[MetricsReport]) -> String {
    let mut out = String::from(MetricsReport::csv_header());
    out.push('\n');
    for r in reports {
        let _ = writeln!(out, "{}", r.csv_row());
    }
    out
}

fn embed_all(backbone: &BackboneParams, ds: &Dataset) -> Result<Vec<Vec<f64>>> {
    ds.samples
        .par_iter()
        .map(|s| model::forward_embed(backbone, &s.features))
        .collect()
}

/// Runs both protocols for one domain with the given backbone.
pub fn evaluate_domain(backbone: &BackboneParams, eval: &DomainEval) -> Result<MetricsReport> {
    let emb = embed_all(backbone, &eval.data)?;
    let ver = verification_metrics(&emb, &eval.pairs, &FAR_TARGETS)?;
    let q = embed_all(backbone, &eval.query)?;
    let g = embed_all(backbone, &eval.gallery)?;
    let rank1 = identification_rank1(&q, &eval.query.labels()?, &g, &eval.gallery.labels()?)?;
    MetricsReport::new(
        eval.domain,
        ver.accuracy,
        [ver.tar_at_far[0].1, ver.tar_at_far[1].1, ver.tar_at_far[2].1],
        rank1,
    )
}

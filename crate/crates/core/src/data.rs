//! Synthetic two-domain identity data, the dataset file format, and the
//! identity-disjoint split of the target domain across clients.
//!
//! Identities are prototypes on the unit sphere. Source prototypes are drawn
//! from a seeded Gaussian restricted to the first `latent_dims` coordinates;
//! target prototypes go through a fixed linear map that blends the identity
//! with a random orthogonal matrix, so the gap between domains is systematic
//! rather than per-sample. Each sample is a normalized, noise-perturbed copy
//! of its prototype.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::{self, SimRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "SOURCE",
            Domain::Target => "TARGET",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "SOURCE" => Some(Domain::Source),
            "TARGET" => Some(Domain::Target),
            _ => None,
        }
    }
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    /// `None` marks an unlabeled sample.
    pub identity: Option<usize>,
    pub domain: Domain,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub dim: usize,
    pub id_count: usize,
    pub domain: Domain,
}

impl Dataset {
    /// Builds a dataset after checking every row against `dim` and `id_count`.
    pub fn new(samples: Vec<Sample>, dim: usize, id_count: usize, domain: Domain) -> Result<Self> {
        for (row, s) in samples.iter().enumerate() {
            if s.features.len() != dim {
                return Err(Error::Schema {
                    row,
                    reason: format!("expected {dim} features, found {}", s.features.len()),
                });
            }
            if s.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::Schema {
                    row,
                    reason: "non-finite feature".into(),
                });
            }
            if let Some(id) = s.identity {
                if id >= id_count {
                    return Err(Error::Schema {
                        row,
                        reason: format!("identity {id} outside [0, {id_count})"),
                    });
                }
            }
        }
        Ok(Dataset {
            samples,
            dim,
            id_count,
            domain,
        })
    }

    pub fn empty(dim: usize, domain: Domain) -> Self {
        Dataset {
            samples: Vec::new(),
            dim,
            id_count: 0,
            domain,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Labels of every sample; fails if any sample is unlabeled.
    pub fn labels(&self) -> Result<Vec<usize>> {
        self.samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                s.identity
                    .ok_or_else(|| Error::Size(format!("sample {i} has no identity label")))
            })
            .collect()
    }

    /// Copy with every identity replaced by UNKNOWN.
    pub fn unlabeled(&self) -> Dataset {
        let samples = self
            .samples
            .iter()
            .map(|s| Sample {
                identity: None,
                ..s.clone()
            })
            .collect();
        Dataset {
            samples,
            ..self.clone_header()
        }
    }

    fn clone_header(&self) -> Dataset {
        Dataset {
            samples: Vec::new(),
            dim: self.dim,
            id_count: self.id_count,
            domain: self.domain,
        }
    }

    /// Concatenates labeled datasets, offsetting each one's identities so the
    /// label spaces stay disjoint.
    pub fn concat_disjoint(parts: &[&Dataset], domain: Domain) -> Result<Dataset> {
        let dim = parts
            .first()
            .map(|d| d.dim)
            .ok_or_else(|| Error::Size("nothing to concatenate".into()))?;
        let mut samples = Vec::new();
        let mut offset = 0;
        for part in parts {
            if part.dim != dim {
                return Err(Error::Shape(format!(
                    "cannot concatenate dim {} with dim {dim}",
                    part.dim
                )));
            }
            for s in &part.samples {
                samples.push(Sample {
                    features: s.features.clone(),
                    identity: s.identity.map(|id| id + offset),
                    domain: s.domain,
                });
            }
            offset += part.id_count;
        }
        Dataset::new(samples, dim, offset, domain)
    }
}

/// Knobs for the synthetic generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub dim_in: usize,
    /// Training identities in the source domain.
    pub ids_source: usize,
    /// Training identities in the target domain.
    pub ids_target: usize,
    pub samples_per_id: usize,
    pub noise_sigma: f64,
    pub shift_strength: f64,
    /// Share of each domain's identities held out for evaluation (at least
    /// two are always held out).
    pub eval_id_fraction: f64,
    /// Coordinates in which prototypes vary before the domain map.
    pub latent_dims: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            dim_in: 16,
            ids_source: 100,
            ids_target: 20,
            samples_per_id: 20,
            noise_sigma: 0.1,
            shift_strength: 0.6,
            eval_id_fraction: 0.5,
            latent_dims: 16,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim_in < 2 {
            return Err(Error::config("synth.dim_in", "must be at least 2"));
        }
        if self.ids_source < 2 {
            return Err(Error::config("synth.ids_source", "must be at least 2"));
        }
        if self.ids_target < 2 {
            return Err(Error::config("synth.ids_target", "must be at least 2"));
        }
        if self.samples_per_id < 2 {
            return Err(Error::config("synth.samples_per_id", "must be at least 2"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("synth.noise_sigma", "must be finite and non-negative"));
        }
        if !(self.shift_strength >= 0.0 && self.shift_strength.is_finite()) {
            return Err(Error::config("synth.shift_strength", "must be finite and non-negative"));
        }
        if !(self.eval_id_fraction > 0.0 && self.eval_id_fraction < 1.0) {
            return Err(Error::config("synth.eval_id_fraction", "must lie in (0, 1)"));
        }
        if self.latent_dims < 1 || self.latent_dims > self.dim_in {
            return Err(Error::config("synth.latent_dims", "must lie in [1, dim_in]"));
        }
        Ok(())
    }

    /// Held-out identity count for a domain with `train_ids` training
    /// identities, so that held-out ones make up `eval_id_fraction` of all.
    pub fn eval_ids(&self, train_ids: usize) -> usize {
        let f = self.eval_id_fraction;
        ((train_ids as f64 * f / (1.0 - f)).round() as usize).max(2)
    }
}

/// One verification pair over an evaluation dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VerificationPair {
    pub a: usize,
    pub b: usize,
    pub is_same: bool,
}

/// Held-out identities of one domain with the protocols built over them.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainEval {
    pub domain: Domain,
    /// All held-out samples; verification pairs index into this.
    pub data: Dataset,
    pub pairs: Vec<VerificationPair>,
    /// Every held-out image except the gallery ones.
    pub query: Dataset,
    /// The first image of each held-out identity.
    pub gallery: Dataset,
    /// Domain-wide identity of each local eval label. Training identities
    /// occupy `0..ids`, so these never collide with them.
    pub global_ids: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSets {
    pub source: DomainEval,
    pub target: DomainEval,
}

impl EvalSets {
    pub fn get(&self, domain: Domain) -> &DomainEval {
        match domain {
            Domain::Source => &self.source,
            Domain::Target => &self.target,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub source_train: Dataset,
    /// Carries ground-truth identities; the pipeline strips or ignores them
    /// wherever the target domain is meant to be unlabeled.
    pub target_train: Dataset,
    pub eval: EvalSets,
}

/// Random orthogonal matrix via Gram-Schmidt on a Gaussian matrix (row-major).
fn random_orthogonal(dim: usize, rng: &mut SimRng) -> Vec<f64> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while rows.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for r in &rows {
            let p = linalg::dot(&v, r);
            for (x, y) in v.iter_mut().zip(r) {
                *x -= p * y;
            }
        }
        if let Some(u) = linalg::normalized(&v, 1e-6) {
            rows.push(u);
        }
    }
    rows.concat()
}

/// `(1 - s)·I + s·Q`, or `None` for the exact identity when `s == 0`.
fn shift_map(dim: usize, strength: f64, rng: &mut SimRng) -> Option<Vec<f64>> {
    let q = random_orthogonal(dim, rng);
    if strength == 0.0 {
        return None;
    }
    let mut m: Vec<f64> = q.iter().map(|v| strength * v).collect();
    for i in 0..dim {
        m[i * dim + i] += 1.0 - strength;
    }
    Some(m)
}

fn draw_prototype(cfg: &SynthConfig, rng: &mut SimRng, map: Option<&[f64]>) -> Vec<f64> {
    loop {
        let mut g = vec![0.0; cfg.dim_in];
        for v in g.iter_mut().take(cfg.latent_dims) {
            *v = rng.sample(StandardNormal);
        }
        let g = match map {
            Some(m) => linalg::matvec(m, cfg.dim_in, &g),
            None => g,
        };
        if let Some(p) = linalg::normalized(&g, 1e-9) {
            return p;
        }
    }
}

fn draw_samples(prototype: &[f64], count: usize, sigma: f64, rng: &mut SimRng) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let noisy: Vec<f64> = prototype
            .iter()
            .map(|p| {
                let z: f64 = rng.sample(StandardNormal);
                p + sigma * z
            })
            .collect();
        if let Some(v) = linalg::normalized(&noisy, 1e-9) {
            out.push(v);
        }
    }
    out
}

struct DomainDraw {
    train: Dataset,
    eval: DomainEval,
}

fn generate_domain(cfg: &SynthConfig, domain: Domain, train_ids: usize, map: Option<&[f64]>) -> Result<DomainDraw> {
    let (proto_stream, noise_stream, pair_stream) = match domain {
        Domain::Source => (
            rng::STREAM_SOURCE_PROTOTYPES,
            rng::STREAM_SOURCE_NOISE,
            rng::STREAM_SOURCE_PAIRS,
        ),
        Domain::Target => (
            rng::STREAM_TARGET_PROTOTYPES,
            rng::STREAM_TARGET_NOISE,
            rng::STREAM_TARGET_PAIRS,
        ),
    };
    let eval_ids = cfg.eval_ids(train_ids);
    let mut proto_rng = rng::stream(cfg.seed, proto_stream);
    let mut noise_rng = rng::stream(cfg.seed, noise_stream);
    let prototypes: Vec<Vec<f64>> = (0..train_ids + eval_ids)
        .map(|_| draw_prototype(cfg, &mut proto_rng, map))
        .collect();

    let mut train = Vec::with_capacity(train_ids * cfg.samples_per_id);
    let mut held_out = Vec::with_capacity(eval_ids * cfg.samples_per_id);
    for (id, proto) in prototypes.iter().enumerate() {
        for features in draw_samples(proto, cfg.samples_per_id, cfg.noise_sigma, &mut noise_rng) {
            if id < train_ids {
                train.push(Sample {
                    features,
                    identity: Some(id),
                    domain,
                });
            } else {
                held_out.push(Sample {
                    features,
                    identity: Some(id - train_ids),
                    domain,
                });
            }
        }
    }
    let train = Dataset::new(train, cfg.dim_in, train_ids, domain)?;
    let data = Dataset::new(held_out, cfg.dim_in, eval_ids, domain)?;
    let mut pair_rng = rng::stream(cfg.seed, pair_stream);
    let pairs = build_pairs(&data, &mut pair_rng)?;
    let (query, gallery) = split_query_gallery(&data)?;
    Ok(DomainDraw {
        train,
        eval: DomainEval {
            domain,
            data,
            pairs,
            query,
            gallery,
            global_ids: (train_ids..train_ids + eval_ids).collect(),
        },
    })
}

/// Every intra-identity pair is genuine; an equal number of random
/// cross-identity pairs serve as impostors.
pub fn build_pairs(data: &Dataset, rng: &mut SimRng) -> Result<Vec<VerificationPair>> {
    let labels = data.labels()?;
    let mut pairs = Vec::new();
    for a in 0..labels.len() {
        for b in a + 1..labels.len() {
            if labels[a] == labels[b] {
                pairs.push(VerificationPair { a, b, is_same: true });
            }
        }
    }
    let genuine = pairs.len();
    let distinct: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::Size("impostor pairs need at least two identities".into()));
    }
    let n = labels.len();
    let mut impostors = 0;
    while impostors < genuine {
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        if labels[a] != labels[b] {
            pairs.push(VerificationPair {
                a: a.min(b),
                b: a.max(b),
                is_same: false,
            });
            impostors += 1;
        }
    }
    Ok(pairs)
}

/// First image of each identity goes to the gallery, the rest are queries.
fn split_query_gallery(data: &Dataset) -> Result<(Dataset, Dataset)> {
    let mut seen = vec![false; data.id_count];
    let mut query = Vec::new();
    let mut gallery = Vec::new();
    for s in &data.samples {
        let id = s.identity.ok_or_else(|| Error::Size("unlabeled eval sample".into()))?;
        if seen[id] {
            query.push(s.clone());
        } else {
            seen[id] = true;
            gallery.push(s.clone());
        }
    }
    Ok((
        Dataset::new(query, data.dim, data.id_count, data.domain)?,
        Dataset::new(gallery, data.dim, data.id_count, data.domain)?,
    ))
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let mut map_rng = rng::stream(cfg.seed, rng::STREAM_SHIFT_MAP);
    let map = shift_map(cfg.dim_in, cfg.shift_strength, &mut map_rng);
    let source = generate_domain(cfg, Domain::Source, cfg.ids_source, None)?;
    let target = generate_domain(cfg, Domain::Target, cfg.ids_target, map.as_deref())?;
    Ok(SyntheticData {
        source_train: source.train,
        target_train: target.train,
        eval: EvalSets {
            source: source.eval,
            target: target.eval,
        },
    })
}

/// Splits a labeled dataset into `k` identity-disjoint parts.
///
/// Identities are ranked ascending and dealt round-robin, so identity counts
/// differ by at most one. Each part is relabeled densely in rank order and
/// keeps the input's sample order.
pub fn partition_target(target: &Dataset, k: usize) -> Result<Vec<Dataset>> {
    if k == 0 {
        return Err(Error::Partition("k must be at least 1".into()));
    }
    let labels = target
        .labels()
        .map_err(|e| Error::Partition(format!("partitioning needs identities: {e}")))?;
    let distinct: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
    if k > distinct.len() {
        return Err(Error::Partition(format!(
            "{k} clients but only {} identities",
            distinct.len()
        )));
    }
    // identity -> (client, local label)
    let mut assignment = BTreeMap::new();
    let mut per_client = vec![0usize; k];
    for (rank, id) in distinct.iter().enumerate() {
        let client = rank % k;
        assignment.insert(*id, (client, per_client[client]));
        per_client[client] += 1;
    }
    let mut parts: Vec<Vec<Sample>> = vec![Vec::new(); k];
    for (s, id) in target.samples.iter().zip(&labels) {
        let (client, local) = assignment[id];
        parts[client].push(Sample {
            features: s.features.clone(),
            identity: Some(local),
            domain: s.domain,
        });
    }
    parts
        .into_iter()
        .zip(per_client)
        .map(|(samples, ids)| Dataset::new(samples, target.dim, ids, target.domain))
        .collect()
}

/// Renders the line-oriented dataset format.
pub fn format_dataset(ds: &Dataset) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "dim={},domain={},ids={}", ds.dim, ds.domain, ds.id_count);
    for s in &ds.samples {
        match s.identity {
            Some(id) => {
                let _ = write!(out, "{id}");
            }
            None => out.push('?'),
        }
        for v in &s.features {
            // Debug formatting is the shortest representation that round-trips.
            let _ = write!(out, ",{v:?}");
        }
        out.push('\n');
    }
    out
}

pub fn parse_dataset(text: &str) -> Result<Dataset> {
    if !text.is_empty() && !text.ends_with('\n') {
        let line = text.lines().count();
        return Err(Error::Parse {
            location: format!("line {line}, offset {}", text.len()),
            reason: "unterminated final line (truncated file?)".into(),
        });
    }
    let mut lines = text.split_terminator('\n');
    let header = lines.next().ok_or_else(|| Error::Parse {
        location: "line 1, offset 0".into(),
        reason: "missing header".into(),
    })?;
    let (dim, domain, ids) = parse_header(header)?;
    let mut samples = Vec::new();
    let mut offset = header.len() + 1;
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let row = i;
        let mut fields = line.split(',');
        let id_field = fields.next().unwrap_or("");
        let identity = if id_field == "?" {
            None
        } else {
            Some(id_field.parse::<usize>().map_err(|_| Error::Parse {
                location: format!("line {line_no}, offset {offset}"),
                reason: format!("bad identity {id_field:?}"),
            })?)
        };
        let mut features = Vec::with_capacity(dim);
        for f in fields {
            let v = f.parse::<f64>().map_err(|_| Error::Parse {
                location: format!("line {line_no}, offset {offset}"),
                reason: format!("bad float {f:?}"),
            })?;
            features.push(v);
        }
        if features.len() != dim {
            return Err(Error::Schema {
                row,
                reason: format!("line {line_no}: expected {dim} values, found {}", features.len()),
            });
        }
        samples.push(Sample {
            features,
            identity,
            domain,
        });
        offset += line.len() + 1;
    }
    Dataset::new(samples, dim, ids, domain)
}

fn parse_header(header: &str) -> Result<(usize, Domain, usize)> {
    let bad = |reason: String| Error::Parse {
        location: "line 1, offset 0".into(),
        reason,
    };
    let parts: Vec<&str> = header.split(',').collect();
    if parts.len() != 3 {
        return Err(bad(format!("header must have 3 fields, found {}", parts.len())));
    }
    let field = |part: &str, key: &str| -> Result<String> {
        part.strip_prefix(key)
            .and_then(|r| r.strip_prefix('='))
            .map(str::to_owned)
            .ok_or_else(|| bad(format!("expected `{key}=` in {part:?}")))
    };
    let dim = field(parts[0], "dim")?
        .parse::<usize>()
        .map_err(|e| bad(format!("dim: {e}")))?;
    let domain_s = field(parts[1], "domain")?;
    let domain = Domain::parse(&domain_s).ok_or_else(|| bad(format!("unknown domain {domain_s:?}")))?;
    let ids = field(parts[2], "ids")?
        .parse::<usize>()
        .map_err(|e| bad(format!("ids: {e}")))?;
    Ok((dim, domain, ids))
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, format_dataset(ds)).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text)
}

//! Federated training with one labeled source client and K pseudo-labeled
//! target clients.
//!
//! Each round the server hands out the global backbone, every client runs E
//! SGD iterations on its own data, uploads its backbone only, and the server
//! averages the uploads. Classifier heads never leave their client. The
//! source client adds the proximal constraint `(λ/2)·‖θ − θ_global‖²` to its
//! objective.

use std::fmt::Write as _;

use rand::Rng;
use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{self, BackboneParams, HeadParams, ModelState};
use crate::pseudo::PseudoLabeledSet;
use crate::rng::{self, SimRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Source,
    Target,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Source => "SOURCE",
            Role::Target => "TARGET",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    /// Plain `1/N` mean of the uploads.
    Equal,
    /// Mean weighted by each client's sample count.
    DataWeighted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederationConfig {
    pub n_clients: usize,
    pub local_iters: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda: f64,
    pub rounds: usize,
    pub master_seed: u64,
    pub aggregation: Aggregation,
    /// Train clients concurrently. Results are identical either way.
    pub parallel: bool,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            n_clients: 5,
            local_iters: 10,
            batch_size: 32,
            lr: 0.05,
            lambda: 0.01,
            rounds: 30,
            master_seed: 0,
            aggregation: Aggregation::Equal,
            parallel: true,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clients < 2 {
            return Err(Error::config("fed.n_clients", "must be at least 2"));
        }
        if self.local_iters < 1 {
            return Err(Error::config("fed.local_iters", "must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::config("fed.batch_size", "must be at least 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("fed.lr", "must be finite and non-negative"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("fed.lambda", "must be finite and non-negative"));
        }
        if self.rounds < 1 {
            return Err(Error::config("fed.rounds", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: usize,
    pub role: Role,
    pub data: Dataset,
    pub model: ModelState,
    pub rng: SimRng,
}

/// Everything the server holds: a round counter and a backbone. There is
/// deliberately no place for head parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalState {
    pub round: usize,
    pub global_backbone: BackboneParams,
}

/// What a client sends to the server after local training.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelUpload {
    pub client_id: usize,
    pub backbone: Vec<f64>,
    pub n_samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientRoundStats {
    pub client_id: usize,
    pub role: Role,
    /// Mean face loss over the local iterations.
    pub loss_face: f64,
    /// Mean constraint loss over the local iterations (0 for target clients).
    pub loss_dcl: f64,
    /// `‖θ_client − θ_global‖` after local training.
    pub drift: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    /// 1-based index of the completed round.
    pub round: usize,
    pub clients: Vec<ClientRoundStats>,
}

impl RoundReport {
    pub fn source(&self) -> Option<&ClientRoundStats> {
        self.clients.iter().find(|c| c.role == Role::Source)
    }
}

pub fn client_stream(master_seed: u64, client_id: usize) -> SimRng {
    rng::stream(master_seed, rng::STREAM_CLIENT_BASE + client_id as u64)
}

/// Builds the server and client states from the pre-trained model.
///
/// Client 0 is the source client and keeps the pre-trained head; clients
/// `1..=K` get fresh heads sized to their pseudo-identity counts.
pub fn init_federation(
    source: &Dataset,
    target_clients: &[PseudoLabeledSet],
    pretrained: &ModelState,
    cfg: &FederationConfig,
) -> Result<(GlobalState, Vec<ClientState>)> {
    cfg.validate()?;
    if target_clients.is_empty() {
        return Err(Error::config("fed.n_clients", "need at least one target client"));
    }
    if cfg.n_clients != target_clients.len() + 1 {
        return Err(Error::config(
            "fed.n_clients",
            format!(
                "{} clients configured but 1 source + {} target clients supplied",
                cfg.n_clients,
                target_clients.len()
            ),
        ));
    }
    if pretrained.head.classes != source.id_count {
        return Err(Error::Shape(format!(
            "pre-trained head has {} classes, source data {} identities",
            pretrained.head.classes, source.id_count
        )));
    }
    let d_e = pretrained.backbone.dims.d_e;
    let mut clients = Vec::with_capacity(cfg.n_clients);
    clients.push(ClientState {
        client_id: 0,
        role: Role::Source,
        data: source.clone(),
        model: pretrained.clone(),
        rng: client_stream(cfg.master_seed, 0),
    });
    for (k, t) in target_clients.iter().enumerate() {
        let client_id = k + 1;
        let mut head_rng = rng::stream(cfg.master_seed, rng::STREAM_HEAD_INIT_BASE + client_id as u64);
        let head = HeadParams::init(t.n_pseudo_ids, d_e, &mut head_rng)?;
        clients.push(ClientState {
            client_id,
            role: Role::Target,
            data: t.dataset.clone(),
            model: ModelState {
                backbone: pretrained.backbone.clone(),
                head,
                loss: pretrained.loss,
            },
            rng: client_stream(cfg.master_seed, client_id),
        });
    }
    let global = GlobalState {
        round: 0,
        global_backbone: pretrained.backbone.clone(),
    };
    Ok((global, clients))
}

/// E iterations of local SGD starting from `theta_global`.
///
/// Batches are drawn with replacement from the client's own stream. The
/// proximal term applies to the source client only.
pub fn local_train(
    client: &mut ClientState,
    theta_global: &BackboneParams,
    cfg: &FederationConfig,
    round: usize,
) -> Result<ClientRoundStats> {
    if theta_global.dims != client.model.backbone.dims {
        return Err(Error::Shape(format!(
            "client {} backbone dims differ from the global backbone",
            client.client_id
        )));
    }
    if client.data.is_empty() {
        return Err(Error::Size(format!("client {} has no data", client.client_id)));
    }
    client.model.backbone = theta_global.clone();
    let reference = theta_global.flatten();
    let labels = client.data.labels()?;
    let n = client.data.len();

    let (mut face_sum, mut dcl_sum) = (0.0, 0.0);
    let mut idx = vec![0; cfg.batch_size];
    for iter in 0..cfg.local_iters {
        for slot in idx.iter_mut() {
            *slot = client.rng.random_range(0..n);
        }
        let inputs: Vec<&[f64]> = idx
            .iter()
            .map(|&i| client.data.samples[i].features.as_slice())
            .collect();
        let batch_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let proximal = match client.role {
            Role::Source => Some((reference.as_slice(), cfg.lambda)),
            Role::Target => None,
        };
        let step = model::train_step(&mut client.model, &inputs, &batch_labels, proximal, cfg.lr).map_err(|e| {
            Error::Diverged {
                round,
                iter,
                client: client.client_id,
                reason: e.to_string(),
            }
        })?;
        face_sum += step.face;
        dcl_sum += step.dcl;
    }
    let e = cfg.local_iters as f64;
    Ok(ClientRoundStats {
        client_id: client.client_id,
        role: client.role,
        loss_face: face_sum / e,
        loss_dcl: dcl_sum / e,
        drift: linalg::sq_dist(&client.model.backbone.flatten(), &reference).sqrt(),
    })
}

fn check_lengths(backbones: &[Vec<f64>]) -> Result<usize> {
    let len = backbones
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::Size("nothing to aggregate".into()))?;
    if let Some(bad) = backbones.iter().position(|b| b.len() != len) {
        return Err(Error::Shape(format!(
            "upload {bad} has {} values, expected {len}",
            backbones[bad].len()
        )));
    }
    Ok(len)
}

/// Element-wise mean, written as the first upload plus the mean offset of
/// the others, summed in upload order. Identical uploads reduce exactly.
pub fn aggregate(backbones: &[Vec<f64>]) -> Result<Vec<f64>> {
    check_lengths(backbones)?;
    let weights = vec![1.0; backbones.len()];
    offset_mean(backbones, &weights, backbones.len() as f64)
}

pub fn aggregate_weighted(backbones: &[Vec<f64>], weights: &[f64]) -> Result<Vec<f64>> {
    check_lengths(backbones)?;
    if weights.len() != backbones.len() {
        return Err(Error::Shape("one weight per upload required".into()));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || weights.iter().any(|w| *w < 0.0) {
        return Err(Error::Numeric("weights must be non-negative with positive sum".into()));
    }
    offset_mean(backbones, weights, total)
}

fn offset_mean(backbones: &[Vec<f64>], weights: &[f64], total: f64) -> Result<Vec<f64>> {
    let base = &backbones[0];
    let mut out = vec![0.0; base.len()];
    for (b, w) in backbones.iter().zip(weights).skip(1) {
        for ((o, v), r) in out.iter_mut().zip(b).zip(base) {
            *o += w * (v - r);
        }
    }
    for (o, r) in out.iter_mut().zip(base) {
        *o = r + *o / total;
    }
    Ok(out)
}

/// Server-side reduction of one round's uploads into the next backbone.
pub fn server_aggregate(uploads: &[ModelUpload], cfg: &FederationConfig) -> Result<Vec<f64>> {
    let mut ordered: Vec<&ModelUpload> = uploads.iter().collect();
    ordered.sort_by_key(|u| u.client_id);
    let vectors: Vec<Vec<f64>> = ordered.iter().map(|u| u.backbone.clone()).collect();
    match cfg.aggregation {
        Aggregation::Equal => aggregate(&vectors),
        Aggregation::DataWeighted => {
            let w: Vec<f64> = ordered.iter().map(|u| u.n_samples as f64).collect();
            aggregate_weighted(&vectors, &w)
        }
    }
}

/// One round: every client trains locally, then the server averages the uploads.
pub fn run_round(
    global: &GlobalState,
    clients: &mut [ClientState],
    cfg: &FederationConfig,
) -> Result<(GlobalState, RoundReport)> {
    let round = global.round + 1;
    let theta = &global.global_backbone;
    let train = |c: &mut ClientState| -> Result<(ClientRoundStats, ModelUpload)> {
        let stats = local_train(c, theta, cfg, round)?;
        let upload = ModelUpload {
            client_id: c.client_id,
            backbone: c.model.backbone.flatten(),
            n_samples: c.data.len(),
        };
        Ok((stats, upload))
    };
    let results: Vec<(ClientRoundStats, ModelUpload)> = if cfg.parallel {
        clients.par_iter_mut().map(train).collect::<Result<_>>()?
    } else {
        clients.iter_mut().map(train).collect::<Result<_>>()?
    };
    let (stats, uploads): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let flat = server_aggregate(&uploads, cfg)?;
    let next = GlobalState {
        round,
        global_backbone: BackboneParams::unflatten(theta.dims, &flat)?,
    };
    for c in clients.iter_mut() {
        c.model.backbone = next.global_backbone.clone();
    }
    Ok((next, RoundReport { round, clients: stats }))
}

#[derive(Debug, Clone)]
pub struct FederationOutcome {
    pub global: GlobalState,
    pub reports: Vec<RoundReport>,
}

/// Runs `cfg.rounds` rounds, calling `on_round` after each one.
pub fn run_federation<F>(
    mut global: GlobalState,
    clients: &mut [ClientState],
    cfg: &FederationConfig,
    mut on_round: F,
) -> Result<FederationOutcome>
where
    F: FnMut(&GlobalState, &RoundReport, &[ClientState]) -> Result<()>,
{
    cfg.validate()?;
    let mut reports = Vec::with_capacity(cfg.rounds);
    for _ in 0..cfg.rounds {
        let (next, report) = run_round(&global, clients, cfg)?;
        on_round(&next, &report, clients)?;
        global = next;
        reports.push(report);
    }
    Ok(FederationOutcome { global, reports })
}

pub fn round_reports_csv(reports: &[RoundReport]) -> String {
    let mut out = String::from("round,client_id,role,loss_face,loss_dcl,backbone_drift\n");
    for r in reports {
        for c in &r.clients {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.round,
                c.client_id,
                c.role.as_str(),
                c.loss_face,
                c.loss_dcl,
                c.drift
            );
        }
    }
    out
}

//! The three training stages, the baselines and their on-disk artifacts.
//!
//! Layout under `output_dir`:
//!
//! ```text
//! config.txt
//! pretrain/pretrain.ckpt  pretrain/metrics.csv
//! cluster/client_<k>.ds   cluster/client_<k>_partition.csv  cluster/fscores.csv
//! federate/rounds.csv     federate/round_metrics.csv  federate/metrics.csv  federate/federated.ckpt
//! baseline/<kind>/metrics.csv  baseline/<kind>/model.ckpt
//! ```
//!
//! Each stage regenerates the synthetic data from the config and reads only
//! the artifacts of earlier stages, so a failed stage can be rerun alone.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::clustering::{self, ClusterConfig, Partition};
use crate::config::{Baseline, PretrainConfig, RunConfig};
use crate::data::{self, Dataset, Domain, EvalSets, SyntheticData};
use crate::error::{Error, Result};
use crate::evaluation::{self, MetricsReport};
use crate::federation::{self, RoundReport};
use crate::model::{self, BackboneDims, BackboneParams, Checkpoint, HeadParams, ModelState};
use crate::pseudo::{self, PseudoLabeledSet};
use crate::rng;

pub const PRETRAIN_CKPT: &str = "pretrain/pretrain.ckpt";
pub const FEDERATED_CKPT: &str = "federate/federated.ckpt";

pub fn backbone_dims(cfg: &RunConfig) -> BackboneDims {
    BackboneDims {
        d_in: cfg.synth.dim_in,
        d_h: cfg.model.hidden,
        d_e: cfg.model.embed,
    }
}

/// Supervised training from a seeded initialization.
///
/// Each epoch visits every sample once in a freshly shuffled order; the last
/// batch of an epoch may be short. Zero epochs returns the initialization.
pub fn train_supervised(
    ds: &Dataset,
    dims: BackboneDims,
    loss: model::MarginConfig,
    schedule: &PretrainConfig,
    seed: u64,
) -> Result<ModelState> {
    if ds.is_empty() {
        return Err(Error::Size("no training samples".into()));
    }
    let mut init = rng::stream(seed, rng::STREAM_MODEL_INIT);
    let backbone = BackboneParams::init(dims, &mut init);
    let head = HeadParams::init(ds.id_count, dims.d_e, &mut init)?;
    let mut state = ModelState { backbone, head, loss };
    let labels = ds.labels()?;
    let mut order_rng = rng::stream(seed, rng::STREAM_TRAIN_ORDER);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    for epoch in 0..schedule.epochs {
        order.shuffle(&mut order_rng);
        for (iter, chunk) in order.chunks(schedule.batch_size).enumerate() {
            let inputs: Vec<&[f64]> = chunk.iter().map(|&i| ds.samples[i].features.as_slice()).collect();
            let batch: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            model::train_step(&mut state, &inputs, &batch, None, schedule.lr).map_err(|e| Error::Diverged {
                round: epoch,
                iter,
                client: 0,
                reason: e.to_string(),
            })?;
        }
    }
    Ok(state)
}

pub fn evaluate_both(backbone: &BackboneParams, eval: &EvalSets) -> Result<[MetricsReport; 2]> {
    Ok([
        evaluation::evaluate_domain(backbone, &eval.source)?,
        evaluation::evaluate_domain(backbone, &eval.target)?,
    ])
}

/// Stage 1 in memory: supervised training on the labeled source domain.
pub fn pretrain(cfg: &RunConfig, data: &SyntheticData) -> Result<ModelState> {
    train_supervised(
        &data.source_train,
        backbone_dims(cfg),
        cfg.model.loss,
        &cfg.pretrain,
        cfg.seed,
    )
}

/// F-scores of every clustering method on one target client.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientFScores {
    pub client_id: usize,
    pub c_finch: f64,
    pub finch: f64,
    pub kmeans: f64,
    /// F-score at every DBSCAN grid point, `eps`-major.
    pub dbscan_grid: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterOutput {
    /// One per target client, in client order `1..=K`.
    pub pseudo: Vec<PseudoLabeledSet>,
    pub scores: Vec<ClientFScores>,
}

/// Mean over clients of each method, with DBSCAN at its best grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct FScoreSummary {
    pub c_finch: f64,
    pub finch: f64,
    pub kmeans: f64,
    pub dbscan_best: f64,
    pub dbscan_eps: f64,
    pub dbscan_min_pts: usize,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

pub fn summarize_fscores(cfg: &RunConfig, scores: &[ClientFScores]) -> FScoreSummary {
    let grid: Vec<(f64, usize)> = cfg
        .dbscan
        .eps
        .iter()
        .flat_map(|&e| cfg.dbscan.min_pts.iter().map(move |&m| (e, m)))
        .collect();
    let mut best = (f64::NEG_INFINITY, 0);
    for g in 0..grid.len() {
        let m = mean(scores.iter().map(|s| s.dbscan_grid[g]));
        if m > best.0 {
            best = (m, g);
        }
    }
    FScoreSummary {
        c_finch: mean(scores.iter().map(|s| s.c_finch)),
        finch: mean(scores.iter().map(|s| s.finch)),
        kmeans: mean(scores.iter().map(|s| s.kmeans)),
        dbscan_best: best.0,
        dbscan_eps: grid[best.1].0,
        dbscan_min_pts: grid[best.1].1,
    }
}

fn score_client(
    cfg: &RunConfig,
    client_id: usize,
    vectors: &[Vec<f64>],
    truth: &[usize],
    id_count: usize,
    pseudo: &PseudoLabeledSet,
) -> Result<ClientFScores> {
    let c_finch = clustering::pairwise_f_score(&pseudo.partition, truth)?;
    let unconstrained = clustering::c_finch(vectors, &ClusterConfig::unconstrained())?;
    let finch = clustering::pairwise_f_score(unconstrained.terminal(), truth)?;
    let km = clustering::kmeans(
        vectors,
        id_count.min(vectors.len()),
        cfg.seed.wrapping_add(client_id as u64),
    )?;
    let kmeans = clustering::pairwise_f_score(&km, truth)?;
    let mut dbscan_grid = Vec::new();
    for &eps in &cfg.dbscan.eps {
        for &min_pts in &cfg.dbscan.min_pts {
            let p = clustering::dbscan(vectors, eps, min_pts)?;
            dbscan_grid.push(clustering::pairwise_f_score(&p, truth)?);
        }
    }
    Ok(ClientFScores {
        client_id,
        c_finch,
        finch,
        kmeans,
        dbscan_grid,
    })
}

/// Stage 2 in memory: pseudo labels for every target client, plus
/// clustering-quality scores against the hidden ground truth.
pub fn cluster_clients(cfg: &RunConfig, data: &SyntheticData, backbone: &BackboneParams) -> Result<ClusterOutput> {
    let clients = data::partition_target(&data.target_train, cfg.target_clients())?;
    let mut pseudo = Vec::with_capacity(clients.len());
    let mut scores = Vec::with_capacity(clients.len());
    for (k, client) in clients.iter().enumerate() {
        let client_id = k + 1;
        let blind = client.unlabeled();
        let emb = pseudo::extract_features(backbone, &blind)?;
        let set = pseudo::generate_pseudo_labels(&blind, &emb, &cfg.cluster).map_err(|e| match e {
            Error::EmptyResult(msg) => Error::EmptyResult(format!("client {client_id}: {msg}")),
            other => other,
        })?;
        let truth = client.labels()?;
        scores.push(score_client(
            cfg,
            client_id,
            &emb.vectors,
            &truth,
            client.id_count,
            &set,
        )?);
        pseudo.push(set);
    }
    Ok(ClusterOutput { pseudo, scores })
}

/// Full outcome of stage 3.
#[derive(Debug, Clone)]
pub struct FederateOutput {
    pub global: BackboneParams,
    pub rounds: Vec<RoundReport>,
    /// `(round, [source, target])` after each round, when enabled.
    pub round_metrics: Vec<(usize, [MetricsReport; 2])>,
    pub final_metrics: [MetricsReport; 2],
}

/// Stage 3 in memory.
pub fn federate(
    cfg: &RunConfig,
    data: &SyntheticData,
    pretrained: &ModelState,
    pseudo: &[PseudoLabeledSet],
) -> Result<FederateOutput> {
    let (global, mut clients) = federation::init_federation(&data.source_train, pseudo, pretrained, &cfg.fed)?;
    let mut round_metrics = Vec::new();
    let outcome = federation::run_federation(global, &mut clients, &cfg.fed, |g, r, _| {
        if cfg.eval_each_round {
            round_metrics.push((r.round, evaluate_both(&g.global_backbone, &data.eval)?));
        }
        Ok(())
    })?;
    let final_metrics = evaluate_both(&outcome.global.global_backbone, &data.eval)?;
    Ok(FederateOutput {
        global: outcome.global.global_backbone,
        rounds: outcome.reports,
        round_metrics,
        final_metrics,
    })
}

/// Local fine-tuning on pseudo labels without any communication: each
/// target client trains for `R·E` iterations from the pre-trained backbone,
/// with the same batches it would draw in federation. Returns one model per
/// target client.
pub fn fine_tune_clients(
    cfg: &RunConfig,
    data: &SyntheticData,
    pretrained: &ModelState,
    pseudo: &[PseudoLabeledSet],
) -> Result<Vec<ModelState>> {
    let (_, clients) = federation::init_federation(&data.source_train, pseudo, pretrained, &cfg.fed)?;
    let mut out = Vec::with_capacity(pseudo.len());
    for mut c in clients.into_iter().filter(|c| c.role == federation::Role::Target) {
        for round in 1..=cfg.fed.rounds {
            let start = c.model.backbone.clone();
            federation::local_train(&mut c, &start, &cfg.fed, round)?;
        }
        out.push(c.model);
    }
    Ok(out)
}

/// Result of one baseline: its models and metrics per domain, averaged over
/// models when there are several.
#[derive(Debug, Clone)]
pub struct BaselineOutput {
    pub kind: Baseline,
    pub models: Vec<BackboneParams>,
    pub metrics: [MetricsReport; 2],
}

pub fn run_baseline(cfg: &RunConfig, data: &SyntheticData) -> Result<BaselineOutput> {
    let dims = backbone_dims(cfg);
    let central = |ds: &Dataset| train_supervised(ds, dims, cfg.model.loss, &cfg.pretrain, cfg.seed);
    let models: Vec<BackboneParams> = match cfg.baseline {
        Baseline::None => return Err(Error::config("baseline.kind", "no baseline selected")),
        Baseline::SourceOnly => vec![central(&data.source_train)?.backbone],
        Baseline::TargetOnly => vec![central(&data.target_train)?.backbone],
        Baseline::Merge => {
            let merged = Dataset::concat_disjoint(&[&data.source_train, &data.target_train], Domain::Source)?;
            vec![central(&merged)?.backbone]
        }
        Baseline::FineTune => {
            let p = pretrain(cfg, data)?;
            let clusters = cluster_clients(cfg, data, &p.backbone)?;
            fine_tune_clients(cfg, data, &p, &clusters.pseudo)?
                .into_iter()
                .map(|m| m.backbone)
                .collect()
        }
    };
    let mut per_model = Vec::with_capacity(models.len());
    for m in &models {
        per_model.push(evaluate_both(m, &data.eval)?);
    }
    let source: Vec<MetricsReport> = per_model.iter().map(|r| r[0].clone()).collect();
    let target: Vec<MetricsReport> = per_model.iter().map(|r| r[1].clone()).collect();
    Ok(BaselineOutput {
        kind: cfg.baseline,
        models,
        metrics: [MetricsReport::mean(&source)?, MetricsReport::mean(&target)?],
    })
}

// ---- artifact plumbing ----

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn out(cfg: &RunConfig, rel: &str) -> PathBuf {
    cfg.output_dir.join(rel)
}

fn prepare(cfg: &RunConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    write(&out(cfg, "config.txt"), cfg.to_text())?;
    data::generate_synthetic(&cfg.synth)
}

pub fn client_data_path(cfg: &RunConfig, client_id: usize) -> PathBuf {
    out(cfg, &format!("cluster/client_{client_id}.ds"))
}

pub fn cmd_pretrain(cfg: &RunConfig) -> Result<Checkpoint> {
    let run = || -> Result<Checkpoint> {
        let data = prepare(cfg)?;
        let state = pretrain(cfg, &data)?;
        let metrics = evaluate_both(&state.backbone, &data.eval)?;
        let ckpt = Checkpoint {
            backbone: state.backbone,
            head: Some(state.head),
        };
        write(&out(cfg, "pretrain/metrics.csv"), evaluation::metrics_csv(&metrics))?;
        ckpt.save(&out(cfg, PRETRAIN_CKPT))?;
        Ok(ckpt)
    };
    run().map_err(|e| e.in_stage("pretrain"))
}

fn load_pretrained(cfg: &RunConfig) -> Result<ModelState> {
    let ckpt = Checkpoint::load(&out(cfg, PRETRAIN_CKPT))?;
    if ckpt.backbone.dims != backbone_dims(cfg) {
        return Err(Error::Shape(format!(
            "checkpoint dims {:?} do not match the configured model {:?}",
            ckpt.backbone.dims,
            backbone_dims(cfg)
        )));
    }
    let head = ckpt
        .head
        .ok_or_else(|| Error::Shape("pre-trained checkpoint has no classifier head".into()))?;
    Ok(ModelState {
        backbone: ckpt.backbone,
        head,
        loss: cfg.model.loss,
    })
}

pub fn fscores_csv(cfg: &RunConfig, scores: &[ClientFScores]) -> String {
    let s = summarize_fscores(cfg, scores);
    let mut o = String::from("client,c_finch,finch,kmeans,dbscan_best\n");
    for c in scores {
        let best = c.dbscan_grid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let _ = writeln!(o, "{},{},{},{},{}", c.client_id, c.c_finch, c.finch, c.kmeans, best);
    }
    let _ = writeln!(o, "mean,{},{},{},{}", s.c_finch, s.finch, s.kmeans, s.dbscan_best);
    o
}

pub fn cmd_cluster(cfg: &RunConfig) -> Result<ClusterOutput> {
    let run = || -> Result<ClusterOutput> {
        let data = prepare(cfg)?;
        let pretrained = load_pretrained(cfg)?;
        let result = cluster_clients(cfg, &data, &pretrained.backbone)?;
        for (k, set) in result.pseudo.iter().enumerate() {
            let id = k + 1;
            write(&client_data_path(cfg, id), data::format_dataset(&set.dataset))?;
            write(
                &out(cfg, &format!("cluster/client_{id}_partition.csv")),
                set.partition.to_csv(),
            )?;
        }
        write(&out(cfg, "cluster/fscores.csv"), fscores_csv(cfg, &result.scores))?;
        Ok(result)
    };
    run().map_err(|e| e.in_stage("cluster"))
}

fn load_pseudo(cfg: &RunConfig) -> Result<Vec<PseudoLabeledSet>> {
    (1..=cfg.target_clients())
        .map(|id| {
            let ds = data::load_dataset(&client_data_path(cfg, id))?;
            let n = ds.len();
            Ok(PseudoLabeledSet {
                n_pseudo_ids: ds.id_count,
                partition: Partition::from_raw(&ds.labels()?),
                provenance: pseudo::Provenance {
                    config: cfg.cluster,
                    n_clusters_before_filter: ds.id_count,
                    dropped: Vec::new(),
                },
                kept: (0..n).collect(),
                dataset: ds,
            })
        })
        .collect()
}

pub fn round_metrics_csv(rows: &[(usize, [MetricsReport; 2])]) -> String {
    let mut o = format!("round,{}\n", MetricsReport::csv_header());
    for (round, reports) in rows {
        for r in reports {
            let _ = writeln!(o, "{round},{}", r.csv_row());
        }
    }
    o
}

pub fn cmd_federate(cfg: &RunConfig) -> Result<FederateOutput> {
    let run = || -> Result<FederateOutput> {
        let data = prepare(cfg)?;
        let pretrained = load_pretrained(cfg)?;
        let pseudo = load_pseudo(cfg)?;
        let result = federate(cfg, &data, &pretrained, &pseudo)?;
        write(
            &out(cfg, "federate/rounds.csv"),
            federation::round_reports_csv(&result.rounds),
        )?;
        write(
            &out(cfg, "federate/round_metrics.csv"),
            round_metrics_csv(&result.round_metrics),
        )?;
        write(
            &out(cfg, "federate/metrics.csv"),
            evaluation::metrics_csv(&result.final_metrics),
        )?;
        Checkpoint {
            backbone: result.global.clone(),
            head: None,
        }
        .save(&out(cfg, FEDERATED_CKPT))?;
        Ok(result)
    };
    run().map_err(|e| e.in_stage("federate"))
}

pub fn cmd_baseline(cfg: &RunConfig) -> Result<BaselineOutput> {
    let run = || -> Result<BaselineOutput> {
        let data = prepare(cfg)?;
        let result = run_baseline(cfg, &data)?;
        let dir = format!("baseline/{}", cfg.baseline.as_str());
        write(
            &out(cfg, &format!("{dir}/metrics.csv")),
            evaluation::metrics_csv(&result.metrics),
        )?;
        // Several models only for fine-tuning; keep the first as representative.
        Checkpoint {
            backbone: result.models[0].clone(),
            head: None,
        }
        .save(&out(cfg, &format!("{dir}/model.ckpt")))?;
        Ok(result)
    };
    run().map_err(|e| e.in_stage("baseline"))
}

#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub pretrained: Checkpoint,
    pub clusters: ClusterOutput,
    pub federated: FederateOutput,
}

/// Stages 1 to 3 in order, through the same artifacts as the subcommands.
pub fn cmd_pipeline(cfg: &RunConfig) -> Result<PipelineResult> {
    Ok(PipelineResult {
        pretrained: cmd_pretrain(cfg)?,
        clusters: cmd_cluster(cfg)?,
        federated: cmd_federate(cfg)?,
    })
}

/// Evaluates a saved backbone on both domains.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<[MetricsReport; 2]> {
    let run = || -> Result<[MetricsReport; 2]> {
        cfg.validate()?;
        let data = data::generate_synthetic(&cfg.synth)?;
        let ckpt = Checkpoint::load(checkpoint)?;
        if ckpt.backbone.dims.d_in != cfg.synth.dim_in {
            return Err(Error::Shape(format!(
                "checkpoint expects {} inputs, data has {}",
                ckpt.backbone.dims.d_in, cfg.synth.dim_in
            )));
        }
        evaluate_both(&ckpt.backbone, &data.eval)
    };
    run().map_err(|e| e.in_stage("eval"))
}

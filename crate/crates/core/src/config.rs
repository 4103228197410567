//! Run configuration and its line-oriented text format.
//!
//! ```text
//! # comment
//! synth.noise_sigma = 0.1
//! cluster.threshold_d = inf
//! cluster.dbscan_eps = 0.05, 0.1, 0.2
//! ```
//!
//! Every key is `section.key`; unknown or repeated keys are errors.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::clustering::ClusterConfig;
use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::federation::{Aggregation, FederationConfig};
use crate::model::MarginConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Baseline {
    None,
    SourceOnly,
    TargetOnly,
    Merge,
    FineTune,
}

impl Baseline {
    pub fn as_str(self) -> &'static str {
        match self {
            Baseline::None => "none",
            Baseline::SourceOnly => "source_only",
            Baseline::TargetOnly => "target_only",
            Baseline::Merge => "merge",
            Baseline::FineTune => "fine_tune",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "none" => Baseline::None,
            "source_only" => Baseline::SourceOnly,
            "target_only" => Baseline::TargetOnly,
            "merge" => Baseline::Merge,
            "fine_tune" => Baseline::FineTune,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 30,
            batch_size: 32,
            lr: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub hidden: usize,
    pub embed: usize,
    pub loss: MarginConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 64,
            embed: 32,
            loss: MarginConfig::default(),
        }
    }
}

/// Grid searched when DBSCAN is scored against ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct DbscanGrid {
    pub eps: Vec<f64>,
    pub min_pts: Vec<usize>,
}

impl Default for DbscanGrid {
    fn default() -> Self {
        DbscanGrid {
            eps: (1..=12).map(|i| i as f64 / 20.0).collect(),
            min_pts: vec![2, 3, 4, 5],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Master seed. Data generation and all model randomness derive from it.
    pub seed: u64,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub cluster: ClusterConfig,
    pub dbscan: DbscanGrid,
    pub fed: FederationConfig,
    pub pretrain: PretrainConfig,
    pub baseline: Baseline,
    /// Evaluate both domains after every federated round.
    pub eval_each_round: bool,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = RunConfig {
            seed: 0,
            synth: SynthConfig::default(),
            model: ModelConfig::default(),
            cluster: ClusterConfig::default(),
            dbscan: DbscanGrid::default(),
            fed: FederationConfig::default(),
            pretrain: PretrainConfig::default(),
            baseline: Baseline::None,
            eval_each_round: true,
            output_dir: PathBuf::from("out"),
        };
        cfg.set_seed(0);
        cfg
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| Error::config(key, format!("line {line}: cannot parse {value:?}: {e}")))
}

fn parse_float(key: &str, value: &str, line: usize) -> Result<f64> {
    match value {
        "inf" | "+inf" | "infinity" => Ok(f64::INFINITY),
        _ => parse_value(key, value, line),
    }
}

fn parse_list<T, F>(key: &str, value: &str, line: usize, each: F) -> Result<Vec<T>>
where
    F: Fn(&str, &str, usize) -> Result<T>,
{
    let items: Vec<T> = value
        .split(',')
        .map(|v| each(key, v.trim(), line))
        .collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(Error::config(key, format!("line {line}: empty list")));
    }
    Ok(items)
}

fn fmt_float(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else {
        format!("{v:?}")
    }
}

impl RunConfig {
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.synth.seed = seed;
        self.fed.master_seed = seed;
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| {
                Error::config(
                    format!("line {line}"),
                    format!("expected `section.key = value`, got {content:?}"),
                )
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_owned()) {
                return Err(Error::config(key, format!("line {line}: key given twice")));
            }
            cfg.set(key, value, line)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    fn set(&mut self, key: &str, v: &str, line: usize) -> Result<()> {
        match key {
            "run.seed" => {
                let s = parse_value(key, v, line)?;
                self.set_seed(s);
            }
            "run.output_dir" => self.output_dir = PathBuf::from(v),
            "run.eval_each_round" => self.eval_each_round = parse_value(key, v, line)?,
            "synth.dim_in" => self.synth.dim_in = parse_value(key, v, line)?,
            "synth.ids_source" => self.synth.ids_source = parse_value(key, v, line)?,
            "synth.ids_target" => self.synth.ids_target = parse_value(key, v, line)?,
            "synth.samples_per_id" => self.synth.samples_per_id = parse_value(key, v, line)?,
            "synth.noise_sigma" => self.synth.noise_sigma = parse_float(key, v, line)?,
            "synth.shift_strength" => self.synth.shift_strength = parse_float(key, v, line)?,
            "synth.eval_id_fraction" => self.synth.eval_id_fraction = parse_float(key, v, line)?,
            "synth.latent_dims" => self.synth.latent_dims = parse_value(key, v, line)?,
            "model.hidden" => self.model.hidden = parse_value(key, v, line)?,
            "model.embed" => self.model.embed = parse_value(key, v, line)?,
            "model.scale" => self.model.loss.scale = parse_float(key, v, line)?,
            "model.margin" => self.model.loss.margin = parse_float(key, v, line)?,
            "cluster.threshold_d" => self.cluster.threshold_d = parse_float(key, v, line)?,
            "cluster.metric" => {
                if v != "cosine" {
                    return Err(Error::config(key, format!("line {line}: only `cosine` is supported")));
                }
            }
            "cluster.min_cluster_size" => self.cluster.min_cluster_size = parse_value(key, v, line)?,
            "cluster.dbscan_eps" => self.dbscan.eps = parse_list(key, v, line, parse_float)?,
            "cluster.dbscan_min_pts" => self.dbscan.min_pts = parse_list(key, v, line, parse_value)?,
            "fed.n_clients" => self.fed.n_clients = parse_value(key, v, line)?,
            "fed.local_iters" => self.fed.local_iters = parse_value(key, v, line)?,
            "fed.batch_size" => self.fed.batch_size = parse_value(key, v, line)?,
            "fed.lr" => self.fed.lr = parse_float(key, v, line)?,
            "fed.lambda" => self.fed.lambda = parse_float(key, v, line)?,
            "fed.rounds" => self.fed.rounds = parse_value(key, v, line)?,
            "fed.aggregation" => {
                self.fed.aggregation = match v {
                    "equal" => Aggregation::Equal,
                    "data_weighted" => Aggregation::DataWeighted,
                    _ => return Err(Error::config(key, format!("line {line}: expected equal|data_weighted"))),
                }
            }
            "fed.parallel" => self.fed.parallel = parse_value(key, v, line)?,
            "pretrain.epochs" => self.pretrain.epochs = parse_value(key, v, line)?,
            "pretrain.batch_size" => self.pretrain.batch_size = parse_value(key, v, line)?,
            "pretrain.lr" => self.pretrain.lr = parse_float(key, v, line)?,
            "baseline.kind" => {
                self.baseline = Baseline::parse(v)
                    .ok_or_else(|| Error::config(key, format!("line {line}: unknown baseline {v:?}")))?
            }
            _ => return Err(Error::config(key, format!("line {line}: unknown key"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.cluster.validate()?;
        self.fed.validate()?;
        self.model.loss.validate()?;
        if self.model.hidden < 1 {
            return Err(Error::config("model.hidden", "must be at least 1"));
        }
        if self.model.embed < 2 {
            return Err(Error::config("model.embed", "must be at least 2"));
        }
        if self.pretrain.batch_size < 1 {
            return Err(Error::config("pretrain.batch_size", "must be at least 1"));
        }
        if !(self.pretrain.lr >= 0.0 && self.pretrain.lr.is_finite()) {
            return Err(Error::config("pretrain.lr", "must be finite and non-negative"));
        }
        let k = self.fed.n_clients - 1;
        if k > self.synth.ids_target {
            return Err(Error::config(
                "fed.n_clients",
                format!(
                    "{k} target clients but only {} target identities",
                    self.synth.ids_target
                ),
            ));
        }
        if self.dbscan.eps.iter().any(|e| !(*e > 0.0)) {
            return Err(Error::config("cluster.dbscan_eps", "values must be positive"));
        }
        if self.dbscan.min_pts.iter().any(|m| *m < 1) {
            return Err(Error::config("cluster.dbscan_min_pts", "values must be at least 1"));
        }
        Ok(())
    }

    /// Number of target clients K.
    pub fn target_clients(&self) -> usize {
        self.fed.n_clients - 1
    }

    /// Canonical text form; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let mut o = String::new();
        let s = &self.synth;
        let _ = writeln!(o, "run.seed = {}", self.seed);
        let _ = writeln!(o, "run.output_dir = {}", self.output_dir.display());
        let _ = writeln!(o, "run.eval_each_round = {}", self.eval_each_round);
        let _ = writeln!(o, "synth.dim_in = {}", s.dim_in);
        let _ = writeln!(o, "synth.ids_source = {}", s.ids_source);
        let _ = writeln!(o, "synth.ids_target = {}", s.ids_target);
        let _ = writeln!(o, "synth.samples_per_id = {}", s.samples_per_id);
        let _ = writeln!(o, "synth.noise_sigma = {}", fmt_float(s.noise_sigma));
        let _ = writeln!(o, "synth.shift_strength = {}", fmt_float(s.shift_strength));
        let _ = writeln!(o, "synth.eval_id_fraction = {}", fmt_float(s.eval_id_fraction));
        let _ = writeln!(o, "synth.latent_dims = {}", s.latent_dims);
        let _ = writeln!(o, "model.hidden = {}", self.model.hidden);
        let _ = writeln!(o, "model.embed = {}", self.model.embed);
        let _ = writeln!(o, "model.scale = {}", fmt_float(self.model.loss.scale));
        let _ = writeln!(o, "model.margin = {}", fmt_float(self.model.loss.margin));
        let _ = writeln!(o, "cluster.threshold_d = {}", fmt_float(self.cluster.threshold_d));
        let _ = writeln!(o, "cluster.metric = cosine");
        let _ = writeln!(o, "cluster.min_cluster_size = {}", self.cluster.min_cluster_size);
        let eps: Vec<String> = self.dbscan.eps.iter().map(|e| fmt_float(*e)).collect();
        let _ = writeln!(o, "cluster.dbscan_eps = {}", eps.join(", "));
        let mp: Vec<String> = self.dbscan.min_pts.iter().map(|m| m.to_string()).collect();
        let _ = writeln!(o, "cluster.dbscan_min_pts = {}", mp.join(", "));
        let f = &self.fed;
        let _ = writeln!(o, "fed.n_clients = {}", f.n_clients);
        let _ = writeln!(o, "fed.local_iters = {}", f.local_iters);
        let _ = writeln!(o, "fed.batch_size = {}", f.batch_size);
        let _ = writeln!(o, "fed.lr = {}", fmt_float(f.lr));
        let _ = writeln!(o, "fed.lambda = {}", fmt_float(f.lambda));
        let _ = writeln!(o, "fed.rounds = {}", f.rounds);
        let agg = match f.aggregation {
            Aggregation::Equal => "equal",
            Aggregation::DataWeighted => "data_weighted",
        };
        let _ = writeln!(o, "fed.aggregation = {agg}");
        let _ = writeln!(o, "fed.parallel = {}", f.parallel);
        let _ = writeln!(o, "pretrain.epochs = {}", self.pretrain.epochs);
        let _ = writeln!(o, "pretrain.batch_size = {}", self.pretrain.batch_size);
        let _ = writeln!(o, "pretrain.lr = {}", fmt_float(self.pretrain.lr));
        let _ = writeln!(o, "baseline.kind = {}", self.baseline.as_str());
        o
    }
}

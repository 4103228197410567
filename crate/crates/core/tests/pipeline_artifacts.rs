use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use fedfr_core::config::{Baseline, RunConfig};
use fedfr_core::data::Domain;
use fedfr_core::pipeline;

fn small(out: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.synth.dim_in = 8;
    cfg.synth.latent_dims = 8;
    cfg.synth.ids_source = 12;
    cfg.synth.ids_target = 9;
    cfg.synth.samples_per_id = 6;
    cfg.model.hidden = 16;
    cfg.model.embed = 8;
    cfg.pretrain.epochs = 8;
    cfg.fed.n_clients = 4;
    cfg.fed.rounds = 3;
    cfg.fed.local_iters = 4;
    cfg.fed.batch_size = 8;
    cfg.output_dir = out.to_path_buf();
    cfg
}

fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, acc: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(root, &p, acc);
            } else {
                acc.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    let mut acc = BTreeMap::new();
    walk(root, root, &mut acc);
    acc
}

/// Same file set and contents; config.txt is compared with its output_dir
/// line dropped, since the runs live in different directories.
fn assert_same_artifacts(a: &Path, b: &Path) {
    let (sa, sb) = (snapshot(a), snapshot(b));
    assert_eq!(sa.keys().collect::<Vec<_>>(), sb.keys().collect::<Vec<_>>());
    for (k, v) in &sa {
        if k == Path::new("config.txt") {
            let strip = |bytes: &[u8]| -> String {
                String::from_utf8(bytes.to_vec())
                    .unwrap()
                    .lines()
                    .filter(|l| !l.starts_with("run.output_dir"))
                    .collect::<Vec<_>>()
                    .join("\n")
            };
            assert_eq!(strip(v), strip(&sb[k]));
        } else {
            assert!(sb[k] == *v, "{} differs", k.display());
        }
    }
}

#[test]
fn pipeline_matches_chained_stages_byte_for_byte() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline::cmd_pipeline(&small(a.path())).unwrap();
    let cfg = small(b.path());
    pipeline::cmd_pretrain(&cfg).unwrap();
    pipeline::cmd_cluster(&cfg).unwrap();
    pipeline::cmd_federate(&cfg).unwrap();
    assert!(a.path().join(pipeline::FEDERATED_CKPT).is_file());
    assert_same_artifacts(a.path(), b.path());
}

#[test]
fn reruns_are_bit_identical_and_output_dir_is_created() {
    let root = tempfile::tempdir().unwrap();
    let (x, y) = (root.path().join("x/nested"), root.path().join("y"));
    let rx = pipeline::cmd_pipeline(&small(&x)).unwrap();
    let ry = pipeline::cmd_pipeline(&small(&y)).unwrap();
    assert_eq!(rx.federated.global.flatten(), ry.federated.global.flatten());
    assert_same_artifacts(&x, &y);
}

#[test]
fn federate_rerun_restores_deleted_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    pipeline::cmd_pipeline(&cfg).unwrap();
    let before = snapshot(dir.path());
    fs::remove_dir_all(dir.path().join("federate")).unwrap();
    pipeline::cmd_federate(&cfg).unwrap();
    assert!(snapshot(dir.path()) == before);
}

#[test]
fn federate_without_earlier_stages_fails() {
    let dir = tempfile::tempdir().unwrap();
    let err = pipeline::cmd_federate(&small(dir.path())).unwrap_err();
    assert!(!err.is_config());
    assert!(err.to_string().contains("federate"), "{err}");
}

#[test]
fn round_metrics_have_one_row_per_round_and_domain() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    pipeline::cmd_pipeline(&cfg).unwrap();
    let text = fs::read_to_string(dir.path().join("federate/round_metrics.csv")).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 2 * cfg.fed.rounds);
    for r in 1..=cfg.fed.rounds {
        for d in [Domain::Source, Domain::Target] {
            let hits = rows
                .iter()
                .filter(|l| l.starts_with(&format!("{r},")) && l.contains(d.as_str()))
                .count();
            assert_eq!(hits, 1, "round {r} {d}");
        }
    }
    let clients = fs::read_to_string(dir.path().join("federate/rounds.csv")).unwrap();
    assert_eq!(clients.lines().count() - 1, cfg.fed.rounds * cfg.fed.n_clients);
    let fs_csv = fs::read_to_string(dir.path().join("cluster/fscores.csv")).unwrap();
    assert_eq!(fs_csv.lines().count(), 1 + cfg.target_clients() + 1);
}

#[test]
fn eval_reproduces_federated_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let r = pipeline::cmd_pipeline(&cfg).unwrap();
    let again = pipeline::cmd_eval(&cfg, &dir.path().join(pipeline::FEDERATED_CKPT)).unwrap();
    assert_eq!(again, r.federated.final_metrics);
}

#[test]
fn every_baseline_writes_its_outputs() {
    let dir = tempfile::tempdir().unwrap();
    for kind in [
        Baseline::SourceOnly,
        Baseline::TargetOnly,
        Baseline::Merge,
        Baseline::FineTune,
    ] {
        let mut cfg = small(dir.path());
        cfg.baseline = kind;
        let r = pipeline::cmd_baseline(&cfg).unwrap();
        let base = dir.path().join("baseline").join(kind.as_str());
        assert!(base.join("metrics.csv").is_file(), "{kind:?}");
        assert!(base.join("model.ckpt").is_file(), "{kind:?}");
        let n = if kind == Baseline::FineTune {
            cfg.target_clients()
        } else {
            1
        };
        assert_eq!(r.models.len(), n, "{kind:?}");
    }
}

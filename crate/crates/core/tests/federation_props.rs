use fedfr_core::config::RunConfig;
use fedfr_core::data::{self, SyntheticData};
use fedfr_core::federation::{self, ClientState, GlobalState, Role};
use fedfr_core::model::ModelState;
use fedfr_core::pipeline;
use fedfr_core::pseudo::PseudoLabeledSet;
use proptest::prelude::*;

fn small() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.synth.dim_in = 8;
    cfg.synth.latent_dims = 8;
    cfg.synth.ids_source = 12;
    cfg.synth.ids_target = 8;
    cfg.synth.samples_per_id = 6;
    cfg.model.hidden = 16;
    cfg.model.embed = 8;
    cfg.pretrain.epochs = 5;
    cfg.fed.n_clients = 3;
    cfg.fed.rounds = 3;
    cfg.fed.local_iters = 4;
    cfg.fed.batch_size = 8;
    cfg.eval_each_round = false;
    cfg
}

struct Setup {
    data: SyntheticData,
    pretrained: ModelState,
    pseudo: Vec<PseudoLabeledSet>,
}

fn setup(cfg: &RunConfig) -> Setup {
    let data = data::generate_synthetic(&cfg.synth).unwrap();
    let pretrained = pipeline::pretrain(cfg, &data).unwrap();
    let pseudo = pipeline::cluster_clients(cfg, &data, &pretrained.backbone)
        .unwrap()
        .pseudo;
    Setup {
        data,
        pretrained,
        pseudo,
    }
}

fn init(cfg: &RunConfig, s: &Setup) -> (GlobalState, Vec<ClientState>) {
    federation::init_federation(&s.data.source_train, &s.pseudo, &s.pretrained, &cfg.fed).unwrap()
}

#[test]
fn init_copies_pretrained_backbone_everywhere() {
    let cfg = small();
    let s = setup(&cfg);
    let (g, clients) = init(&cfg, &s);
    assert_eq!(g.round, 0);
    assert_eq!(g.global_backbone, s.pretrained.backbone);
    assert_eq!(clients.iter().filter(|c| c.role == Role::Source).count(), 1);
    assert_eq!(clients[0].model.head, s.pretrained.head);
    let rows: usize = clients[1..].iter().map(|c| c.model.head.classes).sum();
    let pseudo_ids: usize = s.pseudo.iter().map(|p| p.n_pseudo_ids).sum();
    assert_eq!(rows, pseudo_ids);
    for c in &clients {
        assert_eq!(c.model.backbone, s.pretrained.backbone);
    }
}

#[test]
fn parallel_and_sequential_rounds_agree_bitwise() {
    let mut cfg = small();
    let s = setup(&cfg);
    let run = |cfg: &RunConfig| {
        let (g, mut clients) = init(cfg, &s);
        let out = federation::run_federation(g, &mut clients, &cfg.fed, |_, _, _| Ok(())).unwrap();
        (
            out.global.global_backbone.flatten(),
            federation::round_reports_csv(&out.reports),
        )
    };
    cfg.fed.parallel = true;
    let a = run(&cfg);
    cfg.fed.parallel = false;
    let b = run(&cfg);
    assert_eq!(a, b);
}

#[test]
fn target_clients_ignore_lambda() {
    let cfg = small();
    let s = setup(&cfg);
    let theta = s.pretrained.backbone.clone();
    let mut outs = Vec::new();
    for lambda in [0.0, 1.0] {
        let mut c = cfg.clone();
        c.fed.lambda = lambda;
        let (_, mut clients) = init(&c, &s);
        federation::local_train(&mut clients[1], &theta, &c.fed, 1).unwrap();
        outs.push(clients[1].model.clone());
    }
    assert_eq!(outs[0], outs[1]);
}

#[test]
fn huge_lambda_pins_source_to_reference() {
    let mut cfg = small();
    // lr·λ = 1 keeps the proximal step stable.
    cfg.fed.lr = 1e-6;
    let s = setup(&cfg);
    let theta = s.pretrained.backbone.clone();
    let mut drift = Vec::new();
    for lambda in [0.0, 1e6] {
        let mut c = cfg.clone();
        c.fed.lambda = lambda;
        let (_, mut clients) = init(&c, &s);
        drift.push(
            federation::local_train(&mut clients[0], &theta, &c.fed, 1)
                .unwrap()
                .drift,
        );
    }
    assert!(drift[1] < drift[0], "{drift:?}");
}

#[test]
fn zero_learning_rate_freezes_global_model() {
    let mut cfg = small();
    cfg.fed.lr = 0.0;
    let s = setup(&cfg);
    let (g, mut clients) = init(&cfg, &s);
    let (next, report) = federation::run_round(&g, &mut clients, &cfg.fed).unwrap();
    assert_eq!(next.round, 1);
    assert_eq!(next.global_backbone, g.global_backbone);
    assert!(report.clients.iter().all(|c| c.drift == 0.0));
}

#[test]
fn identical_clients_aggregate_to_their_model() {
    let cfg = {
        let mut c = small();
        c.fed.n_clients = 2;
        c
    };
    let s = setup(&cfg);
    let (g, clients) = init(&cfg, &s);
    // Two copies of the same target client, same stream.
    let mut twins = vec![clients[1].clone(), clients[1].clone()];
    twins[1].client_id = 1;
    let (next, _) = federation::run_round(&g, &mut twins, &cfg.fed).unwrap();
    let mut solo = clients[1].clone();
    federation::local_train(&mut solo, &g.global_backbone, &cfg.fed, 1).unwrap();
    assert_eq!(next.global_backbone, solo.model.backbone);
}

#[test]
fn first_round_target_traces_do_not_depend_on_lambda() {
    let cfg = small();
    let s = setup(&cfg);
    let mut traces = Vec::new();
    for lambda in [0.0, 0.01] {
        let mut c = cfg.clone();
        c.fed.lambda = lambda;
        let (g, mut clients) = init(&c, &s);
        let (_, report) = federation::run_round(&g, &mut clients, &c.fed).unwrap();
        traces.push(report);
    }
    for (a, b) in traces[0].clients.iter().zip(&traces[1].clients) {
        if a.role == Role::Target {
            assert_eq!(a, b);
        }
    }
    assert_ne!(traces[0].source(), traces[1].source());
}

fn independent_mean(vs: &[Vec<f64>]) -> Vec<f64> {
    // Sum in reverse client order, divide term by term.
    let n = vs.len() as f64;
    (0..vs[0].len())
        .map(|i| vs.iter().rev().map(|v| v[i] / n).sum())
        .collect()
}

proptest! {
    #[test]
    fn aggregate_matches_independent_mean(
        vs in (1usize..8, 1usize..40).prop_flat_map(|(n, len)| {
            proptest::collection::vec(proptest::collection::vec(-10.0f64..10.0, len), n)
        })
    ) {
        let got = federation::aggregate(&vs).unwrap();
        for (a, b) in got.iter().zip(independent_mean(&vs)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn copies_aggregate_to_themselves(v in proptest::collection::vec(-1e6f64..1e6, 1..50), n in 1usize..9) {
        let vs = vec![v.clone(); n];
        prop_assert_eq!(federation::aggregate(&vs).unwrap(), v);
    }
}

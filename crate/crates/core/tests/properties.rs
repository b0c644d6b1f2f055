use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use graphx::data::{build_correlation_graph, gen_synthetic, Dataset, SyntheticConfig};
use graphx::graph::{
    assemble_bar_adjacency, binarize_edges, expand_to_union, Adjacency, Episode, ModeGraph, ModeSpec, Phase,
};
use graphx::hypernet::Checkpoint;
use graphx::layers::{gat_attention, init_blocks, GraphOps, LayerKind, LayerSpec, LayerWeights};
use graphx::metrics::pcc_metric;
use graphx::pipeline::{
    episode_loss, forward_episode, train, EpisodePlan, Model, ModelConfig, ParamGroup, TrainConfig,
};
use graphx::par::Execution;
use graphx::tensor::{Activation, Tape, Tensor};

fn is_sym_unit_diag(a: &Adjacency) -> bool {
    let n = a.n();
    (0..n).all(|u| a.has_edge(u, u) && (0..n).all(|v| a.has_edge(u, v) == a.has_edge(v, u)))
}

fn edges_strategy(n: usize) -> impl Strategy<Value = Vec<(usize, usize)>> {
    prop::collection::vec((0..n, 0..n), 0..2 * n)
        .prop_map(|es| es.into_iter().filter(|(u, v)| u != v).collect())
}

fn mode(id: &str, nodes: Vec<usize>, edges: &[(usize, usize)], seed: u64) -> ModeGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = nodes.len();
    let adj = Adjacency::from_edges(n, edges).unwrap();
    let x = Tensor::randn(vec![n, 1], 1.0, &mut rng);
    ModeGraph::new(
        ModeSpec {
            mode_id: id.into(),
            meta: vec![0.0],
            node_ids: nodes.clone(),
        },
        adj,
        nodes,
        vec![x],
    )
    .unwrap()
}

/// Subset of 0..12 with at least one node, plus edges over its positions.
fn mode_strategy() -> impl Strategy<Value = (Vec<usize>, Vec<(usize, usize)>)> {
    prop::sample::subsequence((0..12).collect::<Vec<_>>(), 1..12)
        .prop_flat_map(|nodes| {
            let n = nodes.len();
            (Just(nodes), edges_strategy(n))
        })
}

fn small_model_and_data(rho: f64, seed: u64) -> (Model, Dataset, EpisodePlan) {
    let (ds, _) = gen_synthetic(&SyntheticConfig::small(8, 3, 3), seed).unwrap();
    let mut cfg = ModelConfig::standard(LayerKind::Gcn, 1, 6, 4);
    cfg.hyper_e.hidden = 8;
    cfg.hyper_d.hidden = 8;
    cfg.rho = rho;
    let model = Model::new(cfg, 1, ds.meta_dim(), seed).unwrap();
    let e = Episode::parse("m0,m1->m2", Phase::Train).unwrap();
    let plan = EpisodePlan::new(&ds, &e, model.config()).unwrap();
    (model, ds, plan)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn expansion_restricts_back_to_the_original((nodes, edges) in mode_strategy(), (other, oe) in mode_strategy()) {
        let m = mode("m", nodes.clone(), &edges, 1);
        let t = mode("t", other, &oe, 2);
        let (inputs, _) = expand_to_union(&[&m], &t).unwrap();
        let e = &inputs[0];
        let pos: Vec<usize> = m.node_ids().iter().map(|u| e.node_ids.binary_search(u).unwrap()).collect();
        prop_assert_eq!(&e.adjacency.induced(&pos), m.adjacency());
        let restored = e.attrs[0].select_rows(&pos);
        prop_assert_eq!(&restored, &m.graph_attrs(0));
        for (q, &present) in e.presence_mask.iter().enumerate() {
            prop_assert_eq!(present, pos.contains(&q));
            if !present {
                prop_assert_eq!(e.adjacency.degree(q), 1);
            }
        }
    }

    #[test]
    fn bar_adjacency_keeps_symmetry(n in 1usize..8, extra in 0usize..6, edges in edges_strategy(8)) {
        let edges: Vec<_> = edges.into_iter().filter(|&(u, v)| u < n && v < n).collect();
        let a = Adjacency::from_edges(n, &edges).unwrap();
        let bar = assemble_bar_adjacency(&a, n + extra).unwrap();
        prop_assert!(is_sym_unit_diag(&bar));
        prop_assert_eq!(bar.edge_count(), a.edge_count());
    }

    #[test]
    fn binarized_edges_are_symmetric(n in 1usize..7, vals in prop::collection::vec(0.0f64..1.0, 49), tau in 0.01f64..0.99) {
        let probs = Tensor::new(vec![n, n], vals[..n * n].to_vec()).unwrap();
        prop_assert!(is_sym_unit_diag(&binarize_edges(&probs, tau).unwrap()));
    }

    #[test]
    fn correlation_graph_is_symmetric(q in 1usize..8, t in 2usize..10, vals in prop::collection::vec(-5.0f64..5.0, 80), rho in 0.05f64..0.95) {
        let series = Tensor::new(vec![q, t], vals[..q * t].to_vec()).unwrap();
        prop_assert!(is_sym_unit_diag(&build_correlation_graph(&series, rho).unwrap()));
    }

    #[test]
    fn pcc_is_affine_invariant(
        pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..40),
        a in 0.01f64..100.0,
        b in -50.0f64..50.0,
        c in 0.01f64..100.0,
        d in -50.0f64..50.0,
    ) {
        let (x, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let base = pcc_metric(&x, &y).unwrap();
        prop_assume!(base.defined);
        let xs: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        let ys: Vec<f64> = y.iter().map(|v| c * v + d).collect();
        let moved = pcc_metric(&xs, &ys).unwrap();
        prop_assert!((moved.value - base.value).abs() < 1e-9);
        prop_assert!((-1.0..=1.0).contains(&moved.value));
    }

    #[test]
    fn gat_attention_rows_are_distributions(n in 1usize..7, edges in edges_strategy(7), seed in 0u64..1000) {
        let edges: Vec<_> = edges.into_iter().filter(|&(u, v)| u < n && v < n).collect();
        let a = Adjacency::from_edges(n, &edges).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = LayerSpec::gat(3, 4, 2, Activation::Relu);
        let blocks = init_blocks(&spec, &mut rng);
        let tape = Tape::new();
        let w = LayerWeights::from_tensors(&tape, &spec, &blocks, false).unwrap();
        let h = tape.constant(&Tensor::randn(vec![n, 3], 1.0, &mut rng));
        let ops = GraphOps::new(&a);
        for (att, _) in gat_attention(&ops.adj, h, &w, &spec).unwrap() {
            let att = att.value();
            for u in 0..n {
                let row = att.row(u);
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                for (v, &x) in row.iter().enumerate() {
                    prop_assert!(x >= 0.0);
                    if !a.has_edge(u, v) {
                        prop_assert_eq!(x, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn checkpoint_bytes_round_trip(vals in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..30)) {
        let ck = Checkpoint {
            config_hash: "abc".into(),
            blocks: vec![("gamma_e.h0.W".into(), Tensor::new(vec![vals.len()], vals).unwrap())],
        };
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        prop_assert_eq!(back, ck);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn zero_rho_leaves_phi_without_gradient(seed in 0u64..100) {
        let (model, ds, plan) = small_model_and_data(0.0, seed);
        let tape = Tape::new();
        let bound = model.bind(&tape, true).unwrap();
        let loss = episode_loss(&model, &tape, &bound, &ds, &plan, &[0, 1, 2]).unwrap();
        let grads = loss.total.backward().unwrap();
        for (p, v) in model.params().iter().zip(&bound.vars) {
            if p.group == ParamGroup::Phi {
                prop_assert!(grads.get_or_zeros(*v).iter().all(|&g| g == 0.0), "{}", p.name);
            }
        }
    }

    #[test]
    fn zero_learning_rate_changes_nothing(seed in 0u64..100) {
        let (mut model, ds, _) = small_model_and_data(1.0, seed);
        let before: Vec<Tensor> = model.params().iter().map(|p| p.value.clone()).collect();
        let cfg = TrainConfig { lr: 0.0, max_steps: 3, ..Default::default() };
        let e = Episode::parse("m0,m1->m2", Phase::Train).unwrap();
        train(&mut model, &ds, &[e], &cfg, seed).unwrap();
        let after: Vec<Tensor> = model.params().iter().map(|p| p.value.clone()).collect();
        prop_assert_eq!(before, after);
    }

    #[test]
    fn training_is_reproducible(seed in 0u64..100) {
        let run = || {
            let (mut model, ds, _) = small_model_and_data(1.0, seed);
            let cfg = TrainConfig { lr: 1e-2, max_steps: 4, batch_size: Some(2), ..Default::default() };
            let e = Episode::parse("m0,m1->m2", Phase::Train).unwrap();
            let out = train(&mut model, &ds, &[e], &cfg, seed).unwrap();
            (out.history_csv(), model.to_checkpoint().to_bytes())
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn duplicated_input_mode_matches_single_input(seed in 0u64..100) {
        let (model, ds, _) = small_model_and_data(1.0, seed);
        let predict = |spec: &str| {
            let e = Episode::parse(spec, Phase::Generalize).unwrap();
            let plan = EpisodePlan::new(&ds, &e, model.config()).unwrap();
            forward_episode(&model, &ds, &plan, &[0, 1], Execution::Sequential).unwrap()
        };
        let (one, two) = (predict("m0->m2"), predict("m0,m0->m2"));
        for (a, b) in one.iter().zip(&two) {
            prop_assert!(a.x_hat.max_abs_diff(&b.x_hat) < 1e-12);
        }
    }

    #[test]
    fn generated_weights_are_continuous_and_mode_specific(seed in 0u64..100, i in 0usize..3) {
        let (model, _, _) = small_model_and_data(1.0, seed);
        let tape = Tape::new();
        let bound = model.bind(&tape, false).unwrap();
        let net = model.encoder_net();
        let gen = |meta: &[f64]| net.generate(&tape, &bound.gamma_e, meta).unwrap().flat.value();
        let meta = vec![0.3, -0.2, 0.5];
        let base = gen(&meta);
        let mut nudged = meta.clone();
        nudged[i] += 1e-6;
        let delta = base.max_abs_diff(&gen(&nudged));
        // Lipschitz bound: product of weight norms (activations and the
        // per-block output scales are 1-Lipschitz or contractions).
        let lip: f64 = model
            .params()
            .iter()
            .filter(|p| p.group == ParamGroup::GammaE && p.name.ends_with(".W"))
            .map(|p| p.value.data().iter().map(|x| x * x).sum::<f64>().sqrt())
            .product();
        prop_assert!(delta <= 1e-6 * lip * (1.0 + 1e-6), "jump {delta}, bound {}", 1e-6 * lip);
        prop_assert!(base.max_abs_diff(&gen(&[0.3, 0.4, -0.5])) > 1e-6);
    }
}

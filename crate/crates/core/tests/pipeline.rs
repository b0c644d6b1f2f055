use graphx::data::{gen_synthetic, Dataset, SyntheticConfig};
use graphx::graph::{Episode, Phase};
use graphx::layers::LayerKind;
use graphx::par::Execution;
use graphx::pipeline::{
    evaluate, forward_episode, train, Ablation, EpisodePlan, Model, ModelConfig, ParamGroup, TrainConfig,
};

fn data() -> Dataset {
    gen_synthetic(&SyntheticConfig::small(10, 4, 3), 9).unwrap().0
}

fn config(ablation: Ablation) -> ModelConfig {
    let mut c = ModelConfig::standard(LayerKind::Gcn, 1, 8, 4);
    c.hyper_e.hidden = 8;
    c.hyper_d.hidden = 8;
    c.ablation = ablation;
    c
}

fn ep(s: &str) -> Episode {
    Episode::parse(s, Phase::Train).unwrap()
}

#[test]
fn union_rows_come_from_the_decoder_in_universe_order() {
    let ds = data();
    let model = Model::new(config(Ablation::Full), 1, ds.meta_dim(), 0).unwrap();
    let plan = EpisodePlan::new(&ds, &ep("m0,m1->m2"), model.config()).unwrap();
    let preds = forward_episode(&model, &ds, &plan, &[0, 1], Execution::Sequential).unwrap();
    assert_eq!(preds.len(), 2);
    for p in &preds {
        assert_eq!(p.x_hat.shape(), &[ds.p(), 1]);
        assert!(p.x_hat.is_finite());
        for (r, &u) in p.union.iter().enumerate() {
            assert_eq!(p.x_hat.row(u), p.x_tilde.row(r));
        }
        assert!(p.union.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(p.residual.shape(), &[p.observed.len(), 1]);
        assert!(p.l1 >= 0.0 && p.l2 >= 0.0);
    }
}

#[test]
fn sequential_and_parallel_predictions_agree() {
    let ds = data();
    let model = Model::new(config(Ablation::Full), 1, ds.meta_dim(), 1).unwrap();
    let plan = EpisodePlan::new(&ds, &ep("m0,m1->m2"), model.config()).unwrap();
    let a = forward_episode(&model, &ds, &plan, &[0, 1, 2, 3], Execution::Sequential).unwrap();
    let b = forward_episode(&model, &ds, &plan, &[0, 1, 2, 3], Execution::Parallel).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.x_hat, y.x_hat);
    }
}

#[test]
fn frozen_encoder_ablation_trains_only_the_rest() {
    let ds = data();
    let mut model = Model::new(config(Ablation::Hypergnn), 1, ds.meta_dim(), 2).unwrap();
    let before = model.params().to_vec();
    let cfg = TrainConfig {
        lr: 1e-2,
        max_steps: 3,
        ..Default::default()
    };
    train(&mut model, &ds, &[ep("m0->m2")], &cfg, 0).unwrap();
    for (a, b) in before.iter().zip(model.params()) {
        match a.group {
            ParamGroup::GammaE => assert_eq!(a.value, b.value, "{}", a.name),
            ParamGroup::GammaD => assert_ne!(a.value, b.value, "{}", a.name),
            ParamGroup::Phi => {}
        }
    }
}

#[test]
fn shared_head_shrinks_the_decoder_hypernetwork() {
    let ds = data();
    let full = Model::new(config(Ablation::Full), 1, ds.meta_dim(), 0).unwrap();
    let shared = Model::new(config(Ablation::Hypergnn1), 1, ds.meta_dim(), 0).unwrap();
    assert!(shared.decoder_net().schema().total_size() < full.decoder_net().schema().total_size());
    assert_eq!(shared.encoder_net().schema(), full.encoder_net().schema());
    assert!(shared.params().iter().any(|p| p.group == ParamGroup::GammaD && p.name.contains("head")));
}

#[test]
fn single_input_evaluation_uses_the_first_source() {
    let ds = data();
    let single = Model::new(config(Ablation::SingleInputEval), 1, ds.meta_dim(), 4).unwrap();
    let mut full = Model::new(config(Ablation::Full), 1, ds.meta_dim(), 4).unwrap();
    full.params_mut().clone_from_slice(single.params());
    let (a, _) = evaluate(&single, &ds, &ep("m0,m1->m2"), None, Execution::Sequential, 0).unwrap();
    let (b, _) = evaluate(&full, &ds, &ep("m0->m2"), None, Execution::Sequential, 0).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.x_hat, y.x_hat);
    }
}

#[test]
fn type_only_meta_ignores_the_numeric_features() {
    let ds = data();
    let mut c = config(Ablation::Hypergnn2);
    c.type_dims = 1;
    let model = Model::new(c, 1, ds.meta_dim(), 0).unwrap();
    assert_eq!(model.encoder_net().meta_dim(), 1);
    let m2 = ds.mode("m2").unwrap().meta().to_vec();
    let mut moved = m2.clone();
    for v in &mut moved[1..] {
        *v += 1.0;
    }
    let shifted = ds.with_meta("m2", moved).unwrap();
    let plan_a = EpisodePlan::new(&ds, &ep("m0->m2"), model.config()).unwrap();
    let plan_b = EpisodePlan::new(&shifted, &ep("m0->m2"), model.config()).unwrap();
    let a = forward_episode(&model, &ds, &plan_a, &[0], Execution::Sequential).unwrap();
    let b = forward_episode(&model, &shifted, &plan_b, &[0], Execution::Sequential).unwrap();
    assert_eq!(a[0].x_hat, b[0].x_hat);
}

#[test]
fn empty_batch_and_bad_lr_are_config_errors() {
    let ds = data();
    let mut model = Model::new(config(Ablation::Full), 1, ds.meta_dim(), 0).unwrap();
    let cfg = TrainConfig {
        lr: f64::NAN,
        ..Default::default()
    };
    assert!(train(&mut model, &ds, &[ep("m0->m2")], &cfg, 0).is_err());
    assert!(train(&mut model, &ds, &[], &TrainConfig::default(), 0).is_err());
}

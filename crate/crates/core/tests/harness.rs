use std::fs;

use graphx::data::SyntheticConfig;
use graphx::graph::{Episode, Phase};
use graphx::harness::{
    demo_config, load_config, run_eval, run_generalize, run_leave_one_out, run_theorem1, run_train,
    HarnessError, RunConfig, Theorem1Config, CHECKPOINT_FILE, DIVERGENCE_FILE, METRICS_FILE, REPORT_FILE,
    TIMING_FILE,
};
use graphx::pipeline::{Ablation, ModelConfig};

fn quick(dir: &std::path::Path) -> RunConfig {
    let mut cfg = demo_config();
    cfg.train.max_steps = 5;
    cfg.out_dir = dir.to_path_buf();
    cfg
}

#[test]
fn zero_steps_reports_the_untrained_model() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick(dir.path());
    cfg.train.max_steps = 0;
    let run = run_train(&cfg).unwrap();
    assert_eq!(run.report.steps, 0);
    assert!(run.report.final_loss.is_none());
    assert!(run.report.metrics[0].mean_mse.is_finite());
    for f in [REPORT_FILE, METRICS_FILE, CHECKPOINT_FILE, TIMING_FILE] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn reports_carry_hashes_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick(dir.path());
    run_train(&cfg).unwrap();
    let json: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join(REPORT_FILE)).unwrap()).unwrap();
    assert_eq!(json["config_hash"], cfg.model.hash());
    assert_eq!(json["run_config_hash"], cfg.hash());
    assert_eq!(json["metrics"][0]["seed"], 0);
    let csv = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "episode,mode,mse,pcc,pcc_defined");
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn eval_from_checkpoint_reproduces_training_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick(dir.path());
    let run = run_train(&cfg).unwrap();
    let mut eval_cfg = cfg.clone();
    eval_cfg.out_dir = dir.path().join("eval");
    let report = run_eval(&eval_cfg, &dir.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(report.metrics[0].per_mode, run.report.metrics[0].per_mode);
}

#[test]
fn checkpoint_for_another_config_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick(dir.path());
    run_train(&cfg).unwrap();
    let mut other = cfg.clone();
    other.model.rho = 0.5;
    let unseen = Episode::parse("in_a->out_b", Phase::Generalize).unwrap();
    let err = run_generalize(&other, &dir.path().join(CHECKPOINT_FILE), &unseen).unwrap_err();
    assert!(matches!(err, HarnessError::Validation(_)), "{err}");
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn divergence_writes_a_diagnostic_and_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick(dir.path());
    cfg.train.optimizer = graphx::pipeline::OptimizerKind::Sgd;
    cfg.train.lr = 1e200;
    cfg.train.max_steps = 50;
    let err = run_train(&cfg).err().expect("huge steps must diverge");
    assert_eq!(err.exit_code(), 2, "{err}");
    assert!(fs::read_to_string(dir.path().join(DIVERGENCE_FILE)).unwrap().contains("config hash"));
}

#[test]
fn leave_one_out_reports_every_target() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick(dir.path());
    let mut synth = SyntheticConfig::family(0.0, 3);
    synth.n = 6;
    cfg.model.type_dims = synth.type_dims;
    cfg.synthetic = Some(synth);
    cfg.train.max_steps = 2;
    let targets: Vec<String> = ["tgt_0", "tgt_1", "tgt_2"].map(String::from).to_vec();
    let reports = run_leave_one_out(&cfg, &["src_a".into(), "src_b".into()], &targets).unwrap();
    assert_eq!(reports.len(), 3);
    for (r, t) in reports.iter().zip(&targets) {
        assert_eq!(r.command, "generalize");
        assert_eq!(r.metrics[0].per_mode[0].mode, *t);
        assert!(dir.path().join(format!("holdout_{t}")).join(REPORT_FILE).exists());
    }
}

#[test]
fn identity_substitution_gives_equal_errors() {
    let mut cfg = Theorem1Config {
        trials: 2,
        substitute_shift: 0,
        ..Default::default()
    };
    cfg.synthetic.n = 8;
    cfg.train.max_steps = 5;
    let r = run_theorem1(&cfg).unwrap();
    assert_eq!(r.donor, cfg.holdout);
    for t in &r.trials {
        assert_eq!(t.true_error, t.substituted_error);
        assert!(t.win);
    }
}

#[test]
fn file_then_overrides_take_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    fs::write(&path, "seed = 3\n[model]\nrho = 0.25\nablation = \"hypergnn_2\"\n[train]\nlr = 0.5\n").unwrap();
    let cfg: RunConfig = load_config(Some(&path), &["train.lr=0.01".into(), "model.tau=0.3".into()]).unwrap();
    assert_eq!(cfg.seed, 3);
    assert_eq!(cfg.model.rho, 0.25);
    assert_eq!(cfg.model.ablation, Ablation::Hypergnn2);
    assert_eq!(cfg.train.lr, 0.01);
    assert_eq!(cfg.model.tau, 0.3);
    assert_eq!(cfg.model.encoder, ModelConfig::default().encoder);

    let bad: Result<RunConfig, _> = load_config(None, &["model.rho=\"high\"".into()]);
    assert!(matches!(bad, Err(HarnessError::Validation(_))));
    let json = dir.path().join("run.json");
    fs::write(&json, r#"{"train": {"max_steps": 7}}"#).unwrap();
    let cfg: RunConfig = load_config(Some(&json), &[]).unwrap();
    assert_eq!(cfg.train.max_steps, 7);
}

#[test]
fn unknown_modes_are_validation_errors() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick(dir.path());
    cfg.episodes = vec!["in_a->nowhere".into()];
    let err = run_train(&cfg).err().unwrap();
    assert_eq!(err.exit_code(), 1);
}

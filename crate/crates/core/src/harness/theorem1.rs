use log::warn;
use serde::{Deserialize, Serialize};

use super::{HarnessError, Result};
use crate::data::{gen_synthetic, Dataset, SyntheticConfig};
use crate::graph::{Episode, Phase};
use crate::par::{self, Execution};
use crate::pipeline::{generalize, train, MetricReport, Model, ModelConfig, ModelError, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Theorem1Config {
    pub synthetic: SyntheticConfig,
    pub sources: Vec<String>,
    /// Target held out of training; every other non-source mode is trained on.
    pub holdout: String,
    pub trials: usize,
    /// The held-out mode borrows the meta of the target this many places
    /// further along the target list; 0 keeps its own meta.
    pub substitute_shift: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub exec: Execution,
}

impl Default for Theorem1Config {
    fn default() -> Self {
        let synthetic = SyntheticConfig::family(0.1, 4);
        let mut model = ModelConfig::standard(crate::layers::LayerKind::Gcn, 1, 16, 8);
        model.type_dims = synthetic.type_dims;
        Self {
            synthetic,
            sources: vec!["src_a".into(), "src_b".into()],
            holdout: "tgt_1".into(),
            trials: 10,
            substitute_shift: 1,
            model,
            train: TrainConfig {
                lr: 3e-3,
                max_steps: 400,
                ..TrainConfig::default()
            },
            seed: 0,
            exec: Execution::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub seed: u64,
    /// Mean per-sample ‖ε‖² with the held-out mode's own meta.
    pub true_error: Option<f64>,
    /// Same with the substituted meta.
    pub substituted_error: Option<f64>,
    pub win: bool,
    /// Set when training diverged; such trials are excluded from the totals.
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Report {
    pub trials: Vec<TrialResult>,
    pub valid_trials: usize,
    pub wins: usize,
    pub win_rate: f64,
    pub pooled_true_error: f64,
    pub pooled_substituted_error: f64,
    pub donor: String,
}

/// Trains `sources -> train_targets` and generalizes to `sources -> holdout`.
#[allow(clippy::too_many_arguments)]
pub fn heldout_error(
    ds: &Dataset,
    sources: &[String],
    train_targets: &[String],
    holdout: &str,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    seed: u64,
    exec: Execution,
) -> std::result::Result<(Model, MetricReport), ModelError> {
    let mut model = Model::new(model_cfg.clone(), ds.d(), ds.meta_dim(), seed)?;
    let ep = Episode::new(sources.to_vec(), train_targets.to_vec(), Phase::Train)?;
    train(&mut model, ds, &[ep], train_cfg, seed)?;
    let unseen = Episode::new(sources.to_vec(), vec![holdout.to_string()], Phase::Generalize)?;
    let (_, report) = generalize(&model, ds, &unseen, None, exec, seed)?;
    Ok((model, report))
}

fn targets_of(cfg: &Theorem1Config) -> Vec<String> {
    cfg.synthetic
        .modes
        .iter()
        .map(|m| m.id.clone())
        .filter(|id| !cfg.sources.contains(id))
        .collect()
}

fn trial(cfg: &Theorem1Config, seed: u64, donor: &str) -> std::result::Result<(f64, f64), ModelError> {
    let (ds, _) = gen_synthetic(&cfg.synthetic, seed)?;
    let train_targets: Vec<String> = targets_of(cfg).into_iter().filter(|t| *t != cfg.holdout).collect();
    let (model, report) = heldout_error(
        &ds,
        &cfg.sources,
        &train_targets,
        &cfg.holdout,
        &cfg.model,
        &cfg.train,
        seed,
        Execution::Sequential,
    )?;
    let substituted = ds.with_meta(&cfg.holdout, ds.mode(donor)?.meta().to_vec())?;
    let unseen = Episode::new(cfg.sources.clone(), vec![cfg.holdout.clone()], Phase::Generalize)?;
    let (_, sub) = generalize(&model, &substituted, &unseen, None, Execution::Sequential, seed)?;
    Ok((report.mean_generalization_error, sub.mean_generalization_error))
}

/// Independent trials (run in parallel when allowed), each on a freshly
/// drawn family with its own seed.
pub fn run_theorem1(cfg: &Theorem1Config) -> Result<Theorem1Report> {
    if cfg.trials < 2 {
        return Err(HarnessError::Validation("theorem1 needs at least two trials".into()));
    }
    let targets = targets_of(cfg);
    let h = targets
        .iter()
        .position(|t| *t == cfg.holdout)
        .ok_or_else(|| HarnessError::Validation(format!("holdout {:?} is not a target mode", cfg.holdout)))?;
    if targets.len() < 2 {
        return Err(HarnessError::Validation("need at least one training target besides the holdout".into()));
    }
    let donor = targets[(h + cfg.substitute_shift) % targets.len()].clone();
    let results = par::map_indices(cfg.exec, cfg.trials, |t| {
        let seed = cfg.seed + t as u64;
        match trial(cfg, seed, &donor) {
            Ok((e, e_sub)) => Ok(TrialResult {
                seed,
                true_error: Some(e),
                substituted_error: Some(e_sub),
                win: e <= e_sub,
                failure: None,
            }),
            Err(e @ ModelError::Divergence { .. }) => {
                warn!("trial {t} excluded: {e}");
                Ok(TrialResult {
                    seed,
                    true_error: None,
                    substituted_error: None,
                    win: false,
                    failure: Some(e.to_string()),
                })
            }
            Err(e) => Err(e),
        }
    });
    let trials = results.into_iter().collect::<std::result::Result<Vec<_>, _>>()?;
    let valid: Vec<&TrialResult> = trials.iter().filter(|t| t.failure.is_none()).collect();
    let k = valid.len().max(1) as f64;
    let wins = valid.iter().filter(|t| t.win).count();
    Ok(Theorem1Report {
        valid_trials: valid.len(),
        wins,
        win_rate: wins as f64 / k,
        pooled_true_error: valid.iter().filter_map(|t| t.true_error).sum::<f64>() / k,
        pooled_substituted_error: valid.iter().filter_map(|t| t.substituted_error).sum::<f64>() / k,
        donor,
        trials,
    })
}

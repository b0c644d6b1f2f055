use serde::{Deserialize, Serialize};

use super::forward::{forward_episode, EpisodePlan, Prediction};
use super::{Ablation, Model, ModelError};
use crate::data::Dataset;
use crate::graph::Episode;
use crate::metrics::{mse_metric, pcc_metric};
use crate::par::Execution;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeMetrics {
    pub mode: String,
    pub mse: f64,
    pub pcc: f64,
    /// False when either side had zero variance (pcc reported as 0).
    pub pcc_defined: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub episode: String,
    pub per_mode: Vec<ModeMetrics>,
    pub mean_mse: f64,
    pub mean_pcc: f64,
    /// Per sample, `‖ε_i‖²` summed over target modes and observed entries.
    pub generalization_error: Vec<f64>,
    pub mean_generalization_error: f64,
    pub config_hash: String,
    pub seed: u64,
}

/// The episode actually run at evaluation time under the configured ablation.
pub fn eval_episode(model: &Model, episode: &Episode) -> Episode {
    let mut e = episode.clone();
    if model.config().ablation == Ablation::SingleInputEval {
        e.sources.truncate(1);
    }
    e
}

/// Frozen-parameter predictions and metrics on `samples` (all when `None`).
pub fn evaluate(
    model: &Model,
    ds: &Dataset,
    episode: &Episode,
    samples: Option<&[usize]>,
    exec: Execution,
    seed: u64,
) -> Result<(Vec<Prediction>, MetricReport), ModelError> {
    let episode = eval_episode(model, episode);
    let plan = EpisodePlan::new(ds, &episode, model.config())?;
    let all: Vec<usize> = (0..ds.n()).collect();
    let samples = samples.unwrap_or(&all);
    let preds = forward_episode(model, ds, &plan, samples, exec)?;
    let report = summarize(model, &episode, &preds, samples, seed)?;
    Ok((preds, report))
}

/// Same computation as [`evaluate`]; named for unseen episodes.
pub fn generalize(
    model: &Model,
    ds: &Dataset,
    unseen: &Episode,
    samples: Option<&[usize]>,
    exec: Execution,
    seed: u64,
) -> Result<(Vec<Prediction>, MetricReport), ModelError> {
    evaluate(model, ds, unseen, samples, exec, seed)
}

fn summarize(
    model: &Model,
    episode: &Episode,
    preds: &[Prediction],
    samples: &[usize],
    seed: u64,
) -> Result<MetricReport, ModelError> {
    let mut per_mode = Vec::new();
    for target in &episode.targets {
        let (mut p, mut t) = (Vec::new(), Vec::new());
        for pr in preds.iter().filter(|pr| &pr.target == target) {
            let pred_rows = pr.x_hat.select_rows(&pr.observed);
            p.extend_from_slice(pred_rows.data());
            t.extend(pred_rows.data().iter().zip(pr.residual.data()).map(|(a, r)| a - r));
        }
        let mse = mse_metric(&p, &t)?;
        let pcc = pcc_metric(&p, &t)?;
        per_mode.push(ModeMetrics {
            mode: target.clone(),
            mse,
            pcc: pcc.value,
            pcc_defined: pcc.defined,
        });
    }
    let generalization_error: Vec<f64> = samples
        .iter()
        .map(|&i| {
            preds
                .iter()
                .filter(|pr| pr.sample == i)
                .map(|pr| pr.residual.data().iter().map(|e| e * e).sum::<f64>())
                .sum()
        })
        .collect();
    let k = per_mode.len() as f64;
    Ok(MetricReport {
        episode: episode.to_string(),
        mean_mse: per_mode.iter().map(|m| m.mse).sum::<f64>() / k,
        mean_pcc: per_mode.iter().map(|m| m.pcc).sum::<f64>() / k,
        mean_generalization_error: generalization_error.iter().sum::<f64>()
            / generalization_error.len().max(1) as f64,
        generalization_error,
        per_mode,
        config_hash: model.config().hash(),
        seed,
    })
}

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::forward::{episode_loss, EpisodePlan};
use super::{Model, ModelError};
use crate::data::Dataset;
use crate::graph::Episode;
use crate::tensor::{Adam, AdamConfig, Optimizer, Sgd, Tape, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_steps: usize,
    /// Stop once the mean total loss of the last `window` steps differs from
    /// that of the window before by less than this, relatively.
    pub tol: f64,
    pub window: usize,
    /// Samples per step; `None` uses every sample every step.
    pub batch_size: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            optimizer: OptimizerKind::Adam,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            max_steps: 2000,
            tol: 1e-6,
            window: 50,
            batch_size: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: usize,
    pub l1: f64,
    pub l2: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Loss at the parameters *before* each update.
    pub history: Vec<HistoryRow>,
    pub converged: bool,
}

impl TrainOutcome {
    pub fn history_csv(&self) -> String {
        let mut out = String::from("step,l1,l2,total\n");
        for r in &self.history {
            out.push_str(&format!("{},{},{},{}\n", r.step, r.l1, r.l2, r.total));
        }
        out
    }
}

fn divergence(step: usize, detail: impl Into<String>) -> ModelError {
    ModelError::Divergence {
        step,
        detail: detail.into(),
    }
}

/// Full-batch (or mini-batch) descent on `l1 + rho·l2` over all episodes.
/// Deterministic for a given model initialisation and `seed`.
pub fn train(
    model: &mut Model,
    ds: &Dataset,
    episodes: &[Episode],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome, ModelError> {
    if episodes.is_empty() {
        return Err(ModelError::Config("no training episodes".into()));
    }
    if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) {
        return Err(ModelError::Config(format!("learning rate {} is invalid", cfg.lr)));
    }
    let plans = episodes
        .iter()
        .map(|e| EpisodePlan::new(ds, e, model.config()))
        .collect::<Result<Vec<_>, _>>()?;
    let mut optimizer: Box<dyn Optimizer> = match cfg.optimizer {
        OptimizerKind::Adam => Box::new(Adam::new(AdamConfig {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
        })),
        OptimizerKind::Sgd => Box::new(Sgd { lr: cfg.lr }),
    };
    let n = ds.n();
    let batch = cfg.batch_size.unwrap_or(n).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cursor = n;

    let mut history = Vec::with_capacity(cfg.max_steps);
    let mut converged = false;
    for step in 0..cfg.max_steps {
        let samples: Vec<usize> = if batch == n {
            (0..n).collect()
        } else {
            if cursor + batch > n {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            cursor += batch;
            order[cursor - batch..cursor].to_vec()
        };
        let tape = Tape::new();
        let bound = model.bind(&tape, true)?;
        let mut totals = Vec::with_capacity(plans.len());
        let (mut l1, mut l2) = (0.0, 0.0);
        for plan in &plans {
            let loss = episode_loss(model, &tape, &bound, ds, plan, &samples).map_err(|e| match e {
                ModelError::Tensor(TensorError::NonFinite { op }) => {
                    divergence(step, format!("non-finite value in {op} during the forward pass"))
                }
                other => other,
            })?;
            l1 += loss.l1.item();
            l2 += loss.l2.item();
            totals.push(loss.total);
        }
        let k = plans.len() as f64;
        let total = tape.mean_of(&totals)?;
        let row = HistoryRow {
            step,
            l1: l1 / k,
            l2: l2 / k,
            total: total.item(),
        };
        if !row.total.is_finite() {
            return Err(divergence(step, format!("loss became {}", row.total)));
        }
        history.push(row);
        if step % 100 == 0 {
            debug!("step {step}: l1 {:.6} l2 {:.6} total {:.6}", row.l1, row.l2, row.total);
        }
        if cfg.window > 0 && history.len() >= 2 * cfg.window {
            let w = cfg.window;
            let mean = |rows: &[HistoryRow]| rows.iter().map(|r| r.total).sum::<f64>() / w as f64;
            let recent = mean(&history[history.len() - w..]);
            let before = mean(&history[history.len() - 2 * w..history.len() - w]);
            if (recent - before).abs() <= cfg.tol * before.abs().max(1e-12) {
                converged = true;
                info!("converged at step {step} (total {:.6})", row.total);
                break;
            }
        }
        let grads = total.backward().map_err(|e| divergence(step, format!("backward failed: {e}")))?;
        let trained: Vec<bool> = model.params().iter().map(|p| model.is_trained(p.group)).collect();
        let grad_values: Vec<Option<Vec<f64>>> = bound
            .vars
            .iter()
            .zip(&trained)
            .map(|(&v, &t)| t.then(|| grads.get_or_zeros(v)))
            .collect();
        drop(bound);
        let slots: Vec<Option<&[f64]>> = grad_values.iter().map(|g| g.as_deref()).collect();
        let mut refs: Vec<_> = model.params_mut().iter_mut().map(|p| &mut p.value).collect();
        optimizer.step(&mut refs, &slots);
        if refs.iter().any(|p| !p.is_finite()) {
            return Err(divergence(step, "parameters became non-finite after the update"));
        }
    }
    Ok(TrainOutcome { history, converged })
}

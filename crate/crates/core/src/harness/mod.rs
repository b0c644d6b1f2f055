//! Experiment runners shared by the command-line tool and the test suites.
//! Every runner is deterministic for a given configuration and seed.

mod audit;
mod gradcheck;
mod linkpred;
mod theorem1;

pub use audit::{run_paramaudit, AuditVariant, ParamAuditReport};
pub use gradcheck::{
    hypernet_gradcheck, layer_gradcheck, run_gradcheck, GradcheckConfig, GradcheckReport,
};
pub use linkpred::{auc, run_linkpred, LinkPredConfig, LinkPredReport};
pub use theorem1::{heldout_error, run_theorem1, Theorem1Config, Theorem1Report, TrialResult};

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::data::{gen_synthetic, load_dataset, split_dataset, DataError, Dataset, SyntheticConfig};
use crate::graph::{Episode, GraphError, Phase};
use crate::hypernet::{read_checkpoint, write_checkpoint, CheckpointError};
use crate::par::Execution;
use crate::pipeline::{
    evaluate, generalize, train, HistoryRow, MetricReport, Model, ModelConfig, ModelError,
    TrainConfig, TrainOutcome,
};

pub const REPORT_FILE: &str = "report.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const HISTORY_FILE: &str = "loss_history.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const TIMING_FILE: &str = "timing.json";
pub const DIVERGENCE_FILE: &str = "divergence.txt";

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("{0}")]
    Validation(String),
    #[error("numerical divergence: {0}")]
    Divergence(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Model(ModelError),
}

impl From<ModelError> for HarnessError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Divergence { .. } => HarnessError::Divergence(e.to_string()),
            other => HarnessError::Model(other),
        }
    }
}

impl HarnessError {
    /// 0 success, 1 validation or I/O problems, 2 numerical divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Divergence(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Dataset JSON; when absent `synthetic` is generated from `seed`.
    pub dataset: Option<PathBuf>,
    pub synthetic: Option<SyntheticConfig>,
    /// Training episodes, `"a,b->c"`.
    pub episodes: Vec<String>,
    /// Episodes reported after training; defaults to `episodes`.
    pub eval_episodes: Vec<String>,
    /// Train/validation/test sample ratios. Without it every sample is used
    /// for both training and reporting.
    pub split: Option<[f64; 3]>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub exec: Execution,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            synthetic: None,
            episodes: Vec::new(),
            eval_episodes: Vec::new(),
            split: None,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            seed: 0,
            out_dir: PathBuf::from("out"),
            exec: Execution::default(),
        }
    }
}

impl RunConfig {
    /// See [`load_config`].
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        load_config(path, overrides)
    }

    /// Hex SHA-256 of the canonical JSON form of the run configuration,
    /// ignoring where outputs go and how work is scheduled.
    pub fn hash(&self) -> String {
        let mut canon = self.clone();
        canon.out_dir = PathBuf::new();
        canon.exec = Execution::default();
        let json = serde_json::to_string(&canon).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn load_data(&self) -> Result<Dataset> {
        match (&self.dataset, &self.synthetic) {
            (Some(path), _) => Ok(load_dataset(path)?),
            (None, Some(s)) => Ok(gen_synthetic(s, self.seed)?.0),
            (None, None) => Err(HarnessError::Validation(
                "either `dataset` or `synthetic` must be set".into(),
            )),
        }
    }

    pub fn parse_episodes(&self, ds: &Dataset) -> Result<(Vec<Episode>, Vec<Episode>)> {
        if self.episodes.is_empty() {
            return Err(HarnessError::Validation("no training episodes configured".into()));
        }
        let train = parse_all(&self.episodes, Phase::Train, ds)?;
        let eval = if self.eval_episodes.is_empty() {
            train.clone()
        } else {
            parse_all(&self.eval_episodes, Phase::Generalize, ds)?
        };
        Ok((train, eval))
    }

    /// Training and reporting sample indices.
    pub fn samples(&self, n: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        match self.split {
            None => Ok(((0..n).collect(), (0..n).collect())),
            Some(r) => {
                let s = split_dataset(n, r, self.seed)?;
                let report = if s.test.is_empty() { s.val } else { s.test };
                Ok((s.train, report))
            }
        }
    }
}

/// Defaults, then a JSON or TOML file (by extension), then `key.path=value`
/// overrides. Override values parse as JSON when possible, else as strings.
pub fn load_config<T: Serialize + DeserializeOwned + Default>(
    path: Option<&Path>,
    overrides: &[String],
) -> Result<T> {
    let mut value = serde_json::to_value(T::default()).expect("config serializes");
    if let Some(path) = path {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let file: Value = if path.extension().is_some_and(|e| e == "toml") {
            let t: toml::Value = toml::from_str(&text)
                .map_err(|e| HarnessError::Validation(format!("{}: {e}", path.display())))?;
            serde_json::to_value(t).expect("toml values map to json")
        } else {
            serde_json::from_str(&text)
                .map_err(|e| HarnessError::Validation(format!("{}: {e}", path.display())))?
        };
        merge(&mut value, file);
    }
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    serde_json::from_value(value).map_err(|e| HarnessError::Validation(format!("config: {e}")))
}

fn parse_all(specs: &[String], phase: Phase, ds: &Dataset) -> Result<Vec<Episode>> {
    specs
        .iter()
        .map(|s| {
            let e = Episode::parse(s, phase)?;
            for m in e.sources.iter().chain(&e.targets) {
                ds.mode(m)?;
            }
            Ok(e)
        })
        .collect()
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies one `a.b.c=value` override to a JSON tree.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| HarnessError::Validation(format!("override {spec:?} is not key=value")))?;
    let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        node = match node {
            Value::Object(map) => {
                if last {
                    map.insert(part.to_string(), value);
                    return Ok(());
                }
                map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| HarnessError::Validation(format!("{key}: {part:?} is not an index")))?;
                let len = items.len();
                let slot = items
                    .get_mut(idx)
                    .ok_or_else(|| HarnessError::Validation(format!("{key}: index {idx} >= {len}")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            Value::Null => {
                *node = Value::Object(Default::default());
                let Value::Object(map) = node else { unreachable!() };
                if last {
                    map.insert(part.to_string(), value);
                    return Ok(());
                }
                map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()))
            }
            _ => {
                return Err(HarnessError::Validation(format!(
                    "{key}: cannot descend into a scalar at {part:?}"
                )))
            }
        };
    }
    Ok(())
}

/// Contents of `report.json`. Wall-clock times live in `timing.json` so
/// that reruns produce identical reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    pub run_config_hash: String,
    pub config_hash: String,
    pub seed: u64,
    pub steps: usize,
    pub converged: bool,
    pub initial_loss: Option<HistoryRow>,
    pub final_loss: Option<HistoryRow>,
    pub metrics: Vec<MetricReport>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Timing {
    pub train_seconds: f64,
    pub eval_seconds: f64,
}

pub struct TrainRun {
    pub report: RunReport,
    pub model: Model,
    pub outcome: TrainOutcome,
}

pub fn metrics_csv(reports: &[MetricReport]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["episode", "mode", "mse", "pcc", "pcc_defined"])
        .expect("writing to memory");
    for r in reports {
        for m in &r.per_mode {
            w.write_record([
                r.episode.clone(),
                m.mode.clone(),
                m.mse.to_string(),
                m.pcc.to_string(),
                m.pcc_defined.to_string(),
            ])
            .expect("writing to memory");
        }
    }
    String::from_utf8(w.into_inner().expect("flushing to memory")).expect("csv is utf-8")
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(io_err(&path))
}

fn write_report(dir: &Path, report: &RunReport) -> Result<()> {
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    write(dir, REPORT_FILE, json + "\n")?;
    write(dir, METRICS_FILE, metrics_csv(&report.metrics))
}

fn write_timing(dir: &Path, t: &Timing) -> Result<()> {
    write(dir, TIMING_FILE, serde_json::to_string_pretty(t).expect("timing serializes") + "\n")
}

fn evaluate_all(
    model: &Model,
    ds: &Dataset,
    episodes: &[Episode],
    samples: &[usize],
    cfg: &RunConfig,
) -> Result<Vec<MetricReport>> {
    episodes
        .iter()
        .map(|e| Ok(evaluate(model, ds, e, Some(samples), cfg.exec, cfg.seed)?.1))
        .collect()
}

/// Trains, then writes the checkpoint, loss history, report and metrics.
/// On divergence a diagnostic file is written and the error returned.
pub fn run_train(cfg: &RunConfig) -> Result<TrainRun> {
    let ds = cfg.load_data()?;
    let (train_eps, eval_eps) = cfg.parse_episodes(&ds)?;
    let (train_idx, report_idx) = cfg.samples(ds.n())?;
    let train_ds = ds.select_samples(&train_idx)?;
    fs::create_dir_all(&cfg.out_dir).map_err(io_err(&cfg.out_dir))?;
    let mut model = Model::new(cfg.model.clone(), ds.d(), ds.meta_dim(), cfg.seed)?;
    info!(
        "training {} parameters on {} episode(s), {} samples",
        model.param_count(),
        train_eps.len(),
        train_idx.len()
    );
    let t0 = Instant::now();
    let outcome = match train(&mut model, &train_ds, &train_eps, &cfg.train, cfg.seed) {
        Ok(o) => o,
        Err(e @ ModelError::Divergence { .. }) => {
            write(&cfg.out_dir, DIVERGENCE_FILE, format!("{e}\nconfig hash {}\n", cfg.hash()))?;
            return Err(e.into());
        }
        Err(e) => return Err(e.into()),
    };
    let train_seconds = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    let metrics = evaluate_all(&model, &ds, &eval_eps, &report_idx, cfg)?;
    let eval_seconds = t1.elapsed().as_secs_f64();

    write_checkpoint(&cfg.out_dir.join(CHECKPOINT_FILE), &model.to_checkpoint())?;
    write(&cfg.out_dir, HISTORY_FILE, outcome.history_csv())?;
    let report = RunReport {
        command: "train".into(),
        run_config_hash: cfg.hash(),
        config_hash: cfg.model.hash(),
        seed: cfg.seed,
        steps: outcome.history.len(),
        converged: outcome.converged,
        initial_loss: outcome.history.first().copied(),
        final_loss: outcome.history.last().copied(),
        metrics,
    };
    write_report(&cfg.out_dir, &report)?;
    write_timing(&cfg.out_dir, &Timing { train_seconds, eval_seconds })?;
    Ok(TrainRun { report, model, outcome })
}

fn load_model(cfg: &RunConfig, ds: &Dataset, checkpoint: &Path) -> Result<Model> {
    let ck = read_checkpoint(checkpoint)?;
    let expected = cfg.model.hash();
    if ck.config_hash != expected {
        return Err(HarnessError::Validation(format!(
            "checkpoint {} was written for config {}, this run uses {expected}; refusing to run",
            checkpoint.display(),
            ck.config_hash
        )));
    }
    let mut model = Model::new(cfg.model.clone(), ds.d(), ds.meta_dim(), cfg.seed)?;
    model.load_checkpoint(&ck)?;
    Ok(model)
}

fn frozen_run(cfg: &RunConfig, command: &str, checkpoint: &Path, episodes: Vec<Episode>) -> Result<RunReport> {
    let ds = cfg.load_data()?;
    for e in &episodes {
        for m in e.sources.iter().chain(&e.targets) {
            ds.mode(m)?;
        }
    }
    let model = load_model(cfg, &ds, checkpoint)?;
    let (_, report_idx) = cfg.samples(ds.n())?;
    fs::create_dir_all(&cfg.out_dir).map_err(io_err(&cfg.out_dir))?;
    let t0 = Instant::now();
    let metrics = episodes
        .iter()
        .map(|e| Ok(generalize(&model, &ds, e, Some(&report_idx), cfg.exec, cfg.seed)?.1))
        .collect::<Result<Vec<_>>>()?;
    let report = RunReport {
        command: command.into(),
        run_config_hash: cfg.hash(),
        config_hash: cfg.model.hash(),
        seed: cfg.seed,
        steps: 0,
        converged: false,
        initial_loss: None,
        final_loss: None,
        metrics,
    };
    write_report(&cfg.out_dir, &report)?;
    write_timing(
        &cfg.out_dir,
        &Timing {
            train_seconds: 0.0,
            eval_seconds: t0.elapsed().as_secs_f64(),
        },
    )?;
    Ok(report)
}

/// Frozen evaluation of the configured report episodes.
pub fn run_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<RunReport> {
    let ds = cfg.load_data()?;
    let (_, eval) = cfg.parse_episodes(&ds)?;
    frozen_run(cfg, "eval", checkpoint, eval)
}

/// Frozen evaluation on an unseen episode. Refuses checkpoints written for
/// a different model configuration.
pub fn run_generalize(cfg: &RunConfig, checkpoint: &Path, unseen: &Episode) -> Result<RunReport> {
    let mut unseen = unseen.clone();
    unseen.phase = Phase::Generalize;
    if cfg
        .episodes
        .iter()
        .filter_map(|s| Episode::parse(s, Phase::Train).ok())
        .any(|e| e.same_modes(&unseen))
    {
        warn!("episode {unseen} was part of training");
    }
    frozen_run(cfg, "generalize", checkpoint, vec![unseen])
}

/// Holds out each target in turn: trains `sources -> other targets`, then
/// generalizes to `sources -> held-out`. One report per held-out mode, each
/// written under `out_dir/holdout_<mode>`.
pub fn run_leave_one_out(cfg: &RunConfig, sources: &[String], targets: &[String]) -> Result<Vec<RunReport>> {
    if targets.len() < 2 {
        return Err(HarnessError::Validation("leave-one-out needs at least two targets".into()));
    }
    let mut out = Vec::with_capacity(targets.len());
    for held in targets {
        let rest: Vec<String> = targets.iter().filter(|t| *t != held).cloned().collect();
        let mut c = cfg.clone();
        c.out_dir = cfg.out_dir.join(format!("holdout_{held}"));
        c.episodes = vec![format!("{}->{}", sources.join(","), rest.join(","))];
        c.eval_episodes = Vec::new();
        run_train(&c)?;
        let unseen = Episode::new(sources.to_vec(), vec![held.clone()], Phase::Generalize)?;
        out.push(run_generalize(&c, &c.out_dir.join(CHECKPOINT_FILE), &unseen)?);
    }
    Ok(out)
}

/// Small synthetic run used by the defaults of several commands.
pub fn demo_config() -> RunConfig {
    let synthetic = SyntheticConfig::overfit();
    let model = ModelConfig {
        type_dims: synthetic.type_dims,
        ..ModelConfig::default()
    };
    RunConfig {
        synthetic: Some(synthetic),
        episodes: vec!["in_a,in_b->out_a,out_b".into()],
        model,
        ..Default::default()
    }
}

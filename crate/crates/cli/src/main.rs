use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info};
use serde::Serialize;

use graphx::data::{gen_synthetic, ingest_csv, save_dataset, IngestConfig, SeriesLayout, SyntheticConfig};
use graphx::graph::{Episode, Phase};
use graphx::harness::{
    load_config, run_eval, run_generalize, run_gradcheck, run_leave_one_out, run_linkpred,
    run_paramaudit, run_theorem1, run_train, AuditVariant, GradcheckConfig, HarnessError,
    LinkPredConfig, RunConfig, Theorem1Config, CHECKPOINT_FILE, REPORT_FILE,
};
use graphx::pipeline::ModelConfig;

#[derive(Parser)]
#[command(name = "graphx", version, about = "Graph transformation across modes with hypernetwork-generated GNNs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON or TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override a config entry, e.g. `--set train.lr=0.01`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Starting point: overfit, family or small.
        #[arg(long, default_value = "overfit")]
        preset: String,
        /// Destination JSON file.
        #[arg(long)]
        file: PathBuf,
    },
    /// Build a dataset from a time-series CSV with correlation graphs.
    Ingest {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        rho: f64,
        /// nodes-as-columns or nodes-as-rows.
        #[arg(long, default_value = "nodes-as-columns")]
        layout: String,
        #[arg(long)]
        file: PathBuf,
    },
    /// Train and write checkpoint, history and reports.
    Train {
        #[command(flatten)]
        common: Common,
        /// Training episode `SRC1,SRC2->TGT1,TGT2`. Repeatable; replaces the config's.
        #[arg(long)]
        episode: Vec<String>,
    },
    /// Evaluate a checkpoint on the configured episodes.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        episode: Vec<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on an unseen episode, or run leave-one-out.
    Generalize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        episode: Option<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// `SRC1,SRC2->T1,T2,T3`: hold out each target in turn.
        #[arg(long, conflicts_with = "episode")]
        leave_one_out: Option<String>,
    },
    /// Compare reverse-mode gradients with central differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Scale every backward pass by this factor (should fail).
        #[arg(long)]
        fault: Option<f64>,
    },
    /// True versus substituted meta on a held-out target.
    Theorem1 {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Trainable parameter counts across mode counts.
    Paramaudit {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "2,4,8")]
        modes: Vec<usize>,
        /// Model configuration for the last variant, to exercise a mismatch.
        #[arg(long)]
        alt_config: Option<PathBuf>,
        #[arg(long, default_value_t = 12)]
        p: usize,
    },
    /// Held-out edge ranking with a graph auto-encoder.
    Linkpred {
        #[command(flatten)]
        common: Common,
    },
}

fn validation(msg: impl Into<String>) -> HarnessError {
    HarnessError::Validation(msg.into())
}

fn out_dir(common: &Common) -> PathBuf {
    common.out.clone().unwrap_or_else(|| PathBuf::from("out"))
}

fn write_json<T: Serialize>(dir: &Path, value: &T) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(|source| HarnessError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let path = dir.join(REPORT_FILE);
    let json = serde_json::to_string_pretty(value).expect("report serializes") + "\n";
    fs::write(&path, json).map_err(|source| HarnessError::Io { path, source })
}

fn run_config(common: &Common, episodes: &[String]) -> Result<RunConfig, HarnessError> {
    let mut cfg = RunConfig::load(common.config.as_deref(), &common.sets)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if !episodes.is_empty() {
        cfg.episodes = episodes.to_vec();
    }
    if cfg.dataset.is_none() && cfg.synthetic.is_none() {
        let demo = graphx::harness::demo_config();
        cfg.synthetic = demo.synthetic;
        if cfg.episodes.is_empty() {
            cfg.episodes = demo.episodes;
        }
        if cfg.model == ModelConfig::default() {
            cfg.model = demo.model;
        }
    }
    Ok(cfg)
}

fn print<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializes"));
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::GenData { common, preset, file } => {
            let base = match preset.as_str() {
                "overfit" => SyntheticConfig::overfit(),
                "family" => SyntheticConfig::family(0.1, 4),
                "small" => SyntheticConfig::small(12, 16, 4),
                other => return Err(validation(format!("unknown preset {other:?}"))),
            };
            let cfg: SyntheticConfig = if common.config.is_some() || !common.sets.is_empty() {
                let mut v = serde_json::to_value(&base).expect("config serializes");
                if let Some(path) = &common.config {
                    let loaded: SyntheticConfig = load_config(Some(path), &[])?;
                    v = serde_json::to_value(loaded).expect("config serializes");
                }
                for s in &common.sets {
                    graphx::harness::apply_override(&mut v, s)?;
                }
                serde_json::from_value(v).map_err(|e| validation(format!("synthetic config: {e}")))?
            } else {
                base
            };
            let (ds, _) = gen_synthetic(&cfg, common.seed.unwrap_or(0))?;
            save_dataset(&ds, &file)?;
            info!("wrote {} modes over {} nodes to {}", ds.modes().len(), ds.p(), file.display());
        }
        Command::Ingest { csv, rho, layout, file } => {
            let mut cfg = IngestConfig::four_periods(csv, rho);
            cfg.layout = match layout.as_str() {
                "nodes-as-columns" => SeriesLayout::NodesAsColumns,
                "nodes-as-rows" => SeriesLayout::NodesAsRows,
                other => return Err(validation(format!("unknown layout {other:?}"))),
            };
            let ds = ingest_csv(&cfg)?;
            save_dataset(&ds, &file)?;
            info!("wrote {} modes over {} nodes to {}", ds.modes().len(), ds.p(), file.display());
        }
        Command::Train { common, episode } => {
            let cfg = run_config(&common, &episode)?;
            let run = run_train(&cfg)?;
            print(&run.report);
        }
        Command::Eval {
            common,
            episode,
            checkpoint,
        } => {
            let mut cfg = run_config(&common, &[])?;
            if !episode.is_empty() {
                cfg.eval_episodes = episode;
            }
            let ck = checkpoint.unwrap_or_else(|| cfg.out_dir.join(CHECKPOINT_FILE));
            print(&run_eval(&cfg, &ck)?);
        }
        Command::Generalize {
            common,
            episode,
            checkpoint,
            leave_one_out,
        } => {
            let cfg = run_config(&common, &[])?;
            if let Some(spec) = leave_one_out {
                let e = Episode::parse(&spec, Phase::Generalize)?;
                print(&run_leave_one_out(&cfg, &e.sources, &e.targets)?);
            } else {
                let spec = episode.ok_or_else(|| validation("--episode or --leave-one-out is required"))?;
                let unseen = Episode::parse(&spec, Phase::Generalize)?;
                let ck = checkpoint.unwrap_or_else(|| cfg.out_dir.join(CHECKPOINT_FILE));
                print(&run_generalize(&cfg, &ck, &unseen)?);
            }
        }
        Command::Gradcheck { common, fault } => {
            let mut cfg: GradcheckConfig = load_config(common.config.as_deref(), &common.sets)?;
            if let Some(seed) = common.seed {
                cfg.seeds = vec![seed];
            }
            if fault.is_some() {
                cfg.fault = fault;
            }
            let report = run_gradcheck(&cfg)?;
            println!(
                "max relative error {:.3e} (tol {:.0e}): {}",
                report.max_rel_error,
                report.tol,
                if report.passed { "pass" } else { "FAIL" }
            );
            if let Some(dir) = &common.out {
                write_json(dir, &report)?;
            }
            if !report.passed {
                return Err(validation("gradient check failed"));
            }
        }
        Command::Theorem1 { common, trials } => {
            let mut cfg: Theorem1Config = load_config(common.config.as_deref(), &common.sets)?;
            if let Some(seed) = common.seed {
                cfg.seed = seed;
            }
            if let Some(t) = trials {
                cfg.trials = t;
            }
            let report = run_theorem1(&cfg)?;
            write_json(&out_dir(&common), &report)?;
            println!(
                "true meta no worse in {}/{} trials; pooled error {:.4} vs {:.4} (donor {})",
                report.wins,
                report.valid_trials,
                report.pooled_true_error,
                report.pooled_substituted_error,
                report.donor
            );
        }
        Command::Paramaudit {
            common,
            modes,
            alt_config,
            p,
        } => {
            let model: ModelConfig = load_config(common.config.as_deref(), &common.sets)?;
            let mut variants: Vec<AuditVariant> = modes
                .iter()
                .map(|&m| AuditVariant {
                    modes: m,
                    model: model.clone(),
                })
                .collect();
            if let (Some(path), Some(last)) = (alt_config, variants.last_mut()) {
                last.model = load_config(Some(&path), &[])?;
            }
            let report = run_paramaudit(&variants, p, common.seed.unwrap_or(0))?;
            for r in &report.rows {
                println!("{} modes: {} trainable parameters", r.modes, r.trainable_params);
            }
            if let Some(dir) = &common.out {
                write_json(dir, &report)?;
            }
            if !report.equal {
                return Err(validation("trainable parameter counts differ between variants"));
            }
        }
        Command::Linkpred { common } => {
            let mut cfg: LinkPredConfig = load_config(common.config.as_deref(), &common.sets)?;
            if let Some(seed) = common.seed {
                cfg.seed = seed;
            }
            let report = run_linkpred(&cfg)?;
            println!("held-out AUC {:.4}", report.auc);
            if let Some(dir) = &common.out {
                write_json(dir, &report)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GRAPHX_LOG", "info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

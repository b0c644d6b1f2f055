use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Result;
use crate::data::{gen_synthetic, SynthMode, SyntheticConfig};
use crate::graph::{Adjacency, Episode, Phase};
use crate::hypernet::{build_schema, HyperConfig, HyperNet};
use crate::layers::{gnn_forward, init_blocks, layer_forward, GraphOps, LayerKind, LayerSpec, LayerWeights};
use crate::par::Execution;
use crate::pipeline::{episode_loss_with, link_inputs, EpisodePlan, Model, ModelConfig, ModelError};
use crate::tensor::{grad_check, Activation, GradCheckOptions, GradCheckReport, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckConfig {
    pub p: usize,
    pub n: usize,
    /// Embedding width `l`.
    pub latent: usize,
    pub hidden: usize,
    pub hyper_hidden: usize,
    pub hyper_depth: usize,
    pub kind: LayerKind,
    pub seeds: Vec<u64>,
    pub h: f64,
    pub tol: f64,
    /// Check at most this many coordinates per function; all when `None`.
    pub max_coords: Option<usize>,
    /// Also check every layer kind and weight generation on their own.
    pub components: bool,
    /// Multiplies every backward pass by this factor (fault injection).
    pub fault: Option<f64>,
    pub exec: Execution,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            p: 6,
            n: 2,
            latent: 4,
            hidden: 4,
            hyper_hidden: 8,
            hyper_depth: 2,
            kind: LayerKind::Gcn,
            seeds: (0..5).collect(),
            h: 1e-5,
            tol: 1e-4,
            max_coords: None,
            components: true,
            fault: None,
            exec: Execution::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentCheck {
    pub name: String,
    pub seed: u64,
    pub max_rel_error: f64,
    pub checked: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub checks: Vec<ComponentCheck>,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

fn options(cfg: &GradcheckConfig, seed: u64) -> GradCheckOptions {
    GradCheckOptions {
        h: cfg.h,
        max_coords: cfg.max_coords,
        seed,
        exec: cfg.exec,
    }
}

fn faulty<'t>(loss: crate::tensor::Var<'t>, fault: Option<f64>) -> std::result::Result<crate::tensor::Var<'t>, TensorError> {
    match fault {
        Some(f) => loss.scale_grad(f),
        None => Ok(loss),
    }
}

/// Smooth scalar read-out used by the component checks.
fn readout<'t>(out: crate::tensor::Var<'t>) -> std::result::Result<crate::tensor::Var<'t>, TensorError> {
    out.mul(out)?.sum()?.add(out.sigmoid()?.sum()?)
}

fn random_graph<R: Rng>(p: usize, rng: &mut R) -> Adjacency {
    let mut edges = Vec::new();
    for u in 0..p {
        for v in u + 1..p {
            if rng.random_bool(0.4) {
                edges.push((u, v));
            }
        }
    }
    Adjacency::from_edges(p, &edges).expect("edges are in range")
}

fn component_spec(kind: LayerKind, i: usize, o: usize) -> LayerSpec {
    let act = Activation::Tanh;
    match kind {
        LayerKind::Gat => LayerSpec::gat(i, o, 2, act),
        LayerKind::Gin => LayerSpec {
            eps: 0.1,
            ..LayerSpec::new(kind, i, o, act)
        },
        _ => LayerSpec::new(kind, i, o, act),
    }
}

/// Gradient check of one layer w.r.t. its input features and every block.
pub fn layer_gradcheck(
    kind: LayerKind,
    p: usize,
    seed: u64,
    opts: &GradCheckOptions,
    fault: Option<f64>,
) -> std::result::Result<GradCheckReport, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ops = GraphOps::new(&random_graph(p, &mut rng));
    let spec = component_spec(kind, 3, 4);
    let blocks = init_blocks(&spec, &mut rng);
    let names: Vec<String> = blocks.keys().cloned().collect();
    let mut params = vec![Tensor::randn(vec![p, 3], 1.0, &mut rng)];
    params.extend(blocks.into_values());
    grad_check(&params, opts, |_, vars| {
        let map: BTreeMap<String, _> = names.iter().cloned().zip(vars[1..].iter().copied()).collect();
        let w = LayerWeights::new(&spec, map)?;
        faulty(readout(layer_forward(&spec, &ops, vars[0], &w)?)?, fault)
    })
}

/// Gradient check of weight generation w.r.t. the hypernetwork parameters,
/// read out through the generated two-layer graph network.
pub fn hypernet_gradcheck(
    kind: LayerKind,
    p: usize,
    seed: u64,
    opts: &GradCheckOptions,
    fault: Option<f64>,
) -> std::result::Result<GradCheckReport, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ops = GraphOps::new(&random_graph(p, &mut rng));
    let specs = vec![component_spec(kind, 2, 4), component_spec(kind, 4, 2)];
    let net = HyperNet::new(
        3,
        build_schema(&specs)?,
        HyperConfig {
            hidden: 6,
            depth: 2,
            activation: Activation::Tanh,
        },
    )?;
    let params: Vec<Tensor> = net.init_params(&mut rng).into_iter().map(|(_, t)| t).collect();
    let meta: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x = Tensor::randn(vec![p, 2], 1.0, &mut rng);
    grad_check(&params, opts, |tape, vars| {
        let gen = net.generate(tape, vars, &meta)?;
        let out = gnn_forward(&specs, &ops, tape.constant(&x), &gen.layers)?;
        faulty(readout(out)?, fault)
    })
}

/// The tiny two-input, one-target problem used by the end-to-end check.
pub fn gradcheck_problem(cfg: &GradcheckConfig, seed: u64) -> Result<(crate::data::Dataset, Model, Episode)> {
    let mode = |id: &str, t: usize, f: f64, frac: f64| SynthMode {
        id: id.into(),
        mode_type: t,
        features: vec![f],
        node_fraction: frac,
        edge_density: 0.5,
    };
    let synth = SyntheticConfig {
        modes: vec![mode("a", 0, 0.2, 0.5), mode("b", 0, 0.8, 0.5), mode("t", 1, 0.5, 0.7)],
        ..SyntheticConfig::small(cfg.p, cfg.n, 0)
    };
    let (ds, _) = gen_synthetic(&synth, seed)?;
    let mut model_cfg = ModelConfig::standard(cfg.kind, 1, cfg.hidden, cfg.latent);
    for s in model_cfg
        .encoder
        .iter_mut()
        .chain(&mut model_cfg.decoder)
        .chain(&mut model_cfg.head)
        .chain(&mut model_cfg.linkpred)
    {
        if s.activation == Activation::Relu {
            s.activation = Activation::Tanh;
        }
        if s.kind == LayerKind::Gat {
            s.heads = 2;
        }
    }
    let hyper = HyperConfig {
        hidden: cfg.hyper_hidden,
        depth: cfg.hyper_depth,
        activation: Activation::Tanh,
    };
    model_cfg.hyper_e = hyper;
    model_cfg.hyper_d = hyper;
    model_cfg.type_dims = synth.type_dims;
    let model = Model::new(model_cfg, 1, ds.meta_dim(), seed)?;
    let episode = Episode::parse("a,b->t", Phase::Train)?;
    Ok((ds, model, episode))
}

/// End-to-end check of `l1 + rho·l2` w.r.t. every trained parameter. When
/// the configuration detaches the link input, the checked function holds
/// that input at its value for the unperturbed parameters, which is exactly
/// the function training differentiates.
pub fn end_to_end_gradcheck(cfg: &GradcheckConfig, seed: u64, detach: bool) -> Result<GradCheckReport> {
    let (ds, mut model, episode) = gradcheck_problem(cfg, seed)?;
    if !detach {
        let mut c = model.config().clone();
        c.detach_link_input = false;
        model = Model::new(c, ds.d(), ds.meta_dim(), seed)?;
    }
    let plan = EpisodePlan::new(&ds, &episode, model.config())?;
    let params: Vec<Tensor> = model.params().iter().map(|p| p.value.clone()).collect();
    let samples: Vec<usize> = (0..ds.n()).collect();
    let fixed = if detach {
        Some(link_inputs(&model, &ds, &plan, &samples)?)
    } else {
        None
    };
    let report = grad_check(&params, &options(cfg, seed), |tape, vars| {
        let bound = model.bind_vars(vars.to_vec())?;
        let loss = episode_loss_with(&model, tape, &bound, &ds, &plan, &samples, fixed.as_ref())?;
        Ok::<_, ModelError>(faulty(loss.total, cfg.fault)?)
    })?;
    Ok(report)
}

/// Runs every check for every seed; passes when all errors are below `tol`.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut checks = Vec::new();
    let mut push = |name: String, seed: u64, r: GradCheckReport| {
        checks.push(ComponentCheck {
            name,
            seed,
            max_rel_error: r.max_rel_error,
            checked: r.checked,
        })
    };
    for &seed in &cfg.seeds {
        let opts = options(cfg, seed);
        if cfg.components {
            for kind in [LayerKind::Gcn, LayerKind::Gin, LayerKind::Gat, LayerKind::Mlp] {
                let r = layer_gradcheck(kind, cfg.p, seed, &opts, cfg.fault).map_err(ModelError::from)?;
                push(format!("layer:{}", kind_name(kind)), seed, r);
            }
            let r = hypernet_gradcheck(cfg.kind, cfg.p, seed, &opts, cfg.fault).map_err(ModelError::from)?;
            push("generate_weights".into(), seed, r);
        }
        push("episode_loss".into(), seed, end_to_end_gradcheck(cfg, seed, true)?);
        push("episode_loss:coupled".into(), seed, end_to_end_gradcheck(cfg, seed, false)?);
    }
    let max_rel_error = checks
        .iter()
        .map(|c| c.max_rel_error)
        .fold(0.0, |a: f64, e| if e.is_nan() { f64::NAN } else { a.max(e) });
    Ok(GradcheckReport {
        passed: max_rel_error < cfg.tol,
        checks,
        max_rel_error,
        tol: cfg.tol,
    })
}

fn kind_name(kind: LayerKind) -> &'static str {
    match kind {
        LayerKind::Gcn => "gcn",
        LayerKind::Gin => "gin",
        LayerKind::Gat => "gat",
        LayerKind::Mlp => "mlp",
    }
}

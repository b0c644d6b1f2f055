//! One forward pass: generate weights, encode each input on the union
//! graph, pool, decode, score links, extend the target topology to the whole
//! universe and predict the remaining nodes.

use super::{Ablation, Bound, LossKind, Model, ModelConfig, ModelError, Pooling};
use crate::data::Dataset;
use crate::graph::{
    assemble_bar_adjacency, binarize_edges, expand_to_union, pool_remaining_rows, Adjacency,
    Episode,
};
use crate::hypernet::GeneratedWeights;
use crate::layers::{gnn_forward, mlp_forward, GraphOps, LayerSpec, LayerWeights};
use crate::par::{self, Execution};
use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Everything about one (episode, target) pair that stays fixed while
/// parameters change.
#[derive(Debug, Clone)]
pub struct TargetPlan {
    pub target: usize,
    pub sources: Vec<usize>,
    /// Sorted union node set `Ṽ`.
    pub union: Vec<usize>,
    /// Universe nodes outside `Ṽ`, sorted.
    pub rest: Vec<usize>,
    /// Row of each universe node in the concatenated `[Ṽ; rest]` order.
    bar_row: Vec<usize>,
    pub input_ops: Vec<GraphOps>,
    /// `[source][sample]`, `p̃ × d`.
    pub input_attrs: Vec<Vec<Tensor>>,
    pub target_adj: Adjacency,
    target_labels: Tensor,
    pub target_ops: GraphOps,
    bar_ops: GraphOps,
    /// σ₂-pooled input attributes at the rest nodes, per sample.
    pub rest_attrs: Vec<Tensor>,
    /// Rest rows (relative) that no input mode covers; zero-filled.
    pub zero_filled: Vec<usize>,
    /// Universe rows where the target's attributes are observed.
    pub observed: Vec<usize>,
    /// Per sample, `|observed| × d`.
    pub truth: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct EpisodePlan {
    pub episode: Episode,
    pub sources: Vec<usize>,
    pub targets: Vec<TargetPlan>,
    pub n: usize,
}

fn mode_index(ds: &Dataset, id: &str) -> Result<usize, ModelError> {
    ds.modes()
        .iter()
        .position(|m| m.id() == id)
        .ok_or_else(|| ModelError::UnknownMode(id.to_string()))
}

impl EpisodePlan {
    pub fn new(ds: &Dataset, episode: &Episode, config: &ModelConfig) -> Result<Self, ModelError> {
        let sources = episode
            .sources
            .iter()
            .map(|s| mode_index(ds, s))
            .collect::<Result<Vec<_>, _>>()?;
        let targets = episode
            .targets
            .iter()
            .map(|s| mode_index(ds, s))
            .collect::<Result<Vec<_>, _>>()?;
        if config.ablation == Ablation::Hypergnn && sources.len() != 1 {
            return Err(ModelError::Config(format!(
                "the hypergnn ablation takes exactly one input mode, episode {episode} has {}",
                sources.len()
            )));
        }
        let p = ds.p();
        let plans = targets
            .iter()
            .map(|&k| {
                let inputs: Vec<_> = sources.iter().map(|&j| &ds.modes()[j]).collect();
                let target = &ds.modes()[k];
                let (expanded, tgt) = expand_to_union(&inputs, target)?;
                let union = tgt.node_ids.clone();
                let rest: Vec<usize> = (0..p).filter(|u| union.binary_search(u).is_err()).collect();
                let order: Vec<usize> = union.iter().chain(&rest).copied().collect();
                let mut bar_row = vec![0; p];
                for (r, &u) in order.iter().enumerate() {
                    bar_row[u] = r;
                }
                let pt = union.len();
                let mut rest_attrs = Vec::with_capacity(ds.n());
                let mut zero_filled = Vec::new();
                for i in 0..ds.n() {
                    let mut xs = Vec::with_capacity(inputs.len());
                    let mut masks = Vec::with_capacity(inputs.len());
                    for m in &inputs {
                        let (x, mask) = m.universe_attrs(i, p);
                        let xb = x.select_rows(&order);
                        xs.push(xb);
                        masks.push(order.iter().map(|&u| mask[u]).collect::<Vec<_>>());
                    }
                    let (pooled, filled) = pool_remaining_rows(&xs, &masks, pt)?;
                    rest_attrs.push(pooled);
                    zero_filled = filled;
                }
                let observed = target.attr_nodes().to_vec();
                let truth = (0..ds.n()).map(|i| target.samples()[i].clone()).collect();
                let target_labels = tgt.adjacency.to_tensor();
                let bar_adj = assemble_bar_adjacency(&tgt.adjacency, p)?;
                Ok::<_, ModelError>(TargetPlan {
                    target: k,
                    sources: sources.clone(),
                    input_ops: expanded.iter().map(|e| GraphOps::new(&e.adjacency)).collect(),
                    input_attrs: expanded.into_iter().map(|e| e.attrs).collect(),
                    target_ops: GraphOps::new(&tgt.adjacency),
                    bar_ops: GraphOps::new(&bar_adj),
                    target_adj: tgt.adjacency,
                    target_labels,
                    union,
                    rest,
                    bar_row,
                    rest_attrs,
                    zero_filled,
                    observed,
                    truth,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            episode: episode.clone(),
            sources,
            targets: plans,
            n: ds.n(),
        })
    }
}

/// Decoder weights: generated graph layers plus a generated or shared head.
pub struct DecoderWeights<'t> {
    pub gnn: Vec<LayerWeights<'t>>,
    pub head: Vec<LayerWeights<'t>>,
}

/// Per-step generated weights for every mode an episode touches.
pub struct EpisodeWeights<'t> {
    pub encoders: Vec<GeneratedWeights<'t>>,
    pub decoders: Vec<DecoderWeights<'t>>,
}

pub fn generate_episode_weights<'t>(
    model: &Model,
    tape: &'t Tape,
    bound: &Bound<'t>,
    ds: &Dataset,
    plan: &EpisodePlan,
) -> Result<EpisodeWeights<'t>, ModelError> {
    let cfg = model.config();
    let encoders = plan
        .sources
        .iter()
        .map(|&j| {
            let meta = cfg.effective_meta(ds.modes()[j].meta());
            model.encoder_net().generate(tape, &bound.gamma_e, meta)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let decoders = plan
        .targets
        .iter()
        .map(|t| {
            let meta = cfg.effective_meta(ds.modes()[t.target].meta());
            let mut g = model.decoder_net().generate(tape, &bound.gamma_d, meta)?.layers;
            let head = match &bound.head {
                Some(shared) => shared.clone(),
                None => g.split_off(cfg.decoder.len()),
            };
            Ok::<_, ModelError>(DecoderWeights { gnn: g, head })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(EpisodeWeights { encoders, decoders })
}

/// Per-node embeddings of one expanded input graph.
pub fn encode_mode<'t>(
    specs: &[LayerSpec],
    ops: &GraphOps,
    attrs: Var<'t>,
    beta: &[LayerWeights<'t>],
) -> Result<Var<'t>, TensorError> {
    gnn_forward(specs, ops, attrs, beta)
}

pub fn pool_embeddings<'t>(
    tape: &'t Tape,
    zs: &[Var<'t>],
    pooling: Pooling,
) -> Result<Var<'t>, TensorError> {
    match pooling {
        Pooling::Mean => tape.mean_of(zs),
        Pooling::Sum => tape.sum_of(zs),
        Pooling::Max => tape.max_of(zs),
    }
}

/// Decoder graph layers followed by the row-wise head.
pub fn decode_mode<'t>(
    config: &ModelConfig,
    ops: &GraphOps,
    pooled: Var<'t>,
    beta: &DecoderWeights<'t>,
) -> Result<Var<'t>, TensorError> {
    let hidden = gnn_forward(&config.decoder, ops, pooled, &beta.gnn)?;
    mlp_forward(hidden, &config.head, &beta.head)
}

/// Graph auto-encoder scores: `h = GNN(A, X; φ)`, `Â = sigmoid(h·hᵀ)`.
pub fn link_scores<'t>(
    specs: &[LayerSpec],
    ops: &GraphOps,
    x: Var<'t>,
    phi: &[LayerWeights<'t>],
) -> Result<(Var<'t>, Var<'t>), TensorError> {
    let h = gnn_forward(specs, ops, x, phi)?;
    let probs = h.matmul(h.transpose()?)?.sigmoid()?;
    Ok((h, probs))
}

/// Sum over target modes of the mean-BCE between scores and adjacency.
pub fn link_loss<'t>(
    tape: &'t Tape,
    pairs: &[(Var<'t>, &Tensor)],
) -> Result<Var<'t>, TensorError> {
    let terms = pairs
        .iter()
        .map(|(probs, labels)| probs.bce_loss(labels))
        .collect::<Result<Vec<_>, _>>()?;
    tape.sum_of(&terms)
}

/// Topology completion over the full universe. The thresholded result carries no gradient.
pub fn update_topology<'t>(
    config: &ModelConfig,
    bar_ops: &GraphOps,
    x_bar: &Tensor,
    phi: &[LayerWeights<'t>],
) -> Result<Adjacency, ModelError> {
    let tape = phi
        .first()
        .map(|w| w.blocks().values().next().expect("layer has blocks").tape())
        .ok_or_else(|| ModelError::Config("empty link predictor".into()))?;
    let (_, probs) = link_scores(&config.linkpred, bar_ops, tape.constant(x_bar), phi)?;
    Ok(binarize_edges(&probs.value(), config.tau)?)
}

/// Re-encodes the assembled attributes `X̄` on the completed topology with
/// every input encoder, pools, decodes and returns rows `[p̃, p)`.
#[allow(clippy::too_many_arguments)]
pub fn predict_remaining<'t>(
    config: &ModelConfig,
    tape: &'t Tape,
    updated: &Adjacency,
    x_bar: Var<'t>,
    p_tilde: usize,
    encoders: &[GeneratedWeights<'t>],
    decoder: &DecoderWeights<'t>,
) -> Result<Var<'t>, TensorError> {
    let p = updated.n();
    let ops = GraphOps::new(updated);
    let zs = encoders
        .iter()
        .map(|w| encode_mode(&config.encoder, &ops, x_bar, &w.layers))
        .collect::<Result<Vec<_>, _>>()?;
    let pooled = pool_embeddings(tape, &zs, config.pooling)?;
    decode_mode(config, &ops, pooled, decoder)?.slice_rows(p_tilde, p)
}

/// Tape values for one (target, sample) forward pass.
pub struct SampleForward<'t> {
    pub x_tilde: Var<'t>,
    /// `p × d` in universe order.
    pub x_hat: Var<'t>,
    pub link_probs: Var<'t>,
    pub l1: Var<'t>,
    pub l2: Var<'t>,
    pub updated: Option<Adjacency>,
}

#[allow(clippy::too_many_arguments)]
pub fn forward_sample<'t>(
    model: &Model,
    tape: &'t Tape,
    bound: &Bound<'t>,
    plan: &TargetPlan,
    encoders: &[GeneratedWeights<'t>],
    decoder: &DecoderWeights<'t>,
    sample: usize,
    link_input: Option<&Tensor>,
) -> Result<SampleForward<'t>, ModelError> {
    let cfg = model.config();
    let zs = plan
        .input_ops
        .iter()
        .zip(&plan.input_attrs)
        .zip(encoders)
        .map(|((ops, attrs), w)| {
            encode_mode(&cfg.encoder, ops, tape.constant(&attrs[sample]), &w.layers)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let pooled = pool_embeddings(tape, &zs, cfg.pooling)?;
    let x_tilde = decode_mode(cfg, &plan.target_ops, pooled, decoder)?;

    let x_link = match link_input {
        Some(x) => tape.constant(x),
        None if cfg.detach_link_input => tape.constant(&x_tilde.value()),
        None => x_tilde,
    };
    let (_, link_probs) = link_scores(&cfg.linkpred, &plan.target_ops, x_link, &bound.phi)?;
    let l2 = link_loss(tape, &[(link_probs, &plan.target_labels)])?;

    let (x_bar_rows, updated) = if plan.rest.is_empty() {
        (x_tilde, None)
    } else {
        let rest = tape.constant(&plan.rest_attrs[sample]);
        let x_bar = tape.concat_rows(&[x_tilde, rest])?;
        let updated = update_topology(cfg, &plan.bar_ops, &x_bar.value(), &bound.phi)?;
        let remaining = predict_remaining(
            cfg,
            tape,
            &updated,
            x_bar,
            plan.union.len(),
            encoders,
            decoder,
        )?;
        (tape.concat_rows(&[x_tilde, remaining])?, Some(updated))
    };
    let x_hat = if plan.rest.is_empty() {
        x_bar_rows
    } else {
        x_bar_rows.gather_rows(&plan.bar_row)?
    };
    let truth = tape.constant(&plan.truth[sample]);
    let observed = x_hat.gather_rows(&plan.observed)?;
    let l1 = match cfg.loss {
        LossKind::Mse => observed.mse_loss(truth)?,
        LossKind::Mae => observed.mae_loss(truth)?,
    };
    Ok(SampleForward {
        x_tilde,
        x_hat,
        link_probs,
        l1,
        l2,
        updated,
    })
}

pub struct LossVars<'t> {
    pub l1: Var<'t>,
    pub l2: Var<'t>,
    pub total: Var<'t>,
}

/// `total = l1 + rho·l2`.
pub fn total_loss<'t>(l1: Var<'t>, l2: Var<'t>, rho: f64) -> Result<LossVars<'t>, TensorError> {
    let total = l1.add(l2.scale(rho)?)?;
    Ok(LossVars { l1, l2, total })
}

/// l1 is the mean prediction loss over targets and samples; l2 sums the
/// per-target link loss (each averaged over samples).
pub fn episode_loss<'t>(
    model: &Model,
    tape: &'t Tape,
    bound: &Bound<'t>,
    ds: &Dataset,
    plan: &EpisodePlan,
    samples: &[usize],
) -> Result<LossVars<'t>, ModelError> {
    episode_loss_with(model, tape, bound, ds, plan, samples, None)
}

/// Link-term inputs indexed `[target][k]` for the k-th entry of `samples`.
pub type LinkInputs = Vec<Vec<Tensor>>;

/// Current predictions over the union nodes, as fed to the link term.
pub fn link_inputs(
    model: &Model,
    ds: &Dataset,
    plan: &EpisodePlan,
    samples: &[usize],
) -> Result<LinkInputs, ModelError> {
    let tape = Tape::new();
    let bound = model.bind(&tape, false)?;
    let w = generate_episode_weights(model, &tape, &bound, ds, plan)?;
    plan.targets
        .iter()
        .zip(&w.decoders)
        .map(|(t, dec)| {
            samples
                .iter()
                .map(|&i| Ok(forward_sample(model, &tape, &bound, t, &w.encoders, dec, i, None)?.x_tilde.value()))
                .collect()
        })
        .collect()
}

/// [`episode_loss`] with the link term optionally reading fixed inputs
/// instead of the current predictions.
#[allow(clippy::too_many_arguments)]
pub fn episode_loss_with<'t>(
    model: &Model,
    tape: &'t Tape,
    bound: &Bound<'t>,
    ds: &Dataset,
    plan: &EpisodePlan,
    samples: &[usize],
    fixed_link_inputs: Option<&LinkInputs>,
) -> Result<LossVars<'t>, ModelError> {
    if samples.is_empty() {
        return Err(ModelError::Config("no samples to evaluate".into()));
    }
    let w = generate_episode_weights(model, tape, bound, ds, plan)?;
    let mut l1_terms = Vec::new();
    let mut l2_terms = Vec::new();
    for (ti, (t, dec)) in plan.targets.iter().zip(&w.decoders).enumerate() {
        let mut per_target = Vec::with_capacity(samples.len());
        for (k, &i) in samples.iter().enumerate() {
            let link = fixed_link_inputs.map(|f| &f[ti][k]);
            let f = forward_sample(model, tape, bound, t, &w.encoders, dec, i, link)?;
            l1_terms.push(f.l1);
            per_target.push(f.l2);
        }
        l2_terms.push(tape.mean_of(&per_target)?);
    }
    let l1 = tape.mean_of(&l1_terms)?;
    let l2 = tape.sum_of(&l2_terms)?;
    Ok(total_loss(l1, l2, model.config().rho)?)
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub target: String,
    pub sample: usize,
    /// `p × d`, universe order.
    pub x_hat: Tensor,
    /// `p̃ × d` over the union nodes.
    pub x_tilde: Tensor,
    pub union: Vec<usize>,
    pub link_probs: Tensor,
    pub updated_adjacency: Option<Adjacency>,
    /// Universe rows with ground truth and the residual `X̂ − X` there.
    pub observed: Vec<usize>,
    pub residual: Tensor,
    pub l1: f64,
    pub l2: f64,
}

/// Frozen-parameter predictions for every (sample, target), samples
/// processed independently (in parallel when `exec` allows).
pub fn forward_episode(
    model: &Model,
    ds: &Dataset,
    plan: &EpisodePlan,
    samples: &[usize],
    exec: Execution,
) -> Result<Vec<Prediction>, ModelError> {
    let per_sample = par::map_slice(exec, samples, |&i| {
        let tape = Tape::new();
        let bound = model.bind(&tape, false)?;
        let w = generate_episode_weights(model, &tape, &bound, ds, plan)?;
        plan.targets
            .iter()
            .zip(&w.decoders)
            .map(|(t, dec)| {
                let f = forward_sample(model, &tape, &bound, t, &w.encoders, dec, i, None)?;
                let x_hat = f.x_hat.value();
                let residual = x_hat.select_rows(&t.observed).sub(&t.truth[i])?;
                Ok(Prediction {
                    target: ds.modes()[t.target].id().to_string(),
                    sample: i,
                    x_hat,
                    x_tilde: f.x_tilde.value(),
                    union: t.union.clone(),
                    link_probs: f.link_probs.value(),
                    updated_adjacency: f.updated,
                    observed: t.observed.clone(),
                    residual,
                    l1: f.l1.item(),
                    l2: f.l2.item(),
                })
            })
            .collect::<Result<Vec<_>, ModelError>>()
    });
    let mut out = Vec::new();
    for r in per_sample {
        out.extend(r?);
    }
    Ok(out)
}

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{HarnessError, Result};
use crate::data::{gen_synthetic, SynthMode, SyntheticConfig};
use crate::graph::Adjacency;
use crate::layers::{init_blocks, GraphOps, LayerKind, LayerSpec, LayerWeights};
use crate::pipeline::{link_scores, ModelError};
use crate::tensor::{Activation, Adam, AdamConfig, Optimizer, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinkPredConfig {
    pub p: usize,
    pub n: usize,
    pub d: usize,
    pub clusters: usize,
    pub edge_density: f64,
    pub cross_ratio: f64,
    /// Share of true edges hidden from the BCE supervision (and from the
    /// input graph); the same number of non-edges is hidden as negatives.
    pub mask_fraction: f64,
    pub kind: LayerKind,
    pub hidden: usize,
    pub latent: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for LinkPredConfig {
    fn default() -> Self {
        Self {
            p: 20,
            n: 8,
            d: 4,
            clusters: 3,
            edge_density: 0.3,
            cross_ratio: 0.1,
            mask_fraction: 0.2,
            kind: LayerKind::Gcn,
            hidden: 16,
            latent: 8,
            steps: 500,
            lr: 1e-2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkPredReport {
    pub auc: f64,
    pub held_out_edges: usize,
    pub held_out_non_edges: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Probability that a random positive outscores a random negative; ties
/// count one half.
pub fn auc(pos: &[f64], neg: &[f64]) -> f64 {
    if pos.is_empty() || neg.is_empty() {
        return f64::NAN;
    }
    let mut s = 0.0;
    for &a in pos {
        for &b in neg {
            s += if a > b {
                1.0
            } else if a == b {
                0.5
            } else {
                0.0
            };
        }
    }
    s / (pos.len() * neg.len()) as f64
}

/// Trains a graph auto-encoder on one synthetic mode with some edges
/// hidden, then scores the hidden pairs.
pub fn run_linkpred(cfg: &LinkPredConfig) -> Result<LinkPredReport> {
    if !(cfg.mask_fraction > 0.0 && cfg.mask_fraction < 1.0) {
        return Err(HarnessError::Validation("mask_fraction must lie in (0, 1)".into()));
    }
    let synth = SyntheticConfig {
        p: cfg.p,
        n: cfg.n,
        d: cfg.d,
        clusters: cfg.clusters,
        cross_ratio: cfg.cross_ratio,
        modes: vec![SynthMode {
            id: "g".into(),
            mode_type: 0,
            features: vec![0.5],
            node_fraction: 1.0,
            edge_density: cfg.edge_density,
        }],
        ..SyntheticConfig::small(cfg.p, cfg.n, 0)
    };
    let (ds, _) = gen_synthetic(&synth, cfg.seed)?;
    let mode = ds.mode("g")?;
    let full = mode.adjacency();
    let p = full.n();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut edges = full.edges();
    edges.shuffle(&mut rng);
    let k = ((cfg.mask_fraction * edges.len() as f64).round() as usize).max(1);
    let hidden_pos: Vec<(usize, usize)> = edges[..k].to_vec();
    let mut non_edges: Vec<(usize, usize)> = (0..p)
        .flat_map(|u| (u + 1..p).map(move |v| (u, v)))
        .filter(|&(u, v)| !full.has_edge(u, v))
        .collect();
    non_edges.shuffle(&mut rng);
    let hidden_neg: Vec<(usize, usize)> = non_edges[..k.min(non_edges.len())].to_vec();
    if hidden_neg.is_empty() {
        return Err(HarnessError::Validation("graph has no non-edges to hold out".into()));
    }

    let observed = Adjacency::from_edges(p, &edges[k..])?;
    let ops = GraphOps::new(&observed);
    let mut mask = Tensor::ones([p, p]);
    for &(u, v) in hidden_pos.iter().chain(&hidden_neg) {
        mask.set(u, v, 0.0);
        mask.set(v, u, 0.0);
    }
    let labels = observed.to_tensor();

    let specs = vec![
        LayerSpec::new(cfg.kind, cfg.d, cfg.hidden, Activation::Relu),
        LayerSpec::new(cfg.kind, cfg.hidden, cfg.latent, Activation::Identity),
    ];
    let mut names = Vec::new();
    let mut params = Vec::new();
    for s in &specs {
        let blocks = init_blocks(s, &mut rng);
        names.push(blocks.keys().cloned().collect::<Vec<_>>());
        params.extend(blocks.into_values());
    }
    let attrs: Vec<Tensor> = (0..ds.n()).map(|i| mode.graph_attrs(i)).collect();

    let gae = Gae {
        specs,
        names,
        ops,
        attrs,
        labels,
        mask,
    };
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut initial_loss = f64::NAN;
    for step in 0..cfg.steps {
        let tape = Tape::new();
        let (vars, loss, _) = gae.forward(&tape, true, &params)?;
        if step == 0 {
            initial_loss = loss.item();
        }
        let grads = loss.backward().map_err(ModelError::from)?;
        let g: Vec<Vec<f64>> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();
        let slots: Vec<Option<&[f64]>> = g.iter().map(|v| Some(v.as_slice())).collect();
        let mut refs: Vec<&mut Tensor> = params.iter_mut().collect();
        adam.step(&mut refs, &slots);
    }
    let tape = Tape::new();
    let (_, loss, probs) = gae.forward(&tape, false, &params)?;
    let score = |(u, v): (usize, usize)| probs.iter().map(|pr| pr.get(u, v)).sum::<f64>() / probs.len() as f64;
    let pos: Vec<f64> = hidden_pos.iter().map(|&e| score(e)).collect();
    let neg: Vec<f64> = hidden_neg.iter().map(|&e| score(e)).collect();
    Ok(LinkPredReport {
        auc: auc(&pos, &neg),
        held_out_edges: pos.len(),
        held_out_non_edges: neg.len(),
        initial_loss: if cfg.steps == 0 { loss.item() } else { initial_loss },
        final_loss: loss.item(),
    })
}

struct Gae {
    specs: Vec<LayerSpec>,
    names: Vec<Vec<String>>,
    ops: GraphOps,
    attrs: Vec<Tensor>,
    labels: Tensor,
    mask: Tensor,
}

impl Gae {
    /// Mean masked BCE over samples, plus each sample's score matrix.
    #[allow(clippy::type_complexity)]
    fn forward<'t>(
        &self,
        tape: &'t Tape,
        track: bool,
        params: &[Tensor],
    ) -> std::result::Result<(Vec<Var<'t>>, Var<'t>, Vec<Tensor>), ModelError> {
        let vars: Vec<Var<'t>> = params
            .iter()
            .map(|t| if track { tape.param(t) } else { tape.constant(t) })
            .collect();
        let mut weights = Vec::new();
        let mut it = vars.iter().copied();
        for (s, n) in self.specs.iter().zip(&self.names) {
            let map = n
                .iter()
                .map(|name| (name.clone(), it.next().expect("one var per block")))
                .collect();
            weights.push(LayerWeights::new(s, map)?);
        }
        let mut losses = Vec::new();
        let mut probs = Vec::new();
        for x in &self.attrs {
            let (_, pr) = link_scores(&self.specs, &self.ops, tape.constant(x), &weights)?;
            losses.push(pr.bce_loss_masked(&self.labels, &self.mask)?);
            probs.push(pr.value());
        }
        Ok((vars, tape.mean_of(&losses)?, probs))
    }
}

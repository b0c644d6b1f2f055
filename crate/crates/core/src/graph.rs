//! Graph and mode data model.
//!
//! Nodes are identified by their index into a dataset-wide universe whose
//! order is the canonical order (lexicographic by node name). Every
//! adjacency carries self-loops on all nodes.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GraphError {
    #[error("adjacency is not symmetric at ({0}, {1})")]
    NotSymmetric(usize, usize),
    #[error("adjacency entry ({0}, {1}) = {2} is not 0 or 1")]
    NotBinary(usize, usize, f64),
    #[error("node {0} is missing its self-loop")]
    MissingSelfLoop(usize),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("edge threshold {0} must lie in (0, 1)")]
    InvalidThreshold(f64),
    #[error("not a permutation of 0..{0}")]
    NotPermutation(usize),
    #[error("node union is empty")]
    EmptyUnion,
    #[error("invalid episode: {0}")]
    Episode(String),
    #[error("invalid mode: {0}")]
    Mode(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Symmetric binary adjacency with unit diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct Adjacency {
    n: usize,
    data: Vec<f64>,
}

impl Adjacency {
    pub fn from_dense(n: usize, data: Vec<f64>) -> Result<Self, GraphError> {
        if data.len() != n * n {
            return Err(GraphError::Dimension(format!(
                "{} entries for a {n}x{n} adjacency",
                data.len()
            )));
        }
        for u in 0..n {
            if data[u * n + u] != 1.0 {
                return Err(GraphError::MissingSelfLoop(u));
            }
            for v in 0..n {
                let x = data[u * n + v];
                if x != 0.0 && x != 1.0 {
                    return Err(GraphError::NotBinary(u, v, x));
                }
                if x != data[v * n + u] {
                    return Err(GraphError::NotSymmetric(u, v));
                }
            }
        }
        Ok(Self { n, data })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self, GraphError> {
        if t.shape().len() != 2 || t.rows() != t.cols() {
            return Err(GraphError::Dimension(format!(
                "adjacency must be square, got {:?}",
                t.shape()
            )));
        }
        Self::from_dense(t.rows(), t.data().to_vec())
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for u in 0..n {
            data[u * n + u] = 1.0;
        }
        Self { n, data }
    }

    /// Undirected edge list; self-loops are added implicitly.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self, GraphError> {
        let mut a = Self::identity(n);
        for &(u, v) in edges {
            if u >= n || v >= n {
                return Err(GraphError::Dimension(format!(
                    "edge ({u}, {v}) outside {n} nodes"
                )));
            }
            a.data[u * n + v] = 1.0;
            a.data[v * n + u] = 1.0;
        }
        Ok(a)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.data[u * self.n + v] == 1.0
    }

    /// Undirected edges `u < v` (self-loops excluded).
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for u in 0..self.n {
            for v in u + 1..self.n {
                if self.has_edge(u, v) {
                    out.push((u, v));
                }
            }
        }
        out
    }

    pub fn edge_count(&self) -> usize {
        self.edges().len()
    }

    pub fn degree(&self, u: usize) -> usize {
        self.data[u * self.n..(u + 1) * self.n]
            .iter()
            .filter(|&&x| x == 1.0)
            .count()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.n, self.n], self.data.clone()).expect("n*n entries")
    }

    /// Relabels node `u` as `perm[u]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self, GraphError> {
        check_permutation(perm, self.n)?;
        let n = self.n;
        let mut data = vec![0.0; n * n];
        for u in 0..n {
            for v in 0..n {
                data[perm[u] * n + perm[v]] = self.data[u * n + v];
            }
        }
        Ok(Self { n, data })
    }

    /// Induced subgraph on `nodes` (in the given order).
    pub fn induced(&self, nodes: &[usize]) -> Self {
        let m = nodes.len();
        let mut data = vec![0.0; m * m];
        for (i, &u) in nodes.iter().enumerate() {
            for (j, &v) in nodes.iter().enumerate() {
                data[i * m + j] = self.data[u * self.n + v];
            }
        }
        Self { n: m, data }
    }
}

fn check_permutation(perm: &[usize], n: usize) -> Result<(), GraphError> {
    if perm.len() != n {
        return Err(GraphError::NotPermutation(n));
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || seen[p] {
            return Err(GraphError::NotPermutation(n));
        }
        seen[p] = true;
    }
    Ok(())
}

pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Moves row `u` of `t` to row `perm[u]`.
pub fn permute_rows(t: &Tensor, perm: &[usize]) -> Result<Tensor, GraphError> {
    check_permutation(perm, t.rows())?;
    let c = t.cols();
    let mut data = vec![0.0; t.numel()];
    for (u, &pu) in perm.iter().enumerate() {
        data[pu * c..(pu + 1) * c].copy_from_slice(t.row(u));
    }
    Ok(Tensor::new(t.shape().to_vec(), data)?)
}

/// Symmetric normalization `D^{-1/2} A D^{-1/2}`.
pub fn normalize_adjacency(a: &Adjacency) -> Tensor {
    let n = a.n();
    let inv_sqrt: Vec<f64> = (0..n).map(|u| 1.0 / (a.degree(u) as f64).sqrt()).collect();
    Tensor::from_fn(n, n, |u, v| a.data[u * n + v] * inv_sqrt[u] * inv_sqrt[v])
}

/// Block-diagonal `[[Ã, 0], [0, I]]` of size `p`.
pub fn assemble_bar_adjacency(a_tilde: &Adjacency, p: usize) -> Result<Adjacency, GraphError> {
    let pt = a_tilde.n();
    if p < pt {
        return Err(GraphError::Dimension(format!(
            "universe size {p} is smaller than the expanded graph ({pt})"
        )));
    }
    let mut out = Adjacency::identity(p);
    for u in 0..pt {
        out.data[u * p..u * p + pt].copy_from_slice(&a_tilde.data[u * pt..(u + 1) * pt]);
    }
    Ok(out)
}

/// Rows `[start, p)` of the input-mode attribute pool: per row, the mean over
/// input modes whose attributes are present there. Rows present nowhere are
/// zero-filled and their indices (relative to `start`) returned.
pub fn pool_remaining_rows(
    input_attrs: &[Tensor],
    presence: &[Vec<bool>],
    start: usize,
) -> Result<(Tensor, Vec<usize>), GraphError> {
    let first = input_attrs
        .first()
        .ok_or_else(|| GraphError::Dimension("no input modes to pool".into()))?;
    if presence.len() != input_attrs.len() {
        return Err(GraphError::Dimension(format!(
            "{} presence masks for {} input modes",
            presence.len(),
            input_attrs.len()
        )));
    }
    let (p, d) = (first.rows(), first.cols());
    for (x, mask) in input_attrs.iter().zip(presence) {
        if x.shape() != first.shape() || mask.len() != p {
            return Err(GraphError::Dimension(format!(
                "input attributes {:?} / mask {} do not match {:?}",
                x.shape(),
                mask.len(),
                first.shape()
            )));
        }
    }
    if start > p {
        return Err(GraphError::Dimension(format!("start {start} beyond {p} rows")));
    }
    let mut out = Tensor::zeros(vec![p - start, d]);
    let mut zero_filled = Vec::new();
    for r in start..p {
        let present: Vec<&Tensor> = input_attrs
            .iter()
            .zip(presence)
            .filter(|(_, m)| m[r])
            .map(|(x, _)| x)
            .collect();
        if present.is_empty() {
            zero_filled.push(r - start);
            continue;
        }
        for c in 0..d {
            let s: f64 = present.iter().map(|x| x.get(r, c)).sum();
            out.set(r - start, c, s / present.len() as f64);
        }
    }
    Ok((out, zero_filled))
}

/// `X̄ = [pred_tilde; pooled remaining rows]`, all inputs in bar order
/// (expanded nodes first, then the remaining universe nodes).
pub fn assemble_bar_attributes(
    pred_tilde: &Tensor,
    input_attrs: &[Tensor],
    presence: &[Vec<bool>],
) -> Result<Tensor, GraphError> {
    let (rest, _) = pool_remaining_rows(input_attrs, presence, pred_tilde.rows())?;
    if rest.cols() != pred_tilde.cols() {
        return Err(GraphError::Dimension(format!(
            "prediction has {} features, inputs have {}",
            pred_tilde.cols(),
            rest.cols()
        )));
    }
    let mut data = pred_tilde.data().to_vec();
    data.extend_from_slice(rest.data());
    let rows = pred_tilde.rows() + rest.rows();
    Ok(Tensor::new(vec![rows, pred_tilde.cols()], data)?)
}

/// Thresholds the symmetrized probabilities `(P + Pᵀ)/2 ≥ τ`; diagonal is
/// always 1.
pub fn binarize_edges(probs: &Tensor, tau: f64) -> Result<Adjacency, GraphError> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(GraphError::InvalidThreshold(tau));
    }
    if probs.shape().len() != 2 || probs.rows() != probs.cols() {
        return Err(GraphError::Dimension(format!(
            "edge probabilities must be square, got {:?}",
            probs.shape()
        )));
    }
    let n = probs.rows();
    let mut data = vec![0.0; n * n];
    for u in 0..n {
        for v in 0..n {
            let s = 0.5 * (probs.get(u, v) + probs.get(v, u));
            data[u * n + v] = if u == v || s >= tau { 1.0 } else { 0.0 };
        }
    }
    Ok(Adjacency { n, data })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSpec {
    pub mode_id: String,
    pub meta: Vec<f64>,
    /// Sorted universe indices of the graph's nodes.
    pub node_ids: Vec<usize>,
}

/// One mode: a fixed topology over a node subset plus `n` attribute samples.
///
/// Attributes may be observed on more nodes than the graph contains
/// (`attr_nodes ⊇ node_ids`); samples are stored as `|attr_nodes| × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeGraph {
    spec: ModeSpec,
    adjacency: Adjacency,
    attr_nodes: Vec<usize>,
    samples: Vec<Tensor>,
}

impl ModeGraph {
    /// Validates and canonicalizes (sorts) node order. `adjacency` is given
    /// in `spec.node_ids` order and samples in `attr_nodes` order.
    pub fn new(
        spec: ModeSpec,
        adjacency: Adjacency,
        attr_nodes: Vec<usize>,
        samples: Vec<Tensor>,
    ) -> Result<Self, GraphError> {
        let id = spec.mode_id.clone();
        let bad = |msg: String| GraphError::Mode(format!("{id}: {msg}"));
        if spec.node_ids.is_empty() {
            return Err(bad("empty node set".into()));
        }
        if adjacency.n() != spec.node_ids.len() {
            return Err(bad(format!(
                "adjacency has {} nodes, node list has {}",
                adjacency.n(),
                spec.node_ids.len()
            )));
        }
        let graph_order = sort_order(&spec.node_ids);
        let attr_order = sort_order(&attr_nodes);
        let node_ids: Vec<usize> = graph_order.iter().map(|&i| spec.node_ids[i]).collect();
        let attr_sorted: Vec<usize> = attr_order.iter().map(|&i| attr_nodes[i]).collect();
        if node_ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(bad("duplicate node ids".into()));
        }
        if attr_sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(bad("duplicate attribute node ids".into()));
        }
        let attr_set: BTreeSet<usize> = attr_sorted.iter().copied().collect();
        if let Some(missing) = node_ids.iter().find(|u| !attr_set.contains(u)) {
            return Err(bad(format!("graph node {missing} has no attributes")));
        }
        let d = samples.first().map_or(0, |s| s.cols());
        let mut sorted_samples = Vec::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            if s.shape() != [attr_sorted.len(), d] || d == 0 {
                return Err(bad(format!(
                    "sample {i} has shape {:?}, expected [{}, {d}]",
                    s.shape(),
                    attr_sorted.len()
                )));
            }
            let mut data = Vec::with_capacity(s.numel());
            for &r in &attr_order {
                data.extend_from_slice(s.row(r));
            }
            sorted_samples.push(Tensor::new(vec![attr_sorted.len(), d], data)?);
        }
        let adjacency = adjacency.induced(&graph_order);
        Ok(Self {
            spec: ModeSpec {
                node_ids,
                ..spec
            },
            adjacency,
            attr_nodes: attr_sorted,
            samples: sorted_samples,
        })
    }

    pub fn spec(&self) -> &ModeSpec {
        &self.spec
    }

    pub fn id(&self) -> &str {
        &self.spec.mode_id
    }

    pub fn meta(&self) -> &[f64] {
        &self.spec.meta
    }

    pub fn node_ids(&self) -> &[usize] {
        &self.spec.node_ids
    }

    pub fn adjacency(&self) -> &Adjacency {
        &self.adjacency
    }

    pub fn attr_nodes(&self) -> &[usize] {
        &self.attr_nodes
    }

    pub fn samples(&self) -> &[Tensor] {
        &self.samples
    }

    pub fn n_samples(&self) -> usize {
        self.samples.len()
    }

    pub fn d(&self) -> usize {
        self.samples.first().map_or(0, |s| s.cols())
    }

    pub fn with_meta(mut self, meta: Vec<f64>) -> Self {
        self.spec.meta = meta;
        self
    }

    /// Keeps only the listed samples, in the given order.
    pub fn select_samples(&self, idx: &[usize]) -> Self {
        Self {
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
            ..self.clone()
        }
    }

    /// Sample `i` restricted to graph nodes (`p_j × d`).
    pub fn graph_attrs(&self, i: usize) -> Tensor {
        let d = self.d();
        let mut data = Vec::with_capacity(self.spec.node_ids.len() * d);
        let mut k = 0;
        for &u in &self.spec.node_ids {
            while self.attr_nodes[k] != u {
                k += 1;
            }
            data.extend_from_slice(self.samples[i].row(k));
        }
        Tensor::new(vec![self.spec.node_ids.len(), d], data).expect("p_j*d values")
    }

    /// Sample `i` over a universe of `p` nodes plus its presence mask.
    pub fn universe_attrs(&self, i: usize, p: usize) -> (Tensor, Vec<bool>) {
        let d = self.d();
        let mut out = Tensor::zeros(vec![p, d]);
        let mut mask = vec![false; p];
        for (k, &u) in self.attr_nodes.iter().enumerate() {
            out.data_mut()[u * d..(u + 1) * d].copy_from_slice(self.samples[i].row(k));
            mask[u] = true;
        }
        (out, mask)
    }
}

fn sort_order(ids: &[usize]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by_key(|&i| ids[i]);
    order
}

/// Relabels universe node `u` as `perm[u]` (a bijection on `0..p`).
pub fn permute_graph(g: &ModeGraph, perm: &[usize]) -> Result<ModeGraph, GraphError> {
    let p = perm.len();
    check_permutation(perm, p)?;
    if let Some(&u) = g.attr_nodes.iter().find(|&&u| u >= p) {
        return Err(GraphError::Dimension(format!("node {u} outside permutation of {p}")));
    }
    let spec = ModeSpec {
        node_ids: g.spec.node_ids.iter().map(|&u| perm[u]).collect(),
        ..g.spec.clone()
    };
    let attr_nodes = g.attr_nodes.iter().map(|&u| perm[u]).collect();
    ModeGraph::new(spec, g.adjacency.clone(), attr_nodes, g.samples.clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    Generalize,
}

/// One transformation task: predict `targets` from `sources`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub sources: Vec<String>,
    pub targets: Vec<String>,
    pub phase: Phase,
}

impl Episode {
    pub fn new(sources: Vec<String>, targets: Vec<String>, phase: Phase) -> Result<Self, GraphError> {
        if sources.is_empty() || targets.is_empty() {
            return Err(GraphError::Episode("sources and targets must be non-empty".into()));
        }
        if let Some(shared) = sources.iter().find(|s| targets.contains(s)) {
            return Err(GraphError::Episode(format!(
                "mode {shared} is both a source and a target"
            )));
        }
        Ok(Self {
            sources,
            targets,
            phase,
        })
    }

    /// Parses `SRC1,SRC2->TGT1,TGT2`.
    pub fn parse(s: &str, phase: Phase) -> Result<Self, GraphError> {
        let (src, tgt) = s
            .split_once("->")
            .ok_or_else(|| GraphError::Episode(format!("expected SRC->TGT, got {s:?}")))?;
        let list = |part: &str| -> Vec<String> {
            part.split(',')
                .map(str::trim)
                .filter(|x| !x.is_empty())
                .map(String::from)
                .collect()
        };
        Self::new(list(src), list(tgt), phase)
    }

    /// Same pair of mode sets, ignoring order and phase.
    pub fn same_modes(&self, other: &Episode) -> bool {
        let set = |v: &[String]| v.iter().cloned().collect::<BTreeSet<_>>();
        set(&self.sources) == set(&other.sources) && set(&self.targets) == set(&other.targets)
    }
}

impl std::fmt::Display for Episode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}->{}", self.sources.join(","), self.targets.join(","))
    }
}

/// A mode re-indexed onto the union node set `Ṽ` of an episode.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpandedGraph {
    /// Sorted universe indices of `Ṽ`.
    pub node_ids: Vec<usize>,
    pub adjacency: Adjacency,
    /// Per sample, `p̃ × d` with zeros outside the mode's own graph.
    pub attrs: Vec<Tensor>,
    /// True exactly at the mode's own graph nodes.
    pub presence_mask: Vec<bool>,
}

impl ExpandedGraph {
    fn embed(mode: &ModeGraph, union: &[usize]) -> Self {
        let pt = union.len();
        let pos: Vec<usize> = mode
            .node_ids()
            .iter()
            .map(|u| union.binary_search(u).expect("mode nodes lie in the union"))
            .collect();
        let mut adjacency = Adjacency::identity(pt);
        let pj = pos.len();
        for i in 0..pj {
            for j in 0..pj {
                adjacency.data[pos[i] * pt + pos[j]] = mode.adjacency().data[i * pj + j];
            }
        }
        let mut presence_mask = vec![false; pt];
        for &q in &pos {
            presence_mask[q] = true;
        }
        let d = mode.d();
        let attrs = (0..mode.n_samples())
            .map(|s| {
                let local = mode.graph_attrs(s);
                let mut x = Tensor::zeros(vec![pt, d]);
                for (i, &q) in pos.iter().enumerate() {
                    x.data_mut()[q * d..(q + 1) * d].copy_from_slice(local.row(i));
                }
                x
            })
            .collect();
        Self {
            node_ids: union.to_vec(),
            adjacency,
            attrs,
            presence_mask,
        }
    }

    pub fn p_tilde(&self) -> usize {
        self.node_ids.len()
    }
}

/// Sorted union of the graph node sets of `modes`.
pub fn union_nodes<'a>(modes: impl IntoIterator<Item = &'a ModeGraph>) -> Vec<usize> {
    let set: BTreeSet<usize> = modes
        .into_iter()
        .flat_map(|m| m.node_ids().iter().copied())
        .collect();
    set.into_iter().collect()
}

/// Embeds every input mode and the target into `Ṽ = (∪ inputs) ∪ target`.
pub fn expand_to_union(
    inputs: &[&ModeGraph],
    target: &ModeGraph,
) -> Result<(Vec<ExpandedGraph>, ExpandedGraph), GraphError> {
    let union = union_nodes(inputs.iter().copied().chain(std::iter::once(target)));
    if union.is_empty() {
        return Err(GraphError::EmptyUnion);
    }
    let expanded = inputs
        .iter()
        .map(|m| ExpandedGraph::embed(m, &union))
        .collect();
    Ok((expanded, ExpandedGraph::embed(target, &union)))
}

//! GNN and MLP layers. Layers own no parameters: every weight block is passed
//! in as a tape variable, so the same code runs on generated and trained
//! weights alike.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{normalize_adjacency, Adjacency};
use crate::tensor::{Activation, Tape, Tensor, TensorError, Var};

/// Negative slope of the attention score nonlinearity.
pub const GAT_LEAKY_SLOPE: f64 = 0.2;

type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Gcn,
    Gin,
    Gat,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_dim: usize,
    pub out_dim: usize,
    #[serde(default = "one")]
    pub heads: usize,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub eps: f64,
}

fn one() -> usize {
    1
}

/// How a weight block is conditioned when generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockRole {
    /// Multiplies features; fan-in is the first dimension.
    Weight,
    /// Attention vector over one head's features; fan-in is its length.
    Attention,
    Bias,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: BlockRole,
}

impl BlockSpec {
    fn new(name: impl Into<String>, shape: Vec<usize>, role: BlockRole) -> Self {
        Self {
            name: name.into(),
            shape,
            role,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn fan_in(&self) -> usize {
        match self.role {
            BlockRole::Weight | BlockRole::Attention => self.shape[0],
            BlockRole::Bias => 1,
        }
    }
}

impl LayerSpec {
    pub fn new(kind: LayerKind, in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            kind,
            in_dim,
            out_dim,
            heads: 1,
            activation,
            eps: 0.0,
        }
    }

    pub fn gat(in_dim: usize, out_dim: usize, heads: usize, activation: Activation) -> Self {
        Self {
            heads,
            ..Self::new(LayerKind::Gat, in_dim, out_dim, activation)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| TensorError::Invalid { op: "layer_spec", msg };
        if self.in_dim == 0 || self.out_dim == 0 {
            return Err(bad(format!("{:?} layer has a zero dimension", self.kind)));
        }
        if self.kind == LayerKind::Gat && (self.heads == 0 || !self.out_dim.is_multiple_of(self.heads)) {
            return Err(bad(format!(
                "gat out_dim {} is not divisible by {} heads",
                self.out_dim, self.heads
            )));
        }
        if !self.eps.is_finite() {
            return Err(bad("gin eps must be finite".into()));
        }
        Ok(())
    }

    /// Weight blocks of this layer, sorted by name.
    pub fn blocks(&self) -> Vec<BlockSpec> {
        let (i, o) = (self.in_dim, self.out_dim);
        let mut out = match self.kind {
            LayerKind::Gcn | LayerKind::Mlp => vec![
                BlockSpec::new("W", vec![i, o], BlockRole::Weight),
                BlockSpec::new("b", vec![o], BlockRole::Bias),
            ],
            LayerKind::Gin => vec![
                BlockSpec::new("W1", vec![i, o], BlockRole::Weight),
                BlockSpec::new("W2", vec![o, o], BlockRole::Weight),
                BlockSpec::new("b1", vec![o], BlockRole::Bias),
                BlockSpec::new("b2", vec![o], BlockRole::Bias),
            ],
            LayerKind::Gat => {
                let k = o / self.heads.max(1);
                (0..self.heads)
                    .flat_map(|h| {
                        [
                            BlockSpec::new(format!("W{h}"), vec![i, k], BlockRole::Weight),
                            BlockSpec::new(format!("a_dst{h}"), vec![k], BlockRole::Attention),
                            BlockSpec::new(format!("a_src{h}"), vec![k], BlockRole::Attention),
                        ]
                    })
                    .collect()
            }
        };
        out.sort_by(|a, b| a.name.cmp(&b.name));
        out
    }

    pub fn param_count(&self) -> usize {
        self.blocks().iter().map(BlockSpec::numel).sum()
    }
}

/// Checks that consecutive layers chain (`out` of one is `in` of the next).
pub fn validate_stack(specs: &[LayerSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(TensorError::Invalid {
            op: "layer_stack",
            msg: "empty layer stack".into(),
        });
    }
    for s in specs {
        s.validate()?;
    }
    for (i, w) in specs.windows(2).enumerate() {
        if w[0].out_dim != w[1].in_dim {
            return Err(TensorError::Invalid {
                op: "layer_stack",
                msg: format!(
                    "layer {i} outputs {} features but layer {} expects {}",
                    w[0].out_dim,
                    i + 1,
                    w[1].in_dim
                ),
            });
        }
    }
    Ok(())
}

/// Named weight blocks for one layer, validated against its spec.
#[derive(Debug, Clone)]
pub struct LayerWeights<'t> {
    blocks: BTreeMap<String, Var<'t>>,
}

impl<'t> LayerWeights<'t> {
    pub fn new(spec: &LayerSpec, blocks: BTreeMap<String, Var<'t>>) -> Result<Self> {
        spec.validate()?;
        let expected = spec.blocks();
        if expected.len() != blocks.len() {
            return Err(TensorError::Invalid {
                op: "layer_weights",
                msg: format!(
                    "{:?} layer needs {} blocks, got {}",
                    spec.kind,
                    expected.len(),
                    blocks.len()
                ),
            });
        }
        for b in &expected {
            let v = blocks.get(&b.name).ok_or_else(|| TensorError::Invalid {
                op: "layer_weights",
                msg: format!("missing block {}", b.name),
            })?;
            if v.shape() != b.shape {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_weights",
                    left: b.shape.clone(),
                    right: v.shape(),
                });
            }
        }
        Ok(Self { blocks })
    }

    /// Records plain tensors on `tape`, as parameters when `trainable`.
    pub fn from_tensors(
        tape: &'t Tape,
        spec: &LayerSpec,
        tensors: &BTreeMap<String, Tensor>,
        trainable: bool,
    ) -> Result<Self> {
        let blocks = tensors
            .iter()
            .map(|(k, t)| {
                let v = if trainable {
                    tape.param(t)
                } else {
                    tape.constant(t)
                };
                (k.clone(), v)
            })
            .collect();
        Self::new(spec, blocks)
    }

    pub fn get(&self, name: &str) -> Var<'t> {
        self.blocks[name]
    }

    pub fn blocks(&self) -> &BTreeMap<String, Var<'t>> {
        &self.blocks
    }
}

/// Glorot-scaled random blocks for a directly trained layer; biases start at 0.
pub fn init_blocks<R: Rng + ?Sized>(spec: &LayerSpec, rng: &mut R) -> BTreeMap<String, Tensor> {
    spec.blocks()
        .into_iter()
        .map(|b| {
            let t = match b.role {
                BlockRole::Bias => Tensor::zeros(b.shape.clone()),
                BlockRole::Weight => {
                    let std = (2.0 / (b.shape[0] + b.shape[1]) as f64).sqrt();
                    Tensor::randn(b.shape.clone(), std, rng)
                }
                BlockRole::Attention => {
                    Tensor::randn(b.shape.clone(), 1.0 / (b.shape[0] as f64).sqrt(), rng)
                }
            };
            (b.name, t)
        })
        .collect()
}

/// Graph operators a layer may need, precomputed once per adjacency.
#[derive(Debug, Clone)]
pub struct GraphOps {
    /// Binary adjacency with self-loops.
    pub adj: Tensor,
    /// `D^{-1/2} A D^{-1/2}`.
    pub norm: Tensor,
}

impl GraphOps {
    pub fn new(a: &Adjacency) -> Self {
        Self {
            adj: a.to_tensor(),
            norm: normalize_adjacency(a),
        }
    }

    pub fn n(&self) -> usize {
        self.adj.rows()
    }
}

fn check_input(spec: &LayerSpec, n: usize, h: Var<'_>) -> Result<()> {
    let shape = h.shape();
    if shape.len() != 2 || shape[1] != spec.in_dim || (n > 0 && shape[0] != n) {
        return Err(TensorError::ShapeMismatch {
            op: "layer_input",
            left: vec![n, spec.in_dim],
            right: shape,
        });
    }
    Ok(())
}

/// `act(A_norm · H · W + b)`.
pub fn gcn_layer<'t>(
    a_norm: &Tensor,
    h: Var<'t>,
    w: &LayerWeights<'t>,
    spec: &LayerSpec,
) -> Result<Var<'t>> {
    check_input(spec, a_norm.rows(), h)?;
    let tape = h.tape();
    let a = tape.constant(a_norm);
    a.matmul(h)?
        .matmul(w.get("W"))?
        .add_bias(w.get("b"))?
        .activate(spec.activation)
}

/// `MLP₂((1+eps)·H + (A−I)·H)`; both MLP layers use the layer activation.
pub fn gin_layer<'t>(
    adj: &Tensor,
    h: Var<'t>,
    w: &LayerWeights<'t>,
    spec: &LayerSpec,
) -> Result<Var<'t>> {
    check_input(spec, adj.rows(), h)?;
    let n = adj.rows();
    let mut agg = adj.clone();
    for u in 0..n {
        let x = agg.get(u, u);
        agg.set(u, u, x + spec.eps);
    }
    let tape = h.tape();
    let mixed = tape.constant(&agg).matmul(h)?;
    mixed
        .matmul(w.get("W1"))?
        .add_bias(w.get("b1"))?
        .activate(spec.activation)?
        .matmul(w.get("W2"))?
        .add_bias(w.get("b2"))?
        .activate(spec.activation)
}

/// Per-head attention matrices (rows are distributions over neighbors).
pub fn gat_attention<'t>(
    adj: &Tensor,
    h: Var<'t>,
    w: &LayerWeights<'t>,
    spec: &LayerSpec,
) -> Result<Vec<(Var<'t>, Var<'t>)>> {
    check_input(spec, adj.rows(), h)?;
    let n = adj.rows();
    let k = spec.out_dim / spec.heads;
    let tape = h.tape();
    (0..spec.heads)
        .map(|head| {
            let wh = h.matmul(w.get(&format!("W{head}")))?;
            let src = wh.matmul(w.get(&format!("a_src{head}")).reshape(&[k, 1])?)?;
            let dst = wh.matmul(w.get(&format!("a_dst{head}")).reshape(&[k, 1])?)?;
            let scores = tape
                .outer_add(src.reshape(&[n])?, dst.reshape(&[n])?)?
                .activate(Activation::LeakyRelu(GAT_LEAKY_SLOPE))?;
            Ok((scores.row_softmax(adj)?, wh))
        })
        .collect()
}

/// Multi-head attention with heads concatenated, then the activation.
pub fn gat_layer<'t>(
    adj: &Tensor,
    h: Var<'t>,
    w: &LayerWeights<'t>,
    spec: &LayerSpec,
) -> Result<Var<'t>> {
    let heads = gat_attention(adj, h, w, spec)?;
    let outs = heads
        .into_iter()
        .map(|(alpha, wh)| alpha.matmul(wh))
        .collect::<Result<Vec<_>>>()?;
    let joined = if outs.len() == 1 {
        outs[0]
    } else {
        h.tape().concat_cols(&outs)?
    };
    joined.activate(spec.activation)
}

/// Row-wise `act(H · W + b)`.
pub fn mlp_layer<'t>(
    h: Var<'t>,
    w: &LayerWeights<'t>,
    activation: Activation,
) -> Result<Var<'t>> {
    h.matmul(w.get("W"))?
        .add_bias(w.get("b"))?
        .activate(activation)
}

/// Applies an MLP stack; the last layer is always linear.
pub fn mlp_forward<'t>(
    h: Var<'t>,
    specs: &[LayerSpec],
    weights: &[LayerWeights<'t>],
) -> Result<Var<'t>> {
    validate_stack(specs)?;
    check_lengths(specs, weights)?;
    let mut x = h;
    for (i, (s, w)) in specs.iter().zip(weights).enumerate() {
        check_input(s, 0, x)?;
        let act = if i + 1 == specs.len() {
            Activation::Identity
        } else {
            s.activation
        };
        x = mlp_layer(x, w, act)?;
    }
    Ok(x)
}

fn check_lengths(specs: &[LayerSpec], weights: &[LayerWeights<'_>]) -> Result<()> {
    if specs.len() != weights.len() {
        return Err(TensorError::Invalid {
            op: "layer_stack",
            msg: format!("{} layer specs but {} weight sets", specs.len(), weights.len()),
        });
    }
    Ok(())
}

pub fn layer_forward<'t>(
    spec: &LayerSpec,
    ops: &GraphOps,
    h: Var<'t>,
    w: &LayerWeights<'t>,
) -> Result<Var<'t>> {
    match spec.kind {
        LayerKind::Gcn => gcn_layer(&ops.norm, h, w, spec),
        LayerKind::Gin => gin_layer(&ops.adj, h, w, spec),
        LayerKind::Gat => gat_layer(&ops.adj, h, w, spec),
        LayerKind::Mlp => {
            check_input(spec, ops.n(), h)?;
            mlp_layer(h, w, spec.activation)
        }
    }
}

/// Runs a stack of graph layers over one graph.
pub fn gnn_forward<'t>(
    specs: &[LayerSpec],
    ops: &GraphOps,
    h: Var<'t>,
    weights: &[LayerWeights<'t>],
) -> Result<Var<'t>> {
    validate_stack(specs)?;
    check_lengths(specs, weights)?;
    let mut x = h;
    for (s, w) in specs.iter().zip(weights) {
        x = layer_forward(s, ops, x, w)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn weights<'t>(tape: &'t Tape, spec: &LayerSpec, blocks: &[(&str, Tensor)]) -> LayerWeights<'t> {
        let map = blocks
            .iter()
            .map(|(k, t)| (k.to_string(), t.clone()))
            .collect();
        LayerWeights::from_tensors(tape, spec, &map, false).unwrap()
    }

    #[test]
    fn block_layout() {
        let s = LayerSpec::new(LayerKind::Gcn, 2, 3, Activation::Relu);
        let names: Vec<_> = s.blocks().into_iter().map(|b| (b.name, b.shape)).collect();
        assert_eq!(names, vec![("W".into(), vec![2, 3]), ("b".into(), vec![3])]);
        assert_eq!(s.param_count(), 9);
        let g = LayerSpec::gat(4, 6, 2, Activation::Relu);
        assert_eq!(g.param_count(), 2 * (4 * 3 + 3 + 3));
        assert!(LayerSpec::gat(4, 5, 2, Activation::Relu).validate().is_err());
    }

    #[test]
    fn gcn_identity_and_clique() {
        let spec = LayerSpec::new(LayerKind::Gcn, 1, 1, Activation::Identity);
        let tape = Tape::new();
        let w = weights(
            &tape,
            &spec,
            &[("W", Tensor::eye(1)), ("b", Tensor::zeros(vec![1]))],
        );
        let h = tape.constant(&Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap());
        let same = gcn_layer(&Tensor::eye(2), h, &w, &spec).unwrap();
        assert_eq!(same.value().data(), &[1.0, 3.0]);
        let clique = Tensor::from_fn(2, 2, |_, _| 0.5);
        let out = gcn_layer(&clique, h, &w, &spec).unwrap();
        assert_eq!(out.value().data(), &[2.0, 2.0]);
    }

    #[test]
    fn gin_identity_and_path() {
        let spec = LayerSpec::new(LayerKind::Gin, 1, 1, Activation::Identity);
        let tape = Tape::new();
        let w = weights(
            &tape,
            &spec,
            &[
                ("W1", Tensor::eye(1)),
                ("W2", Tensor::eye(1)),
                ("b1", Tensor::zeros(vec![1])),
                ("b2", Tensor::zeros(vec![1])),
            ],
        );
        let h = tape.constant(&Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap());
        let alone = gin_layer(&Tensor::eye(2), h, &w, &spec).unwrap();
        assert_eq!(alone.value().data(), &[1.0, 2.0]);
        let path = Tensor::ones(vec![2, 2]);
        assert_eq!(gin_layer(&path, h, &w, &spec).unwrap().value().data(), &[3.0, 3.0]);
    }

    #[test]
    fn gat_single_node_and_disconnected() {
        let spec = LayerSpec::gat(2, 2, 1, Activation::Identity);
        let tape = Tape::new();
        let w_mat = Tensor::from_rows(&[&[1.0, 2.0], &[0.5, -1.0]]);
        let w = weights(
            &tape,
            &spec,
            &[
                ("W0", w_mat.clone()),
                ("a_src0", Tensor::new(vec![2], vec![0.3, -0.2]).unwrap()),
                ("a_dst0", Tensor::new(vec![2], vec![1.0, 0.4]).unwrap()),
            ],
        );
        let x = Tensor::from_rows(&[&[1.0, -1.0], &[2.0, 0.5]]);
        let out = gat_layer(&Tensor::eye(2), tape.constant(&x), &w, &spec).unwrap();
        assert!(out.value().max_abs_diff(&x.matmul(&w_mat).unwrap()) < 1e-15);
        let alpha = &gat_attention(&Tensor::eye(2), tape.constant(&x), &w, &spec).unwrap()[0].0;
        assert_eq!(alpha.value(), Tensor::eye(2));
    }

    #[test]
    fn mlp_affine_and_identity() {
        let spec = LayerSpec::new(LayerKind::Mlp, 1, 1, Activation::Relu);
        let tape = Tape::new();
        let w = weights(
            &tape,
            &spec,
            &[
                ("W", Tensor::new(vec![1, 1], vec![2.0]).unwrap()),
                ("b", Tensor::new(vec![1], vec![1.0]).unwrap()),
            ],
        );
        let h = tape.constant(&Tensor::new(vec![1, 1], vec![3.0]).unwrap());
        let out = mlp_forward(h, std::slice::from_ref(&spec), &[w]).unwrap();
        assert_eq!(out.item(), 7.0);

        let id = weights(
            &tape,
            &spec,
            &[("W", Tensor::eye(1)), ("b", Tensor::zeros(vec![1]))],
        );
        let neg = tape.constant(&Tensor::new(vec![2, 1], vec![-1.0, 4.0]).unwrap());
        // last layer is linear even though the spec says relu
        let out = mlp_forward(neg, &[spec], &[id]).unwrap();
        assert_eq!(out.value().data(), &[-1.0, 4.0]);
    }

    #[test]
    fn stack_chain_break_is_rejected() {
        let a = LayerSpec::new(LayerKind::Mlp, 2, 3, Activation::Relu);
        let b = LayerSpec::new(LayerKind::Mlp, 4, 1, Activation::Relu);
        assert!(validate_stack(&[a, b]).is_err());
        assert!(validate_stack(&[]).is_err());
    }

    #[test]
    fn wrong_block_shape_is_rejected() {
        let spec = LayerSpec::new(LayerKind::Gcn, 2, 2, Activation::Relu);
        let tape = Tape::new();
        let mut map = BTreeMap::new();
        map.insert("W".to_string(), Tensor::zeros(vec![2, 3]));
        map.insert("b".to_string(), Tensor::zeros(vec![2]));
        assert!(LayerWeights::from_tensors(&tape, &spec, &map, false).is_err());
    }
}

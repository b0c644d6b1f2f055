//! Hypernetworks: MLPs mapping a mode's meta vector to the flat weight
//! vector of an encoder or decoder, plus the schema that slices it.

mod checkpoint;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointError};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::layers::{validate_stack, BlockRole, LayerSpec, LayerWeights};
use crate::tensor::{Activation, Tape, Tensor, TensorError, Var};

type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, PartialEq)]
pub struct SchemaEntry {
    /// `l{layer}.{block}`.
    pub name: String,
    pub layer: usize,
    pub block: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    /// Multiplier applied to the raw hypernetwork output for this block.
    pub scale: f64,
}

impl SchemaEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Ordered layout of every weight block of one encoder or decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSchema {
    layers: Vec<LayerSpec>,
    entries: Vec<SchemaEntry>,
    total_size: usize,
}

/// Orders blocks by layer index, then block name.
pub fn build_schema(specs: &[LayerSpec]) -> Result<WeightSchema> {
    validate_stack(specs)?;
    let mut entries = Vec::new();
    let mut offset = 0;
    for (i, spec) in specs.iter().enumerate() {
        for b in spec.blocks() {
            let scale = match b.role {
                BlockRole::Bias => 1.0,
                BlockRole::Weight | BlockRole::Attention => 1.0 / (b.fan_in() as f64).sqrt(),
            };
            let numel = b.numel();
            entries.push(SchemaEntry {
                name: format!("l{i}.{}", b.name),
                layer: i,
                block: b.name,
                shape: b.shape,
                offset,
                scale,
            });
            offset += numel;
        }
    }
    Ok(WeightSchema {
        layers: specs.to_vec(),
        entries,
        total_size: offset,
    })
}

impl WeightSchema {
    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn entries(&self) -> &[SchemaEntry] {
        &self.entries
    }

    pub fn total_size(&self) -> usize {
        self.total_size
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperConfig {
    pub hidden: usize,
    /// Number of linear layers, including the output head.
    pub depth: usize,
    pub activation: Activation,
}

impl Default for HyperConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            depth: 3,
            activation: Activation::Tanh,
        }
    }
}

/// Shape of one hypernetwork `γ`. Parameter values live outside, so the
/// same descriptor serves trained, frozen and finite-difference copies.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperNet {
    meta_dim: usize,
    schema: WeightSchema,
    config: HyperConfig,
}

/// Generated weights for one network, per layer.
#[derive(Debug, Clone)]
pub struct GeneratedWeights<'t> {
    pub flat: Var<'t>,
    pub layers: Vec<LayerWeights<'t>>,
}

impl HyperNet {
    pub fn new(meta_dim: usize, schema: WeightSchema, config: HyperConfig) -> Result<Self> {
        if meta_dim == 0 || config.hidden == 0 || config.depth == 0 {
            return Err(TensorError::Invalid {
                op: "hypernet",
                msg: format!(
                    "meta_dim {meta_dim}, hidden {}, depth {} must all be positive",
                    config.hidden, config.depth
                ),
            });
        }
        Ok(Self {
            meta_dim,
            schema,
            config,
        })
    }

    pub fn meta_dim(&self) -> usize {
        self.meta_dim
    }

    pub fn schema(&self) -> &WeightSchema {
        &self.schema
    }

    fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.meta_dim];
        dims.extend(std::iter::repeat_n(self.config.hidden, self.config.depth - 1));
        dims.push(self.schema.total_size());
        dims
    }

    /// `(name, shape)` of every trainable block, in parameter order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.dims()
            .windows(2)
            .enumerate()
            .flat_map(|(i, w)| {
                [
                    (format!("h{i}.W"), vec![w[0], w[1]]),
                    (format!("h{i}.b"), vec![w[1]]),
                ]
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// Hidden layers are Glorot-scaled; the output layer is drawn from
    /// N(0, 1/fan_in) so that, combined with the per-block schema scale,
    /// generated layers start near Glorot scale. Biases start at zero.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<(String, Tensor)> {
        let depth = self.config.depth;
        self.param_shapes()
            .into_iter()
            .enumerate()
            .map(|(k, (name, shape))| {
                let t = if shape.len() == 1 {
                    Tensor::zeros(shape)
                } else if k / 2 + 1 == depth {
                    Tensor::randn(shape.clone(), 1.0 / (shape[0] as f64).sqrt(), rng)
                } else {
                    let std = (2.0 / (shape[0] + shape[1]) as f64).sqrt();
                    Tensor::randn(shape, std, rng)
                };
                (name, t)
            })
            .collect()
    }

    /// Runs the hypernetwork on `meta` with parameters `gamma` (ordered as
    /// [`HyperNet::param_shapes`]) and slices the result into layer weights.
    pub fn generate<'t>(
        &self,
        tape: &'t Tape,
        gamma: &[Var<'t>],
        meta: &[f64],
    ) -> Result<GeneratedWeights<'t>> {
        if meta.len() != self.meta_dim {
            return Err(TensorError::Invalid {
                op: "generate_weights",
                msg: format!(
                    "meta vector has length {}, expected {}",
                    meta.len(),
                    self.meta_dim
                ),
            });
        }
        if gamma.len() != 2 * self.config.depth {
            return Err(TensorError::Invalid {
                op: "generate_weights",
                msg: format!("{} parameter blocks, expected {}", gamma.len(), 2 * self.config.depth),
            });
        }
        let m = Tensor::new(vec![1, self.meta_dim], meta.to_vec())?;
        let mut x = tape.constant(&m);
        for (i, pair) in gamma.chunks(2).enumerate() {
            x = x.matmul(pair[0])?.add_bias(pair[1])?;
            if i + 1 < self.config.depth {
                x = x.activate(self.config.activation)?;
            }
        }
        let flat = x.reshape(&[self.schema.total_size()])?;
        let mut layers = Vec::with_capacity(self.schema.layers.len());
        let mut entries = self.schema.entries.iter().peekable();
        for (i, spec) in self.schema.layers.iter().enumerate() {
            let mut blocks = std::collections::BTreeMap::new();
            while let Some(e) = entries.next_if(|e| e.layer == i) {
                let block = flat.slice(e.offset, &e.shape)?;
                let block = if e.scale == 1.0 {
                    block
                } else {
                    block.scale(e.scale)?
                };
                blocks.insert(e.block.clone(), block);
            }
            layers.push(LayerWeights::new(spec, blocks)?);
        }
        Ok(GeneratedWeights { flat, layers })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::LayerKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schema_single_gcn() {
        let s = build_schema(&[LayerSpec::new(LayerKind::Gcn, 2, 3, Activation::Relu)]).unwrap();
        let names: Vec<_> = s.entries().iter().map(|e| (e.name.as_str(), e.shape.clone())).collect();
        assert_eq!(names, vec![("l0.W", vec![2, 3]), ("l0.b", vec![3])]);
        assert_eq!(s.total_size(), 9);
        assert!(build_schema(&[]).is_err());
    }

    #[test]
    fn generation_is_deterministic_and_meta_sensitive() {
        let schema = build_schema(&[LayerSpec::new(LayerKind::Gcn, 1, 2, Activation::Relu)]).unwrap();
        let net = HyperNet::new(3, schema, HyperConfig { hidden: 8, ..Default::default() }).unwrap();
        let params = net.init_params(&mut ChaCha8Rng::seed_from_u64(1));
        let run = |meta: &[f64]| {
            let tape = Tape::new();
            let vars: Vec<_> = params.iter().map(|(_, t)| tape.constant(t)).collect();
            net.generate(&tape, &vars, meta).unwrap().flat.value()
        };
        let a = run(&[1.0, 0.0, 0.5]);
        assert_eq!(a, run(&[1.0, 0.0, 0.5]));
        assert!(a.max_abs_diff(&run(&[1.0, 0.0, 0.6])) > 0.0);
        let tape = Tape::new();
        let vars: Vec<_> = params.iter().map(|(_, t)| tape.constant(t)).collect();
        assert!(net.generate(&tape, &vars, &[1.0]).is_err());
    }

    #[test]
    fn param_count_matches_shapes() {
        let schema = build_schema(&[LayerSpec::new(LayerKind::Mlp, 2, 2, Activation::Relu)]).unwrap();
        let net = HyperNet::new(4, schema, HyperConfig { hidden: 5, depth: 3, ..Default::default() }).unwrap();
        // 4->5->5->6
        assert_eq!(net.param_count(), 4 * 5 + 5 + 5 * 5 + 5 + 5 * 6 + 6);
    }
}

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Ablation, ModelConfig, ModelError};
use crate::hypernet::{build_schema, Checkpoint, HyperNet};
use crate::layers::{init_blocks, LayerSpec, LayerWeights};
use crate::tensor::{Tape, Tensor, Var};

/// The only places trainable parameters may live.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    GammaE,
    GammaD,
    Phi,
}

impl ParamGroup {
    pub fn prefix(self) -> &'static str {
        match self {
            ParamGroup::GammaE => "gamma_e",
            ParamGroup::GammaD => "gamma_d",
            ParamGroup::Phi => "phi",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub group: ParamGroup,
    /// Fully qualified, e.g. `gamma_d.h2.W` or `phi.l0.b`.
    pub name: String,
    pub value: Tensor,
}

/// Hypernetworks, optional shared head and link embedder, with their
/// parameters in one ordered registry.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    d: usize,
    meta_dim: usize,
    enc: HyperNet,
    dec: HyperNet,
    params: Vec<Param>,
    enc_params: std::ops::Range<usize>,
    dec_params: std::ops::Range<usize>,
    head_params: std::ops::Range<usize>,
    phi_params: std::ops::Range<usize>,
}

/// Parameters recorded on one tape.
pub struct Bound<'t> {
    pub vars: Vec<Var<'t>>,
    pub gamma_e: Vec<Var<'t>>,
    pub gamma_d: Vec<Var<'t>>,
    pub head: Option<Vec<LayerWeights<'t>>>,
    pub phi: Vec<LayerWeights<'t>>,
}

/// Directly trained blocks of a layer stack, named `l{i}.{block}`.
fn stack_blocks(specs: &[LayerSpec], rng: &mut ChaCha8Rng) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    for (i, s) in specs.iter().enumerate() {
        for (b, t) in init_blocks(s, rng) {
            out.push((format!("l{i}.{b}"), t));
        }
    }
    out
}

impl Model {
    pub fn new(config: ModelConfig, d: usize, meta_dim: usize, seed: u64) -> Result<Self, ModelError> {
        config.validate(d, meta_dim)?;
        let hyper_meta = config.meta_len(meta_dim);
        let enc = HyperNet::new(hyper_meta, build_schema(&config.encoder)?, config.hyper_e)?;
        let dec_layers: Vec<LayerSpec> = if config.ablation == Ablation::Hypergnn1 {
            config.decoder.clone()
        } else {
            config.decoder.iter().chain(&config.head).cloned().collect()
        };
        let dec = HyperNet::new(hyper_meta, build_schema(&dec_layers)?, config.hyper_d)?;

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut push = |group: ParamGroup, list: Vec<(String, Tensor)>| {
            let start = params.len();
            params.extend(list.into_iter().map(|(n, t)| Param {
                group,
                name: format!("{}.{n}", group.prefix()),
                value: t,
            }));
            start..params.len()
        };
        let enc_params = push(ParamGroup::GammaE, enc.init_params(&mut rng));
        let dec_params = push(ParamGroup::GammaD, dec.init_params(&mut rng));
        let head_list = if config.ablation == Ablation::Hypergnn1 {
            stack_blocks(&config.head, &mut rng)
                .into_iter()
                .map(|(n, t)| (format!("head.{n}"), t))
                .collect()
        } else {
            Vec::new()
        };
        let head_params = push(ParamGroup::GammaD, head_list);
        let phi_params = push(ParamGroup::Phi, stack_blocks(&config.linkpred, &mut rng));
        Ok(Self {
            config,
            d,
            meta_dim,
            enc,
            dec,
            params,
            enc_params,
            dec_params,
            head_params,
            phi_params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn meta_dim(&self) -> usize {
        self.meta_dim
    }

    pub fn encoder_net(&self) -> &HyperNet {
        &self.enc
    }

    pub fn decoder_net(&self) -> &HyperNet {
        &self.dec
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Whether a group receives updates under the configured ablation.
    pub fn is_trained(&self, group: ParamGroup) -> bool {
        !(self.config.ablation == Ablation::Hypergnn && group == ParamGroup::GammaE)
    }

    /// Records all parameters on `tape`; with `track`, trained groups become
    /// gradient-receiving leaves.
    pub fn bind<'t>(&self, tape: &'t Tape, track: bool) -> Result<Bound<'t>, ModelError> {
        let vars: Vec<Var<'t>> = self
            .params
            .iter()
            .map(|p| {
                if track && self.is_trained(p.group) {
                    tape.param(&p.value)
                } else {
                    tape.constant(&p.value)
                }
            })
            .collect();
        self.bind_vars(vars)
    }

    /// Assembles a [`Bound`] from one var per parameter, in registry order.
    pub fn bind_vars<'t>(&self, vars: Vec<Var<'t>>) -> Result<Bound<'t>, ModelError> {
        if vars.len() != self.params.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameter vars, got {}",
                self.params.len(),
                vars.len()
            )));
        }
        let weights = |range: &std::ops::Range<usize>, specs: &[LayerSpec]| {
            let mut out = Vec::with_capacity(specs.len());
            let mut k = range.start;
            for s in specs {
                let mut blocks = std::collections::BTreeMap::new();
                for b in s.blocks() {
                    blocks.insert(b.name, vars[k]);
                    k += 1;
                }
                out.push(LayerWeights::new(s, blocks)?);
            }
            Ok::<_, ModelError>(out)
        };
        let head = if self.head_params.is_empty() {
            None
        } else {
            Some(weights(&self.head_params, &self.config.head)?)
        };
        let phi = weights(&self.phi_params, &self.config.linkpred)?;
        Ok(Bound {
            gamma_e: vars[self.enc_params.clone()].to_vec(),
            gamma_d: vars[self.dec_params.clone()].to_vec(),
            head,
            phi,
            vars,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config_hash: self.config.hash(),
            blocks: self
                .params
                .iter()
                .map(|p| (p.name.clone(), p.value.clone()))
                .collect(),
        }
    }

    /// Replaces parameter values; names, shapes and config hash must match.
    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<(), ModelError> {
        if ck.config_hash != self.config.hash() {
            return Err(ModelError::Config(format!(
                "checkpoint was written for config {} but this run uses {}",
                ck.config_hash,
                self.config.hash()
            )));
        }
        if ck.blocks.len() != self.params.len() {
            return Err(ModelError::Config(format!(
                "checkpoint has {} blocks, model has {}",
                ck.blocks.len(),
                self.params.len()
            )));
        }
        for (p, (name, t)) in self.params.iter().zip(&ck.blocks) {
            if &p.name != name || p.value.shape() != t.shape() {
                return Err(ModelError::Config(format!(
                    "checkpoint block {name} {:?} does not match {} {:?}",
                    t.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
        }
        for (p, (_, t)) in self.params.iter_mut().zip(&ck.blocks) {
            p.value = t.clone();
        }
        Ok(())
    }
}

/// Trainable parameter count for a configuration; depends only on the
/// feature count and meta length, never on how many modes exist.
pub fn trainable_param_count(config: &ModelConfig, d: usize, meta_dim: usize) -> Result<usize, ModelError> {
    Ok(Model::new(config.clone(), d, meta_dim, 0)?.param_count())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_holds_only_known_groups_and_names_are_unique() {
        let m = Model::new(ModelConfig::default(), 1, 3, 0).unwrap();
        let mut names: Vec<_> = m.params().iter().map(|p| p.name.as_str()).collect();
        for p in m.params() {
            assert!(p.name.starts_with(p.group.prefix()), "{}", p.name);
        }
        let n = names.len();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), n);
    }

    #[test]
    fn checkpoint_round_trip_and_hash_guard() {
        let m = Model::new(ModelConfig::default(), 1, 3, 5).unwrap();
        let ck = m.to_checkpoint();
        let mut other = Model::new(ModelConfig::default(), 1, 3, 6).unwrap();
        other.load_checkpoint(&ck).unwrap();
        assert_eq!(other.params(), m.params());
        let mut cfg = ModelConfig::default();
        cfg.rho = 0.5;
        let mut changed = Model::new(cfg, 1, 3, 5).unwrap();
        assert!(changed.load_checkpoint(&ck).is_err());
    }

    #[test]
    fn shared_head_lives_in_decoder_group() {
        let mut cfg = ModelConfig::default();
        cfg.ablation = Ablation::Hypergnn1;
        let m = Model::new(cfg, 1, 3, 0).unwrap();
        assert!(m.params().iter().any(|p| p.name.starts_with("gamma_d.head.")));
        let tape = Tape::new();
        assert!(m.bind(&tape, false).unwrap().head.is_some());
    }
}

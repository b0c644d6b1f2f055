use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ModelError;
use crate::hypernet::HyperConfig;
use crate::layers::{validate_stack, LayerKind, LayerSpec};
use crate::tensor::Activation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Mean,
    Sum,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Mse,
    Mae,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    /// One input mode; the encoder hypernetwork is frozen.
    Hypergnn,
    /// The decoder's MLP head is a shared trained parameter, not generated.
    #[serde(rename = "hypergnn_1")]
    Hypergnn1,
    /// Hypernetworks see only the leading mode-type one-hot of the meta.
    #[serde(rename = "hypergnn_2")]
    Hypergnn2,
    /// Trained as `Full`, evaluated from the first source mode only.
    SingleInputEval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: Vec<LayerSpec>,
    /// GNN part of the decoder.
    pub decoder: Vec<LayerSpec>,
    /// Row-wise MLP prediction head of the decoder.
    pub head: Vec<LayerSpec>,
    pub linkpred: Vec<LayerSpec>,
    pub hyper_e: HyperConfig,
    pub hyper_d: HyperConfig,
    pub pooling: Pooling,
    pub rho: f64,
    pub tau: f64,
    pub loss: LossKind,
    pub ablation: Ablation,
    /// Length of the mode-type one-hot segment at the front of each meta.
    pub type_dims: usize,
    /// Feed predictions to the link term as data, so that term trains the
    /// link predictor only.
    pub detach_link_input: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::standard(LayerKind::Gcn, 1, 32, 16)
    }
}

impl ModelConfig {
    /// Two graph layers per encoder and decoder, a two-layer head and a
    /// two-layer link embedder. GAT layers get four heads.
    pub fn standard(kind: LayerKind, d: usize, hidden: usize, latent: usize) -> Self {
        let relu = Activation::Relu;
        let g = |i, o, act| match kind {
            LayerKind::Gat => LayerSpec::gat(i, o, 4, act),
            k => LayerSpec::new(k, i, o, act),
        };
        Self {
            encoder: vec![g(d, hidden, relu), g(hidden, latent, relu)],
            decoder: vec![g(latent, hidden, relu), g(hidden, hidden, relu)],
            head: vec![
                LayerSpec::new(LayerKind::Mlp, hidden, hidden, relu),
                LayerSpec::new(LayerKind::Mlp, hidden, d, Activation::Identity),
            ],
            linkpred: vec![g(d, hidden, relu), g(hidden, latent, Activation::Identity)],
            hyper_e: HyperConfig::default(),
            hyper_d: HyperConfig::default(),
            pooling: Pooling::Mean,
            rho: 1.0,
            tau: 0.5,
            loss: LossKind::Mse,
            ablation: Ablation::Full,
            type_dims: 0,
            detach_link_input: true,
        }
    }

    pub fn validate(&self, d: usize, meta_dim: usize) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return bad(format!("rho = {} must be finite and non-negative", self.rho));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad(format!("tau = {} must lie in (0, 1)", self.tau));
        }
        for (name, stack) in [
            ("encoder", &self.encoder),
            ("decoder", &self.decoder),
            ("head", &self.head),
            ("linkpred", &self.linkpred),
        ] {
            validate_stack(stack).map_err(|e| ModelError::Config(format!("{name}: {e}")))?;
        }
        if self.head.iter().any(|s| s.kind != LayerKind::Mlp) {
            return bad("head layers must be mlp layers".into());
        }
        if [&self.encoder, &self.decoder, &self.linkpred]
            .iter()
            .any(|s| s.iter().any(|l| l.kind == LayerKind::Mlp))
        {
            return bad("encoder, decoder and linkpred stacks hold graph layers only".into());
        }
        let chain = [
            ("encoder input", self.encoder[0].in_dim, d),
            ("decoder input", self.decoder[0].in_dim, self.encoder.last().unwrap().out_dim),
            ("head input", self.head[0].in_dim, self.decoder.last().unwrap().out_dim),
            ("head output", self.head.last().unwrap().out_dim, d),
            ("linkpred input", self.linkpred[0].in_dim, d),
        ];
        for (what, got, want) in chain {
            if got != want {
                return bad(format!("{what} width is {got}, expected {want}"));
            }
        }
        if self.ablation == Ablation::Hypergnn2 && !(1..=meta_dim).contains(&self.type_dims) {
            return bad(format!(
                "hypergnn_2 needs type_dims in 1..={meta_dim}, got {}",
                self.type_dims
            ));
        }
        Ok(())
    }

    /// Length of the meta vector the hypernetworks actually receive.
    pub fn meta_len(&self, meta_dim: usize) -> usize {
        match self.ablation {
            Ablation::Hypergnn2 => self.type_dims,
            _ => meta_dim,
        }
    }

    pub fn effective_meta<'a>(&self, meta: &'a [f64]) -> &'a [f64] {
        &meta[..self.meta_len(meta.len()).min(meta.len())]
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

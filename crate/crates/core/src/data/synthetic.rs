//! Synthetic mode families whose transformation is fully determined by the
//! meta vector.
//!
//! Every sample `i` has a latent node field `base_i = f_i(cluster(u)) +
//! jitter` shared by all modes. Mode `j` observes `scale(m_j)·base_i +
//! shift(m_j) + N(0, σ²)` on every node of the universe, while its graph
//! covers a node subset with stochastic-block edges (same clusters in every
//! mode). Meta vectors are `[one-hot mode type | numeric features]`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{invalid, DataError, Dataset};
use crate::graph::{Adjacency, ModeGraph, ModeSpec};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthMode {
    pub id: String,
    pub mode_type: usize,
    pub features: Vec<f64>,
    #[serde(default = "full")]
    pub node_fraction: f64,
    pub edge_density: f64,
}

fn full() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mixing {
    Identity,
    /// `scale = scale0 + scale_coef·features`, `shift = shift0 + shift_coef·features`.
    Affine {
        scale0: f64,
        scale_coef: Vec<f64>,
        shift0: f64,
        shift_coef: Vec<f64>,
    },
}

impl Mixing {
    pub fn coefficients(&self, features: &[f64]) -> (f64, f64) {
        match self {
            Mixing::Identity => (1.0, 0.0),
            Mixing::Affine {
                scale0,
                scale_coef,
                shift0,
                shift_coef,
            } => {
                let dot = |c: &[f64]| c.iter().zip(features).map(|(a, b)| a * b).sum::<f64>();
                (scale0 + dot(scale_coef), shift0 + dot(shift_coef))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub p: usize,
    pub n: usize,
    pub d: usize,
    pub clusters: usize,
    /// Expected share of edges that cross clusters.
    pub cross_ratio: f64,
    /// Std of each node's deviation from its cluster factor.
    pub jitter: f64,
    /// σ of the additive observation noise.
    pub noise_std: f64,
    pub type_dims: usize,
    pub modes: Vec<SynthMode>,
    pub mixing: Mixing,
}

/// What the generator knows but the dataset does not show.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SyntheticTruth {
    pub clusters: Vec<usize>,
    /// Per mode, in config order.
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
    /// Noise-free latent field per sample (`p × d`).
    #[serde(skip)]
    pub base: Vec<Tensor>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self::overfit()
    }
}

impl SyntheticConfig {
    fn affine(features: usize) -> Mixing {
        Mixing::Affine {
            scale0: 0.5,
            scale_coef: vec![1.5; features],
            shift0: -0.5,
            shift_coef: vec![1.0; features],
        }
    }

    /// A generic family of `modes` modes with alternating types.
    pub fn small(p: usize, n: usize, modes: usize) -> Self {
        Self {
            p,
            n,
            d: 1,
            clusters: 2.min(p.max(1)),
            cross_ratio: 0.1,
            jitter: 0.1,
            noise_std: 0.0,
            type_dims: 2,
            modes: (0..modes)
                .map(|j| SynthMode {
                    id: format!("m{j}"),
                    mode_type: j % 2,
                    features: vec![j as f64 / modes.max(1) as f64],
                    node_fraction: if j == 0 { 1.0 } else { 0.7 },
                    edge_density: 0.4,
                })
                .collect(),
            mixing: Self::affine(1),
        }
    }

    /// Two inputs and two targets over one fully shared node set, no noise.
    pub fn overfit() -> Self {
        let mode = |id: &str, t: usize, f: f64| SynthMode {
            id: id.into(),
            mode_type: t,
            features: vec![f],
            node_fraction: 1.0,
            edge_density: 0.35,
        };
        Self {
            p: 12,
            n: 32,
            d: 1,
            clusters: 3,
            cross_ratio: 0.1,
            jitter: 0.05,
            noise_std: 0.0,
            type_dims: 2,
            modes: vec![
                mode("in_a", 0, 0.2),
                mode("in_b", 0, 0.8),
                mode("out_a", 1, 0.3),
                mode("out_b", 1, 0.7),
            ],
            mixing: Self::affine(1),
        }
    }

    /// Two source modes and a line of target modes whose numeric feature
    /// spans `[0, 1]`; `targets` should be odd so the middle one is interior.
    pub fn family(noise_std: f64, targets: usize) -> Self {
        let mut modes = vec![
            SynthMode {
                id: "src_a".into(),
                mode_type: 0,
                features: vec![0.1],
                node_fraction: 1.0,
                edge_density: 0.35,
            },
            SynthMode {
                id: "src_b".into(),
                mode_type: 0,
                features: vec![0.9],
                node_fraction: 0.8,
                edge_density: 0.35,
            },
        ];
        for t in 0..targets {
            modes.push(SynthMode {
                id: format!("tgt_{t}"),
                mode_type: 1,
                features: vec![t as f64 / (targets.max(2) - 1) as f64],
                node_fraction: 0.8,
                edge_density: 0.35,
            });
        }
        Self {
            p: 12,
            n: 24,
            d: 1,
            clusters: 3,
            cross_ratio: 0.1,
            jitter: 0.05,
            noise_std,
            type_dims: 2,
            modes,
            mixing: Mixing::Affine {
                scale0: 0.4,
                scale_coef: vec![1.6],
                shift0: -0.8,
                shift_coef: vec![1.6],
            },
        }
    }

    pub fn meta_dim(&self) -> usize {
        self.type_dims + self.modes.first().map_or(0, |m| m.features.len())
    }

    pub fn meta_of(&self, mode: &SynthMode) -> Vec<f64> {
        let mut meta = vec![0.0; self.type_dims];
        meta[mode.mode_type] = 1.0;
        meta.extend_from_slice(&mode.features);
        meta
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.p == 0 || self.n == 0 || self.d == 0 {
            return Err(invalid("p, n and d must be positive"));
        }
        if self.clusters == 0 || self.clusters > self.p {
            return Err(invalid(format!("clusters must lie in 1..={}", self.p)));
        }
        if !(self.noise_std >= 0.0) || !(self.jitter >= 0.0) {
            return Err(invalid("noise_std and jitter must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.cross_ratio) {
            return Err(invalid("cross_ratio must lie in [0, 1]"));
        }
        if self.modes.is_empty() {
            return Err(invalid("no modes configured"));
        }
        let k = self.modes[0].features.len();
        for m in &self.modes {
            if m.features.len() != k {
                return Err(invalid(format!("mode {:?} has {} features, expected {k}", m.id, m.features.len())));
            }
            if m.mode_type >= self.type_dims {
                return Err(invalid(format!("mode {:?} type {} >= type_dims {}", m.id, m.mode_type, self.type_dims)));
            }
            if !(m.node_fraction > 0.0 && m.node_fraction <= 1.0) {
                return Err(invalid(format!("mode {:?} node_fraction must lie in (0, 1]", m.id)));
            }
            if !(0.0..=1.0).contains(&m.edge_density) {
                return Err(invalid(format!("mode {:?} edge_density must lie in [0, 1]", m.id)));
            }
        }
        Ok(())
    }
}

pub fn node_name(u: usize, p: usize) -> String {
    let width = (p.max(2) - 1).to_string().len();
    format!("n{u:0width$}")
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Deterministic per seed. Each mode draws from its own stream, so adding a
/// mode never changes the others.
pub fn gen_synthetic(
    cfg: &SyntheticConfig,
    seed: u64,
) -> Result<(Dataset, SyntheticTruth), DataError> {
    cfg.validate()?;
    let (p, n, d) = (cfg.p, cfg.n, cfg.d);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut clusters: Vec<usize> = (0..p).map(|u| u % cfg.clusters).collect();
    clusters.shuffle(&mut rng);

    let base: Vec<Tensor> = (0..n)
        .map(|_| {
            let factors: Vec<f64> = (0..cfg.clusters * d).map(|_| normal(&mut rng)).collect();
            Tensor::from_fn(p, d, |u, f| {
                factors[clusters[u] * d + f] + cfg.jitter * normal(&mut rng)
            })
        })
        .collect();

    let mut modes = Vec::with_capacity(cfg.modes.len());
    let (mut scales, mut shifts) = (Vec::new(), Vec::new());
    for (j, m) in cfg.modes.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(j as u64 + 1);
        let q = ((m.node_fraction * p as f64).round() as usize).clamp(1, p);
        let mut nodes = rand::seq::index::sample(&mut rng, p, q).into_vec();
        nodes.sort_unstable();
        let adjacency = block_graph(&nodes, &clusters, m.edge_density, cfg.cross_ratio, &mut rng)?;
        let (scale, shift) = cfg.mixing.coefficients(&m.features);
        scales.push(scale);
        shifts.push(shift);
        let samples = base
            .iter()
            .map(|b| {
                let mut x = b.clone();
                for v in x.data_mut() {
                    *v = scale * *v + shift + cfg.noise_std * normal(&mut rng);
                }
                x
            })
            .collect();
        let spec = ModeSpec {
            mode_id: m.id.clone(),
            meta: cfg.meta_of(m),
            node_ids: nodes,
        };
        modes.push(ModeGraph::new(spec, adjacency, (0..p).collect(), samples)?);
    }
    let universe = (0..p).map(|u| node_name(u, p)).collect();
    let encoding = format!(
        "one-hot mode type ({} entries) followed by {} numeric feature(s)",
        cfg.type_dims,
        cfg.meta_dim() - cfg.type_dims
    );
    let ds = Dataset::new(universe, modes, Some(encoding))?;
    Ok((
        ds,
        SyntheticTruth {
            clusters,
            scale: scales,
            shift: shifts,
            base,
        },
    ))
}

/// Stochastic block graph over `nodes` with expected edge density `density`
/// and an expected share `cross_ratio` of edges between clusters.
pub fn block_graph<R: Rng>(
    nodes: &[usize],
    clusters: &[usize],
    density: f64,
    cross_ratio: f64,
    rng: &mut R,
) -> Result<Adjacency, DataError> {
    let q = nodes.len();
    let mut within = 0usize;
    for a in 0..q {
        for b in a + 1..q {
            if clusters[nodes[a]] == clusters[nodes[b]] {
                within += 1;
            }
        }
    }
    let pairs = q * q.saturating_sub(1) / 2;
    let cross = pairs - within;
    let edges = density * pairs as f64;
    let mut want_within = (1.0 - cross_ratio) * edges;
    let mut want_cross = edges - want_within;
    if want_within > within as f64 {
        want_cross += want_within - within as f64;
        want_within = within as f64;
    }
    if want_cross > cross as f64 {
        want_within = (want_within + want_cross - cross as f64).min(within as f64);
        want_cross = cross as f64;
    }
    let p_in = if within > 0 { want_within / within as f64 } else { 0.0 };
    let p_out = if cross > 0 { want_cross / cross as f64 } else { 0.0 };
    let mut list = Vec::new();
    for a in 0..q {
        for b in a + 1..q {
            let prob = if clusters[nodes[a]] == clusters[nodes[b]] {
                p_in
            } else {
                p_out
            };
            if rng.random::<f64>() < prob {
                list.push((a, b));
            }
        }
    }
    Ok(Adjacency::from_edges(q, &list)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_mixing_without_noise_reproduces_the_pool() {
        let mut cfg = SyntheticConfig::small(6, 4, 3);
        cfg.mixing = Mixing::Identity;
        let (ds, truth) = gen_synthetic(&cfg, 9).unwrap();
        for i in 0..ds.n() {
            let pooled = {
                let a = ds.modes()[0].samples()[i].clone();
                let b = &ds.modes()[1].samples()[i];
                Tensor::from_fn(6, 1, |r, c| 0.5 * (a.get(r, c) + b.get(r, c)))
            };
            assert_eq!(&pooled, &ds.modes()[2].samples()[i]);
            assert_eq!(&truth.base[i], &ds.modes()[2].samples()[i]);
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let cfg = SyntheticConfig::small(8, 5, 3);
        let a = gen_synthetic(&cfg, 1).unwrap().0.to_json().unwrap();
        let b = gen_synthetic(&cfg, 1).unwrap().0.to_json().unwrap();
        let c = gen_synthetic(&cfg, 2).unwrap().0.to_json().unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn noise_mean_is_near_zero() {
        let mut cfg = SyntheticConfig::small(1, 10_000, 1);
        cfg.clusters = 1;
        cfg.noise_std = 0.3;
        let (ds, truth) = gen_synthetic(&cfg, 5).unwrap();
        let (scale, shift) = (truth.scale[0], truth.shift[0]);
        let n = ds.n() as f64;
        let mean = ds.modes()[0]
            .samples()
            .iter()
            .zip(&truth.base)
            .map(|(x, b)| x.data()[0] - (scale * b.data()[0] + shift))
            .sum::<f64>()
            / n;
        assert!(mean.abs() <= 3.0 * 0.3 / n.sqrt(), "{mean}");
    }

    #[test]
    fn degenerate_configs_are_rejected() {
        let mut cfg = SyntheticConfig::small(4, 2, 2);
        cfg.modes[1].node_fraction = 0.0;
        assert!(gen_synthetic(&cfg, 0).is_err());
        let mut cfg = SyntheticConfig::small(4, 2, 2);
        cfg.noise_std = -1.0;
        assert!(gen_synthetic(&cfg, 0).is_err());
    }

    #[test]
    fn block_graph_density_is_close() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let clusters: Vec<usize> = (0..60).map(|u| u % 3).collect();
        let nodes: Vec<usize> = (0..60).collect();
        let a = block_graph(&nodes, &clusters, 0.3, 0.1, &mut rng).unwrap();
        let density = a.edge_count() as f64 / (60.0 * 59.0 / 2.0);
        assert!((density - 0.3).abs() < 0.03, "{density}");
        let cross = a
            .edges()
            .iter()
            .filter(|(u, v)| clusters[*u] != clusters[*v])
            .count() as f64;
        assert!(cross / (a.edge_count() as f64) < 0.2);
    }
}

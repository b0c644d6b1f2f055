//! Dataset model, JSON persistence, synthetic generation, CSV ingestion and
//! sample splitting.

mod ingest;
mod split;
mod synthetic;

pub use ingest::{
    build_correlation_graph, ingest_csv, pearson, IngestConfig, SeriesLayout, Window,
};
pub use split::{split_dataset, Split};
pub use synthetic::{
    gen_synthetic, Mixing, SynthMode, SyntheticConfig, SyntheticTruth,
};

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::graph::{Adjacency, GraphError, ModeGraph, ModeSpec};
use crate::tensor::Tensor;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed dataset file: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("dataset schema version {found} is not supported (expected {SCHEMA_VERSION})")]
    Version { found: u32 },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("unknown mode {0:?}")]
    UnknownMode(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

fn invalid(msg: impl Into<String>) -> DataError {
    DataError::Invalid(msg.into())
}

/// All modes of one problem over a shared, canonically sorted node universe.
/// Sample `i` of every mode refers to the same underlying entity.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    universe: Vec<String>,
    d: usize,
    meta_dim: usize,
    n: usize,
    modes: Vec<ModeGraph>,
    meta_encoding: Option<String>,
}

impl Dataset {
    pub fn new(
        universe: Vec<String>,
        modes: Vec<ModeGraph>,
        meta_encoding: Option<String>,
    ) -> Result<Self, DataError> {
        if universe.is_empty() {
            return Err(invalid("empty node universe"));
        }
        if universe.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("universe must be sorted and free of duplicates"));
        }
        let first = modes.first().ok_or_else(|| invalid("dataset has no modes"))?;
        let (d, n, meta_dim) = (first.d(), first.n_samples(), first.meta().len());
        let mut ids = BTreeSet::new();
        for m in &modes {
            if !ids.insert(m.id()) {
                return Err(invalid(format!("duplicate mode id {:?}", m.id())));
            }
            if m.meta().len() != meta_dim {
                return Err(invalid(format!(
                    "mode {:?} has meta length {}, expected {meta_dim}",
                    m.id(),
                    m.meta().len()
                )));
            }
            if m.meta().iter().any(|x| !x.is_finite()) {
                return Err(invalid(format!("mode {:?} has a non-finite meta entry", m.id())));
            }
            if m.n_samples() != n {
                return Err(invalid(format!(
                    "mode {:?} has {} samples, expected {n}",
                    m.id(),
                    m.n_samples()
                )));
            }
            if n > 0 && m.d() != d {
                return Err(invalid(format!("mode {:?} has d = {}, expected {d}", m.id(), m.d())));
            }
            if m.attr_nodes().last().is_some_and(|&u| u >= universe.len()) {
                return Err(invalid(format!("mode {:?} references nodes outside the universe", m.id())));
            }
            if m.samples().iter().any(|s| !s.is_finite()) {
                return Err(invalid(format!("mode {:?} has non-finite attributes", m.id())));
            }
        }
        if n == 0 {
            return Err(invalid("dataset has no samples"));
        }
        Ok(Self {
            universe,
            d,
            meta_dim,
            n,
            modes,
            meta_encoding,
        })
    }

    pub fn universe(&self) -> &[String] {
        &self.universe
    }

    pub fn p(&self) -> usize {
        self.universe.len()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn meta_dim(&self) -> usize {
        self.meta_dim
    }

    pub fn meta_encoding(&self) -> Option<&str> {
        self.meta_encoding.as_deref()
    }

    pub fn modes(&self) -> &[ModeGraph] {
        &self.modes
    }

    pub fn mode_ids(&self) -> Vec<&str> {
        self.modes.iter().map(ModeGraph::id).collect()
    }

    pub fn mode(&self, id: &str) -> Result<&ModeGraph, DataError> {
        self.modes
            .iter()
            .find(|m| m.id() == id)
            .ok_or_else(|| DataError::UnknownMode(id.to_string()))
    }

    /// Keeps the listed samples (same indices in every mode).
    pub fn select_samples(&self, idx: &[usize]) -> Result<Self, DataError> {
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.n) {
            return Err(invalid(format!("sample {bad} out of range for n = {}", self.n)));
        }
        Self::new(
            self.universe.clone(),
            self.modes.iter().map(|m| m.select_samples(idx)).collect(),
            self.meta_encoding.clone(),
        )
    }

    /// Keeps only the listed modes, in the given order.
    pub fn select_modes(&self, ids: &[&str]) -> Result<Self, DataError> {
        let modes = ids
            .iter()
            .map(|id| self.mode(id).cloned())
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(self.universe.clone(), modes, self.meta_encoding.clone())
    }

    /// Copy with the meta vector of mode `id` replaced.
    pub fn with_meta(&self, id: &str, meta: Vec<f64>) -> Result<Self, DataError> {
        self.mode(id)?;
        let modes = self
            .modes
            .iter()
            .map(|m| {
                if m.id() == id {
                    m.clone().with_meta(meta.clone())
                } else {
                    m.clone()
                }
            })
            .collect();
        Self::new(self.universe.clone(), modes, self.meta_encoding.clone())
    }

    pub fn to_json(&self) -> Result<String, DataError> {
        Ok(serde_json::to_string(&DatasetFile::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self, DataError> {
        let file: DatasetFile = serde_json::from_str(text)?;
        file.into_dataset()
    }
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<(), DataError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(ds.to_json()?.as_bytes())?;
    f.write_all(b"\n")?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset, DataError> {
    let mut text = String::new();
    std::fs::File::open(path)?.read_to_string(&mut text)?;
    Dataset::from_json(&text)
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetFile {
    schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meta_encoding: Option<String>,
    universe: Vec<String>,
    d: usize,
    meta_dim: usize,
    n: usize,
    modes: Vec<ModeFile>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModeFile {
    mode_id: String,
    meta: Vec<f64>,
    node_ids: Vec<String>,
    adjacency: AdjacencyFile,
    /// Nodes carrying attributes; defaults to `node_ids`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    attr_node_ids: Option<Vec<String>>,
    samples: ArrayBlock,
}

/// Edges index into the mode's own `node_ids` list.
#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum AdjacencyFile {
    Edges(Vec<[usize; 2]>),
    /// Row-major 0/1 entries; self-loops are implied either way.
    Dense(Vec<u8>),
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayBlock {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl From<&Dataset> for DatasetFile {
    fn from(ds: &Dataset) -> Self {
        let name = |u: &usize| ds.universe[*u].clone();
        let modes = ds
            .modes
            .iter()
            .map(|m| {
                let attr_node_ids = (m.attr_nodes() != m.node_ids())
                    .then(|| m.attr_nodes().iter().map(name).collect());
                let rows = m.attr_nodes().len();
                let data = m.samples().iter().flat_map(|s| s.data().iter().copied()).collect();
                ModeFile {
                    mode_id: m.id().to_string(),
                    meta: m.meta().to_vec(),
                    node_ids: m.node_ids().iter().map(name).collect(),
                    adjacency: AdjacencyFile::Edges(
                        m.adjacency().edges().into_iter().map(|(u, v)| [u, v]).collect(),
                    ),
                    attr_node_ids,
                    samples: ArrayBlock {
                        shape: vec![m.n_samples(), rows, m.d()],
                        data,
                    },
                }
            })
            .collect();
        Self {
            schema_version: SCHEMA_VERSION,
            meta_encoding: ds.meta_encoding.clone(),
            universe: ds.universe.clone(),
            d: ds.d,
            meta_dim: ds.meta_dim,
            n: ds.n,
            modes,
        }
    }
}

impl DatasetFile {
    fn into_dataset(self) -> Result<Dataset, DataError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(DataError::Version {
                found: self.schema_version,
            });
        }
        let mut universe = self.universe;
        universe.sort();
        let index: BTreeMap<&str, usize> = universe
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        if index.len() != universe.len() {
            return Err(invalid("duplicate node ids in universe"));
        }
        let lookup = |ids: &[String], mode: &str| -> Result<Vec<usize>, DataError> {
            ids.iter()
                .map(|s| {
                    index.get(s.as_str()).copied().ok_or_else(|| {
                        invalid(format!("mode {mode:?} references unknown node {s:?}"))
                    })
                })
                .collect()
        };
        let mut modes = Vec::with_capacity(self.modes.len());
        for mf in self.modes {
            let id = mf.mode_id.clone();
            let node_ids = lookup(&mf.node_ids, &id)?;
            let attr_nodes = match &mf.attr_node_ids {
                Some(a) => lookup(a, &id)?,
                None => node_ids.clone(),
            };
            let q = node_ids.len();
            let adjacency = match mf.adjacency {
                AdjacencyFile::Edges(e) => {
                    let pairs: Vec<(usize, usize)> = e.iter().map(|[u, v]| (*u, *v)).collect();
                    Adjacency::from_edges(q, &pairs)?
                }
                AdjacencyFile::Dense(bits) => {
                    let mut data: Vec<f64> = bits.iter().map(|&b| f64::from(b)).collect();
                    for u in 0..q.min((data.len() as f64).sqrt() as usize) {
                        data[u * q + u] = 1.0;
                    }
                    Adjacency::from_dense(q, data)?
                }
            };
            let shape = &mf.samples.shape;
            if shape.len() != 3
                || shape[1] != attr_nodes.len()
                || shape.iter().product::<usize>() != mf.samples.data.len()
            {
                return Err(invalid(format!(
                    "mode {id:?}: samples shape {shape:?} does not match {} attribute nodes and {} values",
                    attr_nodes.len(),
                    mf.samples.data.len()
                )));
            }
            let block = shape[1] * shape[2];
            let samples = if block == 0 {
                Vec::new()
            } else {
                mf.samples
                    .data
                    .chunks(block)
                    .map(|c| Tensor::new(vec![shape[1], shape[2]], c.to_vec()))
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|e| invalid(e.to_string()))?
            };
            let spec = ModeSpec {
                mode_id: mf.mode_id,
                meta: mf.meta,
                node_ids,
            };
            modes.push(ModeGraph::new(spec, adjacency, attr_nodes, samples)?);
        }
        let ds = Dataset::new(universe, modes, self.meta_encoding)?;
        if ds.d != self.d || ds.meta_dim != self.meta_dim || ds.n != self.n {
            return Err(invalid(format!(
                "header says d={}, meta_dim={}, n={} but modes have d={}, meta_dim={}, n={}",
                self.d, self.meta_dim, self.n, ds.d, ds.meta_dim, ds.n
            )));
        }
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        let cfg = SyntheticConfig::small(5, 3, 2);
        gen_synthetic(&cfg, 4).unwrap().0
    }

    #[test]
    fn json_round_trip() {
        let ds = tiny();
        let back = Dataset::from_json(&ds.to_json().unwrap()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn truncated_json_is_rejected() {
        let text = tiny().to_json().unwrap();
        assert!(matches!(
            Dataset::from_json(&text[..text.len() / 2]),
            Err(DataError::Json(_))
        ));
    }

    #[test]
    fn version_is_checked() {
        let text = tiny().to_json().unwrap().replacen(
            "\"schema_version\":1",
            "\"schema_version\":7",
            1,
        );
        assert!(matches!(Dataset::from_json(&text), Err(DataError::Version { found: 7 })));
    }

    #[test]
    fn invariant_violation_is_named() {
        let mut file: DatasetFile = serde_json::from_str(&tiny().to_json().unwrap()).unwrap();
        file.modes[1].meta.push(1.0);
        let err = file.into_dataset().unwrap_err();
        assert!(err.to_string().contains("meta length"), "{err}");
    }

    #[test]
    fn unknown_mode_lookup() {
        assert!(matches!(tiny().mode("zz"), Err(DataError::UnknownMode(_))));
    }
}

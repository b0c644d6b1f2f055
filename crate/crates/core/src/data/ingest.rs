//! CSV time-series ingestion: per-window averaging into modes and Pearson
//! threshold graphs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{invalid, DataError, Dataset};
use crate::graph::{Adjacency, ModeGraph, ModeSpec};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeriesLayout {
    /// Header row holds node ids; each following row is one time step.
    NodesAsColumns,
    /// First column holds node ids; remaining columns are time steps.
    NodesAsRows,
}

/// Rows `[start, end)` of every period form one mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub mode_id: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestConfig {
    pub csv: PathBuf,
    pub layout: SeriesLayout,
    /// Edge iff Pearson correlation exceeds this.
    pub rho: f64,
    /// Time steps per cycle (24 for hourly data split by time of day).
    pub period: usize,
    pub windows: Vec<Window>,
}

impl IngestConfig {
    /// Hourly series split into four six-hour periods of the day.
    pub fn four_periods(csv: PathBuf, rho: f64) -> Self {
        let names = ["early_morning", "late_morning", "afternoon", "night"];
        Self {
            csv,
            layout: SeriesLayout::NodesAsColumns,
            rho,
            period: 24,
            windows: names
                .iter()
                .enumerate()
                .map(|(k, name)| Window {
                    mode_id: name.to_string(),
                    start: 6 * k,
                    end: 6 * (k + 1),
                })
                .collect(),
        }
    }

    fn validate(&self) -> Result<(), DataError> {
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(invalid(format!("correlation threshold {} must lie in (0, 1)", self.rho)));
        }
        if self.windows.is_empty() || self.period == 0 {
            return Err(invalid("need a positive period and at least one window"));
        }
        for w in &self.windows {
            if w.start >= w.end || w.end > self.period {
                return Err(invalid(format!(
                    "window {:?} [{}, {}) does not fit in period {}",
                    w.mode_id, w.start, w.end, self.period
                )));
            }
        }
        Ok(())
    }
}

/// Sample Pearson correlation; 0 when either series is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len()) as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)
}

/// Edge `(u, v)` iff the correlation of rows `u` and `v` of `series`
/// (nodes × time) exceeds `rho`; self-loops always present.
pub fn build_correlation_graph(series: &Tensor, rho: f64) -> Result<Adjacency, DataError> {
    if series.shape().len() != 2 || series.cols() < 2 {
        return Err(invalid(format!(
            "need a nodes x time matrix with at least 2 time points, got {:?}",
            series.shape()
        )));
    }
    if !(rho > 0.0 && rho < 1.0) {
        return Err(invalid(format!("correlation threshold {rho} must lie in (0, 1)")));
    }
    let q = series.rows();
    let mut edges = Vec::new();
    for u in 0..q {
        for v in u + 1..q {
            if pearson(series.row(u), series.row(v)) > rho {
                edges.push((u, v));
            }
        }
    }
    Ok(Adjacency::from_edges(q, &edges)?)
}

/// Reads `(node ids, nodes × time matrix)` from a CSV file.
fn read_series(path: &Path, layout: SeriesLayout) -> Result<(Vec<String>, Tensor), DataError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let parse = |s: &str, line: usize| -> Result<f64, DataError> {
        s.trim()
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| invalid(format!("line {line}: {s:?} is not a finite number")))
    };
    match layout {
        SeriesLayout::NodesAsColumns => {
            let ids: Vec<String> = reader.headers()?.iter().map(|s| s.trim().to_string()).collect();
            let mut rows: Vec<Vec<f64>> = Vec::new();
            for (i, rec) in reader.records().enumerate() {
                let rec = rec?;
                let vals = rec.iter().map(|s| parse(s, i + 2)).collect::<Result<Vec<_>, _>>()?;
                if vals.len() != ids.len() {
                    return Err(invalid(format!("line {}: expected {} values", i + 2, ids.len())));
                }
                rows.push(vals);
            }
            let t = rows.len();
            let series = Tensor::from_fn(ids.len(), t, |u, k| rows[k][u]);
            Ok((ids, series))
        }
        SeriesLayout::NodesAsRows => {
            let mut ids = Vec::new();
            let mut data = Vec::new();
            let mut width = None;
            for (i, rec) in reader.records().enumerate() {
                let rec = rec?;
                let mut it = rec.iter();
                ids.push(it.next().unwrap_or_default().trim().to_string());
                let vals = it.map(|s| parse(s, i + 2)).collect::<Result<Vec<_>, _>>()?;
                if *width.get_or_insert(vals.len()) != vals.len() {
                    return Err(invalid(format!("line {}: ragged row", i + 2)));
                }
                data.extend(vals);
            }
            let t = width.unwrap_or(0);
            Ok((ids.clone(), Tensor::new(vec![ids.len(), t], data).map_err(|e| invalid(e.to_string()))?))
        }
    }
}

/// One mode per window; one sample per complete period (the window mean of
/// every node). Meta is a one-hot window indicator followed by the window's
/// centre as a fraction of the period.
pub fn ingest_csv(cfg: &IngestConfig) -> Result<Dataset, DataError> {
    cfg.validate()?;
    let (ids, series) = read_series(&cfg.csv, cfg.layout)?;
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| ids[a].cmp(&ids[b]));
    let universe: Vec<String> = order.iter().map(|&i| ids[i].clone()).collect();
    let p = universe.len();
    let cycles = series.cols() / cfg.period;
    if cycles < 2 {
        return Err(invalid(format!(
            "need at least 2 complete periods of {} steps, found {} steps",
            cfg.period,
            series.cols()
        )));
    }
    let k = cfg.windows.len();
    let mut modes = Vec::with_capacity(k);
    for (w_idx, w) in cfg.windows.iter().enumerate() {
        let means = Tensor::from_fn(p, cycles, |u, c| {
            let row = series.row(order[u]);
            let slice = &row[c * cfg.period + w.start..c * cfg.period + w.end];
            slice.iter().sum::<f64>() / slice.len() as f64
        });
        let adjacency = build_correlation_graph(&means, cfg.rho)?;
        let samples = (0..cycles)
            .map(|c| Tensor::from_fn(p, 1, |u, _| means.get(u, c)))
            .collect();
        let mut meta = vec![0.0; k];
        meta[w_idx] = 1.0;
        meta.push(0.5 * (w.start + w.end) as f64 / cfg.period as f64);
        let spec = ModeSpec {
            mode_id: w.mode_id.clone(),
            meta,
            node_ids: (0..p).collect(),
        };
        modes.push(ModeGraph::new(spec, adjacency, (0..p).collect(), samples)?);
    }
    let encoding = format!(
        "one-hot window indicator ({k} entries) followed by the window centre as a fraction of the {}-step period",
        cfg.period
    );
    Dataset::new(universe, modes, Some(encoding))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn copies_connect_and_opposites_do_not() {
        let s = Tensor::from_rows(&[&[1.0, 2.0, 4.0], &[1.0, 2.0, 4.0], &[-1.0, -2.0, -4.0]]);
        let a = build_correlation_graph(&s, 0.9).unwrap();
        assert!(a.has_edge(0, 1));
        assert!(!a.has_edge(0, 2));
        assert!(!a.has_edge(1, 2));
    }

    #[test]
    fn constant_series_has_no_edges() {
        let s = Tensor::from_rows(&[&[3.0, 3.0, 3.0], &[3.0, 3.0, 3.0]]);
        assert_eq!(build_correlation_graph(&s, 0.1).unwrap(), Adjacency::identity(2));
        assert_eq!(pearson(&[1.0, 1.0], &[2.0, 5.0]), 0.0);
    }

    #[test]
    fn too_few_time_points() {
        let s = Tensor::from_rows(&[&[1.0], &[2.0]]);
        assert!(build_correlation_graph(&s, 0.5).is_err());
        let s = Tensor::from_rows(&[&[1.0, 2.0], &[2.0, 1.0]]);
        assert!(build_correlation_graph(&s, 1.0).is_err());
    }

    #[test]
    fn ingest_small_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let mut text = String::from("b,a\n");
        for h in 0..8 {
            text.push_str(&format!("{},{}\n", h as f64, (h * h) as f64));
        }
        std::fs::write(&path, text).unwrap();
        let cfg = IngestConfig {
            csv: path,
            layout: SeriesLayout::NodesAsColumns,
            rho: 0.5,
            period: 4,
            windows: vec![
                Window { mode_id: "first".into(), start: 0, end: 2 },
                Window { mode_id: "second".into(), start: 2, end: 4 },
            ],
        };
        let ds = ingest_csv(&cfg).unwrap();
        assert_eq!(ds.universe(), &["a", "b"]);
        assert_eq!(ds.n(), 2);
        assert_eq!(ds.meta_dim(), 3);
        // node a = h², window [0,2) of cycle 0 → (0 + 1)/2
        assert_eq!(ds.modes()[0].samples()[0].data(), &[0.5, 0.5]);
        assert_eq!(ds.modes()[1].meta(), &[0.0, 1.0, 0.75]);
    }
}

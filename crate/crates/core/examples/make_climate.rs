//! Regenerates `data/climate_mini.json`: a synthetic hourly series for 48
//! stations in four regions, ingested into four time-of-day modes.
//!
//! cargo run -p graphx-core --example make_climate

use std::fmt::Write as _;

use graphx::data::{ingest_csv, save_dataset, IngestConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const STATIONS: usize = 48;
const REGIONS: usize = 4;
const DAYS: usize = 30;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut z = || -> f64 { rng.sample(StandardNormal) };
    // per day, period of day and region: a shared weather factor
    let mut factor = vec![[[0.0; REGIONS]; 4]; DAYS];
    for day in factor.iter_mut() {
        for (k, period) in day.iter_mut().enumerate() {
            let common = z();
            // regions share more of their weather later in the day
            let coupling = [0.0, 0.6, 1.0, 1.6][k];
            for f in period.iter_mut() {
                *f = coupling * common + z();
            }
        }
    }
    let base: Vec<f64> = (0..STATIONS).map(|_| 10.0 + 3.0 * z()).collect();
    let mut csv = String::new();
    let header: Vec<String> = (0..STATIONS).map(|s| format!("st{s:02}")).collect();
    writeln!(csv, "{}", header.join(","))?;
    for day in 0..DAYS {
        for hour in 0..24 {
            let k = hour / 6;
            let diurnal = 4.0 * (std::f64::consts::PI * (hour as f64 - 6.0) / 12.0).sin();
            let row: Vec<String> = (0..STATIONS)
                .map(|s| {
                    let v = base[s] + diurnal + 2.0 * factor[day][k][s % REGIONS] + 0.8 * z();
                    format!("{v:.3}")
                })
                .collect();
            writeln!(csv, "{}", row.join(","))?;
        }
    }
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("hourly.csv");
    std::fs::write(&path, csv)?;
    let ds = ingest_csv(&IngestConfig::four_periods(path, 0.5))?;
    let out = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("data/climate_mini.json");
    save_dataset(&ds, &out)?;
    for m in ds.modes() {
        println!("{}: {} edges", m.id(), m.adjacency().edge_count());
    }
    println!("{} nodes, {} modes, {} samples -> {}", ds.p(), ds.modes().len(), ds.n(), out.display());
    Ok(())
}

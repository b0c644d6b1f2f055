use serde::{Deserialize, Serialize};

use super::{HarnessError, Result};
use crate::data::{gen_synthetic, SyntheticConfig};
use crate::pipeline::{trainable_param_count, ModelConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditVariant {
    pub modes: usize,
    pub model: ModelConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub modes: usize,
    pub config_hash: String,
    pub trainable_params: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamAuditReport {
    pub rows: Vec<AuditRow>,
    pub equal: bool,
}

/// Counts trainable parameters for datasets with different numbers of
/// modes. `equal` is false when any two counts differ.
pub fn run_paramaudit(variants: &[AuditVariant], p: usize, seed: u64) -> Result<ParamAuditReport> {
    if variants.len() < 2 {
        return Err(HarnessError::Validation("paramaudit needs at least two variants".into()));
    }
    let rows = variants
        .iter()
        .map(|v| {
            let (ds, _) = gen_synthetic(&SyntheticConfig::small(p, 2, v.modes), seed)?;
            Ok(AuditRow {
                modes: ds.modes().len(),
                config_hash: v.model.hash(),
                trainable_params: trainable_param_count(&v.model, ds.d(), ds.meta_dim())?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let equal = rows.windows(2).all(|w| w[0].trainable_params == w[1].trainable_params);
    Ok(ParamAuditReport { rows, equal })
}

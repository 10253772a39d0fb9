//! Randomized rounding of relaxed rows back to categorical records.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::projection::RelaxedDataset;
use crate::rng::{NoiseSource, Stream};
use crate::schema::DiscreteDataset;

pub const DEFAULT_OVERSAMPLE: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundingConfig {
    /// Samples drawn per relaxed row.
    pub oversample: usize,
    pub seed: u64,
}

impl Default for RoundingConfig {
    fn default() -> Self {
        RoundingConfig {
            oversample: DEFAULT_OVERSAMPLE,
            seed: 0,
        }
    }
}

/// Samples each feature of each row independently, with probability
/// proportional to its block value, `oversample` times per row.
///
/// Output rows are grouped by source row. Every `(row, replica)` pair has its
/// own sub-stream, so the result does not depend on scheduling.
pub fn randomized_round(data: &RelaxedDataset, config: &RoundingConfig) -> Result<DiscreteDataset> {
    if config.oversample == 0 {
        return Err(Error::InvalidArgument("oversample must be at least 1".into()));
    }
    let schema = data.schema();
    for (r, row) in data.rows().enumerate() {
        for i in 0..schema.num_features() {
            let block = &row[schema.block(i)];
            let sum: f64 = block.iter().sum();
            if block.iter().any(|v| !(*v >= 0.0)) || !(sum > 0.0) || !sum.is_finite() {
                return Err(Error::Data(format!(
                    "row {r}, feature {i}: block is not a distribution (was the data normalized?)"
                )));
            }
        }
    }
    let rows: Vec<Vec<u32>> = (0..data.len())
        .into_par_iter()
        .flat_map_iter(|r| {
            let row = data.row(r);
            (0..config.oversample).map(move |j| {
                let mut rng = NoiseSource::keyed(config.seed, Stream::Rounding, r as u64, j as u64);
                (0..schema.num_features())
                    .map(|i| sample_category(&row[schema.block(i)], &mut rng))
                    .collect()
            })
        })
        .collect();
    DiscreteDataset::new(schema.clone(), rows)
}

/// Inverse-CDF draw over `weights` in category order.
fn sample_category(weights: &[f64], rng: &mut NoiseSource) -> u32 {
    let total: f64 = weights.iter().sum();
    let u = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    for (c, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return c as u32;
        }
    }
    // u landed on the rounding slack above the last positive weight
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0) as u32
}

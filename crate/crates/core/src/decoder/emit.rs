//! Point-cloud emission from decoded parameters.

use crate::cloud::PointCloud;
use crate::error::Result;
use crate::losses::PredictionParams;
use crate::rfs::{mb_sample, DensityFamily};

/// Points of every ray whose existence probability is strictly above
/// `threshold`, in ray order.
pub fn emit_deterministic(params: &PredictionParams, threshold: f64) -> Result<PointCloud> {
    params.validate()?;
    Ok(PointCloud::new(
        (0..params.len())
            .filter(|&i| params.existence(i) > threshold)
            .map(|i| params.position(i))
            .collect(),
    ))
}

/// One draw from the Multi-Bernoulli set described by `params`.
pub fn emit_probabilistic(params: &PredictionParams, family: DensityFamily, seed: u64) -> Result<PointCloud> {
    Ok(mb_sample(&params.to_multi_bernoulli(family)?, seed))
}

//! Full-batch training of a decoder on rendered scans.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::network::{scan_loss_gradient, DecoderInputs};
use super::weights::{DecoderWeights, WeightGradients};
use super::DecoderConfig;
use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::geometry::{build_ray_grid, RadarConfig, SensorPose};
use crate::rendering::{render_bundle, RayRender, RenderParams};
use crate::rfs::DensityFamily;
use crate::rng::derive_seed;
use crate::scene::Scene;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Weight of the radar loss in the optimized objective.
    pub loss_weight: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            lr_max: 1e-3,
            lr_min: 1e-7,
            warmup_steps: 500,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            loss_weight: 2e-2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Full-length schedule with 20000 iterations and 5000 warmup steps.
    pub fn full() -> Self {
        Self {
            iterations: 20_000,
            warmup_steps: 5_000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("train: {m}")));
        if !(self.lr_min > 0.0) || !(self.lr_max >= self.lr_min) || !self.lr_max.is_finite() {
            return fail("need lr_max >= lr_min > 0");
        }
        if self.warmup_steps > self.iterations {
            return fail("warmup_steps exceeds iterations");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("Adam betas must lie in [0, 1)");
        }
        if !(self.epsilon > 0.0) || !(self.loss_weight > 0.0) || !self.loss_weight.is_finite() {
            return fail("epsilon and loss_weight must be positive");
        }
        Ok(())
    }
}

/// Linear warmup to `lr_max`, then cosine decay to `lr_min` at the last step.
pub fn learning_rate(cfg: &TrainConfig, step: usize) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.lr_max * (step + 1) as f64 / cfg.warmup_steps as f64;
    }
    let span = cfg.iterations.saturating_sub(cfg.warmup_steps + 1).max(1);
    let progress = ((step - cfg.warmup_steps) as f64 / span as f64).min(1.0);
    cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: i32,
    m: WeightGradients,
    v: WeightGradients,
}

impl Adam {
    pub fn new(weights: &DecoderWeights, cfg: &TrainConfig) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
            step: 0,
            m: weights.zeros_like(),
            v: weights.zeros_like(),
        }
    }

    pub fn step(&mut self, weights: &mut DecoderWeights, grads: &WeightGradients, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
        for ((w, g), (m, v)) in weights
            .tensors
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for k in 0..w.len() {
                m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                w[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub weights: DecoderWeights,
    /// Weighted training loss before each optimizer step.
    pub loss_curve: Vec<f64>,
}

/// Renders the radar grid of one scan.
pub fn render_scan(
    scene: &Scene,
    pose: &SensorPose,
    radar: &RadarConfig,
    render: &RenderParams,
    seed: u64,
) -> Result<Vec<RayRender>> {
    let bundle = build_ray_grid(pose, radar)?;
    render_bundle(scene, &bundle, radar, render, seed)
}

/// Renders every training scan once and fits the decoder to the truths.
#[allow(clippy::too_many_arguments)]
pub fn fit(
    scene: &Scene,
    poses: &[SensorPose],
    truths: &[PointCloud],
    radar: &RadarConfig,
    render: &RenderParams,
    decoder: &DecoderConfig,
    train: &TrainConfig,
) -> Result<FitResult> {
    if poses.len() != truths.len() {
        return Err(Error::InvalidInput(format!(
            "{} poses but {} truth clouds",
            poses.len(),
            truths.len()
        )));
    }
    let inputs = poses
        .iter()
        .enumerate()
        .map(|(k, pose)| {
            let renders = render_scan(scene, pose, radar, render, derive_seed(train.seed, &[1, k as u64]))?;
            DecoderInputs::from_renders(&renders)
        })
        .collect::<Result<Vec<_>>>()?;
    let family = decoder.probabilistic.then_some(radar.density_family);
    fit_rendered(&inputs, truths, decoder, train, radar.max_range, family)
}

/// Fits on pre-rendered scans. `family` selects the probabilistic loss;
/// `None` trains with the deterministic loss.
pub fn fit_rendered(
    inputs: &[DecoderInputs],
    truths: &[PointCloud],
    decoder: &DecoderConfig,
    train: &TrainConfig,
    max_range: f64,
    family: Option<DensityFamily>,
) -> Result<FitResult> {
    train.validate()?;
    decoder.validate()?;
    if inputs.is_empty() || inputs.len() != truths.len() {
        return Err(Error::InvalidInput("need one truth cloud per training scan".into()));
    }
    let num_rays = inputs[0].len();
    for (x, t) in inputs.iter().zip(truths) {
        if x.len() != num_rays {
            return Err(Error::ShapeMismatch("training scans differ in ray count".into()));
        }
        if t.len() >= num_rays {
            return Err(Error::Cardinality {
                predictions: num_rays,
                truth: t.len(),
            });
        }
    }
    let mut weights = DecoderWeights::init(decoder, num_rays, max_range, derive_seed(train.seed, &[0]))?;
    let mut adam = Adam::new(&weights, train);
    let mut loss_curve = Vec::with_capacity(train.iterations);
    let per_scan = train.loss_weight / inputs.len() as f64;

    for step in 0..train.iterations {
        let results = inputs
            .par_iter()
            .zip(truths)
            .map(|(x, t)| scan_loss_gradient(&weights, x, t, family, per_scan))
            .collect::<Result<Vec<_>>>()?;
        // Sequential reduction keeps the sum independent of thread timing.
        let mut total = 0.0;
        let mut grads = weights.zeros_like();
        for (loss, g) in results {
            total += loss;
            for (acc, gi) in grads.iter_mut().zip(g) {
                *acc += gi;
            }
        }
        if !total.is_finite() || grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numeric(format!("non-finite loss or gradient at step {step}")));
        }
        loss_curve.push(total);
        adam.step(&mut weights, &grads, learning_rate(train, step));
    }
    if !weights.is_finite() {
        return Err(Error::Numeric("training produced non-finite weights".into()));
    }
    Ok(FitResult { weights, loss_curve })
}

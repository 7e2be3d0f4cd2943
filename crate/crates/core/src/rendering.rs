//! Volume rendering of radar rays through the scene field.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{spherical_to_cartesian, RadarConfig, Ray, RayBundle, Vec3};
use crate::rng::{derive_seed, seeded};
use crate::scene::Scene;

/// Floor on the accumulated weight when normalizing the expected depth.
pub const DEPTH_WEIGHT_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpacityParams {
    pub beta: f64,
}

impl Default for OpacityParams {
    fn default() -> Self {
        Self { beta: 20.0 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderParams {
    #[serde(default)]
    pub opacity: OpacityParams,
    /// Use the unnormalized weighted depth sum, with no empty-ray fallback.
    #[serde(default)]
    pub literal_eq4: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RaySamples {
    /// Strictly increasing distances along the ray.
    pub distances: Vec<f64>,
    pub positions: Vec<Vec3>,
    pub max_range: f64,
}

impl RaySamples {
    pub fn len(&self) -> usize {
        self.distances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.distances.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RayRender {
    pub feature: Vec<f64>,
    pub weights: Vec<f64>,
    pub expected_depth: f64,
    /// Sensor-frame Cartesian position at (azimuth, elevation, expected depth).
    pub return_position: Vec3,
    pub opacity_sum: f64,
    pub azimuth: f64,
    pub elevation: f64,
}

/// Stratified samples: one uniform draw inside each of `N` equal strata of
/// `(0, max_range]`.
pub fn sample_ray(ray: &Ray, cfg: &RadarConfig, seed: u64) -> Result<RaySamples> {
    let n = cfg.num_samples_per_ray;
    if n < 2 {
        return Err(Error::Config("num_samples_per_ray must be at least 2".into()));
    }
    let width = cfg.max_range / n as f64;
    let mut rng = seeded(seed);
    let distances: Vec<f64> = (0..n)
        .map(|i| {
            // 1 - U lies in (0, 1], keeping each draw inside its half-open stratum.
            let u = 1.0 - rng.gen::<f64>();
            ((i as f64 + u) * width).min(cfg.max_range)
        })
        .collect();
    let positions = distances.iter().map(|&t| ray.at(t)).collect();
    Ok(RaySamples {
        distances,
        positions,
        max_range: cfg.max_range,
    })
}

/// Logistic SDF-to-opacity map `1 / (1 + exp(beta * s))`.
pub fn opacity(s: f64, params: &OpacityParams) -> f64 {
    let z = params.beta * s;
    if z >= 0.0 {
        let e = (-z).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + z.exp())
    }
}

/// Per-sample weights `alpha_i * prod_{j<i} (1 - alpha_j)`.
pub fn volume_weights(alphas: &[f64]) -> Vec<f64> {
    let mut transmittance = 1.0;
    alphas
        .iter()
        .map(|&a| {
            let w = a * transmittance;
            transmittance *= 1.0 - a;
            w
        })
        .collect()
}

/// Expected depth from weights and distances.
pub fn expected_depth(weights: &[f64], distances: &[f64], max_range: f64, literal: bool) -> f64 {
    let num: f64 = weights.iter().zip(distances).map(|(w, t)| w * t).sum();
    if literal {
        return num;
    }
    let total: f64 = weights.iter().sum();
    if total <= DEPTH_WEIGHT_FLOOR {
        max_range
    } else {
        num / total
    }
}

pub fn render_ray(scene: &Scene, ray: &Ray, samples: &RaySamples, params: &RenderParams) -> RayRender {
    let mut alphas = Vec::with_capacity(samples.len());
    let mut features = Vec::with_capacity(samples.len());
    for x in &samples.positions {
        let q = scene.query(x, ray.time, &ray.direction);
        alphas.push(opacity(q.sdf, &params.opacity));
        features.push(q.feature);
    }
    let weights = volume_weights(&alphas);
    let mut feature = vec![0.0; scene.feature_dim];
    for (w, f) in weights.iter().zip(&features) {
        for (acc, v) in feature.iter_mut().zip(f) {
            *acc += w * v;
        }
    }
    let opacity_sum = weights.iter().sum();
    let depth = expected_depth(&weights, &samples.distances, samples.max_range, params.literal_eq4);
    RayRender {
        feature,
        weights,
        expected_depth: depth,
        return_position: spherical_to_cartesian(depth, ray.azimuth, ray.elevation),
        opacity_sum,
        azimuth: ray.azimuth,
        elevation: ray.elevation,
    }
}

/// Per-ray sampling seed; keyed by the ray's angles so the result does not
/// depend on the ray's position in the bundle.
pub fn ray_seed(seed: u64, ray: &Ray) -> u64 {
    derive_seed(seed, &[ray.azimuth.to_bits(), ray.elevation.to_bits()])
}

pub fn render_bundle(
    scene: &Scene,
    bundle: &RayBundle,
    cfg: &RadarConfig,
    params: &RenderParams,
    seed: u64,
) -> Result<Vec<RayRender>> {
    use rayon::prelude::*;
    if bundle.is_empty() {
        return Err(Error::InvalidInput("ray bundle is empty".into()));
    }
    bundle
        .rays
        .par_iter()
        .map(|ray| {
            let samples = sample_ray(ray, cfg, ray_seed(seed, ray))?;
            Ok(render_ray(scene, ray, &samples, params))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_ray_grid, SensorPose};
    use crate::scene::{Primitive, Shape};
    use rand::Rng;

    fn sphere_scene() -> Scene {
        Scene::new(
            vec![Primitive::new(Shape::sphere(Vec3::new(10.0, 0.0, 0.0), 2.0), 1)],
            vec![],
            8,
            3,
        )
        .unwrap()
    }

    fn forward_ray() -> Ray {
        Ray {
            origin: Vec3::zeros(),
            direction: Vec3::x(),
            azimuth: 0.0,
            elevation: 0.0,
            time: 0.0,
        }
    }

    #[test]
    fn stratified_bounds_and_determinism() {
        let cfg = RadarConfig {
            num_samples_per_ray: 4,
            max_range: 8.0,
            ..RadarConfig::desk()
        };
        let s = sample_ray(&forward_ray(), &cfg, 17).unwrap();
        for (i, t) in s.distances.iter().enumerate() {
            assert!(*t > 2.0 * i as f64 && *t <= 2.0 * (i + 1) as f64);
        }
        assert!(s.distances.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(s, sample_ray(&forward_ray(), &cfg, 17).unwrap());
    }

    #[test]
    fn stratum_means_near_midpoints() {
        let cfg = RadarConfig {
            num_samples_per_ray: 4,
            max_range: 8.0,
            ..RadarConfig::desk()
        };
        let mut sums = [0.0; 4];
        for seed in 0..100 {
            let s = sample_ray(&forward_ray(), &cfg, seed).unwrap();
            for (acc, t) in sums.iter_mut().zip(&s.distances) {
                *acc += t;
            }
        }
        for (i, sum) in sums.iter().enumerate() {
            let mid = 2.0 * i as f64 + 1.0;
            assert!((sum / 100.0 - mid).abs() <= 0.1 * mid, "stratum {i}");
        }
    }

    #[test]
    fn too_few_samples_rejected() {
        let cfg = RadarConfig {
            num_samples_per_ray: 1,
            ..RadarConfig::desk()
        };
        assert!(sample_ray(&forward_ray(), &cfg, 0).is_err());
    }

    #[test]
    fn opacity_examples() {
        let p = OpacityParams { beta: 20.0 };
        assert_eq!(opacity(0.0, &p), 0.5);
        assert_eq!(opacity(0.0, &OpacityParams { beta: 3.0 }), 0.5);
        assert_eq!(opacity(f64::INFINITY, &p), 0.0);
        assert_eq!(opacity(f64::NEG_INFINITY, &p), 1.0);
        let expected = 1.0 / (1.0 + (-2.0f64).exp());
        assert!((opacity(-0.1, &p) - expected).abs() < 1e-15);
        assert!((opacity(-0.1, &p) - 0.8808).abs() < 1e-4);
        let mut prev = 1.0;
        for k in -20..50 {
            let a = opacity(k as f64 * 0.05, &p);
            assert!(a < prev);
            prev = a;
        }
    }

    #[test]
    fn weight_examples() {
        assert_eq!(volume_weights(&[1.0, 0.3, 0.9]), vec![1.0, 0.0, 0.0]);
        assert_eq!(volume_weights(&[0.5, 0.5, 1.0]), vec![0.5, 0.25, 0.25]);
        let taus = [1.0, 2.0, 3.0];
        assert_eq!(expected_depth(&[1.0, 0.0, 0.0], &taus, 9.0, false), 1.0);
    }

    #[test]
    fn empty_space_falls_back_to_max_range() {
        let scene = Scene::new(
            vec![Primitive::new(Shape::sphere(Vec3::new(0.0, 0.0, -1000.0), 1.0), 0)],
            vec![],
            4,
            0,
        )
        .unwrap();
        let cfg = RadarConfig::desk();
        let ray = forward_ray();
        let s = sample_ray(&ray, &cfg, 5).unwrap();
        let r = render_ray(&scene, &ray, &s, &RenderParams::default());
        assert!(r.opacity_sum < 1e-12);
        assert_eq!(r.expected_depth, cfg.max_range);
        let literal = render_ray(
            &scene,
            &ray,
            &s,
            &RenderParams {
                literal_eq4: true,
                ..Default::default()
            },
        );
        assert!(literal.expected_depth < 1e-9);
    }

    #[test]
    fn weights_are_bounded() {
        let mut rng = crate::rng::seeded(8);
        for _ in 0..500 {
            let n = rng.gen_range(2..40);
            let alphas: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let w = volume_weights(&alphas);
            assert!(w.iter().all(|x| (0.0..=1.0).contains(x)));
            assert!(w.iter().sum::<f64>() <= 1.0 + 1e-9);
        }
        let w = volume_weights(&[0.3, 0.999_999, 0.2]);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn depth_inside_weight_quantile_bracket() {
        let cfg = RadarConfig::desk();
        let params = RenderParams::default();
        let mut rng = crate::rng::seeded(31);
        let mut checked = 0;
        for trial in 0..200 {
            let scene = Scene::new(
                vec![
                    Primitive::new(
                        Shape::sphere(
                            Vec3::new(rng.gen_range(5.0..35.0), rng.gen_range(-2.0..2.0), 0.0),
                            rng.gen_range(0.5..3.0),
                        ),
                        1,
                    ),
                    Primitive::new(Shape::half_space(Vec3::z(), -rng.gen_range(1.0..3.0)), 0),
                ],
                vec![],
                4,
                0,
            )
            .unwrap();
            let bundle = build_ray_grid(&SensorPose::identity(0.0), &cfg).unwrap();
            for ray in bundle.rays.iter().step_by(7) {
                let s = sample_ray(ray, &cfg, trial).unwrap();
                let r = render_ray(&scene, ray, &s, &params);
                if r.opacity_sum <= 0.5 {
                    continue;
                }
                let mut cum = 0.0;
                let mut lo = None;
                let mut hi = *s.distances.last().unwrap();
                for (w, t) in r.weights.iter().zip(&s.distances) {
                    cum += w / r.opacity_sum;
                    if lo.is_none() && cum >= 0.05 {
                        lo = Some(*t);
                    }
                    if cum >= 0.95 {
                        hi = *t;
                        break;
                    }
                }
                let lo = lo.unwrap();
                // Less than 5% of the mass lies below `lo` (at distance >= 0)
                // and at most 5% lies above `hi` (at distance <= max_range).
                let lower = 0.95 * lo;
                let upper = hi + 0.05 * (cfg.max_range - hi);
                assert!(
                    r.expected_depth >= lower - 1e-12 && r.expected_depth <= upper + 1e-12,
                    "trial {trial}: depth {} outside [{lo}, {hi}]",
                    r.expected_depth
                );
                assert!(r.expected_depth >= s.distances[0]);
                checked += 1;
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn sphere_depth_matches_closed_form_intersection() {
        let scene = sphere_scene();
        let cfg = RadarConfig::zod();
        let cfg = RadarConfig { max_range: 40.0, ..cfg };
        let bundle = build_ray_grid(&SensorPose::identity(0.0), &cfg).unwrap();
        let out = render_bundle(&scene, &bundle, &cfg, &RenderParams::default(), 5).unwrap();
        let centre = Vec3::new(10.0, 0.0, 0.0);
        let mut hits = 0;
        for (ray, r) in bundle.rays.iter().zip(&out) {
            // |t d - c|^2 = R^2 -> t^2 - 2 t (d.c) + |c|^2 - R^2 = 0
            let b = ray.direction.dot(&centre);
            let disc = b * b - (centre.norm_squared() - 4.0);
            // Skip grazing rays whose chord is shorter than a sample stratum.
            if disc <= 0.5 {
                continue;
            }
            let t_hit = b - disc.sqrt();
            let tol = 2.0 * cfg.max_range / cfg.num_samples_per_ray as f64;
            assert!((r.expected_depth - t_hit).abs() <= tol, "{} vs {}", r.expected_depth, t_hit);
            hits += 1;
        }
        assert!(hits > 50);
    }

    #[test]
    fn occlusion_is_monotone() {
        let mut rng = crate::rng::seeded(21);
        for _ in 0..300 {
            let n = rng.gen_range(3..20);
            let alphas: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let k = rng.gen_range(0..n - 1);
            let mut bumped = alphas.clone();
            bumped[k] = (bumped[k] + rng.gen_range(0.0..0.5)).min(1.0);
            let w0 = volume_weights(&alphas);
            let w1 = volume_weights(&bumped);
            for j in k + 1..n {
                assert!(w1[j] <= w0[j] + 1e-15);
            }
        }
    }

    #[test]
    fn constant_features_render_linearly() {
        let alphas = [0.2, 0.4, 0.1, 0.9];
        let w = volume_weights(&alphas);
        let c = [0.3, -1.2];
        let mut out = [0.0; 2];
        for wi in &w {
            for (o, ci) in out.iter_mut().zip(&c) {
                *o += wi * ci;
            }
        }
        let total: f64 = w.iter().sum();
        for (o, ci) in out.iter().zip(&c) {
            assert!((o - ci * total).abs() < 1e-15);
        }
    }

    #[test]
    fn bundle_matches_single_rays_and_permutations() {
        let scene = sphere_scene();
        let cfg = RadarConfig::desk();
        let pose = SensorPose::identity(0.0);
        let bundle = build_ray_grid(&pose, &cfg).unwrap();
        let params = RenderParams::default();
        let out = render_bundle(&scene, &bundle, &cfg, &params, 99).unwrap();
        assert_eq!(out.len(), bundle.len());

        let single = RayBundle {
            rays: vec![bundle.rays[5].clone()],
            ..bundle.clone()
        };
        let one = render_bundle(&scene, &single, &cfg, &params, 99).unwrap();
        assert_eq!(one[0], out[5]);

        let mut perm: Vec<usize> = (0..bundle.len()).collect();
        perm.reverse();
        perm.swap(0, 17);
        let permuted = RayBundle {
            rays: perm.iter().map(|&i| bundle.rays[i].clone()).collect(),
            ..bundle.clone()
        };
        let pout = render_bundle(&scene, &permuted, &cfg, &params, 99).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(pout[k], out[i]);
        }
    }
}

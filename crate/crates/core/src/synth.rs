//! Synthetic driving benchmark: a small scene, an ego trajectory and a
//! simulated radar that produces the reference point clouds.
//!
//! Every object carries a fixed set of scatter points on its surface, each
//! with its own detection probability. In each frame a visible scatter point
//! is detected with that probability, and a few clutter returns are drawn from
//! random directions. Detections receive Laplace noise in range, azimuth and
//! elevation and are reported in the sensor frame.

use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::geometry::{cartesian_to_spherical, spherical_to_cartesian, yaw_rotation, RadarConfig, SensorPose, Vec3};
use crate::rng::{derive_seed, open_unit, seeded, standard_laplace, SeededRng};
use crate::scene::{Actor, Primitive, Scene, Shape};

use rand::Rng;

const TRACE_EPS: f64 = 1e-4;
const TRACE_STEPS: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TruthModel {
    pub scatter_per_object: usize,
    /// Detection probabilities are drawn uniformly from this range, once per
    /// scatter point.
    pub detection_min: f64,
    pub detection_max: f64,
    pub clutter_per_scan: usize,
    /// Laplace noise scales: meters for range, radians for the angles.
    pub range_noise: f64,
    pub azimuth_noise: f64,
    pub elevation_noise: f64,
    /// A scatter point counts as visible when the first surface hit along its
    /// line of sight is at most this much closer than the point itself.
    pub visibility_tolerance: f64,
}

impl Default for TruthModel {
    fn default() -> Self {
        Self {
            scatter_per_object: 12,
            detection_min: 0.15,
            detection_max: 0.9,
            clutter_per_scan: 3,
            range_noise: 0.1,
            azimuth_noise: 0.01,
            elevation_noise: 0.02,
            visibility_tolerance: 0.05,
        }
    }
}

impl TruthModel {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.detection_min && self.detection_min <= self.detection_max && self.detection_max <= 1.0) {
            return Err(Error::Config("truth: need 0 <= detection_min <= detection_max <= 1".into()));
        }
        let scales = [self.range_noise, self.azimuth_noise, self.elevation_noise, self.visibility_tolerance];
        if !scales.iter().all(|v| *v >= 0.0 && v.is_finite()) {
            return Err(Error::Config("truth: noise and tolerance must be non-negative".into()));
        }
        Ok(())
    }
}

/// Ego trajectory along +x at constant speed and sensor height.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Trajectory {
    pub frames: usize,
    /// Ego displacement per frame in meters.
    pub step: f64,
    /// Seconds per frame.
    pub dt: f64,
    pub height: f64,
    pub lateral: f64,
}

impl Default for Trajectory {
    fn default() -> Self {
        Self {
            frames: 16,
            step: 0.5,
            dt: 0.1,
            height: 1.0,
            lateral: 0.0,
        }
    }
}

impl Trajectory {
    pub fn poses(&self) -> Result<Vec<SensorPose>> {
        if self.frames == 0 {
            return Err(Error::Config("trajectory needs at least one frame".into()));
        }
        (0..self.frames)
            .map(|k| {
                let p = Vec3::new(self.step * k as f64, self.lateral, self.height);
                SensorPose::from_yaw(p, 0.0, self.dt * k as f64)
            })
            .collect()
    }
}

/// Ground plane, two parked boxes and one crossing car-sized actor.
pub fn benchmark_scene(feature_dim: usize, feature_seed: u64) -> Result<Scene> {
    Scene::new(
        vec![
            Primitive::new(Shape::half_space(Vec3::z(), 0.0), 0),
            Primitive::new(Shape::aligned_box(Vec3::new(15.0, -3.0, 1.0), Vec3::new(2.0, 1.0, 1.0)), 1),
            Primitive::new(Shape::aligned_box(Vec3::new(22.0, 4.0, 1.25), Vec3::new(1.5, 1.5, 1.25)), 2),
        ],
        vec![Actor::new(
            Primitive::new(Shape::aligned_box(Vec3::zeros(), Vec3::new(2.0, 0.9, 0.8)), 3),
            Vec3::new(12.0, 4.5, 0.8),
            Vec3::new(0.0, -1.5, 0.0),
            0.0,
        )],
        feature_dim,
        feature_seed,
    )
}

/// Single sphere in front of the sensor.
pub fn trivial_scene(feature_dim: usize, feature_seed: u64) -> Result<Scene> {
    Scene::new(
        vec![Primitive::new(Shape::sphere(Vec3::new(12.0, 0.0, 1.0), 2.0), 1)],
        vec![],
        feature_dim,
        feature_seed,
    )
}

/// Distance to the first surface along a unit direction, if any lies within
/// `max_range`.
pub fn sphere_trace(scene: &Scene, origin: &Vec3, dir: &Vec3, time: f64, max_range: f64) -> Option<f64> {
    let mut t = 0.0;
    for _ in 0..TRACE_STEPS {
        let d = scene.sdf(&(origin + dir * t), time);
        if d < TRACE_EPS {
            return Some(t);
        }
        t += d;
        if t > max_range {
            return None;
        }
    }
    Some(t)
}

/// Point where the ray from the shape's center along `u` leaves its surface,
/// in the shape's own frame.
fn surface_point(shape: &Shape, u: &Vec3) -> Option<Vec3> {
    match shape {
        Shape::Sphere { center, radius } => Some(Vec3::from(*center) + u * *radius),
        Shape::Box {
            center,
            half_extents,
            rotation,
        } => {
            let rot = nalgebra::Matrix3::from_fn(|r, c| rotation[r][c]);
            let local = rot.transpose() * u;
            let t = (0..3)
                .filter(|&k| local[k].abs() > 1e-12)
                .map(|k| half_extents[k] / local[k].abs())
                .fold(f64::INFINITY, f64::min);
            Some(Vec3::from(*center) + rot * (local * t))
        }
        Shape::HalfSpace { .. } => None,
    }
}

/// Mostly horizontal direction: side faces reflect, tops and bottoms rarely.
fn scatter_direction(rng: &mut SeededRng) -> Vec3 {
    let phi = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    Vec3::new(phi.cos(), phi.sin(), rng.gen_range(-0.4..0.6)).normalize()
}

/// A surface point and its per-frame detection probability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scatterer {
    pub point: Vec3,
    pub probability: f64,
}

/// Scatter points of every object: world-frame for statics, actor-frame for
/// actors.
#[derive(Debug, Clone, PartialEq)]
pub struct ScatterSet {
    pub statics: Vec<Scatterer>,
    /// One list per actor, in the actor's local frame.
    pub actors: Vec<Vec<Scatterer>>,
}

impl ScatterSet {
    pub fn new(scene: &Scene, model: &TruthModel, seed: u64) -> Self {
        let sample = |shape: &Shape, key: u64| {
            let mut rng = seeded(derive_seed(seed, &[key]));
            (0..model.scatter_per_object)
                .filter_map(|_| {
                    let dir = scatter_direction(&mut rng);
                    let probability = model.detection_min + (model.detection_max - model.detection_min) * rng.gen::<f64>();
                    surface_point(shape, &dir).map(|point| Scatterer { point, probability })
                })
                .collect::<Vec<_>>()
        };
        Self {
            statics: scene
                .statics
                .iter()
                .enumerate()
                .flat_map(|(k, p)| sample(&p.shape, k as u64))
                .collect(),
            actors: scene
                .actors
                .iter()
                .enumerate()
                .map(|(k, a)| sample(&a.primitive.shape, 1_000_000 + k as u64))
                .collect(),
        }
    }

    /// Scatterers of active objects with world positions at time `t`.
    pub fn world_points(&self, scene: &Scene, t: f64) -> Vec<Scatterer> {
        let mut out = self.statics.clone();
        for (actor, pts) in scene.actors.iter().zip(&self.actors) {
            if !actor.active {
                continue;
            }
            let rot = yaw_rotation(actor.yaw_rate * t);
            let origin = actor.position_at(t);
            out.extend(pts.iter().map(|s| Scatterer {
                point: origin + rot * s.point,
                ..*s
            }));
        }
        out
    }
}

/// Range, azimuth and elevation noise draws.
fn measurement_noise(rng: &mut SeededRng, model: &TruthModel) -> Vec3 {
    Vec3::new(
        model.range_noise * standard_laplace(rng),
        model.azimuth_noise * standard_laplace(rng),
        model.elevation_noise * standard_laplace(rng),
    )
}

fn perturb(p: &Vec3, noise: &Vec3) -> Vec3 {
    let (r, az, el) = cartesian_to_spherical(p);
    spherical_to_cartesian((r + noise.x).max(0.0), az + noise.y, el + noise.z)
}

fn in_field_of_view(radar: &RadarConfig, p: &Vec3) -> bool {
    let (r, az, el) = cartesian_to_spherical(p);
    r > 0.0
        && r <= radar.max_range
        && (radar.azimuth_min..=radar.azimuth_max).contains(&az)
        && (radar.elevation_min..=radar.elevation_max).contains(&el)
}

/// Simulated radar detections for one scan, in the sensor frame. At most
/// `max_points` detections are kept, in generation order.
pub fn simulate_truth(
    scene: &Scene,
    scatter: &ScatterSet,
    pose: &SensorPose,
    radar: &RadarConfig,
    model: &TruthModel,
    max_points: usize,
    seed: u64,
) -> Result<PointCloud> {
    model.validate()?;
    let mut rng = seeded(seed);
    let mut points = Vec::new();
    let t = pose.time;
    for Scatterer { point: world, probability } in scatter.world_points(scene, t) {
        // Draw every time so the stream does not depend on visibility.
        let u = open_unit(&mut rng);
        let noise = measurement_noise(&mut rng, model);
        let local = pose.world_to_sensor(&world);
        if !in_field_of_view(radar, &local) || u >= probability {
            continue;
        }
        let dist = (world - pose.position).norm();
        let dir = (world - pose.position) / dist;
        let visible = match sphere_trace(scene, &pose.position, &dir, t, radar.max_range) {
            Some(hit) => hit >= dist - model.visibility_tolerance,
            None => true,
        };
        if visible {
            points.push(perturb(&local, &noise));
        }
    }
    for _ in 0..model.clutter_per_scan {
        let az = rng.gen_range(radar.azimuth_min..radar.azimuth_max);
        let el = rng.gen_range(radar.elevation_min..radar.elevation_max);
        let noise = measurement_noise(&mut rng, model);
        let dir_local = spherical_to_cartesian(1.0, az, el);
        let dir = pose.orientation * dir_local;
        if let Some(hit) = sphere_trace(scene, &pose.position, &dir, t, radar.max_range) {
            points.push(perturb(&(dir_local * hit), &noise));
        }
    }
    points.truncate(max_points);
    Ok(PointCloud::new(points))
}

/// Scans at `poses` with truths from [`simulate_truth`]; the truth seed of
/// frame `k` is `derive_seed(seed, [k])`.
pub fn simulate_sequence(
    scene: &Scene,
    poses: &[SensorPose],
    radar: &RadarConfig,
    model: &TruthModel,
    seed: u64,
) -> Result<Vec<PointCloud>> {
    let scatter = ScatterSet::new(scene, model, derive_seed(seed, &[u64::MAX]));
    let cap = radar.num_rays().saturating_sub(1);
    poses
        .iter()
        .enumerate()
        .map(|(k, pose)| simulate_truth(scene, &scatter, pose, radar, model, cap, derive_seed(seed, &[k as u64])))
        .collect()
}

/// Even-indexed items for training, odd-indexed items held out.
pub fn split_even_odd<T: Clone>(items: &[T]) -> (Vec<T>, Vec<T>) {
    let train = items.iter().step_by(2).cloned().collect();
    let test = items.iter().skip(1).step_by(2).cloned().collect();
    (train, test)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trace_hits_sphere_front() {
        let s = trivial_scene(4, 0).unwrap();
        let o = Vec3::new(0.0, 0.0, 1.0);
        let hit = sphere_trace(&s, &o, &Vec3::x(), 0.0, 40.0).unwrap();
        assert!((hit - 10.0).abs() < 1e-3);
        assert!(sphere_trace(&s, &o, &-Vec3::x(), 0.0, 40.0).is_none());
    }

    #[test]
    fn scatter_points_lie_on_surfaces() {
        let s = benchmark_scene(4, 0).unwrap();
        let model = TruthModel {
            scatter_per_object: 8,
            ..TruthModel::default()
        };
        let set = ScatterSet::new(&s, &model, 3);
        assert_eq!(set.statics.len(), 16);
        assert_eq!(set.actors[0].len(), 8);
        for t in [0.0, 0.7] {
            for Scatterer { point: p, probability } in set.world_points(&s, t) {
                assert!((0.15..0.9).contains(&probability));
                assert!(p.z > 0.05);
                let on_object = s.statics[1..]
                    .iter()
                    .map(|q| q.shape.sdf(&p).abs())
                    .chain(s.actors.iter().map(|a| a.sdf(&p, t).abs()))
                    .fold(f64::INFINITY, f64::min);
                assert!(on_object < 1e-9);
            }
        }
    }

    #[test]
    fn truth_is_sparse_reproducible_and_in_view() {
        let s = benchmark_scene(4, 0).unwrap();
        let radar = RadarConfig::desk();
        let poses = Trajectory::default().poses().unwrap();
        let model = TruthModel::default();
        let a = simulate_sequence(&s, &poses, &radar, &model, 9).unwrap();
        let b = simulate_sequence(&s, &poses, &radar, &model, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 16);
        for cloud in &a {
            assert!(cloud.len() >= 3 && cloud.len() < radar.num_rays(), "{}", cloud.len());
            for p in &cloud.points {
                assert!(p.norm() < radar.max_range + 2.0);
            }
        }
    }

    #[test]
    fn noiseless_certain_truth_lies_on_surfaces() {
        let s = benchmark_scene(4, 0).unwrap();
        let radar = RadarConfig::desk();
        let model = TruthModel {
            detection_min: 1.0,
            detection_max: 1.0,
            range_noise: 0.0,
            azimuth_noise: 0.0,
            elevation_noise: 0.0,
            ..TruthModel::default()
        };
        let pose = SensorPose::from_yaw(Vec3::new(0.0, 0.0, 1.0), 0.0, 0.3).unwrap();
        let scatter = ScatterSet::new(&s, &model, 1);
        let cloud = simulate_truth(&s, &scatter, &pose, &radar, &model, 1000, 5).unwrap();
        assert!(!cloud.is_empty());
        for p in &cloud.points {
            assert!(s.sdf(&pose.sensor_to_world(p), 0.3).abs() < 1e-3);
        }
    }

    #[test]
    fn split_alternates() {
        let (train, test) = split_even_odd(&[0, 1, 2, 3, 4]);
        assert_eq!(train, vec![0, 2, 4]);
        assert_eq!(test, vec![1, 3]);
    }

    #[test]
    fn trajectory_poses() {
        let p = Trajectory::default().poses().unwrap();
        assert_eq!(p.len(), 16);
        assert_eq!(p[3].position, Vec3::new(1.5, 0.0, 1.0));
        assert!((p[3].time - 0.3).abs() < 1e-15);
        assert!(Trajectory { frames: 0, ..Trajectory::default() }.poses().is_err());
    }
}

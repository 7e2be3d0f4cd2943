//! Sensor poses, rays and the radar ray grid.
//!
//! Spherical convention used throughout: azimuth is measured in the sensor
//! x-y plane from +x toward +y, elevation from the x-y plane toward +z.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rfs::DensityFamily;

pub type Vec3 = Vector3<f64>;

const ORTHONORMAL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct SensorPose {
    pub position: Vec3,
    /// world <- sensor
    pub orientation: Matrix3<f64>,
    pub time: f64,
}

impl SensorPose {
    pub fn new(position: Vec3, orientation: Matrix3<f64>, time: f64) -> Result<Self> {
        if !time.is_finite() || !position.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("pose position and time must be finite".into()));
        }
        let gram = orientation.transpose() * orientation;
        if (gram - Matrix3::identity()).abs().max() > ORTHONORMAL_TOL
            || (orientation.determinant() - 1.0).abs() > ORTHONORMAL_TOL
        {
            return Err(Error::InvalidInput(
                "pose orientation must be a proper rotation".into(),
            ));
        }
        Ok(Self {
            position,
            orientation,
            time,
        })
    }

    /// Pose with the sensor yawed by `yaw` radians about world +z.
    pub fn from_yaw(position: Vec3, yaw: f64, time: f64) -> Result<Self> {
        Self::new(position, yaw_rotation(yaw), time)
    }

    pub fn identity(time: f64) -> Self {
        Self {
            position: Vec3::zeros(),
            orientation: Matrix3::identity(),
            time,
        }
    }

    pub fn sensor_to_world(&self, p: &Vec3) -> Vec3 {
        self.orientation * p + self.position
    }

    pub fn world_to_sensor(&self, p: &Vec3) -> Vec3 {
        self.orientation.transpose() * (p - self.position)
    }

    /// Same pose displaced along its own sensor-frame axes.
    pub fn shifted_in_sensor_frame(&self, offset: &Vec3) -> Self {
        Self {
            position: self.position + self.orientation * offset,
            orientation: self.orientation,
            time: self.time,
        }
    }
}

pub fn yaw_rotation(yaw: f64) -> Matrix3<f64> {
    let (s, c) = yaw.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    /// Unit direction in the world frame.
    pub direction: Vec3,
    /// Sensor-frame azimuth.
    pub azimuth: f64,
    /// Sensor-frame elevation.
    pub elevation: f64,
    /// Scan time at which the scene is queried.
    pub time: f64,
}

impl Ray {
    pub fn at(&self, tau: f64) -> Vec3 {
        self.origin + self.direction * tau
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RadarConfig {
    pub azimuth_min: f64,
    pub azimuth_max: f64,
    pub elevation_min: f64,
    pub elevation_max: f64,
    pub ray_divergence_az: f64,
    pub ray_divergence_el: f64,
    pub max_range: f64,
    pub num_samples_per_ray: usize,
    pub density_family: DensityFamily,
    pub max_offset: f64,
    pub confidence_threshold: f64,
}

impl Default for RadarConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RadarConfig {
    /// Small 16 x 8 grid used for CPU-scale training.
    pub fn desk() -> Self {
        Self {
            azimuth_min: -0.4,
            azimuth_max: 0.4,
            elevation_min: -0.15,
            elevation_max: 0.25,
            ray_divergence_az: 0.05,
            ray_divergence_el: 0.05,
            max_range: 40.0,
            num_samples_per_ray: 64,
            density_family: DensityFamily::Laplace,
            max_offset: 1.5,
            confidence_threshold: 0.5,
        }
    }

    /// Field of view and ray pitch of the ZOD front radar.
    pub fn zod() -> Self {
        Self {
            azimuth_min: -45.84f64.to_radians(),
            azimuth_max: 45.84f64.to_radians(),
            elevation_min: -4.58f64.to_radians(),
            elevation_max: 22.92f64.to_radians(),
            ray_divergence_az: 0.015,
            ray_divergence_el: 0.015,
            max_range: 250.0,
            ..Self::desk()
        }
    }

    /// Field of view and ray pitch of the View-of-Delft radar.
    pub fn vod() -> Self {
        Self {
            azimuth_min: -57.29f64.to_radians(),
            azimuth_max: 57.29f64.to_radians(),
            elevation_min: -22.34f64.to_radians(),
            elevation_max: 28.07f64.to_radians(),
            ray_divergence_az: 0.02,
            ray_divergence_el: 0.02,
            max_range: 100.0,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all_finite = [
            self.azimuth_min,
            self.azimuth_max,
            self.elevation_min,
            self.elevation_max,
            self.ray_divergence_az,
            self.ray_divergence_el,
            self.max_range,
            self.max_offset,
            self.confidence_threshold,
        ]
        .iter()
        .all(|v| v.is_finite());
        let fail = |m: &str| Err(Error::Config(format!("radar: {m}")));
        if !all_finite {
            return fail("all fields must be finite");
        }
        if self.azimuth_max <= self.azimuth_min {
            return fail("azimuth_max must exceed azimuth_min");
        }
        if self.elevation_max <= self.elevation_min {
            return fail("elevation_max must exceed elevation_min");
        }
        if self.ray_divergence_az <= 0.0 || self.ray_divergence_el <= 0.0 {
            return fail("ray divergences must be positive");
        }
        if self.max_range <= 0.0 {
            return fail("max_range must be positive");
        }
        if !(self.confidence_threshold > 0.0 && self.confidence_threshold < 1.0) {
            return fail("confidence_threshold must lie in (0, 1)");
        }
        if self.max_offset < 0.0 {
            return fail("max_offset must be non-negative");
        }
        Ok(())
    }

    /// Ray counts (azimuth, elevation) implied by the field of view and pitch.
    pub fn grid_shape(&self) -> (usize, usize) {
        let n_az = ((self.azimuth_max - self.azimuth_min) / self.ray_divergence_az).round();
        let n_el = ((self.elevation_max - self.elevation_min) / self.ray_divergence_el).round();
        (n_az.max(0.0) as usize, n_el.max(0.0) as usize)
    }

    pub fn num_rays(&self) -> usize {
        let (a, e) = self.grid_shape();
        a * e
    }
}

/// Rays of one radar scan, azimuth varying fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct RayBundle {
    pub pose: SensorPose,
    pub rays: Vec<Ray>,
    pub n_azimuth: usize,
    pub n_elevation: usize,
}

impl RayBundle {
    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }
}

pub fn spherical_to_cartesian(range: f64, azimuth: f64, elevation: f64) -> Vec3 {
    let (sa, ca) = azimuth.sin_cos();
    let (se, ce) = elevation.sin_cos();
    Vec3::new(range * ce * ca, range * ce * sa, range * se)
}

/// Inverse of [`spherical_to_cartesian`]; the origin maps to `(0, 0, 0)`.
pub fn cartesian_to_spherical(p: &Vec3) -> (f64, f64, f64) {
    let range = p.norm();
    if range == 0.0 {
        return (0.0, 0.0, 0.0);
    }
    let azimuth = p.y.atan2(p.x);
    let elevation = p.z.atan2(p.x.hypot(p.y));
    (range, azimuth, elevation)
}

pub fn build_ray_grid(pose: &SensorPose, cfg: &RadarConfig) -> Result<RayBundle> {
    cfg.validate()?;
    let (n_az, n_el) = cfg.grid_shape();
    if n_az == 0 || n_el == 0 {
        return Err(Error::Config(format!(
            "ray grid is empty ({n_az} x {n_el}); divergence exceeds field of view"
        )));
    }
    let pitch_az = (cfg.azimuth_max - cfg.azimuth_min) / n_az as f64;
    let pitch_el = (cfg.elevation_max - cfg.elevation_min) / n_el as f64;
    let mut rays = Vec::with_capacity(n_az * n_el);
    for k in 0..n_el {
        let elevation = cfg.elevation_min + (k as f64 + 0.5) * pitch_el;
        for j in 0..n_az {
            let azimuth = cfg.azimuth_min + (j as f64 + 0.5) * pitch_az;
            let local = spherical_to_cartesian(1.0, azimuth, elevation);
            rays.push(Ray {
                origin: pose.position,
                direction: (pose.orientation * local).normalize(),
                azimuth,
                elevation,
                time: pose.time,
            });
        }
    }
    Ok(RayBundle {
        pose: pose.clone(),
        rays,
        n_azimuth: n_az,
        n_elevation: n_el,
    })
}

//! Analytic scene field standing in for a learned neural feature field.
//!
//! A query returns the exact signed distance to the nearest active primitive
//! and a deterministic feature vector keyed by that primitive's material.
//! Features are view-independent.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{yaw_rotation, Vec3};
use crate::rng::mix64;

pub const DEFAULT_FEATURE_DIM: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    Sphere {
        center: [f64; 3],
        radius: f64,
    },
    Box {
        center: [f64; 3],
        half_extents: [f64; 3],
        /// Row-major rotation, world <- box.
        rotation: [[f64; 3]; 3],
    },
    HalfSpace {
        normal: [f64; 3],
        offset: f64,
    },
}

impl Shape {
    pub fn sphere(center: Vec3, radius: f64) -> Self {
        Shape::Sphere {
            center: center.into(),
            radius,
        }
    }

    pub fn aligned_box(center: Vec3, half_extents: Vec3) -> Self {
        Self::yawed_box(center, half_extents, 0.0)
    }

    pub fn yawed_box(center: Vec3, half_extents: Vec3, yaw: f64) -> Self {
        let r = yaw_rotation(yaw);
        Shape::Box {
            center: center.into(),
            half_extents: half_extents.into(),
            rotation: [
                [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            ],
        }
    }

    /// Points `x` with `normal . x < offset` are inside.
    pub fn half_space(normal: Vec3, offset: f64) -> Self {
        Shape::HalfSpace {
            normal: normal.into(),
            offset,
        }
    }

    pub fn sdf(&self, x: &Vec3) -> f64 {
        match self {
            Shape::Sphere { center, radius } => (x - Vec3::from(*center)).norm() - radius,
            Shape::Box {
                center,
                half_extents,
                rotation,
            } => {
                let rot = rotation_matrix(rotation);
                let local = rot.transpose() * (x - Vec3::from(*center));
                let q = local.abs() - Vec3::from(*half_extents);
                let outside = q.map(|v| v.max(0.0)).norm();
                let inside = q.x.max(q.y).max(q.z).min(0.0);
                outside + inside
            }
            Shape::HalfSpace { normal, offset } => Vec3::from(*normal).dot(x) - offset,
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(format!("primitive: {m}")));
        match self {
            Shape::Sphere { radius, .. } if !(*radius > 0.0) => bad("sphere radius must be positive"),
            Shape::Box {
                half_extents,
                rotation,
                ..
            } => {
                if !half_extents.iter().all(|h| *h > 0.0) {
                    return bad("box half-extents must be positive");
                }
                let r = rotation_matrix(rotation);
                if ((r.transpose() * r) - Matrix3::identity()).abs().max() > 1e-9
                    || (r.determinant() - 1.0).abs() > 1e-9
                {
                    return bad("box rotation must be a proper rotation");
                }
                Ok(())
            }
            Shape::HalfSpace { normal, .. } if (Vec3::from(*normal).norm() - 1.0).abs() > 1e-9 => {
                bad("half-space normal must be unit length")
            }
            _ => Ok(()),
        }
    }
}

fn rotation_matrix(rows: &[[f64; 3]; 3]) -> Matrix3<f64> {
    Matrix3::new(
        rows[0][0], rows[0][1], rows[0][2], rows[1][0], rows[1][1], rows[1][2], rows[2][0],
        rows[2][1], rows[2][2],
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Primitive {
    pub shape: Shape,
    pub material_id: u32,
}

impl Primitive {
    pub fn new(shape: Shape, material_id: u32) -> Self {
        Self { shape, material_id }
    }
}

/// A rigid primitive moving with constant velocity and yaw rate.
///
/// The primitive is expressed in the actor's local frame; at time `t` the
/// frame sits at `position0 + velocity * t`, yawed by `yaw_rate * t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Actor {
    pub primitive: Primitive,
    pub position0: [f64; 3],
    pub velocity: [f64; 3],
    pub yaw_rate: f64,
    #[serde(default = "default_active")]
    pub active: bool,
}

fn default_active() -> bool {
    true
}

impl Actor {
    pub fn new(primitive: Primitive, position0: Vec3, velocity: Vec3, yaw_rate: f64) -> Self {
        Self {
            primitive,
            position0: position0.into(),
            velocity: velocity.into(),
            yaw_rate,
            active: true,
        }
    }

    pub fn position_at(&self, t: f64) -> Vec3 {
        Vec3::from(self.position0) + Vec3::from(self.velocity) * t
    }

    pub fn world_to_local(&self, x: &Vec3, t: f64) -> Vec3 {
        yaw_rotation(self.yaw_rate * t).transpose() * (x - self.position_at(t))
    }

    pub fn sdf(&self, x: &Vec3, t: f64) -> f64 {
        self.primitive.shape.sdf(&self.world_to_local(x, t))
    }

    /// Velocity of the world point `x` carried by the actor at time `t`.
    pub fn point_velocity(&self, x: &Vec3, t: f64) -> Vec3 {
        let arm = x - self.position_at(t);
        Vec3::from(self.velocity) + Vec3::new(-self.yaw_rate * arm.y, self.yaw_rate * arm.x, 0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub sdf: f64,
    pub feature: Vec<f64>,
    pub material_id: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub statics: Vec<Primitive>,
    #[serde(default)]
    pub actors: Vec<Actor>,
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    #[serde(default)]
    pub feature_seed: u64,
}

fn default_feature_dim() -> usize {
    DEFAULT_FEATURE_DIM
}

impl Scene {
    pub fn new(
        statics: Vec<Primitive>,
        actors: Vec<Actor>,
        feature_dim: usize,
        feature_seed: u64,
    ) -> Result<Self> {
        let scene = Self {
            statics,
            actors,
            feature_dim,
            feature_seed,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(Error::InvalidInput("scene feature_dim must be at least 1".into()));
        }
        if self.statics.is_empty() && self.actors.is_empty() {
            return Err(Error::InvalidInput("scene needs at least one primitive".into()));
        }
        for p in self.statics.iter().chain(self.actors.iter().map(|a| &a.primitive)) {
            p.shape.validate()?;
        }
        for a in &self.actors {
            let finite = a.position0.iter().chain(a.velocity.iter()).all(|v| v.is_finite())
                && a.yaw_rate.is_finite();
            if !finite {
                return Err(Error::InvalidInput("actor trajectory must be finite".into()));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let scene: Scene = serde_json::from_str(text)?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Copy of the scene with the actor at `index` deactivated.
    pub fn remove_actor(&self, index: usize) -> Result<Scene> {
        if index >= self.actors.len() {
            return Err(Error::IndexOutOfRange {
                index,
                len: self.actors.len(),
            });
        }
        let mut out = self.clone();
        out.actors[index].active = false;
        Ok(out)
    }

    /// Static-only copy of the scene (actors dropped).
    pub fn statics_only(&self) -> Scene {
        Scene {
            actors: Vec::new(),
            ..self.clone()
        }
    }

    /// Signed distance and the material of the nearest active primitive.
    pub fn nearest(&self, x: &Vec3, t: f64) -> (f64, u32) {
        let statics = self.statics.iter().map(|p| (p.shape.sdf(x), p.material_id));
        let actors = self
            .actors
            .iter()
            .filter(|a| a.active)
            .map(|a| (a.sdf(x, t), a.primitive.material_id));
        statics
            .chain(actors)
            .fold((f64::INFINITY, u32::MAX), |best, cand| {
                if cand.0 < best.0 || (cand.0 == best.0 && cand.1 < best.1) {
                    cand
                } else {
                    best
                }
            })
    }

    pub fn sdf(&self, x: &Vec3, t: f64) -> f64 {
        self.nearest(x, t).0
    }

    /// Field query at point `x`, time `t` and view direction `d`.
    ///
    /// The view direction is accepted for signature compatibility but does not
    /// influence the result.
    pub fn query(&self, x: &Vec3, t: f64, _d: &Vec3) -> SceneSample {
        let (sdf, material_id) = self.nearest(x, t);
        let attenuation = (-sdf.max(0.0)).exp();
        let mut feature = self.material_feature(material_id);
        feature.iter_mut().for_each(|v| *v *= attenuation);
        SceneSample {
            sdf,
            feature,
            material_id,
        }
    }

    /// Unit-norm pseudo-random feature vector for a material.
    pub fn material_feature(&self, material_id: u32) -> Vec<f64> {
        let base = mix64(self.feature_seed ^ mix64(material_id as u64 + 1));
        let mut v: Vec<f64> = (0..self.feature_dim)
            .map(|k| {
                let h = mix64(base.wrapping_add(k as u64));
                // Uniform in [-1, 1).
                (h >> 11) as f64 / (1u64 << 52) as f64 - 1.0
            })
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        } else {
            v[0] = 1.0;
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn unit_sphere_scene() -> Scene {
        Scene::new(
            vec![Primitive::new(Shape::sphere(Vec3::zeros(), 1.0), 0)],
            vec![],
            8,
            1,
        )
        .unwrap()
    }

    fn scene_with_actor() -> Scene {
        Scene::new(
            vec![Primitive::new(Shape::half_space(Vec3::z(), 0.0), 0)],
            vec![Actor::new(
                Primitive::new(Shape::aligned_box(Vec3::zeros(), Vec3::new(1.0, 0.5, 0.5)), 3),
                Vec3::new(5.0, 0.0, 1.0),
                Vec3::new(1.0, 0.0, 0.0),
                0.0,
            )],
            16,
            9,
        )
        .unwrap()
    }

    #[test]
    fn sphere_sdf_examples() {
        let s = unit_sphere_scene();
        let d = Vec3::x();
        assert_eq!(s.query(&Vec3::new(2.0, 0.0, 0.0), 0.0, &d).sdf, 1.0);
        assert_eq!(s.query(&Vec3::zeros(), 0.0, &d).sdf, -1.0);
    }

    #[test]
    fn actor_translates_with_velocity() {
        let s = scene_with_actor();
        let mut rng = crate::rng::seeded(4);
        for _ in 0..200 {
            let x = Vec3::new(
                rng.gen_range(0.0..12.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(0.1..3.0),
            );
            let a = s.actors[0].sdf(&x, 2.0);
            let b = s.actors[0].sdf(&(x - Vec3::new(2.0, 0.0, 0.0)), 0.0);
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn yawed_actor_keeps_rigid_shape() {
        let mut s = scene_with_actor();
        s.actors[0].yaw_rate = 0.5;
        let t = 1.3;
        let centre = s.actors[0].position_at(t);
        // The box is rigid: SDF at its moving center stays at -min(half extent).
        assert!((s.actors[0].sdf(&centre, t) + 0.5).abs() < 1e-12);
    }

    #[test]
    fn remove_actor_falls_back_to_statics() {
        let s = scene_with_actor();
        let removed = s.remove_actor(0).unwrap();
        let inside = Vec3::new(5.0, 0.0, 1.0);
        let d = Vec3::x();
        assert!(s.query(&inside, 0.0, &d).sdf < 0.0);
        assert_eq!(removed.query(&inside, 0.0, &d).sdf, 1.0);
        assert!(s.actors[0].active, "original must be unchanged");
        let stat = Vec3::new(-3.0, 2.0, 4.0);
        assert_eq!(removed.query(&stat, 0.0, &d), s.query(&stat, 0.0, &d));
        assert!(matches!(
            s.remove_actor(1),
            Err(Error::IndexOutOfRange { index: 1, len: 1 })
        ));
    }

    #[test]
    fn removing_all_actors_matches_statics_only() {
        let mut s = scene_with_actor();
        s.actors.push(s.actors[0].clone());
        s.actors[1].position0 = [8.0, 2.0, 1.0];
        let cleared = s.remove_actor(0).unwrap().remove_actor(1).unwrap();
        let statics = s.statics_only();
        let d = Vec3::x();
        for i in 0..10 {
            for j in 0..10 {
                for k in 0..10 {
                    let x = Vec3::new(i as f64 * 1.2, j as f64 * 0.6 - 3.0, k as f64 * 0.3 - 0.5);
                    assert_eq!(cleared.query(&x, 0.7, &d), statics.query(&x, 0.7, &d));
                }
            }
        }
    }

    #[test]
    fn sdf_is_one_lipschitz() {
        let mut s = scene_with_actor();
        s.statics.push(Primitive::new(Shape::sphere(Vec3::new(3.0, 3.0, 1.0), 1.5), 1));
        s.statics.push(Primitive::new(
            Shape::yawed_box(Vec3::new(10.0, -2.0, 1.0), Vec3::new(2.0, 1.0, 1.0), 0.4),
            2,
        ));
        let mut rng = crate::rng::seeded(77);
        for _ in 0..1000 {
            let mut p = || {
                Vec3::new(
                    rng.gen_range(-5.0..15.0),
                    rng.gen_range(-6.0..6.0),
                    rng.gen_range(-2.0..4.0),
                )
            };
            let (x, y) = (p(), p());
            let t = 0.4;
            assert!((s.sdf(&x, t) - s.sdf(&y, t)).abs() <= (x - y).norm() + 1e-12);
        }
    }

    #[test]
    fn features_are_deterministic_unit_and_view_independent() {
        let s = scene_with_actor();
        let x = Vec3::new(4.5, 0.0, 0.9);
        let a = s.query(&x, 0.0, &Vec3::x());
        let b = s.query(&x, 0.0, &Vec3::y());
        assert_eq!(a, b);
        let norm: f64 = a.feature.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12, "inside points carry unattenuated features");
        let f0 = s.material_feature(0);
        let f3 = s.material_feature(3);
        assert_ne!(f0, f3);
    }

    #[test]
    fn feature_attenuates_outside() {
        let s = unit_sphere_scene();
        let q = s.query(&Vec3::new(3.0, 0.0, 0.0), 0.0, &Vec3::x());
        let norm: f64 = q.feature.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - (-2.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn ties_pick_lowest_material() {
        let s = Scene::new(
            vec![
                Primitive::new(Shape::sphere(Vec3::new(2.0, 0.0, 0.0), 1.0), 5),
                Primitive::new(Shape::sphere(Vec3::new(-2.0, 0.0, 0.0), 1.0), 2),
            ],
            vec![],
            4,
            0,
        )
        .unwrap();
        assert_eq!(s.nearest(&Vec3::zeros(), 0.0), (1.0, 2));
    }

    #[test]
    fn invalid_scenes_rejected() {
        assert!(Scene::new(vec![], vec![], 4, 0).is_err());
        assert!(Scene::new(
            vec![Primitive::new(Shape::sphere(Vec3::zeros(), -1.0), 0)],
            vec![],
            4,
            0
        )
        .is_err());
        assert!(Scene::new(
            vec![Primitive::new(Shape::half_space(Vec3::new(0.0, 0.0, 2.0), 0.0), 0)],
            vec![],
            4,
            0
        )
        .is_err());
        assert!(Scene::new(vec![Primitive::new(Shape::sphere(Vec3::zeros(), 1.0), 0)], vec![], 0, 0).is_err());
    }

    #[test]
    fn json_round_trip() {
        let s = scene_with_actor();
        let back = Scene::from_json(&s.to_json().unwrap()).unwrap();
        assert_eq!(s, back);
    }
}

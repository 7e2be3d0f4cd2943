//! Bernoulli and Multi-Bernoulli random finite sets over 3D points.
//!
//! Log-probabilities of impossible events are `f64::NEG_INFINITY` and pass
//! through [`log_sum_exp`] without producing NaN.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::rng::{open_unit, seeded, standard_laplace, standard_normal};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DensityFamily {
    Laplace,
    Gaussian,
}

impl std::str::FromStr for DensityFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "laplace" => Ok(Self::Laplace),
            "gaussian" => Ok(Self::Gaussian),
            other => Err(Error::Config(format!("unknown density family `{other}`"))),
        }
    }
}

/// One-dimensional location-scale density. `scale` is the Laplace `b` or the
/// Gaussian standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisDensity {
    pub family: DensityFamily,
    pub mu: f64,
    pub scale: f64,
}

impl AxisDensity {
    pub fn new(family: DensityFamily, mu: f64, scale: f64) -> Result<Self> {
        if !(scale > 0.0) || !mu.is_finite() || !scale.is_finite() {
            return Err(Error::InvalidInput(format!(
                "axis density needs finite mu and scale > 0 (got mu={mu}, scale={scale})"
            )));
        }
        Ok(Self { family, mu, scale })
    }

    pub fn log_density(&self, v: f64) -> f64 {
        axis_log_density(self, v)
    }

    fn sample_with(&self, rng: &mut crate::rng::SeededRng) -> f64 {
        let z = match self.family {
            DensityFamily::Laplace => standard_laplace(rng),
            DensityFamily::Gaussian => standard_normal(rng),
        };
        self.mu + self.scale * z
    }
}

pub fn axis_log_density(d: &AxisDensity, v: f64) -> f64 {
    let z = (v - d.mu) / d.scale;
    match d.family {
        DensityFamily::Laplace => -(2.0 * d.scale).ln() - z.abs(),
        DensityFamily::Gaussian => -d.scale.ln() - 0.5 * (2.0 * PI).ln() - 0.5 * z * z,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BernoulliComponent {
    /// Existence probability.
    pub r: f64,
    pub axes: [AxisDensity; 3],
    /// Ray return position the component was decoded from.
    pub nff_anchor: Vec3,
}

impl BernoulliComponent {
    pub fn new(r: f64, axes: [AxisDensity; 3], nff_anchor: Vec3) -> Result<Self> {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::InvalidInput(format!("existence probability {r} outside [0, 1]")));
        }
        for a in &axes {
            AxisDensity::new(a.family, a.mu, a.scale)?;
        }
        Ok(Self { r, axes, nff_anchor })
    }

    /// Isotropic component centered at `mu`.
    pub fn isotropic(r: f64, family: DensityFamily, mu: Vec3, scale: f64) -> Result<Self> {
        let axes = [
            AxisDensity::new(family, mu.x, scale)?,
            AxisDensity::new(family, mu.y, scale)?,
            AxisDensity::new(family, mu.z, scale)?,
        ];
        Self::new(r, axes, mu)
    }

    pub fn mean(&self) -> Vec3 {
        Vec3::new(self.axes[0].mu, self.axes[1].mu, self.axes[2].mu)
    }

    /// Log of the factorized spatial density at `y`.
    pub fn point_log_density(&self, y: &Vec3) -> f64 {
        self.axes
            .iter()
            .zip(y.iter())
            .map(|(a, v)| a.log_density(*v))
            .sum()
    }
}

pub fn bernoulli_set_log_density(c: &BernoulliComponent, set: &[Vec3]) -> f64 {
    match set {
        [] => (1.0 - c.r).ln(),
        [y] => c.r.ln() + c.point_log_density(y),
        _ => f64::NEG_INFINITY,
    }
}

/// `log(sum(exp(xs)))`, returning `-inf` when every term is `-inf`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    if m == f64::INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiBernoulli {
    pub components: Vec<BernoulliComponent>,
}

impl MultiBernoulli {
    pub fn new(components: Vec<BernoulliComponent>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidInput("multi-Bernoulli needs at least one component".into()));
        }
        Ok(Self { components })
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn expected_cardinality(&self) -> f64 {
        self.components.iter().map(|c| c.r).sum()
    }
}

/// Exact set log-density: log-sum over every injective assignment of cloud
/// points to components, unassigned components contributing `1 - r`.
///
/// Cost grows factorially; meant for small sets.
pub fn mb_exact_set_log_density(mb: &MultiBernoulli, cloud: &PointCloud) -> f64 {
    let n = mb.len();
    let m = cloud.len();
    if m > n {
        return f64::NEG_INFINITY;
    }
    let empty: Vec<f64> = mb.components.iter().map(|c| (1.0 - c.r).ln()).collect();
    let present: Vec<Vec<f64>> = mb
        .components
        .iter()
        .map(|c| {
            cloud
                .points
                .iter()
                .map(|y| c.r.ln() + c.point_log_density(y))
                .collect()
        })
        .collect();

    let mut terms = Vec::new();
    let mut used = vec![false; n];
    enumerate_injections(0, m, &present, &empty, &mut used, 0.0, &mut terms);
    log_sum_exp(&terms)
}

fn enumerate_injections(
    point: usize,
    m: usize,
    present: &[Vec<f64>],
    empty: &[f64],
    used: &mut [bool],
    acc: f64,
    out: &mut Vec<f64>,
) {
    if point == m {
        let rest: f64 = used
            .iter()
            .zip(empty)
            .filter(|(u, _)| !**u)
            .map(|(_, e)| *e)
            .sum();
        out.push(acc + rest);
        return;
    }
    for comp in 0..used.len() {
        if used[comp] {
            continue;
        }
        used[comp] = true;
        enumerate_injections(point + 1, m, present, empty, used, acc + present[comp][point], out);
        used[comp] = false;
    }
}

/// Draws one point cloud: each component independently contributes a point
/// with probability `r`, placed by sampling every axis density.
pub fn mb_sample(mb: &MultiBernoulli, seed: u64) -> PointCloud {
    let mut rng = seeded(seed);
    let mut points = Vec::new();
    for c in &mb.components {
        // Both draws are consumed for every component so that the stream
        // position does not depend on earlier outcomes.
        let u = open_unit(&mut rng);
        let p = Vec3::new(
            c.axes[0].sample_with(&mut rng),
            c.axes[1].sample_with(&mut rng),
            c.axes[2].sample_with(&mut rng),
        );
        if u < c.r {
            points.push(p);
        }
    }
    PointCloud::new(points)
}

use serde::{Deserialize, Serialize};

use super::assignment::solve_rectangular;
use super::flow::transport_cost;
use crate::cloud::PointCloud;
use crate::error::{Error, Result};

/// Symmetric mean nearest-neighbour distance (not squared):
/// `mean_x min_y |x-y| / 2 + mean_y min_x |x-y| / 2`.
pub fn chamfer(x: &PointCloud, y: &PointCloud) -> Result<f64> {
    non_empty(x, y)?;
    let one_way = |a: &PointCloud, b: &PointCloud| {
        a.points
            .iter()
            .map(|p| {
                b.points
                    .iter()
                    .map(|q| (p - q).norm())
                    .fold(f64::INFINITY, f64::min)
            })
            .sum::<f64>()
            / a.len() as f64
    };
    Ok(0.5 * one_way(x, y) + 0.5 * one_way(y, x))
}

/// Earth mover's distance between the uniform distributions on `x` and `y`
/// under Euclidean ground cost, solved exactly.
pub fn emd(x: &PointCloud, y: &PointCloud) -> Result<f64> {
    non_empty(x, y)?;
    let (n, m) = (x.len(), y.len());
    let dist = |i: usize, j: usize| (x.points[i] - y.points[j]).norm();
    if n == m {
        let task = solve_rectangular(n, n, dist);
        let total: f64 = task.iter().enumerate().map(|(i, &j)| dist(i, j)).sum();
        return Ok(total / n as f64);
    }
    // Mass 1/n per x and 1/m per y, scaled to integers m/g and n/g.
    let g = gcd(n, m);
    let supply = vec![(m / g) as i64; n];
    let demand = vec![(n / g) as i64; m];
    let units = (n * m / g) as f64;
    Ok(transport_cost(&supply, &demand, dist) / units)
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn non_empty(x: &PointCloud, y: &PointCloud) -> Result<()> {
    if x.is_empty() {
        return Err(Error::EmptySet("first"));
    }
    if y.is_empty() {
        return Err(Error::EmptySet("second"));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GospaParams {
    pub c: f64,
    pub alpha: f64,
    pub p: f64,
}

impl Default for GospaParams {
    fn default() -> Self {
        Self {
            c: 1.0,
            alpha: 2.0,
            p: 1.0,
        }
    }
}

impl GospaParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0) || !(self.alpha > 0.0 && self.alpha <= 2.0) || !(self.p >= 1.0) {
            return Err(Error::Config(format!(
                "GOSPA needs c > 0, 0 < alpha <= 2, p >= 1 (got {self:?})"
            )));
        }
        Ok(())
    }
}

/// GOSPA value and its decomposition. The cost terms are before the `1/p`
/// root; `total` is after it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GospaResult {
    pub total: f64,
    pub localization: f64,
    pub missed: f64,
    pub false_detections: f64,
    pub missed_count: usize,
    pub false_count: usize,
    /// `(estimate, truth)` pairs that count as localized.
    pub pairs: Vec<(usize, usize)>,
}

/// GOSPA between an estimate `x` and ground truth `y`.
///
/// For `alpha = 2` pairs closer than `c` are localized and everything else is
/// a missed (truth) or false (estimate) point at `c^p / 2` each. For
/// `alpha < 2` the cut-off permutation form is used: cut-off pairs stay in the
/// localization term and only the cardinality mismatch is charged as missed
/// or false.
pub fn gospa(x: &PointCloud, y: &PointCloud, params: &GospaParams) -> Result<GospaResult> {
    params.validate()?;
    let GospaParams { c, alpha, p } = *params;
    let cp = c.powf(p);
    let d = |i: usize, j: usize| (x.points[i] - y.points[j]).norm();
    let capped = |i: usize, j: usize| d(i, j).min(c).powf(p);

    // Optimal cut-off matching of the smaller set into the larger one.
    let pairs_all: Vec<(usize, usize)> = if x.len() <= y.len() {
        solve_rectangular(x.len(), y.len(), capped)
            .into_iter()
            .enumerate()
            .collect()
    } else {
        solve_rectangular(y.len(), x.len(), |j, i| capped(i, j))
            .into_iter()
            .enumerate()
            .map(|(j, i)| (i, j))
            .collect()
    };

    let mut pairs: Vec<(usize, usize)> = if alpha == 2.0 {
        pairs_all.iter().copied().filter(|&(i, j)| d(i, j) < c).collect()
    } else {
        pairs_all.clone()
    };
    pairs.sort_unstable_by_key(|&(_, j)| j);
    let localization: f64 = pairs.iter().map(|&(i, j)| capped(i, j)).sum();
    let missed_count = y.len() - pairs.len();
    let false_count = x.len() - pairs.len();
    let missed = cp / alpha * missed_count as f64;
    let false_detections = cp / alpha * false_count as f64;
    let total = (localization + missed + false_detections).powf(1.0 / p);
    Ok(GospaResult {
        total,
        localization,
        missed,
        false_detections,
        missed_count,
        false_count,
        pairs,
    })
}

/// Chamfer, EMD and GOSPA for one prediction/truth pair. Chamfer and EMD are
/// `None` when either set is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetMetrics {
    pub chamfer: Option<f64>,
    pub emd: Option<f64>,
    pub gospa: GospaResult,
}

impl SetMetrics {
    pub fn compute(pred: &PointCloud, truth: &PointCloud, params: &GospaParams) -> Result<Self> {
        let optional = |r: Result<f64>| match r {
            Ok(v) => Ok(Some(v)),
            Err(Error::EmptySet(_)) => Ok(None),
            Err(e) => Err(e),
        };
        Ok(Self {
            chamfer: optional(chamfer(pred, truth))?,
            emd: optional(emd(pred, truth))?,
            gospa: gospa(pred, truth, params)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;

    fn pc(pts: &[[f64; 3]]) -> PointCloud {
        PointCloud::new(pts.iter().map(|p| Vec3::from(*p)).collect())
    }

    #[test]
    fn chamfer_examples() {
        let a = pc(&[[0.0, 0.0, 0.0], [1.0, 2.0, 3.0]]);
        assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
        assert_eq!(chamfer(&pc(&[[0.0; 3]]), &pc(&[[1.0, 0.0, 0.0]])).unwrap(), 1.0);
        assert!(matches!(chamfer(&PointCloud::empty(), &a), Err(Error::EmptySet(_))));
    }

    #[test]
    fn emd_examples() {
        let a = pc(&[[0.0, 0.0, 0.0], [1.0, 2.0, 3.0]]);
        assert_eq!(emd(&a, &a).unwrap(), 0.0);
        assert_eq!(emd(&pc(&[[0.0; 3]]), &pc(&[[1.0, 0.0, 0.0]])).unwrap(), 1.0);
        // One source split evenly over two sinks.
        let two = pc(&[[1.0, 0.0, 0.0], [3.0, 0.0, 0.0]]);
        assert!((emd(&pc(&[[0.0; 3]]), &two).unwrap() - 2.0).abs() < 1e-12);
        assert!(emd(&a, &PointCloud::empty()).is_err());
    }

    #[test]
    fn gospa_examples() {
        let params = GospaParams::default();
        let a = pc(&[[0.0, 0.0, 0.0], [4.0, 1.0, 0.0]]);
        assert_eq!(gospa(&a, &a, &params).unwrap().total, 0.0);

        let y3 = pc(&[[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        let g = gospa(&PointCloud::empty(), &y3, &params).unwrap();
        assert_eq!(g.total, 1.5);
        assert_eq!(g.missed_count, 3);

        let g = gospa(&pc(&[[0.0; 3]]), &pc(&[[0.0; 3], [10.0, 0.0, 0.0]]), &params).unwrap();
        assert_eq!(g.total, 0.5);
        assert_eq!((g.missed_count, g.false_count), (1, 0));
        assert_eq!(g.localization, 0.0);
    }

    #[test]
    fn gospa_counts_far_pair_as_missed_and_false() {
        let g = gospa(&pc(&[[0.0; 3]]), &pc(&[[5.0, 0.0, 0.0]]), &GospaParams::default()).unwrap();
        assert_eq!((g.missed_count, g.false_count), (1, 1));
        assert_eq!(g.total, 1.0);
        assert!(g.pairs.is_empty());
    }

    #[test]
    fn gospa_general_alpha_and_p() {
        let params = GospaParams { c: 2.0, alpha: 1.0, p: 2.0 };
        let g = gospa(&pc(&[[0.0; 3]]), &pc(&[[1.0, 0.0, 0.0], [9.0, 0.0, 0.0]]), &params).unwrap();
        // 1^2 + 2^2 / 1 * 1 = 5
        assert!((g.total - 5f64.sqrt()).abs() < 1e-12);
        assert!(gospa(&PointCloud::empty(), &PointCloud::empty(), &GospaParams { c: 0.0, ..params }).is_err());
    }

    #[test]
    fn both_empty_is_zero() {
        let g = gospa(&PointCloud::empty(), &PointCloud::empty(), &GospaParams::default()).unwrap();
        assert_eq!(g.total, 0.0);
    }
}

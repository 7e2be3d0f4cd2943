//! Assignment-based radar losses with analytic gradients.
//!
//! The matching is solved once per evaluation and treated as constant when
//! differentiating; gradients are exact almost everywhere and use a zero
//! subgradient where a predicted point coincides with its truth point.

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::matching::{build_cost_matrix, solve_assignment, Assignment};
use crate::rfs::{AxisDensity, BernoulliComponent, DensityFamily, MultiBernoulli};

/// Per-ray decoder outputs. Existence is `logistic(logit_r)` and the spatial
/// scale is `exp(log_scale)` per axis.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionParams {
    pub anchors: Vec<Vec3>,
    pub offsets: Vec<Vec3>,
    pub logit_r: Vec<f64>,
    pub log_scale: Vec<Vec3>,
}

/// Gradient of a scalar loss with respect to the free entries of
/// [`PredictionParams`] (anchors are data, not parameters).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradient {
    pub offsets: Vec<Vec3>,
    pub logit_r: Vec<f64>,
    pub log_scale: Vec<Vec3>,
}

impl ParamGradient {
    pub fn zeros(n: usize) -> Self {
        Self {
            offsets: vec![Vec3::zeros(); n],
            logit_r: vec![0.0; n],
            log_scale: vec![Vec3::zeros(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.logit_r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logit_r.is_empty()
    }

    pub fn scale(&mut self, k: f64) {
        self.offsets.iter_mut().for_each(|v| *v *= k);
        self.logit_r.iter_mut().for_each(|v| *v *= k);
        self.log_scale.iter_mut().for_each(|v| *v *= k);
    }
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Sign with `sign0(0) = 0`.
fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `log(logistic(x))`.
pub fn log_logistic(x: f64) -> f64 {
    -softplus(-x)
}

impl PredictionParams {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.anchors.len();
        if self.offsets.len() != n || self.logit_r.len() != n || self.log_scale.len() != n {
            return Err(Error::ShapeMismatch("prediction parameter lengths differ".into()));
        }
        let finite = self
            .anchors
            .iter()
            .chain(&self.offsets)
            .chain(&self.log_scale)
            .all(|v| v.iter().all(|x| x.is_finite()))
            && self.logit_r.iter().all(|x| x.is_finite());
        if !finite {
            return Err(Error::Numeric("non-finite prediction parameters".into()));
        }
        Ok(())
    }

    pub fn position(&self, i: usize) -> Vec3 {
        self.anchors[i] + self.offsets[i]
    }

    pub fn positions(&self) -> Vec<Vec3> {
        (0..self.len()).map(|i| self.position(i)).collect()
    }

    pub fn existence(&self, i: usize) -> f64 {
        logistic(self.logit_r[i])
    }

    pub fn scale(&self, i: usize) -> Vec3 {
        self.log_scale[i].map(f64::exp)
    }

    pub fn to_multi_bernoulli(&self, family: DensityFamily) -> Result<MultiBernoulli> {
        let comps = (0..self.len())
            .map(|i| {
                let mu = self.position(i);
                let s = self.scale(i);
                let axes = [
                    AxisDensity::new(family, mu.x, s.x)?,
                    AxisDensity::new(family, mu.y, s.y)?,
                    AxisDensity::new(family, mu.z, s.z)?,
                ];
                BernoulliComponent::new(self.existence(i), axes, self.anchors[i])
            })
            .collect::<Result<Vec<_>>>()?;
        MultiBernoulli::new(comps)
    }

    pub fn matching(&self, truth: &PointCloud) -> Result<Assignment> {
        let preds: Vec<(Vec3, f64)> = (0..self.len())
            .map(|i| (self.position(i), self.existence(i)))
            .collect();
        Ok(solve_assignment(&build_cost_matrix(&preds, truth)?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub matched_term: f64,
    pub unmatched_term: f64,
    pub gradient: ParamGradient,
    pub assignment: Assignment,
}

fn prepare(params: &PredictionParams, truth: &PointCloud) -> Result<Assignment> {
    params.validate()?;
    if params.len() <= truth.len() {
        return Err(Error::Cardinality {
            predictions: params.len(),
            truth: truth.len(),
        });
    }
    params.matching(truth)
}

/// `-sum_unmatched log(1 - r_i)` and its logit gradient (`r_i`).
fn unmatched_penalty(params: &PredictionParams, a: &Assignment, grad: &mut ParamGradient) -> f64 {
    a.unmatched
        .iter()
        .map(|&i| {
            let l = params.logit_r[i];
            grad.logit_r[i] += logistic(l);
            softplus(l)
        })
        .sum()
}

/// Distance-plus-confidence loss over the optimal matching.
pub fn deterministic_loss(params: &PredictionParams, truth: &PointCloud) -> Result<LossReport> {
    let assignment = prepare(params, truth)?;
    let mut grad = ParamGradient::zeros(params.len());
    let mut matched_term = 0.0;
    for &(i, j) in &assignment.pairs {
        let diff = params.position(i) - truth.points[j];
        let dist = diff.norm();
        let l = params.logit_r[i];
        matched_term += dist - log_logistic(l);
        if dist > 0.0 {
            grad.offsets[i] += diff / dist;
        }
        grad.logit_r[i] += logistic(l) - 1.0;
    }
    let unmatched_term = unmatched_penalty(params, &assignment, &mut grad);
    Ok(LossReport {
        total: matched_term + unmatched_term,
        matched_term,
        unmatched_term,
        gradient: grad,
        assignment,
    })
}

/// Negative log-likelihood of the multi-Bernoulli prediction restricted to the
/// optimal matching.
pub fn probabilistic_loss(
    params: &PredictionParams,
    truth: &PointCloud,
    family: DensityFamily,
) -> Result<LossReport> {
    let assignment = prepare(params, truth)?;
    let mut grad = ParamGradient::zeros(params.len());
    let mut matched_term = 0.0;
    let half_log_tau = 0.5 * std::f64::consts::TAU.ln();
    for &(i, j) in &assignment.pairs {
        let mu = params.position(i);
        let l = params.logit_r[i];
        matched_term -= log_logistic(l);
        grad.logit_r[i] += logistic(l) - 1.0;
        for axis in 0..3 {
            let ls = params.log_scale[i][axis];
            let scale = ls.exp();
            let e = truth.points[j][axis] - mu[axis];
            match family {
                DensityFamily::Laplace => {
                    // -log p = log 2 + log b + |e| / b
                    matched_term += std::f64::consts::LN_2 + ls + e.abs() / scale;
                    grad.offsets[i][axis] -= sign0(e) / scale;
                    grad.log_scale[i][axis] += 1.0 - e.abs() / scale;
                }
                DensityFamily::Gaussian => {
                    // -log p = log s + log sqrt(2 pi) + e^2 / (2 s^2)
                    let z = e / scale;
                    matched_term += ls + half_log_tau + 0.5 * z * z;
                    grad.offsets[i][axis] -= e / (scale * scale);
                    grad.log_scale[i][axis] += 1.0 - z * z;
                }
            }
        }
    }
    let unmatched_term = unmatched_penalty(params, &assignment, &mut grad);
    Ok(LossReport {
        total: matched_term + unmatched_term,
        matched_term,
        unmatched_term,
        gradient: grad,
        assignment,
    })
}

/// Coordinates of the free parameters, for finite differencing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamCoord {
    Offset(usize, usize),
    Logit(usize),
    LogScale(usize, usize),
}

impl ParamCoord {
    pub fn all(n: usize) -> Vec<ParamCoord> {
        let mut out = Vec::with_capacity(7 * n);
        for i in 0..n {
            out.push(ParamCoord::Logit(i));
            for a in 0..3 {
                out.push(ParamCoord::Offset(i, a));
                out.push(ParamCoord::LogScale(i, a));
            }
        }
        out
    }

    pub fn get(&self, g: &ParamGradient) -> f64 {
        match *self {
            ParamCoord::Offset(i, a) => g.offsets[i][a],
            ParamCoord::Logit(i) => g.logit_r[i],
            ParamCoord::LogScale(i, a) => g.log_scale[i][a],
        }
    }

    fn perturb(&self, p: &PredictionParams, h: f64) -> PredictionParams {
        let mut q = p.clone();
        match *self {
            ParamCoord::Offset(i, a) => q.offsets[i][a] += h,
            ParamCoord::Logit(i) => q.logit_r[i] += h,
            ParamCoord::LogScale(i, a) => q.log_scale[i][a] += h,
        }
        q
    }
}

/// Relative error with a floor on the denominator so that near-zero
/// gradients are compared absolutely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

/// Largest relative error between the analytic gradient of `loss_fn` and
/// central differences with step `h`, over every free parameter.
///
/// Fails with [`Error::MatchingSwitch`] if any perturbation changes the
/// matching, since the loss is not differentiable there.
pub fn finite_difference_check<F>(
    loss_fn: F,
    params: &PredictionParams,
    truth: &PointCloud,
    h: f64,
) -> Result<f64>
where
    F: Fn(&PredictionParams, &PointCloud) -> Result<LossReport>,
{
    let base = loss_fn(params, truth)?;
    let mut worst: f64 = 0.0;
    for coord in ParamCoord::all(params.len()) {
        let plus = loss_fn(&coord.perturb(params, h), truth)?;
        let minus = loss_fn(&coord.perturb(params, -h), truth)?;
        if plus.assignment != base.assignment || minus.assignment != base.assignment {
            return Err(Error::MatchingSwitch);
        }
        let numeric = (plus.total - minus.total) / (2.0 * h);
        worst = worst.max(relative_error(coord.get(&base.gradient), numeric));
    }
    Ok(worst)
}

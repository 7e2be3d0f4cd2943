use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::geometry::Vec3;

/// Existence probabilities are clamped to `[EXISTENCE_CLAMP, 1 - EXISTENCE_CLAMP]`
/// before entering the matching cost.
pub const EXISTENCE_CLAMP: f64 = 1e-7;

/// Row-major `predictions x truth` cost matrix with at least as many rows as
/// columns.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} entries for a {rows}x{cols} cost matrix",
                entries.len()
            )));
        }
        if rows < cols {
            return Err(Error::Cardinality {
                predictions: rows,
                truth: cols,
            });
        }
        if !entries.iter().all(|c| c.is_finite()) {
            return Err(Error::InvalidInput("cost matrix entries must be finite".into()));
        }
        Ok(Self { rows, cols, entries })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::ShapeMismatch("ragged cost matrix".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.cols + j]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `(prediction, truth)` pairs, ordered by truth index.
    pub pairs: Vec<(usize, usize)>,
    /// Prediction indices left without a partner, ascending.
    pub unmatched: Vec<usize>,
}

impl Assignment {
    pub fn total_cost(&self, c: &CostMatrix) -> f64 {
        self.pairs.iter().map(|&(i, j)| c.get(i, j)).sum()
    }

    /// Prediction assigned to each truth index.
    pub fn prediction_for_truth(&self) -> Vec<usize> {
        self.pairs.iter().map(|&(i, _)| i).collect()
    }
}

/// Matching cost `||y_hat_i - y_j|| - log(r_i)` with `r_i` clamped.
pub fn build_cost_matrix(preds: &[(Vec3, f64)], truth: &PointCloud) -> Result<CostMatrix> {
    if preds.len() <= truth.len() {
        return Err(Error::Cardinality {
            predictions: preds.len(),
            truth: truth.len(),
        });
    }
    let mut entries = Vec::with_capacity(preds.len() * truth.len());
    for (pos, r) in preds {
        let penalty = -r.clamp(EXISTENCE_CLAMP, 1.0 - EXISTENCE_CLAMP).ln();
        entries.extend(truth.points.iter().map(|y| (pos - y).norm() + penalty));
    }
    CostMatrix::new(preds.len(), truth.len(), entries)
}

pub fn solve_assignment(c: &CostMatrix) -> Assignment {
    let owner = solve_rectangular(c.cols, c.rows, |j, i| c.get(i, j));
    let mut matched = vec![false; c.rows];
    let pairs: Vec<(usize, usize)> = owner
        .iter()
        .enumerate()
        .map(|(j, &i)| {
            matched[i] = true;
            (i, j)
        })
        .collect();
    let unmatched = (0..c.rows).filter(|&i| !matched[i]).collect();
    Assignment { pairs, unmatched }
}

/// Minimum-cost assignment of every one of `n` agents to a distinct task out of
/// `m >= n`, with `cost(agent, task)`. Returns the task of each agent.
///
/// Shortest augmenting path Hungarian method with potentials, O(n^2 m). When
/// several tasks tie for the minimum slack the lowest task index is taken.
pub fn solve_rectangular(n: usize, m: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    assert!(n <= m, "need at least as many tasks as agents");
    if n == 0 {
        return Vec::new();
    }
    // 1-based arrays; index 0 is the virtual root.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for agent in 1..=n {
        owner[0] = agent;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut task_of = vec![0usize; n];
    for j in 1..=m {
        if owner[j] > 0 {
            task_of[owner[j] - 1] = j - 1;
        }
    }
    task_of
}

//! Optimal assignment between predictions and ground truth, and point-set
//! metrics built on it.

mod assignment;
mod flow;
mod metrics;

pub use assignment::{
    build_cost_matrix, solve_assignment, solve_rectangular, Assignment, CostMatrix,
    EXISTENCE_CLAMP,
};
pub use flow::transport_cost;
pub use metrics::{chamfer, emd, gospa, GospaParams, GospaResult, SetMetrics};

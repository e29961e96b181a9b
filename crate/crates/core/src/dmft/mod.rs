//! Monte-Carlo solver for the discretized dynamical mean-field system.
//!
//! The high-dimensional dynamics reduce to two scalar effective processes
//! coupled through two-time kernels:
//!
//! * the field `r`, driven by a Gaussian path `w ~ GP(0, C_θ)` and the
//!   memory `−(1/δ) Σ_{j<i} R_θ(i,j) ℓ_j (γ + √(τδ) ΔB_j)`;
//! * the parameter `θ`, driven by `U ~ GP(0, Σ_ℓ/δ)`, the regularizer, and
//!   the loss response kernels `Γ`, `R_ℓ`, `R_ℓ(·,*)`.
//!
//! [`r_pass`] samples the first and returns `(Σ_ℓ, R_ℓ, Γ)`; [`theta_pass`]
//! samples the second and returns `(C_θ, R_θ)`. Responses are obtained by
//! differentiating each sampled recursion exactly, so no separate
//! noise-correction terms are needed. [`fixed_point_solve`] iterates the two
//! with damping.

mod predict;
mod r_pass;
mod solver;
mod state;
mod theta_pass;

pub use predict::{predict_errors, test_error, test_error_se};
pub use r_pass::{
    effective_field_path, field_jacobian, r_pass, r_pass_detailed, FieldPath, PathBatch,
    PathDetail, RPassOutput,
};
pub use solver::{fixed_point_solve, fixed_point_solve_from, ConvergenceReport, IterationRecord};
pub use state::{init_state, perturb_state, DMFTState, SolverParams, StarEstimator};
pub use theta_pass::{parameter_path, parameter_response, theta_pass, ThetaPassOutput};

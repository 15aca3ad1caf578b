//! Joint-level dynamics engine for articulated objects.
//!
//! A joint's behavior along its single degree of freedom is modeled as three
//! position-dependent fields over the normalized coordinate `s ∈ [0, 1]`:
//! a conservative force, a dry-friction magnitude, and a damping
//! coefficient. Fields are composed from effect components (shape-preserving
//! cubic curves on subintervals), compiled from structured proposals against
//! joint-specific reference magnitudes, simulated with a semi-implicit
//! integrator, diagnosed into quasi-static profiles, and refined by
//! gradient descent through a differentiable rollout.

pub mod compiler;
pub mod curve;
pub mod diag;
pub mod field;
pub mod refine;
pub mod schema;
pub mod sim;

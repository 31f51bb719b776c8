//! Robust adaptive time-varying control barrier function (RaTVCBF) safety
//! filtering with set-membership parameter identification.
//!
//! The crate is organised bottom-up:
//!
//! - [`plant`]: Kelvin-Voigt contact dynamics with a bounded input disturbance
//!   and a fixed-step RK4 integrator.
//! - [`barrier`]: the time-varying force-box barrier, its partial derivatives,
//!   and the robustness margins (parameter-error tightening, ISSf inflation).
//! - [`adaptation`]: the safety-oriented parameter update law and the
//!   effective parameter used inside the filter constraint.
//! - [`smid`]: set-membership identification of the admissible parameter box.
//! - [`safety_filter`]: constraint assembly and the exact box-constrained QP.
//! - [`scenario`]: the surface-treatment task (contact area, Preston MRR,
//!   force-bound schedule, nominal force controller).
//! - [`harness`]: the closed-loop experiment runner, metrics and outputs.
//!
//! Contact force is positive when pushing into the surface:
//! `f_c = k * p + b * p_dot`. The parameter vector is laid out as
//! `theta = [k_1..k_n, b_1..b_n]` and the state as `x = [p_1..p_n, p_dot_1..p_dot_n]`.

pub mod adaptation;
pub mod barrier;
pub mod error;
pub mod harness;
pub mod plant;
pub mod safety_filter;
pub mod scenario;
pub mod smid;

pub use error::{Error, Result};

//! Time-varying force-box barrier and its robustness margins.
//!
//! For one contact axis with estimated force `f = k_hat * p + b_hat * p_dot`
//! and an admissible corridor `[f_lo(t), f_up(t)]`,
//!
//! ```text
//! h_r(x, theta_hat, t) = (f - f_lo(t)) * (f_up(t) - f)
//! ```
//!
//! The chain rule runs through `dh/df = f_up + f_lo - 2 f`, so every partial
//! derivative is that scalar times the matching slice of `[k_hat, b_hat]`
//! (state) or `[p, p_dot]` (parameters).

use nalgebra::{DMatrix, DVector};

use crate::error::{ensure_finite, Error, Result};
use crate::plant::SysState;

/// Piecewise-linear corridor `(f_lower(t), f_upper(t))`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundSchedule {
    breakpoints: Vec<f64>,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

/// Corridor values and their time derivatives at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub lower: f64,
    pub upper: f64,
    pub lower_rate: f64,
    pub upper_rate: f64,
}

impl Bounds {
    pub fn center(&self) -> f64 {
        0.5 * (self.lower + self.upper)
    }

    /// Largest barrier value, reached at the corridor center.
    pub fn apex(&self) -> f64 {
        let half = 0.5 * (self.upper - self.lower);
        half * half
    }

    pub fn contains(&self, force: f64) -> bool {
        self.lower <= force && force <= self.upper
    }
}

impl BoundSchedule {
    pub fn new(breakpoints: Vec<f64>, lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if breakpoints.is_empty() {
            return Err(Error::invalid("schedule needs at least one breakpoint"));
        }
        if breakpoints.len() != lower.len() || breakpoints.len() != upper.len() {
            return Err(Error::invalid("schedule arrays differ in length"));
        }
        ensure_finite("schedule", &breakpoints)?;
        ensure_finite("schedule", &lower)?;
        ensure_finite("schedule", &upper)?;
        if breakpoints.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("schedule breakpoints must be strictly increasing"));
        }
        if let Some(i) = (0..lower.len()).find(|&i| lower[i] >= upper[i]) {
            return Err(Error::invalid(format!(
                "lower bound {} not below upper bound {} at t = {}",
                lower[i], upper[i], breakpoints[i]
            )));
        }
        Ok(Self {
            breakpoints,
            lower,
            upper,
        })
    }

    /// Static corridor over `[start, end]`.
    pub fn constant(lower: f64, upper: f64, start: f64, end: f64) -> Result<Self> {
        if end > start {
            Self::new(vec![start, end], vec![lower, lower], vec![upper, upper])
        } else {
            Self::new(vec![start], vec![lower], vec![upper])
        }
    }

    pub fn start(&self) -> f64 {
        self.breakpoints[0]
    }

    pub fn end(&self) -> f64 {
        *self.breakpoints.last().unwrap()
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn lower_values(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper_values(&self) -> &[f64] {
        &self.upper
    }

    /// Corridor at `t`. Rates are right-hand derivatives at breakpoints; at the
    /// final breakpoint the last segment's slope is used.
    pub fn eval(&self, t: f64) -> Result<Bounds> {
        let (start, end) = (self.start(), self.end());
        // absorb accumulated rounding of t = i * dt at the domain ends
        let slack = 1e-9 * end.abs().max(1.0);
        if !t.is_finite() || t < start - slack || t > end + slack {
            return Err(Error::OutOfDomain { t, start, end });
        }
        let t = t.clamp(start, end);
        let n = self.breakpoints.len();
        if n == 1 {
            return Ok(Bounds {
                lower: self.lower[0],
                upper: self.upper[0],
                lower_rate: 0.0,
                upper_rate: 0.0,
            });
        }
        let seg = self
            .breakpoints
            .partition_point(|&b| b <= t)
            .saturating_sub(1)
            .min(n - 2);
        let (t0, t1) = (self.breakpoints[seg], self.breakpoints[seg + 1]);
        let span = t1 - t0;
        let s = (t - t0) / span;
        let lower_rate = (self.lower[seg + 1] - self.lower[seg]) / span;
        let upper_rate = (self.upper[seg + 1] - self.upper[seg]) / span;
        Ok(Bounds {
            lower: self.lower[seg] + s * (self.lower[seg + 1] - self.lower[seg]),
            upper: self.upper[seg] + s * (self.upper[seg + 1] - self.upper[seg]),
            lower_rate,
            upper_rate,
        })
    }
}

/// Barrier value with its partial derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct BarrierEval {
    pub h_r: f64,
    /// `dh_r/dx`, length `2n`.
    pub dh_dx: Vec<f64>,
    /// `dh_r/dtheta`, length `2n`.
    pub dh_dtheta: Vec<f64>,
    /// Explicit time partial.
    pub dh_dt: f64,
}

/// Current parameter knowledge used by the robust filter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamEstimate {
    pub theta_hat: Vec<f64>,
    /// Symmetric positive-definite adaptation gain.
    pub gamma: DMatrix<f64>,
    /// Per-element bound on `|theta* - theta_hat|`.
    pub vartheta: Vec<f64>,
    /// Coordinates currently held on a face of the parameter box.
    pub frozen: Vec<bool>,
}

impl ParamEstimate {
    pub fn new(theta_hat: Vec<f64>, gamma: DMatrix<f64>, vartheta: Vec<f64>) -> Result<Self> {
        let k = theta_hat.len();
        if gamma.nrows() != k || gamma.ncols() != k || vartheta.len() != k {
            return Err(Error::invalid("estimate dimensions disagree"));
        }
        ensure_finite("theta_hat", &theta_hat)?;
        ensure_finite("vartheta", &vartheta)?;
        if vartheta.iter().any(|v| *v < 0.0) {
            return Err(Error::invalid("vartheta must be elementwise >= 0"));
        }
        validate_gain(&gamma)?;
        Ok(Self {
            frozen: vec![false; k],
            theta_hat,
            gamma,
            vartheta,
        })
    }

    pub fn with_diagonal_gain(theta_hat: Vec<f64>, gains: &[f64], vartheta: Vec<f64>) -> Result<Self> {
        let gamma = DMatrix::from_diagonal(&DVector::from_column_slice(gains));
        Self::new(theta_hat, gamma, vartheta)
    }
}

fn validate_gain(gamma: &DMatrix<f64>) -> Result<()> {
    if !gamma.is_square() {
        return Err(Error::invalid("adaptation gain must be square"));
    }
    if gamma.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("adaptation gain must be finite"));
    }
    let scale = gamma.amax().max(1.0);
    if (gamma - gamma.transpose()).amax() > 1e-12 * scale {
        return Err(Error::invalid("adaptation gain must be symmetric"));
    }
    if min_eigenvalue(gamma) <= 0.0 {
        return Err(Error::invalid("adaptation gain must be positive definite"));
    }
    Ok(())
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    let off_diagonal = m
        .iter()
        .enumerate()
        .any(|(idx, v)| idx % (m.nrows() + 1) != 0 && *v != 0.0);
    if !off_diagonal {
        return m.diagonal().min();
    }
    m.clone().symmetric_eigenvalues().min()
}

/// Evaluates the force-box barrier on `axis` at time `t`.
pub fn eval_force_box(
    state: &SysState,
    theta_hat: &[f64],
    schedule: &BoundSchedule,
    t: f64,
    axis: usize,
) -> Result<BarrierEval> {
    let n = state.axes();
    if theta_hat.len() != 2 * n {
        return Err(Error::invalid("theta_hat must have 2 entries per axis"));
    }
    if axis >= n {
        return Err(Error::invalid(format!("axis {axis} out of range for {n} axes")));
    }
    let bounds = schedule.eval(t)?;
    let (k_hat, b_hat) = (theta_hat[axis], theta_hat[n + axis]);
    let (p, p_dot) = (state.p[axis], state.p_dot[axis]);
    let force = k_hat * p + b_hat * p_dot;

    let above_lower = force - bounds.lower;
    let below_upper = bounds.upper - force;
    let slope = bounds.upper + bounds.lower - 2.0 * force;

    let mut dh_dx = vec![0.0; 2 * n];
    dh_dx[axis] = slope * k_hat;
    dh_dx[n + axis] = slope * b_hat;
    let mut dh_dtheta = vec![0.0; 2 * n];
    dh_dtheta[axis] = slope * p;
    dh_dtheta[n + axis] = slope * p_dot;

    let eval = BarrierEval {
        h_r: above_lower * below_upper,
        dh_dx,
        dh_dtheta,
        dh_dt: -bounds.lower_rate * below_upper + bounds.upper_rate * above_lower,
    };
    ensure_finite("barrier value", &[eval.h_r, eval.dh_dt])?;
    Ok(eval)
}

/// Parameter-error tightening `0.5 * vartheta^T Gamma^{-1} vartheta`.
pub fn tightening(est: &ParamEstimate) -> Result<f64> {
    if est.vartheta.iter().all(|v| *v == 0.0) {
        return Ok(0.0);
    }
    let chol = est
        .gamma
        .clone()
        .cholesky()
        .ok_or_else(|| Error::invalid("adaptation gain is singular or not positive definite"))?;
    let v = DVector::from_column_slice(&est.vartheta);
    let w = chol.solve(&v);
    Ok(0.5 * v.dot(&w))
}

/// ISSf inflation `gamma(delta)` for the linear class-K function
/// `alpha(s) = alpha0 * s`, i.e. `-alpha^{-1}(-eps * delta^2 / 4)`.
pub fn issf_margin(delta: f64, alpha0: f64, issf_epsilon: f64) -> Result<f64> {
    if !(alpha0 > 0.0 && alpha0.is_finite()) {
        return Err(Error::invalid(format!("alpha0 must be positive, got {alpha0}")));
    }
    if !(issf_epsilon > 0.0 && issf_epsilon.is_finite()) {
        return Err(Error::invalid(format!(
            "issf_epsilon must be positive, got {issf_epsilon}"
        )));
    }
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(Error::invalid(format!("delta must be >= 0, got {delta}")));
    }
    Ok(issf_epsilon * delta * delta / (4.0 * alpha0))
}

/// Checks `lambda_min(Gamma) >= ||vartheta||^2 / (2 h_r)`.
///
/// For `h_r <= 0` the condition only holds when `vartheta` is zero.
pub fn gamma_condition_check(est: &ParamEstimate, h_r: f64) -> bool {
    let norm_sq: f64 = est.vartheta.iter().map(|v| v * v).sum();
    if norm_sq == 0.0 {
        return true;
    }
    if !(h_r > 0.0) {
        return false;
    }
    let required = norm_sq / (2.0 * h_r);
    // relative slack absorbs rounding in the eigenvalue and in `2 h_r`
    min_eigenvalue(&est.gamma) >= required * (1.0 - 1e-12)
}

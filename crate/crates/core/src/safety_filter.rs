//! Barrier constraint assembly and the minimally invasive safety QP.
//!
//! Every axis carries its own force-box barrier, and its constraint only
//! involves that axis' input, so a multi-axis step is a set of independent
//! one-dimensional problems.

use nalgebra::{DVector, RowDVector};
use serde::{Deserialize, Serialize};

use crate::adaptation::lambda_eff;
use crate::barrier::{eval_force_box, issf_margin, tightening, BarrierEval, BoundSchedule, ParamEstimate};
use crate::error::{ensure_finite, Error, Result};
use crate::plant::{drift, regressor, SysState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterMode {
    Tvcbf,
    Ratvcbf,
    RatvcbfSmid,
}

impl FilterMode {
    pub const ALL: [FilterMode; 3] = [FilterMode::Tvcbf, FilterMode::Ratvcbf, FilterMode::RatvcbfSmid];

    pub fn name(self) -> &'static str {
        match self {
            FilterMode::Tvcbf => "tvcbf",
            FilterMode::Ratvcbf => "ratvcbf",
            FilterMode::RatvcbfSmid => "ratvcbf-smid",
        }
    }

    pub fn is_robust(self) -> bool {
        !matches!(self, FilterMode::Tvcbf)
    }

    pub fn uses_smid(self) -> bool {
        matches!(self, FilterMode::RatvcbfSmid)
    }
}

impl std::str::FromStr for FilterMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FilterMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown mode `{s}`")))
    }
}

impl std::fmt::Display for FilterMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl InputBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(Error::invalid("input box bounds must be nonempty and of equal length"));
        }
        if lower.iter().chain(&upper).any(|v| v.is_nan()) {
            return Err(Error::invalid("input box bounds must not be NaN"));
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l < u)) {
            return Err(Error::invalid("input box needs u_min < u_max on every axis"));
        }
        Ok(InputBox { lower, upper })
    }

    pub fn clamp(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(v, (l, h))| v.clamp(*l, *h))
            .collect()
    }

    fn axis(&self, i: usize) -> InputBox {
        InputBox {
            lower: vec![self.lower[i]],
            upper: vec![self.upper[i]],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterConfig {
    pub mode: FilterMode,
    pub alpha0: f64,
    /// Constant offset of the baseline condition; only used by the non-robust mode.
    pub c: f64,
    /// Disturbance bound assumed by the filter.
    pub delta: f64,
    pub issf_epsilon: f64,
    pub input_box: Option<InputBox>,
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha0 > 0.0 && self.alpha0.is_finite()) {
            return Err(Error::invalid(format!("alpha0 must be positive, got {}", self.alpha0)));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(Error::invalid(format!("delta must be >= 0, got {}", self.delta)));
        }
        if !(self.issf_epsilon > 0.0 && self.issf_epsilon.is_finite()) {
            return Err(Error::invalid("issf_epsilon must be positive"));
        }
        ensure_finite("C", &[self.c])?;
        Ok(())
    }
}

/// Halfspace `a . u >= b` for one axis barrier.
#[derive(Debug, Clone, PartialEq)]
pub struct Constraint {
    pub a: Vec<f64>,
    pub b: f64,
    /// Value of the set the mode certifies: `h_r` for the baseline,
    /// `h_r - tightening + gamma` for the robust modes.
    pub certified_h: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterResult {
    pub u_safe: Vec<f64>,
    pub a: Vec<f64>,
    pub b: f64,
    pub active: bool,
    pub slack: f64,
}

pub fn assemble_constraint(
    eval: &BarrierEval,
    est: &ParamEstimate,
    state: &SysState,
    cfg: &FilterConfig,
    m_o: f64,
) -> Result<Constraint> {
    cfg.validate()?;
    let n = state.axes();
    if eval.dh_dx.len() != 2 * n || est.theta_hat.len() != 2 * n {
        return Err(Error::invalid("barrier and estimate dimensions disagree with the state"));
    }
    if !(m_o > 0.0) {
        return Err(Error::invalid("mass must be positive"));
    }
    let grad = RowDVector::from_row_slice(&eval.dh_dx);
    // g = [0; I/m]
    let a: Vec<f64> = (0..n).map(|i| eval.dh_dx[n + i] / m_o).collect();
    let lf = (&grad * drift(state))[0];
    let lf_theta = &grad * regressor(state, m_o);

    let (tight, gamma, eta, c, lambda) = if cfg.mode.is_robust() {
        let a_norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        (
            tightening(est)?,
            issf_margin(cfg.delta, cfg.alpha0, cfg.issf_epsilon)?,
            a_norm * cfg.delta,
            0.0,
            lambda_eff(est, eval)?,
        )
    } else {
        (0.0, 0.0, 0.0, cfg.c, est.theta_hat.clone())
    };
    let certified_h = eval.h_r - tight + gamma;
    let lf_lambda = (lf_theta * DVector::from_vec(lambda))[0];
    let b = -cfg.alpha0 * certified_h + eta - c - eval.dh_dt - lf - lf_lambda;
    ensure_finite("constraint", &[b])?;
    ensure_finite("constraint", &a)?;
    Ok(Constraint { a, b, certified_h })
}

/// Exact minimiser of `0.5 |u - u_nominal|^2` s.t. `a . u >= b` and the optional box.
///
/// The solution is `clamp(u_nominal + mu a)` where `mu >= 0` is the smallest
/// multiplier making the constraint hold; `a . clamp(u_nominal + mu a)` is
/// nondecreasing and piecewise linear in `mu`, so `mu` is found exactly on its
/// breakpoints.
pub fn solve_qp(u_nominal: &[f64], a: &[f64], b: f64, input_box: Option<&InputBox>) -> Result<FilterResult> {
    let n = u_nominal.len();
    if a.len() != n || input_box.is_some_and(|bx| bx.lower.len() != n) {
        return Err(Error::invalid("QP dimensions disagree"));
    }
    ensure_finite("nominal input", u_nominal)?;
    ensure_finite("constraint", a)?;
    ensure_finite("constraint", &[b])?;
    let dot = |u: &[f64]| a.iter().zip(u).map(|(x, y)| x * y).sum::<f64>();
    let start = match input_box {
        Some(bx) => bx.clamp(u_nominal),
        None => u_nominal.to_vec(),
    };
    let finish = |u: Vec<f64>| {
        let slack = dot(&u) - b;
        FilterResult {
            active: u != u_nominal,
            u_safe: u,
            a: a.to_vec(),
            b,
            slack,
        }
    };
    if start == u_nominal && dot(&start) >= b {
        return Ok(finish(start));
    }
    let aa: f64 = a.iter().map(|v| v * v).sum();
    if aa == 0.0 {
        if b > 0.0 {
            return Err(Error::Infeasible(format!("constraint row vanishes with b = {b}")));
        }
        return Ok(finish(start));
    }

    let mut u = match input_box {
        None => {
            let mu = (b - dot(u_nominal)) / aa;
            u_nominal.iter().zip(a).map(|(u0, ai)| u0 + mu * ai).collect()
        }
        Some(bx) => {
            let best: f64 = (0..n).map(|i| if a[i] >= 0.0 { a[i] * bx.upper[i] } else { a[i] * bx.lower[i] }).sum();
            if best < b {
                return Err(Error::Infeasible(format!("box cannot reach a . u >= {b}; best {best}")));
            }
            let phi0 = dot(&start);
            if phi0 >= b {
                return Ok(finish(start));
            }
            let mu = box_multiplier(u_nominal, a, b, bx);
            let moved: Vec<f64> = u_nominal.iter().zip(a).map(|(u0, ai)| u0 + mu * ai).collect();
            bx.clamp(&moved)
        }
    };
    nudge_feasible(&mut u, a, b, input_box);
    Ok(finish(u))
}

fn box_multiplier(u0: &[f64], a: &[f64], b: f64, bx: &InputBox) -> f64 {
    let n = u0.len();
    let phi = |mu: f64| {
        (0..n)
            .map(|i| a[i] * (u0[i] + mu * a[i]).clamp(bx.lower[i], bx.upper[i]))
            .sum::<f64>()
    };
    let mut breaks: Vec<f64> = Vec::with_capacity(2 * n);
    for i in 0..n {
        if a[i] != 0.0 {
            for edge in [bx.lower[i], bx.upper[i]] {
                let mu = (edge - u0[i]) / a[i];
                if mu > 0.0 && mu.is_finite() {
                    breaks.push(mu);
                }
            }
        }
    }
    breaks.sort_by(f64::total_cmp);
    let mut lo = 0.0;
    let mut phi_lo = phi(0.0);
    for &hi in &breaks {
        let phi_hi = phi(hi);
        if phi_hi >= b {
            return interpolate(lo, phi_lo, hi, phi_hi, b);
        }
        lo = hi;
        phi_lo = phi_hi;
    }
    // past the last breakpoint phi is constant; feasibility was checked by the caller
    lo
}

fn interpolate(lo: f64, phi_lo: f64, hi: f64, phi_hi: f64, b: f64) -> f64 {
    if phi_hi == phi_lo {
        return hi;
    }
    (lo + (b - phi_lo) / (phi_hi - phi_lo) * (hi - lo)).clamp(lo, hi)
}

/// Pushes the solution along `a` by a rounding-sized amount when cancellation
/// left it just short of `b`.
fn nudge_feasible(u: &mut [f64], a: &[f64], b: f64, input_box: Option<&InputBox>) {
    let dot = |u: &[f64]| a.iter().zip(u.iter()).map(|(x, y)| x * y).sum::<f64>();
    let mut step = 0.0f64;
    for _ in 0..200 {
        if dot(u) >= b {
            return;
        }
        let free = (0..u.len())
            .filter(|&i| {
                a[i] != 0.0
                    && input_box.is_none_or(|bx| if a[i] > 0.0 { u[i] < bx.upper[i] } else { u[i] > bx.lower[i] })
            })
            .max_by(|&i, &j| a[i].abs().total_cmp(&a[j].abs()));
        let Some(i) = free else { return };
        let ulp = (u[i].next_up() - u[i]).abs().max(f64::MIN_POSITIVE);
        step = (2.0 * step).max(ulp);
        u[i] += step * a[i].signum();
        if let Some(bx) = input_box {
            u[i] = u[i].clamp(bx.lower[i], bx.upper[i]);
        }
    }
}

/// Largest violation of the KKT conditions of [`solve_qp`] at `u`.
pub fn kkt_residual(u_nominal: &[f64], a: &[f64], b: f64, input_box: Option<&InputBox>, u: &[f64]) -> f64 {
    let n = u.len();
    let slack: f64 = a.iter().zip(u).map(|(x, y)| x * y).sum::<f64>() - b;
    let scale = 1.0 + b.abs() + a.iter().zip(u).map(|(x, y)| (x * y).abs()).sum::<f64>();
    let mut worst = (-slack / scale).max(0.0);
    // stationarity: u - u_nominal = mu a + nu with nu_i of the sign allowed by an active bound
    let aa: f64 = a.iter().map(|v| v * v).sum();
    let free: Vec<usize> = (0..n)
        .filter(|&i| input_box.is_none_or(|bx| u[i] > bx.lower[i] && u[i] < bx.upper[i]))
        .collect();
    let free_aa: f64 = free.iter().map(|&i| a[i] * a[i]).sum();
    let mu = if free_aa > 0.0 {
        free.iter().map(|&i| a[i] * (u[i] - u_nominal[i])).sum::<f64>() / free_aa
    } else if aa > 0.0 {
        0.0
    } else {
        0.0
    };
    let u_scale = 1.0 + u_nominal.iter().chain(u).fold(0.0f64, |m, v| m.max(v.abs()));
    worst = worst.max((-mu).max(0.0) * aa.sqrt() / u_scale);
    // complementary slackness
    if mu > 0.0 {
        worst = worst.max((mu * slack).abs() / (scale * u_scale));
    }
    for i in 0..n {
        let nu = u[i] - u_nominal[i] - mu * a[i];
        let ok = match input_box {
            Some(bx) if u[i] <= bx.lower[i] => nu >= -1e-12 * u_scale,
            Some(bx) if u[i] >= bx.upper[i] => nu <= 1e-12 * u_scale,
            _ => true,
        };
        let r = if free.contains(&i) || !ok { nu.abs() } else { 0.0 };
        worst = worst.max(r / u_scale);
        if let Some(bx) = input_box {
            worst = worst.max((bx.lower[i] - u[i]).max(u[i] - bx.upper[i]).max(0.0) / u_scale);
        }
    }
    worst
}

/// Per-axis outcome of one filter step.
#[derive(Debug, Clone, PartialEq)]
pub struct AxisReport {
    pub eval: BarrierEval,
    pub constraint: Constraint,
    pub slack: f64,
    pub active: bool,
    pub infeasible: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterStep {
    pub u_safe: Vec<f64>,
    pub axes: Vec<AxisReport>,
}

impl FilterStep {
    pub fn infeasible(&self) -> bool {
        self.axes.iter().any(|a| a.infeasible)
    }
}

/// Evaluates every axis barrier and solves its QP. An infeasible axis falls
/// back to its nominal input (clamped to the box) and is flagged.
pub fn filter_step(
    state: &SysState,
    est: &ParamEstimate,
    schedule: &BoundSchedule,
    t: f64,
    u_nominal: &[f64],
    cfg: &FilterConfig,
    m_o: f64,
) -> Result<FilterStep> {
    let n = state.axes();
    if u_nominal.len() != n {
        return Err(Error::invalid("nominal input has the wrong dimension"));
    }
    if let Some(bx) = &cfg.input_box {
        if bx.lower.len() != n {
            return Err(Error::invalid("input box has the wrong dimension"));
        }
    }
    let mut u_safe = Vec::with_capacity(n);
    let mut axes = Vec::with_capacity(n);
    for i in 0..n {
        let eval = eval_force_box(state, &est.theta_hat, schedule, t, i)?;
        let constraint = assemble_constraint(&eval, est, state, cfg, m_o)?;
        let bx = cfg.input_box.as_ref().map(|bx| bx.axis(i));
        let a_i = constraint.a[i];
        let report = match solve_qp(&[u_nominal[i]], &[a_i], constraint.b, bx.as_ref()) {
            Ok(res) => {
                u_safe.push(res.u_safe[0]);
                AxisReport {
                    eval,
                    slack: res.slack,
                    active: res.active,
                    infeasible: false,
                    constraint,
                }
            }
            Err(Error::Infeasible(_)) => {
                let fallback = bx.as_ref().map_or(u_nominal[i], |bx| bx.clamp(&[u_nominal[i]])[0]);
                u_safe.push(fallback);
                AxisReport {
                    eval,
                    slack: a_i * fallback - constraint.b,
                    active: false,
                    infeasible: true,
                    constraint,
                }
            }
            Err(e) => return Err(e),
        };
        axes.push(report);
    }
    Ok(FilterStep { u_safe, axes })
}

//! Closed-loop experiment runner.
//!
//! One tick of the loop, at `t = i * dt`:
//! evaluate the corridor and reference, compute the nominal input from the
//! measured (true) force, latch activation once that force is inside the
//! corridor, filter, log, feed the set-membership buffer, adapt, and integrate
//! the plant with the disturbance held over the step.

mod config;
mod output;
mod selftest;

pub use config::{
    Config, DerivativeSource, DisturbanceSection, EstimatorSection, FilterSection, PlantSection, SimSection,
    SmidSection,
};
pub use output::{emit_comparison, emit_outputs, parse_trace, trace_header, write_trace, TRACE_COLUMNS};
pub use selftest::{selftest, CheckResult};

use rayon::prelude::*;
use serde::Serialize;

use crate::adaptation::{freeze_saturated, integrate_estimator, tau};
use crate::barrier::{eval_force_box, gamma_condition_check, issf_margin, tightening, ParamEstimate};
use crate::error::{Error, Result};
use crate::plant::{contact_force, disturbance_sample, dynamics, step_rk4, StateDerivative, SysState};
use crate::safety_filter::{filter_step, FilterMode};
use crate::scenario::{build_bound_schedule, nominal_p_controller, preston_mrr, ScenarioSchedule};
use crate::smid::{make_datum, update, vartheta_from_box, ParamBox, RegressionDatum};

/// Slack allowed on the certified sets before a run is marked failed.
pub const CERTIFICATE_TOLERANCE: f64 = 1e-6;

/// One logged tick; field order matches the trace columns.
#[derive(Debug, Clone, PartialEq)]
pub struct TickRecord {
    pub t: f64,
    pub p: f64,
    pub p_dot: f64,
    pub f_c_true: f64,
    pub f_c_est: f64,
    pub f_lower: f64,
    pub f_upper: f64,
    /// Barrier at the estimated parameters.
    pub h_r: f64,
    pub robust_h: f64,
    pub u_nominal: f64,
    pub u_safe: f64,
    pub d: f64,
    pub theta_hat: [f64; 2],
    pub vartheta: [f64; 2],
    pub box_lower: [f64; 2],
    pub box_upper: [f64; 2],
    pub infeasible: bool,
    pub mrr_true: f64,
}

impl TickRecord {
    /// Barrier at the true parameters.
    pub fn h_true(&self) -> f64 {
        (self.f_c_true - self.f_lower) * (self.f_upper - self.f_c_true)
    }
}

/// A set-membership update as seen by the loop.
#[derive(Debug, Clone, PartialEq)]
pub struct SmidEvent {
    pub t: f64,
    pub before: ParamBox,
    pub after: ParamBox,
    pub consistent: bool,
    /// Largest `|Y - D theta*|` over the batch.
    pub realized_residual: f64,
    pub theta_hat_before: Vec<f64>,
    pub theta_hat_after: Vec<f64>,
    pub vartheta_before: Vec<f64>,
    /// Maximum possible error of the new box at the pre-update estimate.
    pub vartheta_after_fixed: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimLog {
    pub mode: FilterMode,
    pub records: Vec<TickRecord>,
    /// First tick at which the filter was switched on.
    pub activation: Option<usize>,
    /// First active tick at which the mode's own certified set holds.
    pub window_start: Option<usize>,
    pub smid_events: Vec<SmidEvent>,
}

impl SimLog {
    pub fn window(&self) -> &[TickRecord] {
        match self.window_start {
            Some(i) => &self.records[i..],
            None => &[],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub mode: FilterMode,
    pub seed: u64,
    pub ticks: usize,
    pub activation_time: Option<f64>,
    pub window_start_time: Option<f64>,
    /// Minimum of the estimated-parameter barrier over the window.
    pub min_h_r: Option<f64>,
    /// Minimum of the true-force barrier over the window.
    pub min_h_true: Option<f64>,
    pub min_robust_h: Option<f64>,
    /// Mean estimated-parameter barrier over the window; the conservatism measure.
    pub mean_h: Option<f64>,
    pub mean_h_true: Option<f64>,
    /// Ticks after activation with the true force outside the corridor.
    pub violation_ticks: usize,
    pub mrr_in_band_fraction: Option<f64>,
    pub infeasible_ticks: usize,
    pub smid_updates: usize,
    pub smid_inconsistency_count: usize,
    pub gamma_condition_at_activation: Option<bool>,
    pub final_theta_hat: Vec<f64>,
    pub final_box: ParamBox,
    /// The mode's own certificate held over the window.
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub log: SimLog,
    pub summary: RunSummary,
}

struct CentralDifference {
    prev: Option<(SysState, [f64; 1])>,
    older: Option<SysState>,
}

pub fn run(cfg: &Config, mode: FilterMode) -> Result<RunOutput> {
    cfg.validate()?;
    let schedule = build_bound_schedule(&cfg.scenario, cfg.duration())?;
    run_with_schedule(cfg, mode, &schedule)
}

fn run_with_schedule(cfg: &Config, mode: FilterMode, schedule: &ScenarioSchedule) -> Result<RunOutput> {
    let plant = cfg.plant()?;
    let m_o = plant.m_o;
    let theta_true = plant.theta();
    let filter_cfg = cfg.filter_config(mode)?;
    let disturbance = cfg.disturbance();
    let sc = &cfg.scenario;
    let dt = cfg.sim.dt;
    let ticks = cfg.tick_count();
    let gamma_issf = issf_margin(filter_cfg.delta, filter_cfg.alpha0, filter_cfg.issf_epsilon)?;
    if mode.is_robust() {
        check_gain_against_corridor(&cfg.initial_estimate()?, schedule)?;
    }

    let mut x = SysState::at_rest(1, 0.0);
    let mut est = cfg.initial_estimate()?;
    let mut bounds_box = cfg.prior_box()?;
    let mut activation = None;
    let mut window_start = None;
    let mut gamma_ok = None;
    let mut records = Vec::with_capacity(ticks + 1);
    let mut events = Vec::new();
    let mut buffer: Vec<RegressionDatum> = Vec::with_capacity(cfg.smid.batch);
    let mut diff = CentralDifference {
        prev: None,
        older: None,
    };

    for i in 0..=ticks {
        let t = i as f64 * dt;
        x.t = t;
        let bounds = schedule.bounds.eval(t)?;
        let f_ref = schedule.reference_from(&bounds);
        let f_true = contact_force(&x, &plant.k, &plant.b)?[0];
        let u_nominal = nominal_p_controller(f_ref, f_true, sc.controller_gain);
        if activation.is_none() && bounds.contains(f_true) {
            activation = Some(i);
        }
        let active = activation.is_some();

        est.vartheta = vartheta_from_box(&bounds_box, &est.theta_hat)?;
        if mode.is_robust() {
            let eval = eval_force_box(&x, &est.theta_hat, &schedule.bounds, t, 0)?;
            freeze_saturated(&mut est, &tau(&eval, &x, m_o)?, &bounds_box)?;
        }
        let step = filter_step(&x, &est, &schedule.bounds, t, &[u_nominal], &filter_cfg, m_o)?;
        let axis = &step.axes[0];
        let h_r = axis.eval.h_r;
        let robust_h = h_r - tightening(&est)? + gamma_issf;
        if active && gamma_ok.is_none() {
            gamma_ok = Some(gamma_condition_check(&est, h_r));
        }
        if active && window_start.is_none() && axis.constraint.certified_h >= 0.0 {
            window_start = Some(i);
        }
        let u_safe = if active { step.u_safe[0] } else { u_nominal };
        let d = disturbance_sample(&disturbance, t, 1)[0];

        records.push(TickRecord {
            t,
            p: x.p[0],
            p_dot: x.p_dot[0],
            f_c_true: f_true,
            f_c_est: est.theta_hat[0] * x.p[0] + est.theta_hat[1] * x.p_dot[0],
            f_lower: bounds.lower,
            f_upper: bounds.upper,
            h_r,
            robust_h,
            u_nominal,
            u_safe,
            d,
            theta_hat: [est.theta_hat[0], est.theta_hat[1]],
            vartheta: [est.vartheta[0], est.vartheta[1]],
            box_lower: [bounds_box.lower[0], bounds_box.lower[1]],
            box_upper: [bounds_box.upper[0], bounds_box.upper[1]],
            infeasible: active && step.infeasible(),
            mrr_true: preston_mrr(sc.k_p, f_true, schedule.area(t)?, sc.tool_speed)?,
        });

        if mode.uses_smid() {
            let datum = match cfg.smid.derivative {
                DerivativeSource::True => {
                    let dx = dynamics(&x, &plant, &[u_safe], &[d])?;
                    Some(make_datum(&x, &dx, &[u_safe], m_o)?)
                }
                DerivativeSource::CentralDifference => {
                    let mut datum = None;
                    if let (Some((mid, u_mid)), Some(old)) = (&diff.prev, &diff.older) {
                        let dx = StateDerivative {
                            p_dot: vec![(x.p[0] - old.p[0]) / (2.0 * dt)],
                            p_ddot: vec![(x.p_dot[0] - old.p_dot[0]) / (2.0 * dt)],
                        };
                        datum = Some(make_datum(mid, &dx, u_mid, m_o)?);
                    }
                    diff.older = diff.prev.take().map(|(s, _)| s);
                    diff.prev = Some((x.clone(), [u_safe]));
                    datum
                }
            };
            if let Some(datum) = datum {
                buffer.push(datum);
            }
            if buffer.len() == cfg.smid.batch {
                let result = update(&bounds_box, &buffer, cfg.smid.precision)?;
                let theta_vec = nalgebra::DVector::from_column_slice(&theta_true);
                let realized_residual = buffer
                    .iter()
                    .map(|b| (&b.y - &b.d * &theta_vec).amax())
                    .fold(0.0, f64::max);
                let vartheta_before = vartheta_from_box(&bounds_box, &est.theta_hat)?;
                let theta_hat_before = est.theta_hat.clone();
                let projected = result.bounds.project(&est.theta_hat);
                events.push(SmidEvent {
                    t,
                    before: bounds_box.clone(),
                    after: result.bounds.clone(),
                    consistent: result.consistent,
                    realized_residual,
                    vartheta_after_fixed: vartheta_fixed(&result.bounds, &theta_hat_before),
                    theta_hat_before,
                    theta_hat_after: projected.clone(),
                    vartheta_before,
                });
                bounds_box = result.bounds;
                est.theta_hat = projected;
                buffer.clear();
            }
        }

        if i == ticks {
            break;
        }
        if active && mode.is_robust() {
            est.vartheta = vartheta_from_box(&bounds_box, &est.theta_hat)?;
            est = integrate_estimator(&est, &x, &schedule.bounds, 0, dt, &bounds_box, m_o)?.0;
        }
        x = step_rk4(&x, &plant, &[u_safe], &[d], dt)?;
    }

    let log = SimLog {
        mode,
        records,
        activation,
        window_start,
        smid_events: events,
    };
    let summary = summarize(&log, cfg, gamma_ok, &est.theta_hat, &bounds_box);
    Ok(RunOutput { log, summary })
}

/// The tightened corridor must be nonempty everywhere along the path: the gain
/// condition is checked at the narrowest corridor apex of the schedule.
fn check_gain_against_corridor(est: &ParamEstimate, schedule: &ScenarioSchedule) -> Result<()> {
    let b = &schedule.bounds;
    let narrowest = b
        .lower_values()
        .iter()
        .zip(b.upper_values())
        .map(|(lo, hi)| 0.25 * (hi - lo) * (hi - lo))
        .fold(f64::INFINITY, f64::min);
    if gamma_condition_check(est, narrowest) {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "adaptation gain too small: lambda_min(Gamma) must be at least {:.6e} for the narrowest corridor",
            est.vartheta.iter().map(|v| v * v).sum::<f64>() / (2.0 * narrowest)
        )))
    }
}

/// Maximum possible error of `bounds` at an estimate that may lie outside it.
fn vartheta_fixed(bounds: &ParamBox, theta_hat: &[f64]) -> Vec<f64> {
    (0..bounds.dim())
        .map(|i| (theta_hat[i] - bounds.lower[i]).max(bounds.upper[i] - theta_hat[i]))
        .collect()
}

fn summarize(log: &SimLog, cfg: &Config, gamma_ok: Option<bool>, theta_hat: &[f64], bounds: &ParamBox) -> RunSummary {
    let window = log.window();
    let fold_min = |f: &dyn Fn(&TickRecord) -> f64| window.iter().map(f).reduce(f64::min);
    let mean = |f: &dyn Fn(&TickRecord) -> f64| {
        (!window.is_empty()).then(|| window.iter().map(f).sum::<f64>() / window.len() as f64)
    };
    let after_activation = match log.activation {
        Some(i) => &log.records[i..],
        None => &[],
    };
    let sc = &cfg.scenario;
    let (lo, hi) = (
        (1.0 - sc.mrr_band_frac) * sc.mrr_desired,
        (1.0 + sc.mrr_band_frac) * sc.mrr_desired,
    );
    let in_band = window.iter().filter(|r| r.mrr_true >= lo && r.mrr_true <= hi).count();
    let min_h_r = fold_min(&|r| r.h_r);
    let min_robust_h = fold_min(&|r| r.robust_h);
    let certified = if log.mode.is_robust() { min_robust_h } else { min_h_r };
    let infeasible_ticks = log.records.iter().filter(|r| r.infeasible).count();
    RunSummary {
        mode: log.mode,
        seed: cfg.sim.seed,
        ticks: log.records.len(),
        activation_time: log.activation.map(|i| log.records[i].t),
        window_start_time: log.window_start.map(|i| log.records[i].t),
        min_h_r,
        min_h_true: fold_min(&|r| r.h_true()),
        min_robust_h,
        mean_h: mean(&|r| r.h_r),
        mean_h_true: mean(&|r| r.h_true()),
        violation_ticks: after_activation
            .iter()
            .filter(|r| r.f_c_true < r.f_lower || r.f_c_true > r.f_upper)
            .count(),
        mrr_in_band_fraction: (!window.is_empty()).then(|| in_band as f64 / window.len() as f64),
        infeasible_ticks,
        smid_updates: log.smid_events.len(),
        smid_inconsistency_count: log.smid_events.iter().filter(|e| !e.consistent).count(),
        gamma_condition_at_activation: gamma_ok,
        final_theta_hat: theta_hat.to_vec(),
        final_box: bounds.clone(),
        pass: certified.is_some_and(|h| h >= -CERTIFICATE_TOLERANCE) && infeasible_ticks == 0,
    }
}

/// Side-by-side results of the three filters on one scenario.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub summaries: Vec<RunSummary>,
    /// `(mean_h(ratvcbf) - mean_h(ratvcbf-smid)) / mean_h(ratvcbf) * 100`.
    pub conservatism_reduction_percent: Option<f64>,
    /// Baseline leaves the corridor, robust filters keep their certificates.
    pub pass: bool,
}

pub struct Comparison {
    pub runs: Vec<RunOutput>,
    pub report: ComparisonReport,
}

pub fn conservatism_reduction(robust: &RunSummary, identified: &RunSummary) -> Option<f64> {
    match (robust.mean_h, identified.mean_h) {
        (Some(a), Some(b)) if a != 0.0 => Some((a - b) / a * 100.0),
        _ => None,
    }
}

/// Runs every `(mode, config)` pair in parallel. All configs must describe the
/// same scenario, plant, disturbance, gains and seed.
pub fn compare(runs: &[(FilterMode, Config)]) -> Result<Comparison> {
    let Some((_, first)) = runs.first() else {
        return Err(Error::invalid("nothing to compare"));
    };
    for (_, cfg) in runs {
        cfg.validate()?;
        if cfg != first {
            return Err(Error::invalid("compared runs must share schedule, plant, gains and seed"));
        }
    }
    let schedule = build_bound_schedule(&first.scenario, first.duration())?;
    let outputs: Vec<RunOutput> = runs
        .par_iter()
        .map(|(mode, cfg)| run_with_schedule(cfg, *mode, &schedule))
        .collect::<Result<_>>()?;
    let find = |m: FilterMode| outputs.iter().find(|o| o.log.mode == m).map(|o| &o.summary);
    let reduction = match (find(FilterMode::Ratvcbf), find(FilterMode::RatvcbfSmid)) {
        (Some(a), Some(b)) => conservatism_reduction(a, b),
        _ => None,
    };
    let baseline_violates = find(FilterMode::Tvcbf).is_none_or(|s| s.min_h_true.is_some_and(|h| h < 0.0));
    let robust_hold = outputs.iter().filter(|o| o.log.mode.is_robust()).all(|o| o.summary.pass);
    let report = ComparisonReport {
        summaries: outputs.iter().map(|o| o.summary.clone()).collect(),
        conservatism_reduction_percent: reduction,
        pass: baseline_violates && robust_hold && reduction.is_none_or(|r| r >= 20.0),
    };
    Ok(Comparison { runs: outputs, report })
}

/// The three filters on one config.
pub fn compare_modes(cfg: &Config) -> Result<Comparison> {
    let runs: Vec<_> = FilterMode::ALL.iter().map(|m| (*m, cfg.clone())).collect();
    compare(&runs)
}

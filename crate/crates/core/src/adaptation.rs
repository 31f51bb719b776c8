//! Safety-oriented parameter adaptation.
//!
//! The estimate follows `theta_hat_dot = Gamma * tau` with
//! `tau = -(dh_r/dx * F(x))^T`, and the filter constraint uses the effective
//! parameter `lambda = theta_hat - Gamma * (dh_r/dtheta)^T`. With this choice the
//! cross term `(dh_r/dtheta Gamma + theta_tilde^T)((dh_r/dx F)^T + tau)` in the
//! derivative of `h_r - 0.5 theta_tilde^T Gamma^{-1} theta_tilde` vanishes.
//!
//! Coordinates whose maximum possible error is zero are known exactly and are
//! never adapted, and coordinates the box projection is holding on a face do
//! not move either. Both are removed from the gain, `P Gamma P` with `P`
//! selecting the free coordinates, in the update and in `lambda` alike, so the
//! cancellation above survives the projection.

use nalgebra::{DMatrix, DVector, RowDVector};

use crate::barrier::{eval_force_box, BarrierEval, BoundSchedule, ParamEstimate};
use crate::error::{Error, Result};
use crate::plant::{regressor, SysState};
use crate::smid::ParamBox;

/// Update direction `tau = -(dh_r/dx * F(x))^T`.
pub fn tau(eval: &BarrierEval, state: &SysState, m_o: f64) -> Result<Vec<f64>> {
    let n2 = 2 * state.axes();
    if eval.dh_dx.len() != n2 {
        return Err(Error::invalid("barrier gradient does not match state dimension"));
    }
    let grad = RowDVector::from_row_slice(&eval.dh_dx);
    let lf = grad * regressor(state, m_o);
    Ok(lf.iter().map(|v| -v).collect())
}

/// Gain with rows and columns of exactly-known or frozen coordinates zeroed.
pub fn active_gain(est: &ParamEstimate) -> DMatrix<f64> {
    let mut gain = est.gamma.clone();
    for (i, v) in est.vartheta.iter().enumerate() {
        if *v == 0.0 || est.frozen.get(i).copied().unwrap_or(false) {
            gain.row_mut(i).fill(0.0);
            gain.column_mut(i).fill(0.0);
        }
    }
    gain
}

/// Effective parameter `theta_hat - Gamma * (dh_r/dtheta)^T`.
pub fn lambda_eff(est: &ParamEstimate, eval: &BarrierEval) -> Result<Vec<f64>> {
    let k = est.theta_hat.len();
    if eval.dh_dtheta.len() != k {
        return Err(Error::invalid("barrier parameter gradient has wrong length"));
    }
    let correction = active_gain(est) * DVector::from_column_slice(&eval.dh_dtheta);
    Ok((0..k).map(|i| est.theta_hat[i] - correction[i]).collect())
}

/// Marks the coordinates sitting on a face of `bounds` whose update points
/// out of the box. Other coordinates are unfrozen.
pub fn freeze_saturated(est: &mut ParamEstimate, tau: &[f64], bounds: &ParamBox) -> Result<()> {
    let k = est.theta_hat.len();
    if tau.len() != k || bounds.dim() != k {
        return Err(Error::invalid("estimator dimensions disagree"));
    }
    est.frozen = vec![false; k];
    let rate = active_gain(est) * DVector::from_column_slice(tau);
    est.frozen = (0..k)
        .map(|i| {
            (est.theta_hat[i] <= bounds.lower[i] && rate[i] < 0.0)
                || (est.theta_hat[i] >= bounds.upper[i] && rate[i] > 0.0)
        })
        .collect();
    Ok(())
}

/// Explicit Euler step of the estimator, projected into `bounds`.
pub fn step_estimator(est: &ParamEstimate, tau: &[f64], dt: f64, bounds: &ParamBox) -> Result<ParamEstimate> {
    let k = est.theta_hat.len();
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::invalid(format!("step size must be positive, got {dt}")));
    }
    if tau.len() != k || bounds.dim() != k {
        return Err(Error::invalid("estimator dimensions disagree"));
    }
    let rate = active_gain(est) * DVector::from_column_slice(tau);
    let moved: Vec<f64> = (0..k).map(|i| est.theta_hat[i] + dt * rate[i]).collect();
    Ok(ParamEstimate {
        theta_hat: bounds.project(&moved),
        gamma: est.gamma.clone(),
        vartheta: est.vartheta.clone(),
        frozen: est.frozen.clone(),
    })
}

/// Decay rate of the force-box estimator around its fixed point with the state
/// held, `2 |b_hat| / m_o * phi^T Gamma phi` with `phi = [p, p_dot]` on `axis`.
pub fn stiffness(est: &ParamEstimate, state: &SysState, axis: usize, m_o: f64) -> f64 {
    let n = state.axes();
    let mut phi = DVector::zeros(2 * n);
    phi[axis] = state.p[axis];
    phi[n + axis] = state.p_dot[axis];
    let quad = (phi.transpose() * active_gain(est) * &phi)[0];
    2.0 * est.theta_hat[n + axis].abs() / m_o * quad
}

/// Largest decay per Euler sub-step accepted by [`integrate_estimator`].
pub const MAX_STEP_DECAY: f64 = 0.5;
const MAX_SUBSTEPS: usize = 1 << 16;

/// Advances the force-box estimator over `dt` with the state held, splitting the
/// Euler step so that each piece stays well inside its stability limit. Returns
/// the new estimate and the number of sub-steps taken.
pub fn integrate_estimator(
    est: &ParamEstimate,
    state: &SysState,
    schedule: &BoundSchedule,
    axis: usize,
    dt: f64,
    bounds: &ParamBox,
    m_o: f64,
) -> Result<(ParamEstimate, usize)> {
    let mut cur = est.clone();
    let eval = eval_force_box(state, &cur.theta_hat, schedule, state.t, axis)?;
    freeze_saturated(&mut cur, &tau(&eval, state, m_o)?, bounds)?;
    let rate = stiffness(&cur, state, axis, m_o);
    let pieces = ((rate * dt / MAX_STEP_DECAY).ceil() as usize).clamp(1, MAX_SUBSTEPS);
    let h = dt / pieces as f64;
    for _ in 0..pieces {
        let eval = eval_force_box(state, &cur.theta_hat, schedule, state.t, axis)?;
        let direction = tau(&eval, state, m_o)?;
        freeze_saturated(&mut cur, &direction, bounds)?;
        cur = step_estimator(&cur, &direction, h, bounds)?;
    }
    Ok((cur, pieces))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::barrier::{eval_force_box, BoundSchedule};
    use crate::plant::{drift, dynamics, input_gain, TruePlant};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn state(p: f64, v: f64) -> SysState {
        SysState::new(vec![p], vec![v], 0.0).unwrap()
    }

    fn eval_with(dh_dx: Vec<f64>, dh_dtheta: Vec<f64>) -> BarrierEval {
        BarrierEval {
            h_r: 1.0,
            dh_dx,
            dh_dtheta,
            dh_dt: 0.0,
        }
    }

    fn estimate(gains: &[f64]) -> ParamEstimate {
        ParamEstimate::with_diagonal_gain(vec![1000.0, 10.0], gains, vec![1.0, 1.0]).unwrap()
    }

    fn wide_box() -> ParamBox {
        ParamBox::new(vec![-1e6, -1e6], vec![1e6, 1e6]).unwrap()
    }

    #[test]
    fn tau_examples() {
        let t = tau(&eval_with(vec![0.0, 0.0], vec![0.0, 0.0]), &state(0.01, 0.1), 1.0).unwrap();
        assert_eq!(t, vec![0.0, 0.0]);
        let t = tau(&eval_with(vec![3.0, -2.0], vec![0.0, 0.0]), &state(0.0, 0.0), 1.0).unwrap();
        assert!(t.iter().all(|v| *v == 0.0));
        // F(x) only acts through the acceleration row
        let g2 = 4.0;
        let t = tau(&eval_with(vec![0.0, g2], vec![0.0, 0.0]), &state(0.01, 0.1), 1.0).unwrap();
        assert_relative_eq!(t[0], g2 * 0.01, epsilon = 1e-15);
        assert_relative_eq!(t[1], g2 * 0.1, epsilon = 1e-15);
    }

    #[test]
    fn lambda_examples() {
        let l = lambda_eff(&estimate(&[1.0, 1.0]), &eval_with(vec![0.0; 2], vec![0.0, 0.0])).unwrap();
        assert_eq!(l, vec![1000.0, 10.0]);
        let l = lambda_eff(&estimate(&[1.0, 1.0]), &eval_with(vec![0.0; 2], vec![1.0, 2.0])).unwrap();
        assert_eq!(l, vec![999.0, 8.0]);
        let l = lambda_eff(&estimate(&[100.0, 1.0]), &eval_with(vec![0.0; 2], vec![0.5, -1.0])).unwrap();
        assert_eq!(l, vec![950.0, 11.0]);
    }

    #[test]
    fn exactly_known_coordinates_are_not_adapted() {
        let est = ParamEstimate::with_diagonal_gain(vec![1000.0, 10.0], &[3.0, 3.0], vec![0.0, 2.0]).unwrap();
        let l = lambda_eff(&est, &eval_with(vec![0.0; 2], vec![1.0, 1.0])).unwrap();
        assert_eq!(l, vec![1000.0, 7.0]);
        let next = step_estimator(&est, &[5.0, 1.0], 0.1, &wide_box()).unwrap();
        assert_eq!(next.theta_hat[0], 1000.0);
        assert_relative_eq!(next.theta_hat[1], 10.3, epsilon = 1e-12);
    }

    #[test]
    fn faces_freeze_only_outward_updates() {
        let bx = ParamBox::new(vec![1000.0, 0.0], vec![1500.0, 10.0]).unwrap();
        let mut est = estimate(&[2.0, 2.0]);
        freeze_saturated(&mut est, &[-1.0, 1.0], &bx).unwrap();
        assert_eq!(est.frozen, vec![true, true]);
        let l = lambda_eff(&est, &eval_with(vec![0.0; 2], vec![1.0, 1.0])).unwrap();
        assert_eq!(l, est.theta_hat);
        assert_eq!(step_estimator(&est, &[-1.0, 1.0], 0.1, &bx).unwrap().theta_hat, est.theta_hat);

        freeze_saturated(&mut est, &[1.0, -1.0], &bx).unwrap();
        assert_eq!(est.frozen, vec![false, false]);
        freeze_saturated(&mut est, &[-1.0, -1.0], &bx).unwrap();
        assert_eq!(est.frozen, vec![true, false]);
        let next = step_estimator(&est, &[-1.0, -1.0], 0.1, &bx).unwrap();
        assert_eq!(next.theta_hat[0], 1000.0);
        assert_relative_eq!(next.theta_hat[1], 9.8, epsilon = 1e-12);
    }

    #[test]
    fn estimator_step_examples() {
        let est = estimate(&[1.0, 1.0]);
        let same = step_estimator(&est, &[0.0, 0.0], 0.1, &wide_box()).unwrap();
        assert_eq!(same.theta_hat, est.theta_hat);

        let next = step_estimator(&est, &[5.0, -1.0], 0.1, &wide_box()).unwrap();
        assert_relative_eq!(next.theta_hat[0], 1000.5, epsilon = 1e-12);
        assert_relative_eq!(next.theta_hat[1], 9.9, epsilon = 1e-12);
        assert_eq!(next.gamma, est.gamma);
        assert_eq!(next.vartheta, est.vartheta);

        // upper face sits between the old and the unclamped new value
        let tight = ParamBox::new(vec![900.0, 0.0], vec![1000.2, 100.0]).unwrap();
        let clamped = step_estimator(&est, &[5.0, -1.0], 0.1, &tight).unwrap();
        assert_eq!(clamped.theta_hat[0], 1000.2);
        assert_relative_eq!(clamped.theta_hat[1], 9.9, epsilon = 1e-12);

        assert!(step_estimator(&est, &[0.0, 0.0], 0.0, &wide_box()).is_err());
    }

    #[test]
    fn closed_loop_cross_term_vanishes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let schedule = BoundSchedule::new(vec![0.0, 1.0, 2.0], vec![8.0, 6.0, 7.0], vec![12.0, 9.0, 10.0]).unwrap();
        for _ in 0..500 {
            let m_o = rng.gen_range(0.5..3.0);
            let x = state(rng.gen_range(0.0..0.02), rng.gen_range(-0.2..0.2));
            let theta_hat = vec![rng.gen_range(800.0..1600.0), rng.gen_range(1.0..100.0)];
            let theta_star = [rng.gen_range(800.0..1600.0), rng.gen_range(1.0..100.0)];
            let gains = [rng.gen_range(1.0..100.0), rng.gen_range(1.0..100.0)];
            let e = eval_force_box(&x, &theta_hat, &schedule, rng.gen_range(0.0..1.9), 0).unwrap();

            let t = tau(&e, &x, m_o).unwrap();
            let lf = RowDVector::from_row_slice(&e.dh_dx) * regressor(&x, m_o);
            // F = -(1/m)[0 0; p p_dot] written out by hand
            let by_hand = [-e.dh_dx[1] * x.p[0] / m_o, -e.dh_dx[1] * x.p_dot[0] / m_o];
            for i in 0..2 {
                assert_relative_eq!(lf[i], by_hand[i], max_relative = 1e-14, epsilon = 1e-300);
            }
            let first: Vec<f64> = (0..2)
                .map(|i| e.dh_dtheta[i] * gains[i] + (theta_star[i] - theta_hat[i]))
                .collect();
            let cross: f64 = (0..2).map(|i| first[i] * (lf[i] + t[i])).sum();
            assert!(cross.abs() < 1e-12, "cross term {cross}");
        }
    }

    #[test]
    fn composite_barrier_derivative_matches_decomposition() {
        // d/dt [h_r(x, theta_hat, t) - 0.5 theta_tilde^T Gamma^{-1} theta_tilde] along the true
        // flow equals dh/dx (f + F lambda + g (u + d)) + dh/dt once tau cancels the cross term
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let schedule = BoundSchedule::new(vec![0.0, 4.0], vec![8.0, 5.0], vec![12.0, 9.5]).unwrap();
        for _ in 0..200 {
            let m_o = rng.gen_range(0.5..2.0);
            let plant = TruePlant::new(vec![rng.gen_range(900.0..1500.0)], vec![rng.gen_range(5.0..90.0)], m_o).unwrap();
            let x = state(rng.gen_range(0.004..0.012), rng.gen_range(-0.1..0.1));
            let theta_hat = vec![rng.gen_range(900.0..1500.0), rng.gen_range(5.0..90.0)];
            let gains = [rng.gen_range(1.0..50.0), rng.gen_range(1.0..50.0)];
            let est = ParamEstimate::with_diagonal_gain(theta_hat.clone(), &gains, vec![1.0, 1.0]).unwrap();
            let u = [rng.gen_range(0.0..20.0)];
            let d = [rng.gen_range(-0.5..0.5)];
            let t0 = rng.gen_range(0.5..3.5);

            let e = eval_force_box(&x, &theta_hat, &schedule, t0, 0).unwrap();
            let tau_v = tau(&e, &x, m_o).unwrap();
            let theta_rate: Vec<f64> = (0..2).map(|i| gains[i] * tau_v[i]).collect();
            let x_rate = dynamics(&x, &plant, &u, &d).unwrap();
            let theta_star = plant.theta();

            let composite = |s: f64| {
                let xs = state(x.p[0] + s * x_rate.p_dot[0], x.p_dot[0] + s * x_rate.p_ddot[0]);
                let th: Vec<f64> = (0..2).map(|i| theta_hat[i] + s * theta_rate[i]).collect();
                let hr = eval_force_box(&xs, &th, &schedule, t0 + s, 0).unwrap().h_r;
                let penalty: f64 = (0..2).map(|i| (theta_star[i] - th[i]).powi(2) / gains[i]).sum();
                hr - 0.5 * penalty
            };
            let step = 1e-6;
            let numeric = (composite(step) - composite(-step)) / (2.0 * step);

            let lambda = lambda_eff(&est, &e).unwrap();
            let grad = RowDVector::from_row_slice(&e.dh_dx);
            let modeled = drift(&x)
                + regressor(&x, m_o) * DVector::from_vec(lambda)
                + input_gain(1, m_o) * DVector::from_vec(vec![u[0] + d[0]]);
            let analytic = (grad * modeled)[0] + e.dh_dt;
            assert_relative_eq!(numeric, analytic, max_relative = 1e-5, epsilon = 1e-6);
        }
    }

    proptest! {
        #[test]
        fn euler_step_linear_in_dt(t1 in -10.0f64..10.0, t2 in -10.0f64..10.0, dt in 1e-4f64..0.1, g in 0.5f64..10.0) {
            let est = estimate(&[g, g]);
            let a = step_estimator(&est, &[t1, t2], dt, &wide_box()).unwrap();
            let b = step_estimator(&est, &[t1, t2], 2.0 * dt, &wide_box()).unwrap();
            for i in 0..2 {
                let da = a.theta_hat[i] - est.theta_hat[i];
                let db = b.theta_hat[i] - est.theta_hat[i];
                prop_assert!((db - 2.0 * da).abs() <= 1e-9 * (1.0 + db.abs()));
            }
        }

        #[test]
        fn projection_moves_toward_center(y1 in -3000.0f64..3000.0, y2 in -300.0f64..300.0) {
            let bx = ParamBox::new(vec![900.0, 0.0], vec![1500.0, 100.0]).unwrap();
            let c = [1200.0, 50.0];
            let proj = bx.project(&[y1, y2]);
            prop_assert!((proj[0] - c[0]).abs() <= (y1 - c[0]).abs());
            prop_assert!((proj[1] - c[1]).abs() <= (y2 - c[1]).abs());
            prop_assert!(bx.contains(&proj));
        }
    }
}

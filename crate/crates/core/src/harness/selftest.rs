//! Quick randomized oracle checks run by `ratvcbf selftest`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adaptation::tau;
use crate::barrier::{eval_force_box, issf_margin, BoundSchedule};
use crate::plant::SysState;
use crate::safety_filter::{kkt_residual, solve_qp, InputBox};
use crate::smid::{update, ParamBox, RegressionDatum};

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

pub fn selftest(seed: u64) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    vec![
        gradients(&mut rng),
        qp(&mut rng),
        smid_soundness(&mut rng),
        identities(&mut rng),
    ]
}

fn gradients(rng: &mut ChaCha8Rng) -> CheckResult {
    let sched = BoundSchedule::new(vec![0.0, 1.0, 2.0], vec![800.0, 700.0, 760.0], vec![1000.0, 900.0, 950.0]).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let (p, v) = (rng.gen_range(0.4..0.8), rng.gen_range(-0.5..0.5));
        let theta = [rng.gen_range(900.0..1500.0), rng.gen_range(5.0..100.0)];
        let t = rng.gen_range(0.1..0.9);
        let h = |p: f64, v: f64, k: f64, b: f64, t: f64| {
            let x = SysState::new(vec![p], vec![v], t).unwrap();
            eval_force_box(&x, &[k, b], &sched, t, 0).unwrap().h_r
        };
        let x = SysState::new(vec![p], vec![v], t).unwrap();
        let e = eval_force_box(&x, &theta, &sched, t, 0).unwrap();
        let fd = |f: &dyn Fn(f64) -> f64, at: f64| {
            let s = 1e-6 * at.abs().max(1e-3);
            (f(at + s) - f(at - s)) / (2.0 * s)
        };
        let numeric = [
            fd(&|q| h(q, v, theta[0], theta[1], t), p),
            fd(&|q| h(p, q, theta[0], theta[1], t), v),
            fd(&|q| h(p, v, q, theta[1], t), theta[0]),
            fd(&|q| h(p, v, theta[0], q, t), theta[1]),
            fd(&|q| h(p, v, theta[0], theta[1], q), t),
        ];
        let analytic = [e.dh_dx[0], e.dh_dx[1], e.dh_dtheta[0], e.dh_dtheta[1], e.dh_dt];
        for (n, a) in numeric.iter().zip(analytic) {
            worst = worst.max((n - a).abs() / a.abs().max(1.0));
        }
    }
    CheckResult {
        name: "barrier gradients vs finite differences",
        pass: worst < 1e-6,
        detail: format!("max relative error {worst:.3e}"),
    }
}

fn qp(rng: &mut ChaCha8Rng) -> CheckResult {
    let mut worst = 0.0f64;
    let mut inactive_exact = true;
    for _ in 0..2000 {
        let n = rng.gen_range(1..=3);
        let u0: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let b = rng.gen_range(-10.0..10.0);
        let bx = InputBox::new(vec![-4.0; n], vec![4.0; n]).unwrap();
        if let Ok(r) = solve_qp(&u0, &a, b, Some(&bx)) {
            worst = worst.max(kkt_residual(&u0, &a, b, Some(&bx), &r.u_safe));
        }
        let r = solve_qp(&u0, &a, b, None);
        if let Ok(r) = r {
            let inactive = a.iter().zip(&u0).map(|(x, y)| x * y).sum::<f64>() >= b;
            if inactive && r.u_safe != u0 {
                inactive_exact = false;
            }
            worst = worst.max(kkt_residual(&u0, &a, b, None, &r.u_safe));
        }
    }
    CheckResult {
        name: "safety QP optimality",
        pass: worst < 1e-9 && inactive_exact,
        detail: format!("max KKT residual {worst:.3e}"),
    }
}

fn smid_soundness(rng: &mut ChaCha8Rng) -> CheckResult {
    let prior = ParamBox::new(vec![900.0, 0.0], vec![1500.0, 100.0]).unwrap();
    let mut failures = 0;
    for _ in 0..500 {
        let theta = [rng.gen_range(900.0..1500.0), rng.gen_range(0.0..100.0)];
        let eps = rng.gen_range(1e-4..1e-2);
        let batch: Vec<RegressionDatum> = (0..5)
            .map(|_| {
                let row = [-rng.gen_range(0.0..0.02), -rng.gen_range(-0.1..0.1)];
                let y = row[0] * theta[0] + row[1] * theta[1] + rng.gen_range(-eps..eps);
                RegressionDatum {
                    y: DVector::from_vec(vec![0.0, y]),
                    d: DMatrix::from_row_slice(2, 2, &[0.0, 0.0, row[0], row[1]]),
                    t: 0.0,
                }
            })
            .collect();
        let out = update(&prior, &batch, eps).unwrap();
        if !(out.consistent && out.bounds.contains(&theta) && out.bounds.is_subset_of(&prior)) {
            failures += 1;
        }
    }
    CheckResult {
        name: "set-membership soundness",
        pass: failures == 0,
        detail: format!("{failures} of 500 batches lost the true parameter"),
    }
}

fn identities(rng: &mut ChaCha8Rng) -> CheckResult {
    let x = SysState::new(vec![rng.gen_range(0.0..1.0)], vec![rng.gen_range(-1.0..1.0)], 0.0).unwrap();
    let eval = crate::barrier::BarrierEval {
        h_r: 1.0,
        dh_dx: vec![0.0, 0.0],
        dh_dtheta: vec![0.0, 0.0],
        dh_dt: 0.0,
    };
    let tau_zero = tau(&eval, &x, 1.0).map(|t| t.iter().all(|v| *v == 0.0)).unwrap_or(false);
    let gamma_zero = issf_margin(0.0, 20.0, 1.0).map(|g| g == 0.0).unwrap_or(false);
    CheckResult {
        name: "reduction identities",
        pass: tau_zero && gamma_zero,
        detail: format!("tau(0) = 0: {tau_zero}, gamma(0) = 0: {gamma_zero}"),
    }
}

//! Uncertain Kelvin-Voigt contact plant.
//!
//! A tool of mass `m_o` pressed into a spring-damper surface along one or more
//! contact axes. With the positive-into-surface convention the contact force is
//! `f_c = k * p + b * p_dot` and the penetration obeys
//!
//! ```text
//! m_o * p_ddot = -(k * p + b * p_dot) + u + d
//! ```
//!
//! which is the control-affine form `x_dot = f(x) + F(x) theta + g (u + d)` with
//! `f(x) = [p_dot; 0]`, `F(x) = -(1/m_o) [0 0; diag(p) diag(p_dot)]` and
//! `g = [0; I / m_o]`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

/// Plant state: penetration and penetration rate per contact axis.
#[derive(Debug, Clone, PartialEq)]
pub struct SysState {
    pub p: Vec<f64>,
    pub p_dot: Vec<f64>,
    pub t: f64,
}

impl SysState {
    pub fn new(p: Vec<f64>, p_dot: Vec<f64>, t: f64) -> Result<Self> {
        if p.len() != p_dot.len() || p.is_empty() {
            return Err(Error::invalid(format!(
                "state needs matching nonempty p/p_dot, got {} and {}",
                p.len(),
                p_dot.len()
            )));
        }
        ensure_finite("state", &p)?;
        ensure_finite("state", &p_dot)?;
        ensure_finite("state time", &[t])?;
        Ok(Self { p, p_dot, t })
    }

    /// Tool resting on the surface with no penetration.
    pub fn at_rest(axes: usize, t: f64) -> Self {
        Self {
            p: vec![0.0; axes],
            p_dot: vec![0.0; axes],
            t,
        }
    }

    pub fn axes(&self) -> usize {
        self.p.len()
    }

    /// Stacked state vector `[p; p_dot]`.
    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_iterator(
            2 * self.axes(),
            self.p.iter().chain(self.p_dot.iter()).copied(),
        )
    }
}

/// Ground-truth contact parameters, unknown to the controller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruePlant {
    pub k: Vec<f64>,
    pub b: Vec<f64>,
    pub m_o: f64,
}

impl TruePlant {
    pub fn new(k: Vec<f64>, b: Vec<f64>, m_o: f64) -> Result<Self> {
        if k.len() != b.len() || k.is_empty() {
            return Err(Error::invalid("stiffness and damping need matching axes"));
        }
        if k.iter().chain(b.iter()).any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("stiffness and damping must be finite and >= 0"));
        }
        if !(m_o.is_finite() && m_o > 0.0) {
            return Err(Error::invalid(format!("tool mass must be positive, got {m_o}")));
        }
        Ok(Self { k, b, m_o })
    }

    /// Builds the plant from a stacked parameter vector `[k..., b...]`.
    pub fn from_theta(theta: &[f64], m_o: f64) -> Result<Self> {
        if theta.len() % 2 != 0 {
            return Err(Error::invalid("parameter vector length must be even"));
        }
        let n = theta.len() / 2;
        Self::new(theta[..n].to_vec(), theta[n..].to_vec(), m_o)
    }

    pub fn axes(&self) -> usize {
        self.k.len()
    }

    pub fn theta(&self) -> Vec<f64> {
        self.k.iter().chain(self.b.iter()).copied().collect()
    }
}

/// Time derivative of [`SysState`].
#[derive(Debug, Clone, PartialEq)]
pub struct StateDerivative {
    pub p_dot: Vec<f64>,
    pub p_ddot: Vec<f64>,
}

impl StateDerivative {
    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_iterator(
            2 * self.p_dot.len(),
            self.p_dot.iter().chain(self.p_ddot.iter()).copied(),
        )
    }
}

/// Kelvin-Voigt contact force per axis, positive into the surface.
pub fn contact_force(state: &SysState, k: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    let n = state.axes();
    if k.len() != n || b.len() != n {
        return Err(Error::invalid("parameter dimension does not match state"));
    }
    ensure_finite("contact parameters", k)?;
    ensure_finite("contact parameters", b)?;
    ensure_finite("state", &state.p)?;
    ensure_finite("state", &state.p_dot)?;
    if k.iter().chain(b).any(|v| *v < 0.0) {
        return Err(Error::invalid("stiffness and damping must be >= 0"));
    }
    Ok((0..n)
        .map(|i| k[i] * state.p[i] + b[i] * state.p_dot[i])
        .collect())
}

/// Contact force using a stacked parameter vector `[k..., b...]`.
pub fn contact_force_theta(state: &SysState, theta: &[f64]) -> Result<Vec<f64>> {
    let n = state.axes();
    if theta.len() != 2 * n {
        return Err(Error::invalid("parameter vector must have 2 entries per axis"));
    }
    contact_force(state, &theta[..n], &theta[n..])
}

pub fn dynamics(state: &SysState, plant: &TruePlant, u: &[f64], d: &[f64]) -> Result<StateDerivative> {
    let n = state.axes();
    if plant.axes() != n || u.len() != n || d.len() != n {
        return Err(Error::invalid("dimension mismatch in dynamics"));
    }
    if !(plant.m_o > 0.0) {
        return Err(Error::invalid("tool mass must be positive"));
    }
    ensure_finite("input", u)?;
    ensure_finite("disturbance", d)?;
    let f_c = contact_force(state, &plant.k, &plant.b)?;
    let p_ddot = (0..n)
        .map(|i| (-f_c[i] + u[i] + d[i]) / plant.m_o)
        .collect();
    Ok(StateDerivative {
        p_dot: state.p_dot.clone(),
        p_ddot,
    })
}

/// One classical RK4 step with `u` and `d` held constant over the step.
pub fn step_rk4(
    state: &SysState,
    plant: &TruePlant,
    u: &[f64],
    d: &[f64],
    dt: f64,
) -> Result<SysState> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::invalid(format!("step size must be positive, got {dt}")));
    }
    let n = state.axes();
    let offset = |base: &SysState, k: &StateDerivative, h: f64| SysState {
        p: (0..n).map(|i| base.p[i] + h * k.p_dot[i]).collect(),
        p_dot: (0..n).map(|i| base.p_dot[i] + h * k.p_ddot[i]).collect(),
        t: base.t + h,
    };

    let k1 = dynamics(state, plant, u, d)?;
    let k2 = dynamics(&offset(state, &k1, 0.5 * dt), plant, u, d)?;
    let k3 = dynamics(&offset(state, &k2, 0.5 * dt), plant, u, d)?;
    let k4 = dynamics(&offset(state, &k3, dt), plant, u, d)?;

    let w = dt / 6.0;
    Ok(SysState {
        p: (0..n)
            .map(|i| {
                state.p[i] + w * (k1.p_dot[i] + 2.0 * k2.p_dot[i] + 2.0 * k3.p_dot[i] + k4.p_dot[i])
            })
            .collect(),
        p_dot: (0..n)
            .map(|i| {
                state.p_dot[i]
                    + w * (k1.p_ddot[i] + 2.0 * k2.p_ddot[i] + 2.0 * k3.p_ddot[i] + k4.p_ddot[i])
            })
            .collect(),
        t: state.t + dt,
    })
}

/// Known drift `f(x) = [p_dot; 0]`.
pub fn drift(state: &SysState) -> DVector<f64> {
    let n = state.axes();
    DVector::from_iterator(
        2 * n,
        state.p_dot.iter().copied().chain(std::iter::repeat(0.0).take(n)),
    )
}

/// Parametric regressor `F(x)`, shape `2n x 2n`, so that `F(x) theta` is the
/// contact-force contribution to `x_dot`.
pub fn regressor(state: &SysState, m_o: f64) -> DMatrix<f64> {
    let n = state.axes();
    let mut f = DMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        f[(n + i, i)] = -state.p[i] / m_o;
        f[(n + i, n + i)] = -state.p_dot[i] / m_o;
    }
    f
}

/// Input matrix `g = [0; I / m_o]`, shape `2n x n`.
pub fn input_gain(axes: usize, m_o: f64) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(2 * axes, axes);
    for i in 0..axes {
        g[(axes + i, i)] = 1.0 / m_o;
    }
    g
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisturbanceKind {
    Zero,
    Sinusoid,
    SinusoidPlusUniform,
}

/// Bounded additive input disturbance, `||d(t)||_inf <= delta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceSpec {
    pub delta: f64,
    pub kind: DisturbanceKind,
    /// Sinusoid frequency in Hz.
    pub frequency: f64,
    pub seed: u64,
}

impl DisturbanceSpec {
    pub fn zero() -> Self {
        Self {
            delta: 0.0,
            kind: DisturbanceKind::Zero,
            frequency: 0.0,
            seed: 0,
        }
    }
}

// Share of the bound carried by the sinusoid in the mixed disturbance.
const SINE_SHARE: f64 = 0.6;

fn mix_seed(seed: u64, t: f64) -> u64 {
    // splitmix64 finaliser over (seed, t)
    let mut z = seed ^ t.to_bits().wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Samples the disturbance on every axis at time `t`.
///
/// The result is a pure function of `(spec, t, axes)`; every entry is clamped
/// to `[-delta, delta]`.
pub fn disturbance_sample(spec: &DisturbanceSpec, t: f64, axes: usize) -> Vec<f64> {
    let delta = spec.delta.max(0.0);
    let phase = 2.0 * std::f64::consts::PI * spec.frequency * t;
    match spec.kind {
        DisturbanceKind::Zero => vec![0.0; axes],
        DisturbanceKind::Sinusoid => vec![(delta * phase.sin()).clamp(-delta, delta); axes],
        DisturbanceKind::SinusoidPlusUniform => {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, t));
            (0..axes)
                .map(|_| {
                    let noise: f64 = rng.gen_range(-1.0..=1.0);
                    let raw = delta * (SINE_SHARE * phase.sin() + (1.0 - SINE_SHARE) * noise);
                    raw.clamp(-delta, delta)
                })
                .collect()
        }
    }
}

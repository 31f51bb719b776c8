//! Surface-treatment task: a round tool travels a rectangular loop over a flat
//! plate, and the force corridor follows from a target material removal rate
//! through Preston's law `MRR = k_p * (F / A) * w`.
//!
//! Near the plate edges the tool overhangs, the contact area `A` drops, and so
//! the force needed for the same removal rate drops too.

use serde::{Deserialize, Serialize};

use crate::barrier::{BoundSchedule, Bounds};
use crate::error::{ensure_finite, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plate {
    pub width: f64,
    pub height: f64,
}

/// Area of the intersection of a disc with the axis-aligned rectangle
/// `[0, width] x [0, height]`.
pub fn contact_area(center: [f64; 2], plate: &Plate, r: f64) -> f64 {
    if !(r > 0.0) || !center.iter().all(|c| c.is_finite()) {
        return 0.0;
    }
    let [cx, cy] = center;
    let (x0, x1) = ((-r).max(-cx), r.min(plate.width - cx));
    if x1 <= x0 {
        return 0.0;
    }
    // the chord length changes form where the disc crosses y = 0 or y = height
    let mut cuts = vec![x0, x1];
    for e in [cy, plate.height - cy] {
        if e.abs() < r {
            let x = (r * r - e * e).sqrt();
            cuts.extend([-x, x].into_iter().filter(|v| *v > x0 && *v < x1));
        }
    }
    cuts.sort_by(f64::total_cmp);

    let half_chord = |x: f64| (r * r - x * x).max(0.0).sqrt();
    // antiderivative of sqrt(r^2 - x^2)
    let big_s = |x: f64| {
        let x = x.clamp(-r, r);
        0.5 * (x * half_chord(x) + r * r * (x / r).asin())
    };
    let mut area = 0.0;
    for w in cuts.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b <= a {
            continue;
        }
        let s = half_chord(0.5 * (a + b));
        let top_clipped = cy + s > plate.height;
        let bottom_clipped = cy - s < 0.0;
        let top = if top_clipped { plate.height } else { cy + s };
        let bottom = if bottom_clipped { 0.0 } else { cy - s };
        if top <= bottom {
            continue;
        }
        let ds = big_s(b) - big_s(a);
        let span = b - a;
        let top_int = if top_clipped { plate.height * span } else { cy * span + ds };
        let bottom_int = if bottom_clipped { 0.0 } else { cy * span - ds };
        area += top_int - bottom_int;
    }
    area.clamp(0.0, std::f64::consts::PI * r * r)
}

pub fn preston_mrr(k_p: f64, force: f64, area: f64, speed: f64) -> Result<f64> {
    if !(area > 0.0) {
        return Err(Error::invalid(format!("contact area must be positive, got {area}")));
    }
    Ok(k_p * force * speed / area)
}

pub fn force_from_mrr(mrr: f64, k_p: f64, area: f64, speed: f64) -> Result<f64> {
    if !(k_p * speed > 0.0) {
        return Err(Error::invalid("a stationary tool or zero Preston coefficient cannot remove material"));
    }
    Ok(mrr * area / (k_p * speed))
}

/// `u = gain * (f_ref - f_meas) + f_ref`.
pub fn nominal_p_controller(f_ref: f64, f_meas: f64, gain: f64) -> f64 {
    gain * (f_ref - f_meas) + f_ref
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceKind {
    /// `reference_factor * f_upper`, outside the corridor for factors above one.
    Outside,
    Center,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub plate_width: f64,
    pub plate_height: f64,
    pub tool_radius: f64,
    pub tool_speed: f64,
    /// Corners of the closed tool path, visited in order.
    pub path: Vec<[f64; 2]>,
    pub k_p: f64,
    pub mrr_desired: f64,
    pub mrr_band_frac: f64,
    /// When set, the corridor is this fraction around the desired force instead
    /// of following the MRR band.
    pub force_band_frac: Option<f64>,
    pub reference: ReferenceKind,
    pub reference_factor: f64,
    pub controller_gain: f64,
    /// Spacing of the schedule breakpoints (s).
    pub schedule_dt: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            plate_width: 0.3,
            plate_height: 0.2,
            tool_radius: 0.025,
            tool_speed: 0.05,
            path: vec![[0.05, 0.05], [0.25, 0.05], [0.25, 0.2], [0.05, 0.2]],
            k_p: 1.0,
            mrr_desired: 250.0,
            mrr_band_frac: 0.10,
            force_band_frac: None,
            reference: ReferenceKind::Outside,
            reference_factor: 1.05,
            controller_gain: 2.0,
            schedule_dt: 0.01,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let scalars = [
            self.plate_width,
            self.plate_height,
            self.tool_radius,
            self.tool_speed,
            self.k_p,
            self.mrr_desired,
            self.mrr_band_frac,
            self.reference_factor,
            self.controller_gain,
            self.schedule_dt,
        ];
        ensure_finite("scenario parameters", &scalars)?;
        if !(self.plate_width > 0.0 && self.plate_height > 0.0) {
            return Err(Error::Config("plate dimensions must be positive".into()));
        }
        if !(self.tool_radius > 0.0) {
            return Err(Error::Config("tool_radius must be positive".into()));
        }
        if !(self.tool_speed > 0.0 && self.k_p > 0.0) {
            return Err(Error::Config("tool_speed and k_p must be positive".into()));
        }
        if !(self.mrr_desired > 0.0) {
            return Err(Error::Config("mrr_desired must be positive".into()));
        }
        if !(self.mrr_band_frac > 0.0 && self.mrr_band_frac < 1.0) {
            return Err(Error::Config("mrr_band_frac must lie in (0, 1)".into()));
        }
        if let Some(f) = self.force_band_frac {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::Config("force_band_frac must lie in (0, 1)".into()));
            }
        }
        if !(self.controller_gain > 0.0) {
            return Err(Error::Config("controller_gain must be positive".into()));
        }
        if !(self.schedule_dt > 0.0) {
            return Err(Error::Config("schedule_dt must be positive".into()));
        }
        if self.path.len() < 2 {
            return Err(Error::Config("path needs at least two corners".into()));
        }
        let r = self.tool_radius;
        for c in &self.path {
            ensure_finite("path", c)?;
            if c[0] < -r || c[0] > self.plate_width + r || c[1] < -r || c[1] > self.plate_height + r {
                return Err(Error::Config(format!("path corner {c:?} is off the plate")));
            }
        }
        if self.perimeter() <= 0.0 {
            return Err(Error::Config("path has zero length".into()));
        }
        Ok(())
    }

    pub fn plate(&self) -> Plate {
        Plate {
            width: self.plate_width,
            height: self.plate_height,
        }
    }

    pub fn perimeter(&self) -> f64 {
        let n = self.path.len();
        (0..n).map(|i| dist(self.path[i], self.path[(i + 1) % n])).sum()
    }

    /// Time for one lap of the loop.
    pub fn lap_time(&self) -> f64 {
        self.perimeter() / self.tool_speed
    }

    /// Tool centre at time `t`, moving at constant speed around the loop.
    pub fn tool_center(&self, t: f64) -> [f64; 2] {
        let n = self.path.len();
        let perimeter = self.perimeter();
        let mut s = (self.tool_speed * t).rem_euclid(perimeter);
        for i in 0..n {
            let (a, b) = (self.path[i], self.path[(i + 1) % n]);
            let len = dist(a, b);
            if s <= len || i == n - 1 {
                let f = if len > 0.0 { (s / len).min(1.0) } else { 0.0 };
                return [a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1])];
            }
            s -= len;
        }
        self.path[0]
    }

    pub fn area_at(&self, t: f64) -> f64 {
        contact_area(self.tool_center(t), &self.plate(), self.tool_radius)
    }

    /// Force giving exactly `mrr_desired` over `area`.
    pub fn desired_force(&self, area: f64) -> Result<f64> {
        force_from_mrr(self.mrr_desired, self.k_p, area, self.tool_speed)
    }

    fn corridor_factors(&self) -> (f64, f64) {
        match self.force_band_frac {
            Some(f) => (1.0 - f, 1.0 + f),
            None => (1.0 - self.mrr_band_frac, 1.0 + self.mrr_band_frac),
        }
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (b[0] - a[0]).hypot(b[1] - a[1])
}

/// Force corridor, nominal reference and contact-area profile over one run.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSchedule {
    pub bounds: BoundSchedule,
    area: Vec<f64>,
    reference: ReferenceKind,
    reference_factor: f64,
}

impl ScenarioSchedule {
    /// Contact area interpolated on the schedule grid, matching the corridor.
    pub fn area(&self, t: f64) -> Result<f64> {
        let bp = self.bounds.breakpoints();
        let (start, end) = (self.bounds.start(), self.bounds.end());
        let slack = 1e-9 * end.abs().max(1.0);
        if !t.is_finite() || t < start - slack || t > end + slack {
            return Err(Error::OutOfDomain { t, start, end });
        }
        if bp.len() == 1 {
            return Ok(self.area[0]);
        }
        let t = t.clamp(start, end);
        let seg = bp.partition_point(|&b| b <= t).saturating_sub(1).min(bp.len() - 2);
        let s = (t - bp[seg]) / (bp[seg + 1] - bp[seg]);
        Ok(self.area[seg] + s * (self.area[seg + 1] - self.area[seg]))
    }

    pub fn area_samples(&self) -> &[f64] {
        &self.area
    }

    pub fn reference_from(&self, bounds: &Bounds) -> f64 {
        match self.reference {
            ReferenceKind::Outside => self.reference_factor * bounds.upper,
            ReferenceKind::Center => bounds.center(),
        }
    }

    pub fn reference(&self, t: f64) -> Result<f64> {
        Ok(self.reference_from(&self.bounds.eval(t)?))
    }
}

/// Samples the contact area every `schedule_dt` over `[0, duration]` and turns it
/// into a piecewise-linear force corridor.
pub fn build_bound_schedule(cfg: &ScenarioConfig, duration: f64) -> Result<ScenarioSchedule> {
    cfg.validate()?;
    if !(duration >= 0.0 && duration.is_finite()) {
        return Err(Error::Config(format!("duration must be >= 0, got {duration}")));
    }
    let steps = (duration / cfg.schedule_dt - 1e-9).ceil().max(0.0) as usize;
    let mut times: Vec<f64> = (0..steps)
        .map(|i| i as f64 * cfg.schedule_dt)
        .filter(|t| *t < duration - 1e-9 * cfg.schedule_dt)
        .collect();
    times.push(duration);
    let area: Vec<f64> = times.iter().map(|&t| cfg.area_at(t)).collect();
    if let Some(i) = area.iter().position(|a| !(*a > 0.0)) {
        return Err(Error::Config(format!("tool loses contact with the plate at t = {}", times[i])));
    }
    let (lo_f, up_f) = cfg.corridor_factors();
    let mut lower = Vec::with_capacity(area.len());
    let mut upper = Vec::with_capacity(area.len());
    for a in &area {
        let f = cfg.desired_force(*a)?;
        lower.push(lo_f * f);
        upper.push(up_f * f);
    }
    Ok(ScenarioSchedule {
        bounds: BoundSchedule::new(times, lower, upper)?,
        area,
        reference: cfg.reference,
        reference_factor: cfg.reference_factor,
    })
}

//! Set-membership identification of the parameter box.
//!
//! Each datum gives `Y = x_dot - f(x) - g(x) u` and `D = F(x)`, so that
//! `Y - D theta* = g(x) d`. An update keeps the parameters in the current box
//! that explain every row of a batch to within `eps`, and replaces the box by
//! the bounding box of that feasible set.
//!
//! The rows of `F(x)` only couple `k_i` with `b_i`, so the feasible set splits
//! into independent blocks of at most two coordinates. One-coordinate blocks
//! are interval intersections; two-coordinate blocks are solved exactly by
//! clipping the box rectangle against each strip.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{ensure_finite, Error, Result};
use crate::plant::{drift, input_gain, regressor, StateDerivative, SysState};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl ParamBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(Error::invalid("box bounds must be nonempty and of equal length"));
        }
        ensure_finite("box bounds", &lower)?;
        ensure_finite("box bounds", &upper)?;
        if lower.iter().zip(&upper).any(|(l, u)| l > u) {
            return Err(Error::invalid("box lower bound exceeds upper bound"));
        }
        Ok(ParamBox { lower, upper })
    }

    pub fn point(theta: Vec<f64>) -> Result<Self> {
        ParamBox::new(theta.clone(), theta)
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn widths(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| u - l).collect()
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        theta.len() == self.dim()
            && theta
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (l, u))| *l <= *v && *v <= *u)
    }

    pub fn is_subset_of(&self, other: &ParamBox) -> bool {
        self.dim() == other.dim()
            && (0..self.dim()).all(|i| other.lower[i] <= self.lower[i] && self.upper[i] <= other.upper[i])
    }

    /// Componentwise clamp into the box.
    pub fn project(&self, theta: &[f64]) -> Vec<f64> {
        theta
            .iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(v, (l, u))| v.clamp(*l, *u))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionDatum {
    pub y: DVector<f64>,
    pub d: DMatrix<f64>,
    pub t: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmidUpdate {
    pub bounds: ParamBox,
    /// False when no parameter in the box explains the batch; the box is then unchanged.
    pub consistent: bool,
}

pub fn make_datum(state: &SysState, state_deriv: &StateDerivative, u: &[f64], m_o: f64) -> Result<RegressionDatum> {
    let n = state.axes();
    if state_deriv.p_dot.len() != n || state_deriv.p_ddot.len() != n || u.len() != n {
        return Err(Error::invalid("datum dimensions disagree with the state"));
    }
    let y = state_deriv.to_vector() - drift(state) - input_gain(n, m_o) * DVector::from_column_slice(u);
    Ok(RegressionDatum {
        y,
        d: regressor(state, m_o),
        t: state.t,
    })
}

/// Half-plane `c . theta <= r` in a two-coordinate block.
#[derive(Debug, Clone, Copy)]
struct HalfPlane {
    c: [f64; 2],
    r: f64,
}

pub fn update(bounds: &ParamBox, batch: &[RegressionDatum], precision: f64) -> Result<SmidUpdate> {
    if !(precision > 0.0 && precision.is_finite()) {
        return Err(Error::invalid(format!("precision must be positive, got {precision}")));
    }
    let k = bounds.dim();
    let unchanged = SmidUpdate {
        bounds: bounds.clone(),
        consistent: true,
    };
    if batch.is_empty() {
        return Ok(unchanged);
    }
    let mut rows: Vec<(Vec<f64>, f64)> = Vec::new();
    for datum in batch {
        if datum.d.ncols() != k || datum.d.nrows() != datum.y.len() {
            return Err(Error::invalid("datum regressor does not match the box dimension"));
        }
        for r in 0..datum.d.nrows() {
            let coeffs: Vec<f64> = datum.d.row(r).iter().copied().collect();
            ensure_finite("regressor", &coeffs)?;
            ensure_finite("measurement", &[datum.y[r]])?;
            rows.push((coeffs, datum.y[r]));
        }
    }

    // rows that touch no coordinate are a pure consistency test
    let mut consistent = true;
    for (coeffs, y) in &rows {
        if coeffs.iter().all(|c| *c == 0.0) && y.abs() > precision {
            consistent = false;
        }
    }

    let blocks = coupled_blocks(k, &rows)?;
    let mut lower = bounds.lower.clone();
    let mut upper = bounds.upper.clone();
    for block in &blocks {
        let block_rows = rows.iter().filter(|(c, _)| block.iter().any(|&i| c[i] != 0.0));
        let extent = match block.as_slice() {
            [i] => {
                let (mut lo, mut hi) = (bounds.lower[*i], bounds.upper[*i]);
                for (coeffs, y) in block_rows {
                    let c = coeffs[*i];
                    let (a, b) = ((y - precision) / c, (y + precision) / c);
                    lo = lo.max(a.min(b));
                    hi = hi.min(a.max(b));
                }
                (lo <= hi).then(|| (vec![lo], vec![hi]))
            }
            [i, j] => {
                let mut planes = Vec::new();
                for (coeffs, y) in block_rows {
                    let c = [coeffs[*i], coeffs[*j]];
                    planes.push(HalfPlane { c, r: y + precision });
                    planes.push(HalfPlane {
                        c: [-c[0], -c[1]],
                        r: precision - y,
                    });
                }
                let lo = [bounds.lower[*i], bounds.lower[*j]];
                let hi = [bounds.upper[*i], bounds.upper[*j]];
                clip_extent(lo, hi, &planes).map(|(a, b)| (a.to_vec(), b.to_vec()))
            }
            _ => unreachable!("blocks have at most two coordinates"),
        };
        match extent {
            Some((lo, hi)) => {
                for (slot, &i) in block.iter().enumerate() {
                    lower[i] = lo[slot].clamp(bounds.lower[i], bounds.upper[i]);
                    upper[i] = hi[slot].clamp(bounds.lower[i], bounds.upper[i]);
                }
            }
            None => consistent = false,
        }
    }
    if !consistent {
        return Ok(SmidUpdate {
            bounds: bounds.clone(),
            consistent: false,
        });
    }
    Ok(SmidUpdate {
        bounds: ParamBox { lower, upper },
        consistent: true,
    })
}

/// Groups coordinates that appear together in some row.
fn coupled_blocks(k: usize, rows: &[(Vec<f64>, f64)]) -> Result<Vec<Vec<usize>>> {
    let mut parent: Vec<usize> = (0..k).collect();
    fn root(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    let mut touched = vec![false; k];
    for (coeffs, _) in rows {
        let support: Vec<usize> = (0..k).filter(|&i| coeffs[i] != 0.0).collect();
        for &i in &support {
            touched[i] = true;
        }
        for w in support.windows(2) {
            let (a, b) = (root(&mut parent, w[0]), root(&mut parent, w[1]));
            parent[a] = b;
        }
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut label = vec![usize::MAX; k];
    for i in (0..k).filter(|&i| touched[i]) {
        let r = root(&mut parent, i);
        if label[r] == usize::MAX {
            label[r] = groups.len();
            groups.push(Vec::new());
        }
        groups[label[r]].push(i);
    }
    if let Some(big) = groups.iter().find(|g| g.len() > 2) {
        return Err(Error::Unsupported(format!(
            "set-membership update couples {} parameters; at most two are supported",
            big.len()
        )));
    }
    Ok(groups)
}

/// Bounding box of `{lo <= theta <= hi} ∩ planes`, or `None` if empty.
fn clip_extent(lo: [f64; 2], hi: [f64; 2], planes: &[HalfPlane]) -> Option<([f64; 2], [f64; 2])> {
    let mut poly = vec![[lo[0], lo[1]], [hi[0], lo[1]], [hi[0], hi[1]], [lo[0], hi[1]]];
    for plane in planes {
        poly = clip(&poly, plane);
        if poly.is_empty() {
            return None;
        }
    }
    let mut min = [f64::INFINITY; 2];
    let mut max = [f64::NEG_INFINITY; 2];
    for v in &poly {
        for a in 0..2 {
            min[a] = min[a].min(v[a]);
            max[a] = max[a].max(v[a]);
        }
    }
    Some((min, max))
}

fn clip(poly: &[[f64; 2]], plane: &HalfPlane) -> Vec<[f64; 2]> {
    // small slack keeps degenerate (zero-width) boxes from vanishing to rounding
    let scale = plane.c[0].abs() + plane.c[1].abs();
    let tol = 1e-12 * (plane.r.abs() + scale * poly.iter().map(|v| v[0].abs().max(v[1].abs())).fold(0.0, f64::max));
    let side = |v: &[f64; 2]| plane.c[0] * v[0] + plane.c[1] * v[1] - plane.r;
    let mut out = Vec::with_capacity(poly.len() + 1);
    for idx in 0..poly.len() {
        let cur = poly[idx];
        let next = poly[(idx + 1) % poly.len()];
        let (sc, sn) = (side(&cur), side(&next));
        let (in_c, in_n) = (sc <= tol, sn <= tol);
        if in_c {
            out.push(cur);
        }
        if in_c != in_n && (sc - sn).abs() > 0.0 {
            let s = sc / (sc - sn);
            out.push([cur[0] + s * (next[0] - cur[0]), cur[1] + s * (next[1] - cur[1])]);
        }
    }
    out
}

/// Maximum possible error `max(theta_hat - lower, upper - theta_hat)`.
pub fn vartheta_from_box(bounds: &ParamBox, theta_hat: &[f64]) -> Result<Vec<f64>> {
    if !bounds.contains(theta_hat) {
        return Err(Error::invalid("estimate lies outside the parameter box"));
    }
    Ok((0..bounds.dim())
        .map(|i| (theta_hat[i] - bounds.lower[i]).max(bounds.upper[i] - theta_hat[i]))
        .collect())
}

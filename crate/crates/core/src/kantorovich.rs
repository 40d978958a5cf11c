//! Kantorovich distance between utilities on a shared grid.
//!
//! On the normalized domain `[0, 1]` the distance is `integral |u - v|`. The conic form
//! works on slope differences and is what the neutral estimator optimizes against; the
//! closed form integrates the piecewise-linear difference exactly.

use serde::{Deserialize, Serialize};

use crate::conic::{self, Bound, ConicProgram, LinExpr, SolverSettings};
use crate::elicitation::add_kantorovich_dual;
use crate::error::{Error, Result};
use crate::utility::{ClosedFormUtility, PwlUtility};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceMethod {
    Socp,
    DualSocp,
    ClosedForm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceResult {
    pub value: f64,
    pub method: DistanceMethod,
}

fn shared_grid(u: &PwlUtility, v: &PwlUtility) -> Result<()> {
    let (a, b) = (u.grid().points(), v.grid().points());
    let tol = 1e-9 * u.grid().upper().max(1.0);
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| (x - y).abs() > tol) {
        return Err(Error::validation("utilities must share a breakpoint grid"));
    }
    Ok(())
}

/// Exact `integral_0^1 |u - v|` on the normalized domain.
pub fn kantorovich_closed_form(u: &PwlUtility, v: &PwlUtility) -> Result<DistanceResult> {
    shared_grid(u, v)?;
    let un = u.normalized();
    let vn = v.normalized();
    let grid = un.grid();
    let d: Vec<f64> = un.alpha().iter().zip(vn.alpha()).map(|(a, b)| a - b).collect();
    let mut total = 0.0;
    for j in 0..grid.len() - 1 {
        let w = grid.width(j);
        let (a, b) = (d[j], d[j + 1]);
        total += if a * b >= 0.0 {
            0.5 * w * (a.abs() + b.abs())
        } else {
            0.5 * w * (a * a + b * b) / (a.abs() + b.abs())
        };
    }
    Ok(DistanceResult { value: total, method: DistanceMethod::ClosedForm })
}

/// Distance from `u` to the chord of a closed-form utility on `u`'s grid.
pub fn distance_to_closed_form(u: &PwlUtility, f: &ClosedFormUtility) -> Result<f64> {
    let chord = PwlUtility::chord(u.grid().clone(), f)?;
    Ok(kantorovich_closed_form(u, &chord)?.value)
}

/// Primal conic form. With `x_j` the slope of `|u - v|`'s antiderivative proxy on segment
/// `j`, `S_j` its prefix sum and `w_j` the per-segment integral bound, each segment carries
/// two rotated cones bounding `w_j` from both sides.
pub fn kantorovich_program(u: &PwlUtility, v: &PwlUtility) -> Result<ConicProgram> {
    shared_grid(u, v)?;
    let un = u.normalized();
    let vn = v.normalized();
    let grid = un.grid();
    let segs = grid.len() - 1;
    let mut p = ConicProgram::new();
    let w = p.add_block("w", segs, Bound::Free);
    let x = p.add_block("x", segs, Bound::Free);
    let mut obj = LinExpr::new();
    for j in 0..segs {
        obj.add(w[j], un.beta()[j] - vn.beta()[j]);
    }
    let mut prefix = LinExpr::new();
    for j in 0..segs {
        let dj = grid.width(j);
        // a = -2 w_j + dj (2 S_{j-1} + x_j) + dj^2 / 2
        let mut a = LinExpr::constant(0.5 * dj * dj);
        a.add(w[j], -2.0).add(x[j], dj).add_expr(&prefix, 2.0 * dj);
        let mut b = LinExpr::constant(0.5 * dj * dj);
        b.add(w[j], 2.0).add(x[j], -dj).add_expr(&prefix, -2.0 * dj);
        for (tag, e) in [("a", a), ("b", b)] {
            let mut lo = e.clone();
            lo.add_constant(-0.5);
            let mut hi = e;
            hi.add_constant(0.5);
            p.add_soc(format!("{tag}[{j}]"), x[j].into(), lo, hi);
        }
        prefix.add(x[j], 1.0);
    }
    p.maximize(obj);
    Ok(p)
}

pub fn kantorovich_socp(u: &PwlUtility, v: &PwlUtility) -> Result<DistanceResult> {
    let p = kantorovich_program(u, v)?;
    let r = conic::solve_optimal(&p, &SolverSettings::default(), "kantorovich program")?;
    Ok(DistanceResult { value: r.objective, method: DistanceMethod::Socp })
}

/// Dual conic form, the one embedded in the neutral estimator.
pub fn kantorovich_dual_socp(u: &PwlUtility, v: &PwlUtility) -> Result<DistanceResult> {
    shared_grid(u, v)?;
    let un = u.normalized();
    let vn = v.normalized();
    let mut p = ConicProgram::new();
    let values: Vec<LinExpr> = un.alpha().iter().map(|&a| LinExpr::constant(a)).collect();
    let obj = add_kantorovich_dual(&mut p, "", un.grid(), &values, vn.alpha());
    p.minimize(obj);
    let r = conic::solve_optimal(&p, &SolverSettings::default(), "kantorovich dual program")?;
    Ok(DistanceResult { value: r.objective, method: DistanceMethod::DualSocp })
}

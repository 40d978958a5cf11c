//! Risk summaries of piecewise-linear utilities.

use serde::{Deserialize, Serialize};

use crate::utility::PwlUtility;

/// A local risk-aversion measure at one breakpoint.
///
/// `Undefined` marks breakpoints where the left slope is zero, so the ratio has no value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RiskValue {
    Value(f64),
    Undefined(Option<()>),
}

impl RiskValue {
    pub const UNDEFINED: RiskValue = RiskValue::Undefined(None);

    pub fn value(&self) -> Option<f64> {
        match *self {
            RiskValue::Value(v) => Some(v),
            RiskValue::Undefined(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskPoint {
    pub breakpoint: f64,
    pub value: RiskValue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskAnalytics {
    pub gini: f64,
    /// Set when the utility is not concave; the Gini value is then outside its usual meaning.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub gini_flagged: bool,
    pub ara: Vec<RiskPoint>,
    pub rra: Vec<RiskPoint>,
}

/// Twice the area between `u` and the linear chord `y / upper`, divided by `upper`.
///
/// Integration is exact: `u - y/upper` is linear on every segment.
pub fn gini_coefficient(u: &PwlUtility) -> f64 {
    let pts = u.grid().points();
    let upper = u.grid().upper();
    let alpha = u.alpha();
    let gap = |j: usize| alpha[j] - pts[j] / upper;
    let mut area = 0.0;
    for j in 0..pts.len() - 1 {
        area += 0.5 * (pts[j + 1] - pts[j]) * (gap(j) + gap(j + 1));
    }
    let g = 2.0 * area / upper;
    if u.is_concave() {
        g.clamp(0.0, 1.0)
    } else {
        g
    }
}

/// ARA and RRA at every interior breakpoint, from the left and right slopes there:
/// `ARA = (left - right) / (2 left)` and `RRA = y * ARA`.
pub fn risk_aversion(u: &PwlUtility) -> RiskAnalytics {
    let pts = u.grid().points();
    let beta = u.beta();
    let mut ara = Vec::with_capacity(pts.len().saturating_sub(2));
    let mut rra = Vec::with_capacity(pts.len().saturating_sub(2));
    for j in 1..pts.len() - 1 {
        let (left, right) = (beta[j - 1], beta[j]);
        let y = pts[j];
        if left == 0.0 {
            ara.push(RiskPoint { breakpoint: y, value: RiskValue::UNDEFINED });
            rra.push(RiskPoint { breakpoint: y, value: RiskValue::UNDEFINED });
            continue;
        }
        let a = (left - right) / (2.0 * left);
        ara.push(RiskPoint { breakpoint: y, value: RiskValue::Value(a) });
        rra.push(RiskPoint { breakpoint: y, value: RiskValue::Value(y * a) });
    }
    RiskAnalytics { gini: gini_coefficient(u), gini_flagged: !u.is_concave(), ara, rra }
}

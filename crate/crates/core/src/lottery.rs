//! Lotteries, item sets and the breakpoint grid built from their supports.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Outcome values closer than this are treated as the same breakpoint.
pub const DEDUP_TOLERANCE: f64 = 1e-9;

const PROB_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub value: f64,
    pub prob: f64,
}

/// A discrete non-negative random payoff.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawLottery")]
pub struct Lottery {
    pub id: String,
    pub label: String,
    pub outcomes: Vec<Outcome>,
}

#[derive(Deserialize)]
struct RawLottery {
    id: String,
    #[serde(default)]
    label: String,
    outcomes: Vec<Outcome>,
}

impl TryFrom<RawLottery> for Lottery {
    type Error = Error;

    fn try_from(raw: RawLottery) -> Result<Self> {
        Lottery::new(raw.id, raw.label, raw.outcomes)
    }
}

impl Lottery {
    pub fn new(id: impl Into<String>, label: impl Into<String>, outcomes: Vec<Outcome>) -> Result<Self> {
        let lottery = Lottery { id: id.into(), label: label.into(), outcomes };
        lottery.validate_with(PROB_SUM_TOLERANCE)?;
        Ok(lottery)
    }

    /// A degenerate lottery paying `value` with certainty.
    pub fn sure(id: impl Into<String>, value: f64) -> Result<Self> {
        Lottery::new(id, "", vec![Outcome { value, prob: 1.0 }])
    }

    pub(crate) fn validate_with(&self, prob_tol: f64) -> Result<()> {
        if self.outcomes.is_empty() {
            return Err(Error::validation(format!("lottery {} has no outcomes", self.id)));
        }
        let mut sum = 0.0;
        for o in &self.outcomes {
            if !o.value.is_finite() || o.value < 0.0 {
                return Err(Error::validation(format!(
                    "lottery {}: outcome value {} must be finite and >= 0",
                    self.id, o.value
                )));
            }
            if !o.prob.is_finite() || o.prob <= 0.0 {
                return Err(Error::validation(format!(
                    "lottery {}: probability {} must be > 0",
                    self.id, o.prob
                )));
            }
            sum += o.prob;
        }
        if (sum - 1.0).abs() > prob_tol {
            return Err(Error::validation(format!(
                "lottery {}: probabilities sum to {sum}, expected 1",
                self.id
            )));
        }
        let mut values: Vec<f64> = self.outcomes.iter().map(|o| o.value).collect();
        values.sort_by(f64::total_cmp);
        if values.windows(2).any(|w| w[1] - w[0] <= DEDUP_TOLERANCE) {
            return Err(Error::validation(format!("lottery {}: repeated outcome value", self.id)));
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        self.outcomes.iter().map(|o| o.value * o.prob).sum()
    }

    pub fn max_value(&self) -> f64 {
        self.outcomes.iter().map(|o| o.value).fold(0.0, f64::max)
    }

    /// Expectation of an arbitrary function of the payoff.
    pub fn expect(&self, mut f: impl FnMut(f64) -> f64) -> f64 {
        self.outcomes.iter().map(|o| o.prob * f(o.value)).sum()
    }

    fn sorted_outcomes(&self) -> Vec<Outcome> {
        let mut v = self.outcomes.clone();
        v.sort_by(|a, b| a.value.total_cmp(&b.value));
        v
    }

    /// Equality as probability distributions (ignores id, label and outcome order).
    pub fn same_distribution(&self, other: &Lottery) -> bool {
        let a = self.sorted_outcomes();
        let b = other.sorted_outcomes();
        a.len() == b.len()
            && a.iter().zip(&b).all(|(x, y)| {
                (x.value - y.value).abs() <= DEDUP_TOLERANCE && (x.prob - y.prob).abs() <= PROB_SUM_TOLERANCE
            })
    }
}

/// A named collection of pairwise-distinct lotteries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawItemSet")]
pub struct ItemSet {
    pub name: String,
    pub items: Vec<Lottery>,
}

#[derive(Deserialize)]
struct RawItemSet {
    name: String,
    items: Vec<Lottery>,
}

impl TryFrom<RawItemSet> for ItemSet {
    type Error = Error;

    fn try_from(raw: RawItemSet) -> Result<Self> {
        ItemSet::new(raw.name, raw.items)
    }
}

impl ItemSet {
    pub fn new(name: impl Into<String>, items: Vec<Lottery>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::validation("item set is empty"));
        }
        for (i, a) in items.iter().enumerate() {
            for b in &items[i + 1..] {
                if a.id == b.id {
                    return Err(Error::validation(format!("duplicate item id {}", a.id)));
                }
                if a.same_distribution(b) {
                    return Err(Error::validation(format!(
                        "items {} and {} are the same lottery",
                        a.id, b.id
                    )));
                }
            }
        }
        Ok(ItemSet { name: name.into(), items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.items.iter().position(|l| l.id == id)
    }

    pub fn get(&self, id: &str) -> Option<&Lottery> {
        self.items.iter().find(|l| l.id == id)
    }

    /// Largest outcome over all items; the default upper end of the utility domain.
    pub fn max_outcome(&self) -> f64 {
        self.items.iter().map(Lottery::max_value).fold(0.0, f64::max)
    }

    /// Number of unordered pairs of distinct items.
    pub fn pair_count(&self) -> usize {
        self.len() * (self.len() - 1) / 2
    }
}

/// Ordered breakpoints `0 = y_1 < ... < y_N = upper` of a piecewise-linear utility.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct BreakpointGrid {
    points: Vec<f64>,
}

impl TryFrom<Vec<f64>> for BreakpointGrid {
    type Error = Error;

    fn try_from(points: Vec<f64>) -> Result<Self> {
        BreakpointGrid::new(points)
    }
}

impl From<BreakpointGrid> for Vec<f64> {
    fn from(g: BreakpointGrid) -> Self {
        g.points
    }
}

impl BreakpointGrid {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::validation("a breakpoint grid needs at least two points"));
        }
        if points[0] != 0.0 {
            return Err(Error::validation(format!("first breakpoint must be 0, got {}", points[0])));
        }
        if points.iter().any(|p| !p.is_finite()) {
            return Err(Error::validation("breakpoints must be finite"));
        }
        if points.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::validation("breakpoints must be strictly increasing"));
        }
        Ok(BreakpointGrid { points })
    }

    /// Sorted, deduplicated union of `{0}`, the given support values and `{upper}`.
    pub fn from_values(values: impl IntoIterator<Item = f64>, upper: f64) -> Result<Self> {
        if !(upper.is_finite() && upper > 0.0) {
            return Err(Error::validation(format!("upper bound {upper} must be positive")));
        }
        let mut pts = vec![0.0, upper];
        for v in values {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::validation(format!("support value {v} must be finite and >= 0")));
            }
            if v > upper + DEDUP_TOLERANCE {
                return Err(Error::validation(format!(
                    "support value {v} exceeds the domain upper bound {upper}"
                )));
            }
            pts.push(v.min(upper));
        }
        pts.sort_by(f64::total_cmp);
        let mut merged: Vec<f64> = Vec::with_capacity(pts.len());
        for p in pts {
            match merged.last() {
                Some(&last) if p - last <= DEDUP_TOLERANCE => {}
                _ => merged.push(p),
            }
        }
        // keep the endpoints exact after merging
        let n = merged.len();
        merged[n - 1] = upper;
        BreakpointGrid::new(merged)
    }

    /// Grid over every outcome of the given lotteries.
    pub fn from_lotteries<'a>(lotteries: impl IntoIterator<Item = &'a Lottery>, upper: f64) -> Result<Self> {
        let values: Vec<f64> = lotteries
            .into_iter()
            .flat_map(|l| l.outcomes.iter().map(|o| o.value))
            .collect();
        BreakpointGrid::from_values(values, upper)
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn upper(&self) -> f64 {
        *self.points.last().expect("grid has at least two points")
    }

    pub fn width(&self, j: usize) -> f64 {
        self.points[j + 1] - self.points[j]
    }

    /// The same grid rescaled to `[0, 1]`.
    pub fn normalized(&self) -> BreakpointGrid {
        let b = self.upper();
        let mut points: Vec<f64> = self.points.iter().map(|p| p / b).collect();
        let n = points.len();
        points[n - 1] = 1.0;
        BreakpointGrid { points }
    }

    /// Index `j` of the segment `[y_j, y_{j+1}]` containing `y`; the last segment is closed.
    pub fn segment_of(&self, y: f64) -> usize {
        let n = self.points.len();
        match self.points.binary_search_by(|p| p.total_cmp(&y)) {
            Ok(i) => i.min(n - 2),
            Err(i) => i.saturating_sub(1).min(n - 2),
        }
    }

    /// Linear interpolation weights of `y` over the two endpoints of its segment.
    /// Returns `[(j, w_j), (j + 1, w_{j+1})]` with weights summing to 1.
    pub fn interpolation(&self, y: f64) -> [(usize, f64); 2] {
        let j = self.segment_of(y);
        let t = ((y - self.points[j]) / self.width(j)).clamp(0.0, 1.0);
        [(j, 1.0 - t), (j + 1, t)]
    }

    /// Check `y` against the domain, snapping values within tolerance of an endpoint.
    pub fn check_domain(&self, y: f64) -> Result<f64> {
        let upper = self.upper();
        let tol = DEDUP_TOLERANCE * upper.max(1.0);
        if !y.is_finite() || y < -tol || y > upper + tol {
            return Err(Error::Domain { value: y, upper });
        }
        Ok(y.clamp(0.0, upper))
    }

    /// Coefficients `c_j` with `E[u(L)] = sum_j c_j * alpha_j` for any utility on this grid.
    pub fn expectation_weights(&self, lottery: &Lottery) -> Result<Vec<f64>> {
        let mut w = vec![0.0; self.len()];
        for o in &lottery.outcomes {
            let y = self.check_domain(o.value)?;
            for (j, t) in self.interpolation(y) {
                w[j] += o.prob * t;
            }
        }
        Ok(w)
    }
}

/// Breakpoints for an item set: `{0}`, every outcome, and `upper`.
pub fn build_breakpoints(items: &ItemSet, upper: f64) -> Result<BreakpointGrid> {
    BreakpointGrid::from_lotteries(&items.items, upper)
}

//! Expected-utility portfolios from historical return samples, and the rolling backtest.
//!
//! Returns are gross factors (`1 + r`) with a cash column fixed at 1.0, so `factors . x` is
//! end-of-period wealth and stays inside the utility's domain.

use std::collections::BTreeMap;

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conic::{self, Bound, ConicProgram, LinExpr, Relation, SolverSettings};
use crate::error::{Error, Result};
use crate::utility::PwlUtility;

pub const CASH: &str = "cash";

/// Daily gross return factors; column 0 is cash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReturnsPanel {
    assets: Vec<String>,
    dates: Vec<NaiveDate>,
    factors: Vec<Vec<f64>>,
}

impl ReturnsPanel {
    /// Builds a panel from risky-asset gross factors, prepending the cash column.
    pub fn new(risky: Vec<String>, dates: Vec<NaiveDate>, risky_factors: Vec<Vec<f64>>) -> Result<Self> {
        if risky.is_empty() {
            return Err(Error::validation("returns panel needs at least one risky asset"));
        }
        if risky.iter().any(|a| a == CASH) {
            return Err(Error::validation("asset name 'cash' is reserved for the risk-free column"));
        }
        if dates.len() != risky_factors.len() {
            return Err(Error::validation(format!("{} dates for {} rows", dates.len(), risky_factors.len())));
        }
        if let Some(w) = dates.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::validation(format!("dates not strictly increasing at {}", dates[w + 1])));
        }
        let mut factors = Vec::with_capacity(risky_factors.len());
        for (t, row) in risky_factors.into_iter().enumerate() {
            if row.len() != risky.len() {
                return Err(Error::validation(format!("row {t} has {} values for {} assets", row.len(), risky.len())));
            }
            if let Some(v) = row.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
                return Err(Error::validation(format!("row {t} has non-positive or non-finite factor {v}")));
            }
            let mut full = Vec::with_capacity(row.len() + 1);
            full.push(1.0);
            full.extend(row);
            factors.push(full);
        }
        let mut assets = vec![CASH.to_string()];
        assets.extend(risky);
        Ok(ReturnsPanel { assets, dates, factors })
    }

    /// Same as [`ReturnsPanel::new`] from daily net returns.
    pub fn from_net_returns(risky: Vec<String>, dates: Vec<NaiveDate>, net: Vec<Vec<f64>>) -> Result<Self> {
        let gross = net.into_iter().map(|row| row.into_iter().map(|r| 1.0 + r).collect()).collect();
        ReturnsPanel::new(risky, dates, gross)
    }

    /// Asset names, cash first.
    pub fn assets(&self) -> &[String] {
        &self.assets
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn factors(&self) -> &[Vec<f64>] {
        &self.factors
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    pub fn num_risky(&self) -> usize {
        self.assets.len() - 1
    }

    /// The trailing `len` rows ending just before row `end`.
    pub fn window(&self, end: usize, len: usize) -> Result<&[Vec<f64>]> {
        if len == 0 || end > self.len() || len > end {
            return Err(Error::validation(format!("window of {len} rows ending at {end} is outside the panel")));
        }
        Ok(&self.factors[end - len..end])
    }
}

/// Budget and per-asset caps in currency. Cash is capped at the budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortfolioSpec {
    pub budget: f64,
    /// One cap per risky asset.
    pub caps: Vec<f64>,
}

impl PortfolioSpec {
    pub fn uniform_caps(budget: f64, fraction: f64, risky: usize) -> Self {
        PortfolioSpec { budget, caps: vec![fraction * budget; risky] }
    }

    pub fn validate(&self, risky: usize) -> Result<()> {
        if !(self.budget.is_finite() && self.budget > 0.0) {
            return Err(Error::validation(format!("budget must be positive, got {}", self.budget)));
        }
        if self.caps.len() != risky {
            return Err(Error::validation(format!("{} caps for {risky} risky assets", self.caps.len())));
        }
        if let Some(c) = self.caps.iter().find(|c| !(c.is_finite() && **c > 0.0 && **c <= self.budget * (1.0 + 1e-12))) {
            return Err(Error::validation(format!("cap {c} must lie in (0, budget]")));
        }
        Ok(())
    }

    /// Upper bound for every asset, cash first.
    fn bounds(&self) -> Vec<f64> {
        let mut b = vec![self.budget];
        b.extend(self.caps.iter().map(|c| c.min(self.budget)));
        b
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Portfolio {
    pub assets: Vec<String>,
    /// Currency amounts, cash first.
    pub allocation: Vec<f64>,
    /// Sample-average utility of the returned allocation.
    pub objective: f64,
    /// Optimal value reported by the linear program.
    pub lp_objective: f64,
}

/// Sample-average utility of end-of-period wealth.
pub fn average_utility(u: &PwlUtility, samples: &[Vec<f64>], allocation: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    for row in samples {
        let wealth: f64 = row.iter().zip(allocation).map(|(f, x)| f * x).sum();
        total += u.eval(wealth)?;
    }
    Ok(total / samples.len() as f64)
}

/// Pulls a near-feasible allocation exactly onto the budget and bounds.
fn repair(mut x: Vec<f64>, bounds: &[f64], budget: f64) -> Vec<f64> {
    for (v, &b) in x.iter_mut().zip(bounds) {
        *v = v.clamp(0.0, b);
    }
    for _ in 0..x.len() {
        let gap = budget - x.iter().sum::<f64>();
        if gap == 0.0 {
            break;
        }
        // largest room first keeps the correction away from binding bounds
        let idx = if gap > 0.0 {
            (0..x.len()).max_by(|&a, &b| (bounds[a] - x[a]).total_cmp(&(bounds[b] - x[b])))
        } else {
            (0..x.len()).max_by(|&a, &b| x[a].total_cmp(&x[b]))
        };
        let i = idx.expect("non-empty allocation");
        x[i] = (x[i] + gap).clamp(0.0, bounds[i]);
    }
    x
}

/// Maximizes the sample-average utility `(1/T) sum_t u(xi_t . x)` with each `u` written as the
/// minimum of its segment lines.
pub fn optimize_portfolio(u: &PwlUtility, samples: &[Vec<f64>], spec: &PortfolioSpec) -> Result<Portfolio> {
    let Some(first) = samples.first() else {
        return Err(Error::validation("no return samples"));
    };
    let assets = first.len();
    if assets < 2 || samples.iter().any(|r| r.len() != assets) {
        return Err(Error::validation("every sample needs the cash factor plus at least one risky factor"));
    }
    spec.validate(assets - 1)?;
    let upper = u.grid().upper();
    let max_factor = samples.iter().flatten().cloned().fold(0.0, f64::max);
    let peak = spec.budget * max_factor;
    if peak > upper * (1.0 + 1e-12) {
        return Err(Error::Domain { value: peak, upper });
    }

    // fractions of the budget; wealth on the normalized utility domain is scale * xi . w
    let scale = spec.budget / upper;
    let norm = u.normalized();
    let bounds = spec.bounds();
    let mut p = ConicProgram::new();
    let w = p.add_block("w", assets, Bound::NonNeg);
    let z = p.add_block("z", samples.len(), Bound::Free);
    let mut budget = LinExpr::new();
    for (s, &v) in w.iter().enumerate() {
        budget.add(v, 1.0);
        p.constrain(format!("cap[{s}]"), v.into(), Relation::Le, bounds[s] / spec.budget);
    }
    p.constrain("budget", budget, Relation::Eq, 1.0);
    let pts = norm.grid().points();
    let mut obj = LinExpr::new();
    let t_inv = 1.0 / samples.len() as f64;
    for (t, row) in samples.iter().enumerate() {
        obj.add(z[t], t_inv);
        for j in 0..pts.len() - 1 {
            let slope = norm.beta()[j];
            let mut e = LinExpr::new().with(z[t], 1.0);
            for (s, &f) in row.iter().enumerate() {
                e.add(w[s], -slope * scale * f);
            }
            p.constrain(format!("piece[{t},{j}]"), e, Relation::Le, norm.alpha()[j] - slope * pts[j]);
        }
    }
    p.maximize(obj);
    let settings = SolverSettings { feasibility_tol: 1e-10, gap_tol: 1e-10, ..SolverSettings::default() };
    let sol = conic::solve_optimal(&p, &settings, "portfolio program")?;
    let raw: Vec<f64> = sol.values(&w).iter().map(|f| f * spec.budget).collect();
    let allocation = repair(raw, &bounds, spec.budget);
    let objective = average_utility(u, samples, &allocation)?;
    Ok(Portfolio {
        assets: Vec::new(),
        allocation,
        objective,
        lp_objective: sol.objective,
    })
}

/// Optimizes over a panel window and labels the allocation with the panel's asset names.
pub fn optimize_on_panel(u: &PwlUtility, panel: &ReturnsPanel, end: usize, window: usize, spec: &PortfolioSpec) -> Result<Portfolio> {
    let mut p = optimize_portfolio(u, panel.window(end, window)?, spec)?;
    p.assets = panel.assets().to_vec();
    Ok(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BacktestConfig {
    pub window: usize,
    pub hold: usize,
    pub initial_wealth: f64,
    /// Risky-asset cap as a fraction of current wealth.
    pub cap_fraction: f64,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        BacktestConfig { window: 60, hold: 7, initial_wealth: 10_000.0, cap_fraction: 0.4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WealthPoint {
    pub date: NaiveDate,
    pub wealth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rebalance {
    pub date: NaiveDate,
    pub wealth: f64,
    /// Budget fractions, cash first.
    pub weights: Vec<f64>,
    /// Set when wealth times the largest factor exceeded the utility's upper bound and the
    /// program was solved at the largest admissible budget instead.
    pub clipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WealthCurve {
    pub estimator: String,
    pub points: Vec<WealthPoint>,
    pub rebalances: Vec<Rebalance>,
}

fn backtest_one(label: &str, u: &PwlUtility, panel: &ReturnsPanel, cfg: &BacktestConfig) -> Result<WealthCurve> {
    let upper = u.grid().upper();
    let mut wealth = cfg.initial_wealth;
    let mut points = vec![WealthPoint { date: panel.dates()[cfg.window - 1], wealth }];
    let mut rebalances = Vec::new();
    let mut start = cfg.window;
    while start < panel.len() {
        let samples = panel.window(start, cfg.window)?;
        let max_factor = samples.iter().flatten().cloned().fold(0.0, f64::max);
        let mut budget = wealth;
        let clipped = budget * max_factor > upper;
        if clipped {
            budget = upper / max_factor;
            tracing::warn!(estimator = label, wealth, budget, "wealth exceeds the utility domain; solving at the largest admissible budget");
        }
        let spec = PortfolioSpec::uniform_caps(budget, cfg.cap_fraction, panel.num_risky());
        let p = optimize_portfolio(u, samples, &spec)?;
        let weights: Vec<f64> = p.allocation.iter().map(|x| x / budget).collect();
        rebalances.push(Rebalance { date: panel.dates()[start], wealth, weights: weights.clone(), clipped });
        let end = (start + cfg.hold).min(panel.len());
        for t in start..end {
            let factor: f64 = panel.factors()[t].iter().zip(&weights).map(|(f, w)| f * w).sum();
            wealth *= factor;
            points.push(WealthPoint { date: panel.dates()[t], wealth });
        }
        start = end;
    }
    Ok(WealthCurve { estimator: label.to_string(), points, rebalances })
}

/// Rolls a trailing window over the panel, re-solving every `hold` rows and holding the
/// resulting budget fractions in between. Curves for different utilities run concurrently.
pub fn run_backtest(
    panel: &ReturnsPanel,
    cfg: &BacktestConfig,
    utilities: &BTreeMap<String, PwlUtility>,
) -> Result<Vec<WealthCurve>> {
    if cfg.window < 2 || cfg.hold < 1 {
        return Err(Error::validation("backtest needs window >= 2 and hold >= 1"));
    }
    if !(cfg.initial_wealth > 0.0 && cfg.cap_fraction > 0.0 && cfg.cap_fraction <= 1.0) {
        return Err(Error::validation("initial wealth must be positive and the cap fraction in (0, 1]"));
    }
    if panel.len() < cfg.window + cfg.hold {
        return Err(Error::validation(format!(
            "panel has {} rows; the backtest needs at least {}",
            panel.len(),
            cfg.window + cfg.hold
        )));
    }
    utilities
        .par_iter()
        .map(|(label, u)| backtest_one(label, u, panel, cfg))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lottery::BreakpointGrid;

    fn dates(n: usize) -> Vec<NaiveDate> {
        let d0 = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
        (0..n).map(|i| d0 + chrono::Days::new(i as u64)).collect()
    }

    #[test]
    fn flat_returns_give_flat_wealth() {
        let panel = ReturnsPanel::new(vec!["A".into()], dates(20), vec![vec![1.0]; 20]).unwrap();
        let u = PwlUtility::linear(BreakpointGrid::new(vec![0.0, 100_000.0]).unwrap());
        let utilities = BTreeMap::from([("linear".to_string(), u)]);
        let cfg = BacktestConfig { window: 5, hold: 3, ..Default::default() };
        let curves = run_backtest(&panel, &cfg, &utilities).unwrap();
        assert!(curves[0].points.iter().all(|p| (p.wealth - 10_000.0).abs() <= 1e-9));
        assert_eq!(curves[0].points.len(), 16);
    }

    #[test]
    fn degenerate_returns_objective() {
        let u = PwlUtility::from_values(BreakpointGrid::new(vec![0.0, 50.0, 200.0]).unwrap(), vec![0.0, 0.7, 1.0]).unwrap();
        let samples = vec![vec![1.0, 1.0]; 4];
        let p = optimize_portfolio(&u, &samples, &PortfolioSpec { budget: 100.0, caps: vec![100.0] }).unwrap();
        assert!((p.objective - u.eval(100.0).unwrap()).abs() <= 1e-9);
        assert!((p.allocation.iter().sum::<f64>() - 100.0).abs() <= 1e-9);
    }

    #[test]
    fn wealth_beyond_domain_names_the_bound() {
        let u = PwlUtility::linear(BreakpointGrid::new(vec![0.0, 100.0]).unwrap());
        let err = optimize_portfolio(&u, &[vec![1.0, 1.5]], &PortfolioSpec { budget: 80.0, caps: vec![40.0] }).unwrap_err();
        match err {
            Error::Domain { upper, .. } => assert_eq!(upper, 100.0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn invalid_specs() {
        let u = PwlUtility::linear(BreakpointGrid::new(vec![0.0, 100.0]).unwrap());
        for spec in [
            PortfolioSpec { budget: 0.0, caps: vec![1.0] },
            PortfolioSpec { budget: 10.0, caps: vec![11.0] },
            PortfolioSpec { budget: 10.0, caps: vec![1.0, 1.0] },
        ] {
            assert!(optimize_portfolio(&u, &[vec![1.0, 1.1]], &spec).unwrap_err().is_validation());
        }
    }

    #[test]
    fn panel_validation() {
        assert!(ReturnsPanel::new(vec!["A".into()], dates(2), vec![vec![1.0], vec![0.0]]).is_err());
        let mut d = dates(2);
        d.swap(0, 1);
        assert!(ReturnsPanel::new(vec!["A".into()], d, vec![vec![1.0], vec![1.0]]).is_err());
        let p = ReturnsPanel::from_net_returns(vec!["A".into()], dates(1), vec![vec![0.01]]).unwrap();
        assert_eq!(p.factors()[0], vec![1.0, 1.01]);
        assert_eq!(p.assets()[0], CASH);
    }

    #[test]
    fn repair_hits_budget_and_bounds() {
        let x = repair(vec![50.000001, 40.0, -1e-9], &[100.0, 40.0, 40.0], 90.0);
        assert!((x.iter().sum::<f64>() - 90.0).abs() <= 1e-12);
        assert!(x.iter().zip([100.0, 40.0, 40.0]).all(|(v, b)| *v >= 0.0 && *v <= b));
    }
}

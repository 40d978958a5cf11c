#![allow(dead_code)]

use std::path::PathBuf;

use chrono::{Datelike, NaiveDate, Weekday};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use roboadvisor::io::load_item_set;
use roboadvisor::lottery::{BreakpointGrid, ItemSet};
use roboadvisor::portfolio::ReturnsPanel;
use roboadvisor::utility::PwlUtility;

pub fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data").join(name)
}

pub fn items10() -> ItemSet {
    load_item_set(&data("items10.json")).unwrap()
}

pub fn items20() -> ItemSet {
    load_item_set(&data("items20.json")).unwrap()
}

/// Weekday dates from 2015-01-02 on.
pub fn trading_days(n: usize) -> Vec<NaiveDate> {
    let mut d = NaiveDate::from_ymd_opt(2015, 1, 2).unwrap();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d = d.succ_opt().unwrap();
    }
    out
}

/// Gaussian daily net returns with asset-specific drift and volatility, clipped to +-50%.
pub fn synthetic_panel(risky: usize, days: usize, seed: u64) -> ReturnsPanel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dists: Vec<Normal<f64>> = (0..risky)
        .map(|i| Normal::new(0.0002 * (i + 1) as f64, 0.004 * (i + 1) as f64).unwrap())
        .collect();
    let net: Vec<Vec<f64>> = (0..days)
        .map(|_| dists.iter().map(|d| d.sample(&mut rng).clamp(-0.5, 0.5)).collect())
        .collect();
    let names = (0..risky).map(|i| format!("A{}", i + 1)).collect();
    ReturnsPanel::from_net_returns(names, trading_days(days), net).unwrap()
}

/// Grid of `n` points on `[0, upper]` with random interior points.
pub fn random_grid(rng: &mut impl Rng, n: usize, upper: f64) -> BreakpointGrid {
    loop {
        let mut pts: Vec<f64> = (0..n - 2).map(|_| rng.gen_range(0.0..upper)).collect();
        pts.push(0.0);
        pts.push(upper);
        pts.sort_by(f64::total_cmp);
        if pts.windows(2).all(|w| w[1] - w[0] > 1e-3 * upper) {
            return BreakpointGrid::new(pts).unwrap();
        }
    }
}

/// Random monotone concave utility on `grid`.
pub fn random_concave(rng: &mut impl Rng, grid: BreakpointGrid) -> PwlUtility {
    let mut slopes: Vec<f64> = (0..grid.len() - 1).map(|_| rng.gen_range(0.0..1.0)).collect();
    slopes.sort_by(|a, b| b.total_cmp(a));
    if slopes[0] == 0.0 {
        slopes[0] = 1.0;
    }
    PwlUtility::from_slopes(grid, &slopes).unwrap()
}

//! Normalized monotone concave piecewise-linear utilities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lottery::{BreakpointGrid, Lottery};

const NORMALIZATION_TOL: f64 = 1e-9;
const SLOPE_CONSISTENCY_TOL: f64 = 1e-9;
const CONCAVITY_TOL: f64 = 1e-12;

/// Piecewise-linear utility with values `alpha` at the grid points and slopes `beta`
/// on the segments between them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawUtility")]
pub struct PwlUtility {
    grid: BreakpointGrid,
    alpha: Vec<f64>,
    beta: Vec<f64>,
}

#[derive(Deserialize)]
struct RawUtility {
    grid: BreakpointGrid,
    alpha: Vec<f64>,
    beta: Vec<f64>,
}

impl TryFrom<RawUtility> for PwlUtility {
    type Error = Error;

    fn try_from(raw: RawUtility) -> Result<Self> {
        PwlUtility::new(raw.grid, raw.alpha, raw.beta)
    }
}

impl PwlUtility {
    /// Validates normalization, slope consistency, monotonicity and concavity.
    pub fn new(grid: BreakpointGrid, alpha: Vec<f64>, beta: Vec<f64>) -> Result<Self> {
        let u = PwlUtility::new_unchecked_shape(grid, alpha, beta)?;
        if !u.is_concave() {
            return Err(Error::validation("utility slopes must be non-increasing (concave)"));
        }
        Ok(u)
    }

    /// Like [`PwlUtility::new`] but accepts non-concave shapes, which analytics flag.
    pub fn new_unchecked_shape(grid: BreakpointGrid, alpha: Vec<f64>, beta: Vec<f64>) -> Result<Self> {
        let n = grid.len();
        if alpha.len() != n || beta.len() != n - 1 {
            return Err(Error::validation(format!(
                "expected {} utility values and {} slopes, got {} and {}",
                n,
                n - 1,
                alpha.len(),
                beta.len()
            )));
        }
        if alpha.iter().chain(&beta).any(|x| !x.is_finite()) {
            return Err(Error::validation("utility values and slopes must be finite"));
        }
        if alpha[0].abs() > NORMALIZATION_TOL || (alpha[n - 1] - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::validation(format!(
                "utility must satisfy u(0)=0 and u(upper)=1, got {} and {}",
                alpha[0],
                alpha[n - 1]
            )));
        }
        for j in 0..n - 1 {
            let rise = alpha[j + 1] - alpha[j];
            if (beta[j] * grid.width(j) - rise).abs() > SLOPE_CONSISTENCY_TOL {
                return Err(Error::validation(format!("slope {j} disagrees with the utility values")));
            }
            if beta[j] < 0.0 {
                return Err(Error::validation(format!("slope {j} is negative")));
            }
        }
        Ok(PwlUtility { grid, alpha, beta })
    }

    /// Builds a utility from values at the grid points, deriving slopes.
    pub fn from_values(grid: BreakpointGrid, alpha: Vec<f64>) -> Result<Self> {
        if alpha.len() != grid.len() {
            return Err(Error::validation("one utility value per breakpoint required"));
        }
        let beta = (0..grid.len() - 1)
            .map(|j| (alpha[j + 1] - alpha[j]) / grid.width(j))
            .collect();
        PwlUtility::new(grid, alpha, beta)
    }

    /// Builds a utility from raw segment slopes, projecting them onto the feasible shape:
    /// negatives are clipped, slopes are made non-increasing by a running minimum and the
    /// result is rescaled so that `u(upper) = 1`.
    ///
    /// Solver output is passed through here so that small interior-point residuals never
    /// leak into the shape invariants.
    pub fn from_slopes(grid: BreakpointGrid, slopes: &[f64]) -> Result<Self> {
        if slopes.len() + 1 != grid.len() {
            return Err(Error::validation("one slope per grid segment required"));
        }
        let mut beta = Vec::with_capacity(slopes.len());
        let mut running = f64::INFINITY;
        for &s in slopes {
            running = running.min(s.max(0.0));
            beta.push(running);
        }
        let total: f64 = beta.iter().enumerate().map(|(j, b)| b * grid.width(j)).sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::validation("slopes give zero total utility increase"));
        }
        for b in &mut beta {
            *b /= total;
        }
        let mut alpha = Vec::with_capacity(grid.len());
        alpha.push(0.0);
        let mut acc = 0.0;
        for (j, b) in beta.iter().enumerate() {
            acc += b * grid.width(j);
            alpha.push(acc);
        }
        let n = alpha.len();
        alpha[n - 1] = 1.0;
        PwlUtility::new(grid, alpha, beta)
    }

    /// The risk-neutral utility `y / upper`.
    pub fn linear(grid: BreakpointGrid) -> Self {
        let upper = grid.upper();
        let mut alpha: Vec<f64> = grid.points().iter().map(|y| y / upper).collect();
        let n = alpha.len();
        alpha[n - 1] = 1.0;
        let beta = vec![1.0 / upper; n - 1];
        PwlUtility { grid, alpha, beta }
    }

    /// Chord interpolation of a closed-form utility through the grid points.
    pub fn chord(grid: BreakpointGrid, f: &ClosedFormUtility) -> Result<Self> {
        let alpha: Vec<f64> = grid.points().iter().map(|&y| f.eval(y)).collect::<Result<_>>()?;
        let n = alpha.len();
        let mut alpha = alpha;
        alpha[0] = 0.0;
        alpha[n - 1] = 1.0;
        let slopes: Vec<f64> = (0..n - 1).map(|j| (alpha[j + 1] - alpha[j]) / grid.width(j)).collect();
        PwlUtility::from_slopes(grid, &slopes)
    }

    pub fn grid(&self) -> &BreakpointGrid {
        &self.grid
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn is_concave(&self) -> bool {
        self.beta
            .windows(2)
            .all(|w| w[1] <= w[0] + CONCAVITY_TOL * w[0].abs().max(1.0))
    }

    /// Utility at `y`; `u(upper)` is exactly 1.
    pub fn eval(&self, y: f64) -> Result<f64> {
        let y = self.grid.check_domain(y)?;
        Ok(self.eval_unchecked(y))
    }

    pub(crate) fn eval_unchecked(&self, y: f64) -> f64 {
        let n = self.alpha.len();
        if y >= self.grid.upper() {
            return self.alpha[n - 1];
        }
        let j = self.grid.segment_of(y);
        self.beta[j] * (y - self.grid.points()[j]) + self.alpha[j]
    }

    pub fn expected_utility(&self, lottery: &Lottery) -> Result<f64> {
        let mut total = 0.0;
        for o in &lottery.outcomes {
            total += o.prob * self.eval(o.value)?;
        }
        Ok(total)
    }

    /// The same utility on the domain rescaled to `[0, 1]` (slopes multiplied by the upper bound).
    pub fn normalized(&self) -> PwlUtility {
        let b = self.grid.upper();
        PwlUtility {
            grid: self.grid.normalized(),
            alpha: self.alpha.clone(),
            beta: self.beta.iter().map(|s| s * b).collect(),
        }
    }

    /// Re-express on the domain `[0, upper]` from a normalized-domain utility.
    pub(crate) fn denormalized(normalized: &PwlUtility, grid: BreakpointGrid) -> Result<PwlUtility> {
        let b = grid.upper();
        let slopes: Vec<f64> = normalized.beta.iter().map(|s| s / b).collect();
        PwlUtility::from_slopes(grid, &slopes)
    }
}

/// Parametric utility used for virtual users.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClosedFormUtility {
    /// `(1 - exp(-rate * y)) / (1 - exp(-rate * upper))`.
    Exponential { rate: f64, upper: f64 },
    Linear { upper: f64 },
}

impl ClosedFormUtility {
    /// The simulation's true utility: rate 1e-5 on `[0, 500000]`.
    pub fn simulation_default() -> Self {
        ClosedFormUtility::Exponential { rate: 1e-5, upper: 500_000.0 }
    }

    pub fn upper(&self) -> f64 {
        match *self {
            ClosedFormUtility::Exponential { upper, .. } | ClosedFormUtility::Linear { upper } => upper,
        }
    }

    pub fn eval(&self, y: f64) -> Result<f64> {
        let upper = self.upper();
        let tol = 1e-9 * upper.max(1.0);
        if !y.is_finite() || y < -tol || y > upper + tol {
            return Err(Error::Domain { value: y, upper });
        }
        let y = y.clamp(0.0, upper);
        Ok(match *self {
            ClosedFormUtility::Exponential { rate, upper } => (-rate * y).exp_m1() / (-rate * upper).exp_m1(),
            ClosedFormUtility::Linear { upper } => y / upper,
        })
    }

    pub fn expected_utility(&self, lottery: &Lottery) -> Result<f64> {
        let mut total = 0.0;
        for o in &lottery.outcomes {
            total += o.prob * self.eval(o.value)?;
        }
        Ok(total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lottery::Outcome;

    fn grid(p: &[f64]) -> BreakpointGrid {
        BreakpointGrid::new(p.to_vec()).unwrap()
    }

    #[test]
    fn linear_chord_value() {
        let u = PwlUtility::linear(grid(&[0.0, 500_000.0]));
        assert_eq!(u.eval(250_000.0).unwrap(), 0.5);
    }

    #[test]
    fn endpoints_are_normalized() {
        let u = PwlUtility::from_slopes(grid(&[0.0, 3.0, 10.0]), &[0.2, 0.05]).unwrap();
        assert_eq!(u.eval(0.0).unwrap(), 0.0);
        assert_eq!(u.eval(10.0).unwrap(), 1.0);
    }

    #[test]
    fn segment_arithmetic() {
        let u = PwlUtility::new(grid(&[0.0, 0.5, 1.0]), vec![0.0, 1.0, 1.0], vec![2.0, 0.0]).unwrap();
        assert_eq!(u.eval(0.25).unwrap(), 0.5);
        assert_eq!(u.eval(0.75).unwrap(), 1.0);
    }

    #[test]
    fn eval_outside_domain_is_an_error() {
        let u = PwlUtility::linear(grid(&[0.0, 1.0]));
        assert!(matches!(u.eval(1.5), Err(Error::Domain { .. })));
        assert!(matches!(u.eval(-0.5), Err(Error::Domain { .. })));
    }

    #[test]
    fn rejects_invalid_shapes() {
        let g = grid(&[0.0, 0.5, 1.0]);
        // convex
        assert!(PwlUtility::new(g.clone(), vec![0.0, 0.25, 1.0], vec![0.5, 1.5]).is_err());
        assert!(PwlUtility::new_unchecked_shape(g.clone(), vec![0.0, 0.25, 1.0], vec![0.5, 1.5]).is_ok());
        // not normalized
        assert!(PwlUtility::new(g.clone(), vec![0.0, 0.5, 0.9], vec![1.0, 0.8]).is_err());
        // inconsistent slope
        assert!(PwlUtility::new(g.clone(), vec![0.0, 0.6, 1.0], vec![1.0, 0.8]).is_err());
        // decreasing
        assert!(PwlUtility::new_unchecked_shape(g, vec![0.0, 1.2, 1.0], vec![2.4, -0.4]).is_err());
    }

    #[test]
    fn from_slopes_projects_onto_shape() {
        let g = grid(&[0.0, 1.0, 2.0, 3.0]);
        let u = PwlUtility::from_slopes(g, &[0.5, 0.6, -0.1]).unwrap();
        assert!(u.is_concave());
        assert_eq!(u.beta()[2], 0.0);
        assert!((u.beta()[0] - u.beta()[1]).abs() < 1e-15);
        assert_eq!(*u.alpha().last().unwrap(), 1.0);
    }

    #[test]
    fn expected_utility_of_degenerate_lotteries() {
        let u = PwlUtility::from_slopes(grid(&[0.0, 800.0, 2000.0]), &[1.0, 0.25]).unwrap();
        let sure = Lottery::sure("s", 800.0).unwrap();
        assert_eq!(u.expected_utility(&sure).unwrap(), u.eval(800.0).unwrap());
        let zero = Lottery::sure("z", 0.0).unwrap();
        assert_eq!(u.expected_utility(&zero).unwrap(), 0.0);
    }

    #[test]
    fn closed_form_expected_utility_of_i2() {
        let ut = ClosedFormUtility::simulation_default();
        let i2 = Lottery::new(
            "I2",
            "",
            vec![Outcome { value: 1000.0, prob: 0.8 }, Outcome { value: 0.0, prob: 0.2 }],
        )
        .unwrap();
        // 0.8 * (1 - e^-0.01) / (1 - e^-5)
        let expected = 0.8 * (1.0 - (-0.01f64).exp()) / (1.0 - (-5.0f64).exp());
        let got = ut.expected_utility(&i2).unwrap();
        assert!((got - expected).abs() < 1e-15);
        assert!((got - 0.008014).abs() < 5e-7);
        assert_eq!(ut.eval(500_000.0).unwrap(), 1.0);
        assert_eq!(ut.eval(0.0).unwrap(), 0.0);
    }
}

//! Nominal utility elicitation from pairwise choices.
//!
//! The feasible set is every normalized, monotone, concave piecewise-linear utility on a
//! breakpoint grid that agrees with the user's answers. Three members are picked from it:
//! the one with the lowest expected utility of a benchmark (pessimistic), the highest
//! (optimistic), and the Kantorovich midpoint of those two (neutral).
//!
//! All programs are built on the domain rescaled to `[0, 1]`; returned utilities are on the
//! original currency domain.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conic::{self, Bound, ConicProgram, LinExpr, Relation, SolveStatus, SolverSettings, Var};
use crate::error::{Error, Inconsistency, Result};
use crate::lottery::{BreakpointGrid, ItemSet};
use crate::questionnaire::Questionnaire;
use crate::utility::PwlUtility;

/// Largest product support enumerated exactly.
pub const EXACT_SUPPORT_CAP: u128 = 100_000;

pub const DEFAULT_MC_SAMPLES: usize = 10_000;
pub const DEFAULT_MC_SEED: u64 = 20_240_101;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Choice {
    First,
    Second,
    None,
}

impl Choice {
    /// `+1` when the first item is chosen, `-1` for the second, `0` for no choice.
    pub fn sign(self) -> f64 {
        match self {
            Choice::First => 1.0,
            Choice::Second => -1.0,
            Choice::None => 0.0,
        }
    }

    pub fn from_sign(z: i8) -> Choice {
        match z.signum() {
            1 => Choice::First,
            -1 => Choice::Second,
            _ => Choice::None,
        }
    }
}

/// A user's answers to every pair of one questionnaire.
#[derive(Debug, Clone, PartialEq)]
pub struct AnswerSheet {
    pub questionnaire: Questionnaire,
    pub choices: Vec<Choice>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerEntry {
    pub pair_index: usize,
    pub choice: Choice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerSheetFile {
    pub questionnaire_id: String,
    pub answers: Vec<AnswerEntry>,
}

impl AnswerSheet {
    pub fn new(questionnaire: Questionnaire, choices: Vec<Choice>) -> Result<Self> {
        if choices.len() != questionnaire.len() {
            return Err(Error::validation(format!(
                "{} answers for a questionnaire of {} pairs",
                choices.len(),
                questionnaire.len()
            )));
        }
        Ok(AnswerSheet { questionnaire, choices })
    }

    /// Orders file entries by pair index; every pair must be answered exactly once.
    pub fn from_file(file: &AnswerSheetFile, questionnaire: Questionnaire) -> Result<Self> {
        let expected = questionnaire.id();
        if file.questionnaire_id != expected {
            return Err(Error::validation(format!(
                "answers refer to questionnaire {} but {} was supplied",
                file.questionnaire_id, expected
            )));
        }
        let choices = collect_choices(&file.answers, questionnaire.len())?;
        AnswerSheet::new(questionnaire, choices)
    }

    pub fn to_file(&self) -> AnswerSheetFile {
        AnswerSheetFile {
            questionnaire_id: self.questionnaire.id(),
            answers: self
                .choices
                .iter()
                .enumerate()
                .map(|(pair_index, &choice)| AnswerEntry { pair_index, choice })
                .collect(),
        }
    }
}

/// Validates a complete set of answer entries against a questionnaire length.
pub fn collect_choices(entries: &[AnswerEntry], k: usize) -> Result<Vec<Choice>> {
    let mut choices = vec![None; k];
    for e in entries {
        let slot = choices
            .get_mut(e.pair_index)
            .ok_or_else(|| Error::validation(format!("pair index {} out of range 0..{k}", e.pair_index)))?;
        if slot.is_some() {
            return Err(Error::validation(format!("pair index {} answered twice", e.pair_index)));
        }
        *slot = Some(e.choice);
    }
    choices
        .into_iter()
        .enumerate()
        .map(|(k, c)| c.ok_or_else(|| Error::validation(format!("pair {k} has no answer"))))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ScenarioPolicy {
    Exact,
    MonteCarlo { samples: usize, seed: u64 },
}

/// Benchmark portfolio over the item set: `h = sum_i weight_i * I_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub weights: Vec<f64>,
    pub policy: ScenarioPolicy,
}

impl BenchmarkSpec {
    pub fn uniform(n: usize, policy: ScenarioPolicy) -> Self {
        BenchmarkSpec { weights: vec![1.0 / n as f64; n], policy }
    }

    /// Uniform weights; exact enumeration when the product support fits under the cap,
    /// otherwise Monte Carlo with the default sample count and seed.
    pub fn default_for(items: &ItemSet) -> Self {
        let policy = if support_size(items) <= EXACT_SUPPORT_CAP {
            ScenarioPolicy::Exact
        } else {
            ScenarioPolicy::MonteCarlo { samples: DEFAULT_MC_SAMPLES, seed: DEFAULT_MC_SEED }
        };
        BenchmarkSpec::uniform(items.len(), policy)
    }
}

fn support_size(items: &ItemSet) -> u128 {
    items
        .items
        .iter()
        .fold(1u128, |acc, l| acc.saturating_mul(l.outcomes.len() as u128))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub value: f64,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSet {
    pub scenarios: Vec<Scenario>,
}

impl ScenarioSet {
    pub fn new(scenarios: Vec<Scenario>) -> Result<Self> {
        if scenarios.is_empty() {
            return Err(Error::validation("scenario set is empty"));
        }
        if scenarios.iter().any(|s| !(s.value >= 0.0 && s.value.is_finite() && s.prob > 0.0)) {
            return Err(Error::validation("scenario values must be >= 0 with positive probability"));
        }
        let total: f64 = scenarios.iter().map(|s| s.prob).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::validation(format!("scenario probabilities sum to {total}")));
        }
        Ok(ScenarioSet { scenarios })
    }

    /// A benchmark paying `value` with certainty.
    pub fn sure(value: f64) -> Result<Self> {
        ScenarioSet::new(vec![Scenario { value, prob: 1.0 }])
    }

    pub fn len(&self) -> usize {
        self.scenarios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenarios.is_empty()
    }

    /// `E[u(h)]` under this scenario set.
    pub fn expected_utility(&self, u: &PwlUtility) -> Result<f64> {
        let mut total = 0.0;
        for s in &self.scenarios {
            total += s.prob * u.eval(s.value)?;
        }
        Ok(total)
    }

    /// One scenario per grid segment at the conditional mean, carrying the segment's mass.
    /// Any utility that is affine on every segment has the same expectation under both sets.
    fn collapse(&self, grid: &BreakpointGrid) -> Result<Vec<Scenario>> {
        let segments = grid.len() - 1;
        let mut mass = vec![0.0; segments];
        let mut first_moment = vec![0.0; segments];
        for s in &self.scenarios {
            let y = grid.check_domain(s.value)?;
            let j = grid.segment_of(y);
            mass[j] += s.prob;
            first_moment[j] += s.prob * y;
        }
        Ok((0..segments)
            .filter(|&j| mass[j] > 0.0)
            .map(|j| {
                let lo = grid.points()[j];
                let hi = grid.points()[j + 1];
                Scenario { value: (first_moment[j] / mass[j]).clamp(lo, hi), prob: mass[j] }
            })
            .collect())
    }
}

fn merge_equal_values(mut v: Vec<Scenario>) -> Vec<Scenario> {
    v.sort_by(|a, b| a.value.total_cmp(&b.value));
    let mut out: Vec<Scenario> = Vec::with_capacity(v.len());
    for s in v {
        match out.last_mut() {
            Some(last) if (s.value - last.value).abs() <= 1e-9 * last.value.abs().max(1.0) => last.prob += s.prob,
            _ => out.push(s),
        }
    }
    out
}

/// Benchmark outcome distribution for independent items.
pub fn build_scenarios(items: &ItemSet, spec: &BenchmarkSpec) -> Result<ScenarioSet> {
    if spec.weights.len() != items.len() {
        return Err(Error::validation(format!(
            "{} benchmark weights for {} items",
            spec.weights.len(),
            items.len()
        )));
    }
    if spec.weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::validation("benchmark weights must be finite and >= 0"));
    }
    match spec.policy {
        ScenarioPolicy::Exact => {
            let size = support_size(items);
            if size > EXACT_SUPPORT_CAP {
                return Err(Error::validation(format!(
                    "exact enumeration needs {size} joint outcomes (cap {EXACT_SUPPORT_CAP}); use the monte-carlo policy"
                )));
            }
            let mut dist = vec![Scenario { value: 0.0, prob: 1.0 }];
            for (item, &w) in items.items.iter().zip(&spec.weights) {
                let mut next = Vec::with_capacity(dist.len() * item.outcomes.len());
                for s in &dist {
                    for o in &item.outcomes {
                        next.push(Scenario { value: s.value + w * o.value, prob: s.prob * o.prob });
                    }
                }
                dist = merge_equal_values(next);
            }
            // absorb rounding in the probability sum
            let total: f64 = dist.iter().map(|s| s.prob).sum();
            for s in &mut dist {
                s.prob /= total;
            }
            ScenarioSet::new(dist)
        }
        ScenarioPolicy::MonteCarlo { samples, seed } => {
            if samples == 0 {
                return Err(Error::validation("monte-carlo policy needs at least one sample"));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = 1.0 / samples as f64;
            let scenarios = (0..samples)
                .map(|_| {
                    let value = items
                        .items
                        .iter()
                        .zip(&spec.weights)
                        .map(|(item, &w)| {
                            let r: f64 = rng.gen();
                            let mut acc = 0.0;
                            let mut pick = item.outcomes[item.outcomes.len() - 1].value;
                            for o in &item.outcomes {
                                acc += o.prob;
                                if r < acc {
                                    pick = o.value;
                                    break;
                                }
                            }
                            w * pick
                        })
                        .sum();
                    Scenario { value, prob: p }
                })
                .collect::<Vec<_>>();
            let total: f64 = scenarios.iter().map(|s| s.prob).sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::validation("monte-carlo probabilities do not sum to 1"));
            }
            Ok(ScenarioSet { scenarios })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Pessimistic,
    Optimistic,
    Neutral,
}

impl Estimator {
    pub const ALL: [Estimator; 3] = [Estimator::Pessimistic, Estimator::Optimistic, Estimator::Neutral];

    pub fn as_str(self) -> &'static str {
        match self {
            Estimator::Pessimistic => "pessimistic",
            Estimator::Optimistic => "optimistic",
            Estimator::Neutral => "neutral",
        }
    }
}

impl std::str::FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pessimistic" => Ok(Estimator::Pessimistic),
            "optimistic" => Ok(Estimator::Optimistic),
            "neutral" => Ok(Estimator::Neutral),
            other => Err(Error::validation(format!("unknown estimator {other}"))),
        }
    }
}

impl std::fmt::Display for Estimator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.pad(self.as_str())
    }
}

/// An elicited utility with the optimal value of the program that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElicitedUtility {
    pub estimator: Estimator,
    pub objective: f64,
    #[serde(flatten)]
    pub utility: PwlUtility,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ElicitSettings {
    pub solver: SolverSettings,
    /// Relax inconsistent answers by their minimal total violation instead of failing.
    pub relax_inconsistent: bool,
}

/// `sign * (E[u(W)] - E[u(Y)]) >= rhs`, as coefficients on the utility values.
#[derive(Debug, Clone)]
struct AnswerRow {
    pair_index: usize,
    coeffs: Vec<f64>,
    rhs: f64,
}

/// Grid, answer constraints and collapsed benchmark, all on the normalized domain.
struct Setup {
    grid: BreakpointGrid,
    norm: BreakpointGrid,
    rows: Vec<AnswerRow>,
    scenarios: Vec<Scenario>,
}

impl Setup {
    fn new(answers: &AnswerSheet, grid: &BreakpointGrid, scen: &ScenarioSet) -> Result<Self> {
        let mut rows = Vec::new();
        for (k, (pair, &choice)) in answers.questionnaire.pairs.iter().zip(&answers.choices).enumerate() {
            let z = choice.sign();
            if z == 0.0 {
                continue;
            }
            let w = grid.expectation_weights(&pair.first)?;
            let y = grid.expectation_weights(&pair.second)?;
            let coeffs: Vec<f64> = w.iter().zip(&y).map(|(a, b)| z * (a - b)).collect();
            if coeffs.iter().all(|c| c.abs() < 1e-15) {
                continue;
            }
            rows.push(AnswerRow { pair_index: k, coeffs, rhs: 0.0 });
        }
        let upper = grid.upper();
        let scenarios = scen
            .collapse(grid)?
            .into_iter()
            .map(|s| Scenario { value: s.value / upper, prob: s.prob })
            .collect();
        Ok(Setup { grid: grid.clone(), norm: grid.normalized(), rows, scenarios })
    }

    fn build_shape(&self, p: &mut ConicProgram, rows: &[AnswerRow]) -> (Vec<Var>, Vec<Var>) {
        let n = self.norm.len();
        let alpha = p.add_block("alpha", n, Bound::Free);
        let beta = p.add_block("beta", n - 1, Bound::NonNeg);
        p.constrain("u(0)=0", alpha[0].into(), Relation::Eq, 0.0);
        p.constrain("u(upper)=1", alpha[n - 1].into(), Relation::Eq, 1.0);
        for j in 0..n - 1 {
            let e = LinExpr::new()
                .with(alpha[j + 1], 1.0)
                .with(alpha[j], -1.0)
                .with(beta[j], -self.norm.width(j));
            p.constrain(format!("slope[{j}]"), e, Relation::Eq, 0.0);
        }
        for j in 0..n.saturating_sub(2) {
            let e = LinExpr::new().with(beta[j + 1], 1.0).with(beta[j], -1.0);
            p.constrain(format!("concave[{j}]"), e, Relation::Le, 0.0);
        }
        for r in rows {
            let mut e = LinExpr::new();
            for (j, &c) in r.coeffs.iter().enumerate() {
                e.add(alpha[j], c);
            }
            p.constrain(format!("answer[{}]", r.pair_index), e, Relation::Ge, r.rhs);
        }
        (alpha, beta)
    }

    fn to_utility(&self, slopes: &[f64]) -> Result<PwlUtility> {
        let u = PwlUtility::from_slopes(self.norm.clone(), slopes)?;
        PwlUtility::denormalized(&u, self.grid.clone())
    }

    fn feasible(&self, rows: &[AnswerRow], settings: &SolverSettings) -> Result<bool> {
        let mut p = ConicProgram::new();
        self.build_shape(&mut p, rows);
        p.minimize(LinExpr::new());
        let r = conic::solve(&p, settings)?;
        match r.status {
            SolveStatus::Optimal => Ok(true),
            SolveStatus::Infeasible => Ok(false),
            _ => Err(Error::Solver("feasibility check did not converge".into())),
        }
    }

    /// Deletion filter: drop answers one at a time while the rest stays infeasible.
    fn irreducible_conflict(&self, settings: &SolverSettings) -> Result<Inconsistency> {
        let mut kept: Vec<AnswerRow> = self.rows.clone();
        let mut i = 0;
        while i < kept.len() {
            let mut trial = kept.clone();
            trial.remove(i);
            if !self.feasible(&trial, settings)? {
                kept = trial;
            } else {
                i += 1;
            }
        }
        Ok(Inconsistency {
            conflicting_pairs: kept.iter().map(|r| r.pair_index).collect(),
            detail: "no normalized monotone concave utility satisfies these answers together".into(),
        })
    }

    fn inconsistency(&self, settings: &SolverSettings) -> Error {
        match self.irreducible_conflict(settings) {
            Ok(inc) => Error::Inconsistent(inc),
            Err(e) => Error::Inconsistent(Inconsistency {
                conflicting_pairs: self.rows.iter().map(|r| r.pair_index).collect(),
                detail: format!("solver reported infeasibility; subset search failed: {e}"),
            }),
        }
    }

    /// Answer rows, relaxed by their minimal total violation when requested.
    fn effective_rows(&self, settings: &ElicitSettings) -> Result<Vec<AnswerRow>> {
        if !settings.relax_inconsistent || self.feasible(&self.rows, &settings.solver)? {
            return Ok(self.rows.clone());
        }
        let mut p = ConicProgram::new();
        let (alpha, _) = self.build_shape(&mut p, &[]);
        let slack = p.add_block("slack", self.rows.len(), Bound::NonNeg);
        let mut total = LinExpr::new();
        for (r, &s) in self.rows.iter().zip(&slack) {
            let mut e = LinExpr::new().with(s, 1.0);
            for (j, &c) in r.coeffs.iter().enumerate() {
                e.add(alpha[j], c);
            }
            p.constrain(format!("answer[{}]", r.pair_index), e, Relation::Ge, 0.0);
            total.add(s, 1.0);
        }
        p.minimize(total);
        let sol = conic::solve_optimal(&p, &settings.solver, "answer relaxation")?;
        Ok(self
            .rows
            .iter()
            .zip(&slack)
            .map(|(r, &s)| AnswerRow { rhs: -(sol.value(s).max(0.0) + 1e-9), ..r.clone() })
            .collect())
    }

    fn solve(&self, p: &ConicProgram, settings: &SolverSettings, what: &str) -> Result<conic::SolveResult> {
        let r = conic::solve(p, settings)?;
        match r.status {
            SolveStatus::Optimal => Ok(r),
            SolveStatus::Infeasible => Err(self.inconsistency(settings)),
            SolveStatus::Unbounded => Err(Error::Solver(format!("{what} is unbounded"))),
            SolveStatus::NumericFailure => Err(Error::Solver(format!("{what}: numeric failure"))),
        }
    }
}

/// Minimizes the benchmark's expected utility over the consistent set.
///
/// Each scenario's utility is written as `min { v h + w : v y_j + w >= alpha_j for all j, v >= 0 }`.
pub fn elicit_pessimistic(answers: &AnswerSheet, grid: &BreakpointGrid, scen: &ScenarioSet) -> Result<ElicitedUtility> {
    elicit_pessimistic_with(answers, grid, scen, &ElicitSettings::default())
}

pub fn elicit_pessimistic_with(
    answers: &AnswerSheet,
    grid: &BreakpointGrid,
    scen: &ScenarioSet,
    settings: &ElicitSettings,
) -> Result<ElicitedUtility> {
    let setup = Setup::new(answers, grid, scen)?;
    let rows = setup.effective_rows(settings)?;
    let mut p = ConicProgram::new();
    let (alpha, beta) = setup.build_shape(&mut p, &rows);
    let m = setup.scenarios.len();
    let v = p.add_block("v", m, Bound::NonNeg);
    let w = p.add_block("w", m, Bound::Free);
    let mut obj = LinExpr::new();
    for (i, s) in setup.scenarios.iter().enumerate() {
        obj.add(v[i], s.prob * s.value).add(w[i], s.prob);
        for (j, &y) in setup.norm.points().iter().enumerate() {
            let e = LinExpr::new().with(v[i], y).with(w[i], 1.0).with(alpha[j], -1.0);
            p.constrain(format!("upper[{i},{j}]"), e, Relation::Ge, 0.0);
        }
    }
    p.minimize(obj);
    let sol = setup.solve(&p, &settings.solver, "pessimistic program")?;
    Ok(ElicitedUtility {
        estimator: Estimator::Pessimistic,
        objective: sol.objective,
        utility: setup.to_utility(&sol.values(&beta))?,
    })
}

/// Maximizes the benchmark's expected utility over the consistent set, writing each
/// scenario's utility as the minimum of the `N-1` segment lines.
pub fn elicit_optimistic(answers: &AnswerSheet, grid: &BreakpointGrid, scen: &ScenarioSet) -> Result<ElicitedUtility> {
    elicit_optimistic_with(answers, grid, scen, &ElicitSettings::default())
}

pub fn elicit_optimistic_with(
    answers: &AnswerSheet,
    grid: &BreakpointGrid,
    scen: &ScenarioSet,
    settings: &ElicitSettings,
) -> Result<ElicitedUtility> {
    let setup = Setup::new(answers, grid, scen)?;
    let rows = setup.effective_rows(settings)?;
    let mut p = ConicProgram::new();
    let (alpha, beta) = setup.build_shape(&mut p, &rows);
    let m = setup.scenarios.len();
    let z = p.add_block("z", m, Bound::Free);
    let mut obj = LinExpr::new();
    for (i, s) in setup.scenarios.iter().enumerate() {
        obj.add(z[i], s.prob);
        for j in 0..setup.norm.len() - 1 {
            let yj = setup.norm.points()[j];
            let e = LinExpr::new()
                .with(z[i], 1.0)
                .with(beta[j], -(s.value - yj))
                .with(alpha[j], -1.0);
            p.constrain(format!("piece[{i},{j}]"), e, Relation::Le, 0.0);
        }
    }
    p.maximize(obj);
    let sol = setup.solve(&p, &settings.solver, "optimistic program")?;
    Ok(ElicitedUtility {
        estimator: Estimator::Optimistic,
        objective: sol.objective,
        utility: setup.to_utility(&sol.values(&beta))?,
    })
}

/// Adds the conic dual of the Kantorovich distance between a utility whose values at the
/// normalized grid points are `values` and a fixed utility with values `target`. Returns the
/// dual objective, which bounds the distance from above and equals it at the optimum.
///
/// Per segment the dual carries `(t, lambda, mu)` and `(s, rho, phi)` with
/// `||(t, lambda)|| <= mu` and `||(s, rho)|| <= phi`. They enter here through
/// `a = (mu - lambda) / w`, `b = w (mu + lambda)` and likewise for the second cone, `w` being
/// the segment width, so that every variable stays of order one even on very narrow segments.
/// The cones become `t^2 <= a b`, the slope coupling becomes a difference of utility
/// increments, and the prefix coupling pins `t + s` to the mean difference over the segment.
pub(crate) fn add_kantorovich_dual(
    p: &mut ConicProgram,
    tag: &str,
    norm: &BreakpointGrid,
    values: &[LinExpr],
    target: &[f64],
) -> LinExpr {
    let segs = norm.len() - 1;
    let t = p.add_block(&format!("t{tag}"), segs, Bound::Free);
    let s = p.add_block(&format!("s{tag}"), segs, Bound::Free);
    let a = p.add_block(&format!("a{tag}"), segs, Bound::NonNeg);
    let b = p.add_block(&format!("b{tag}"), segs, Bound::NonNeg);
    let a2 = p.add_block(&format!("a2{tag}"), segs, Bound::NonNeg);
    let b2 = p.add_block(&format!("b2{tag}"), segs, Bound::NonNeg);
    let mut objective = LinExpr::new();
    for j in 0..segs {
        let w = norm.width(j);
        let half = 0.5 * w;
        objective.add(a[j], half).add(b[j], half).add(a2[j], half).add(b2[j], half);

        // w (mu + lambda - phi - rho) equals half the increment difference
        let mut e = LinExpr::new().with(b[j], 1.0).with(b2[j], -1.0);
        e.add_expr(&values[j + 1], -0.5).add_expr(&values[j], 0.5);
        e.add_constant(0.5 * (target[j + 1] - target[j]));
        p.constrain(format!("dual_w{tag}[{j}]"), e, Relation::Eq, 0.0);

        let mut e = LinExpr::new().with(t[j], 1.0).with(s[j], 1.0);
        e.add_expr(&values[j + 1], -0.5).add_expr(&values[j], -0.5);
        e.add_constant(0.5 * (target[j + 1] + target[j]));
        p.constrain(format!("dual_x{tag}[{j}]"), e, Relation::Eq, 0.0);

        for (name, x, lo, hi) in [("a", t[j], a[j], b[j]), ("b", s[j], a2[j], b2[j])] {
            let diff = LinExpr::new().with(lo, 1.0).with(hi, -1.0);
            let sum = LinExpr::new().with(lo, 1.0).with(hi, 1.0);
            p.add_soc(format!("cone_{name}{tag}[{j}]"), LinExpr::new().with(x, 2.0), diff, sum);
        }
    }
    objective
}

/// The consistent utility minimizing the larger Kantorovich distance to the pessimistic
/// and optimistic estimates.
pub fn elicit_neutral(
    pessimistic: &PwlUtility,
    optimistic: &PwlUtility,
    answers: &AnswerSheet,
    grid: &BreakpointGrid,
) -> Result<ElicitedUtility> {
    elicit_neutral_with(pessimistic, optimistic, answers, grid, &ElicitSettings::default())
}

pub fn elicit_neutral_with(
    pessimistic: &PwlUtility,
    optimistic: &PwlUtility,
    answers: &AnswerSheet,
    grid: &BreakpointGrid,
    settings: &ElicitSettings,
) -> Result<ElicitedUtility> {
    for u in [pessimistic, optimistic] {
        if u.grid().points() != grid.points() {
            return Err(Error::validation("pessimistic and optimistic utilities must share the grid"));
        }
    }
    let sure_zero = ScenarioSet::sure(0.0)?;
    let setup = Setup::new(answers, grid, &sure_zero)?;
    let rows = setup.effective_rows(settings)?;
    let mut p = ConicProgram::new();
    let (alpha, beta) = setup.build_shape(&mut p, &rows);
    let zeta = p.add_var("zeta", Bound::NonNeg);
    let values: Vec<LinExpr> = alpha.iter().map(|&a| a.into()).collect();
    for (tag, target) in [("P", pessimistic), ("O", optimistic)] {
        let dual_obj = add_kantorovich_dual(&mut p, tag, &setup.norm, &values, target.alpha());
        let mut e = LinExpr::new().with(zeta, 1.0);
        e.add_expr(&dual_obj, -1.0);
        p.constrain(format!("zeta>=d{tag}"), e, Relation::Ge, 0.0);
    }
    p.minimize(zeta.into());
    let sol = setup.solve(&p, &settings.solver, "neutral program")?;
    Ok(ElicitedUtility {
        estimator: Estimator::Neutral,
        objective: sol.objective,
        utility: setup.to_utility(&sol.values(&beta))?,
    })
}

/// The three nominal utilities for one answer sheet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NominalUtilities {
    pub pessimistic: ElicitedUtility,
    pub optimistic: ElicitedUtility,
    pub neutral: ElicitedUtility,
}

impl NominalUtilities {
    pub fn get(&self, e: Estimator) -> &ElicitedUtility {
        match e {
            Estimator::Pessimistic => &self.pessimistic,
            Estimator::Optimistic => &self.optimistic,
            Estimator::Neutral => &self.neutral,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &ElicitedUtility> {
        [&self.pessimistic, &self.optimistic, &self.neutral].into_iter()
    }
}

/// Pessimistic and optimistic concurrently, then neutral.
pub fn elicit_all(
    answers: &AnswerSheet,
    grid: &BreakpointGrid,
    scen: &ScenarioSet,
    settings: &ElicitSettings,
) -> Result<NominalUtilities> {
    let (pes, opt) = rayon::join(
        || elicit_pessimistic_with(answers, grid, scen, settings),
        || elicit_optimistic_with(answers, grid, scen, settings),
    );
    let (pessimistic, optimistic) = (pes?, opt?);
    let neutral = elicit_neutral_with(&pessimistic.utility, &optimistic.utility, answers, grid, settings)?;
    Ok(NominalUtilities { pessimistic, optimistic, neutral })
}

/// Largest violation of the answer constraints by `u` (0 when all hold).
pub fn answer_violation(u: &PwlUtility, answers: &AnswerSheet) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for (pair, &c) in answers.questionnaire.pairs.iter().zip(&answers.choices) {
        let z = c.sign();
        if z == 0.0 {
            continue;
        }
        let gap = z * (u.expected_utility(&pair.first)? - u.expected_utility(&pair.second)?);
        worst = worst.max(-gap);
    }
    Ok(worst)
}

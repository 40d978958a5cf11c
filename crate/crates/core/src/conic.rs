//! Solver-independent model for linear and second-order-cone programs.
//!
//! Every optimization in the crate builds a [`ConicProgram`] and calls [`solve`]. The
//! backend is the Clarabel interior-point solver; callers never see it.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::time::Instant;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use serde::Serialize;

use crate::error::{Error, Result};

/// Largest row-scaled constraint violation accepted at an optimal point.
pub const OPTIMALITY_VIOLATION_TOL: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bound {
    Free,
    NonNeg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    Minimize,
    Maximize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    Le,
    Eq,
    Ge,
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Relation::Le => "<=",
            Relation::Eq => "=",
            Relation::Ge => ">=",
        })
    }
}

/// Affine expression `sum c_i x_i + constant`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LinExpr {
    terms: Vec<(Var, f64)>,
    constant: f64,
}

impl LinExpr {
    pub fn new() -> Self {
        LinExpr::default()
    }

    pub fn constant(c: f64) -> Self {
        LinExpr { terms: Vec::new(), constant: c }
    }

    /// Builder form of [`LinExpr::add`].
    pub fn with(mut self, v: Var, c: f64) -> Self {
        self.add(v, c);
        self
    }

    pub fn add(&mut self, v: Var, c: f64) -> &mut Self {
        if c != 0.0 {
            self.terms.push((v, c));
        }
        self
    }

    pub fn add_constant(&mut self, c: f64) -> &mut Self {
        self.constant += c;
        self
    }

    pub fn add_expr(&mut self, other: &LinExpr, scale: f64) -> &mut Self {
        for &(v, c) in &other.terms {
            self.add(v, c * scale);
        }
        self.constant += other.constant * scale;
        self
    }

    pub fn terms(&self) -> &[(Var, f64)] {
        &self.terms
    }

    pub fn constant_term(&self) -> f64 {
        self.constant
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|&(v, c)| c * x[v.0]).sum::<f64>() + self.constant
    }

    /// Terms with repeated variables merged, sorted by variable.
    fn merged(&self) -> Vec<(Var, f64)> {
        let mut map: BTreeMap<Var, f64> = BTreeMap::new();
        for &(v, c) in &self.terms {
            *map.entry(v).or_insert(0.0) += c;
        }
        map.into_iter().filter(|&(_, c)| c != 0.0).collect()
    }
}

impl From<Var> for LinExpr {
    fn from(v: Var) -> Self {
        LinExpr::new().with(v, 1.0)
    }
}

#[derive(Debug, Clone)]
pub struct VarDecl {
    pub name: String,
    pub bound: Bound,
}

#[derive(Debug, Clone)]
pub struct LinearConstraint {
    pub name: String,
    pub expr: LinExpr,
    pub relation: Relation,
    pub rhs: f64,
}

/// `||(first, second)|| <= bound`: membership of `(first, second, bound)` in the 3-d second-order cone.
#[derive(Debug, Clone)]
pub struct SocConstraint {
    pub name: String,
    pub first: LinExpr,
    pub second: LinExpr,
    pub bound: LinExpr,
}

#[derive(Debug, Clone)]
pub struct ConicProgram {
    vars: Vec<VarDecl>,
    sense: Sense,
    objective: LinExpr,
    linear: Vec<LinearConstraint>,
    cones: Vec<SocConstraint>,
}

impl Default for ConicProgram {
    fn default() -> Self {
        ConicProgram::new()
    }
}

impl ConicProgram {
    pub fn new() -> Self {
        ConicProgram {
            vars: Vec::new(),
            sense: Sense::Minimize,
            objective: LinExpr::new(),
            linear: Vec::new(),
            cones: Vec::new(),
        }
    }

    pub fn add_var(&mut self, name: impl Into<String>, bound: Bound) -> Var {
        self.vars.push(VarDecl { name: name.into(), bound });
        Var(self.vars.len() - 1)
    }

    /// A block of `len` scalars named `name[0]`, `name[1]`, ...
    pub fn add_block(&mut self, name: &str, len: usize, bound: Bound) -> Vec<Var> {
        (0..len).map(|i| self.add_var(format!("{name}[{i}]"), bound)).collect()
    }

    pub fn minimize(&mut self, objective: LinExpr) {
        self.sense = Sense::Minimize;
        self.objective = objective;
    }

    pub fn maximize(&mut self, objective: LinExpr) {
        self.sense = Sense::Maximize;
        self.objective = objective;
    }

    pub fn constrain(&mut self, name: impl Into<String>, expr: LinExpr, relation: Relation, rhs: f64) {
        self.linear.push(LinearConstraint { name: name.into(), expr, relation, rhs });
    }

    pub fn add_soc(&mut self, name: impl Into<String>, first: LinExpr, second: LinExpr, bound: LinExpr) {
        self.cones.push(SocConstraint { name: name.into(), first, second, bound });
    }

    pub fn num_vars(&self) -> usize {
        self.vars.len()
    }

    pub fn vars(&self) -> &[VarDecl] {
        &self.vars
    }

    pub fn sense(&self) -> Sense {
        self.sense
    }

    pub fn objective(&self) -> &LinExpr {
        &self.objective
    }

    pub fn linear_constraints(&self) -> &[LinearConstraint] {
        &self.linear
    }

    pub fn soc_constraints(&self) -> &[SocConstraint] {
        &self.cones
    }

    pub fn var_by_name(&self, name: &str) -> Option<Var> {
        self.vars.iter().position(|d| d.name == name).map(Var)
    }

    fn exprs(&self) -> impl Iterator<Item = &LinExpr> {
        std::iter::once(&self.objective)
            .chain(self.linear.iter().map(|c| &c.expr))
            .chain(self.cones.iter().flat_map(|c| [&c.first, &c.second, &c.bound]))
    }

    /// Checks that every coefficient references a declared variable and is finite.
    pub fn validate(&self) -> Result<()> {
        let n = self.vars.len();
        for e in self.exprs() {
            if !e.constant.is_finite() {
                return Err(Error::Model("non-finite constant".into()));
            }
            for &(v, c) in &e.terms {
                if v.0 >= n {
                    return Err(Error::Model(format!("reference to undeclared variable #{}", v.0)));
                }
                if !c.is_finite() {
                    return Err(Error::Model(format!("non-finite coefficient on {}", self.vars[v.0].name)));
                }
            }
        }
        if let Some(c) = self.linear.iter().find(|c| !c.rhs.is_finite()) {
            return Err(Error::Model(format!("non-finite right-hand side in {}", c.name)));
        }
        Ok(())
    }

    /// Largest absolute violation of any bound, linear constraint or cone at `x`.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for (d, &xi) in self.vars.iter().zip(x) {
            if d.bound == Bound::NonNeg {
                worst = worst.max(-xi);
            }
        }
        for c in &self.linear {
            let lhs = c.expr.eval(x);
            let v = match c.relation {
                Relation::Le => lhs - c.rhs,
                Relation::Ge => c.rhs - lhs,
                Relation::Eq => (lhs - c.rhs).abs(),
            };
            worst = worst.max(v);
        }
        for c in &self.cones {
            let (a, b, t) = (c.first.eval(x), c.second.eval(x), c.bound.eval(x));
            worst = worst.max(a.hypot(b) - t);
        }
        worst.max(0.0)
    }

    /// Largest violation with each row scaled by the magnitude of its terms (at least 1).
    /// Rows with large multipliers carry proportionally larger floating-point residuals.
    pub fn max_relative_violation(&self, x: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for (d, &xi) in self.vars.iter().zip(x) {
            if d.bound == Bound::NonNeg {
                worst = worst.max(-xi / xi.abs().max(1.0));
            }
        }
        for c in &self.linear {
            let lhs = c.expr.eval(x);
            let scale = c
                .expr
                .terms()
                .iter()
                .map(|&(v, k)| (k * x[v.0]).abs())
                .fold(c.rhs.abs().max(c.expr.constant.abs()).max(1.0), f64::max);
            let v = match c.relation {
                Relation::Le => lhs - c.rhs,
                Relation::Ge => c.rhs - lhs,
                Relation::Eq => (lhs - c.rhs).abs(),
            };
            worst = worst.max(v / scale);
        }
        for c in &self.cones {
            let (a, b, t) = (c.first.eval(x), c.second.eval(x), c.bound.eval(x));
            let scale = a.abs().max(b.abs()).max(t.abs()).max(1.0);
            worst = worst.max((a.hypot(b) - t) / scale);
        }
        worst.max(0.0)
    }

    /// Plain-text listing of variables, objective, constraints and cones, one per line.
    pub fn dump(&self) -> String {
        self.to_string()
    }

    fn fmt_expr(&self, e: &LinExpr) -> String {
        let mut s = String::new();
        for (v, c) in e.merged() {
            let _ = write!(s, "{c:+} {} ", self.vars[v.0].name);
        }
        let _ = write!(s, "{:+}", e.constant);
        s
    }
}

impl fmt::Display for ConicProgram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for d in &self.vars {
            let b = match d.bound {
                Bound::Free => "free",
                Bound::NonNeg => "nonneg",
            };
            writeln!(f, "var {} {b}", d.name)?;
        }
        let sense = match self.sense {
            Sense::Minimize => "minimize",
            Sense::Maximize => "maximize",
        };
        writeln!(f, "{sense} {}", self.fmt_expr(&self.objective))?;
        for c in &self.linear {
            writeln!(f, "con {}: {} {} {}", c.name, self.fmt_expr(&c.expr), c.relation, c.rhs)?;
        }
        for c in &self.cones {
            writeln!(
                f,
                "soc {}: ||({}, {})|| <= {}",
                c.name,
                self.fmt_expr(&c.first),
                self.fmt_expr(&c.second),
                self.fmt_expr(&c.bound)
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSettings {
    pub feasibility_tol: f64,
    pub gap_tol: f64,
    pub max_iter: u32,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings { feasibility_tol: 1e-10, gap_tol: 1e-10, max_iter: 200 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    NumericFailure,
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub status: SolveStatus,
    pub objective: f64,
    primal: Option<Vec<f64>>,
    pub solve_time: f64,
    pub iterations: u32,
    /// Constraint violation of the returned point (0 when no point is returned).
    pub max_violation: f64,
}

impl SolveResult {
    pub fn is_optimal(&self) -> bool {
        self.status == SolveStatus::Optimal
    }

    /// The primal point; present iff the status is optimal.
    pub fn primal(&self) -> Option<&[f64]> {
        self.primal.as_deref()
    }

    pub fn value(&self, v: Var) -> f64 {
        self.primal.as_ref().expect("value() requires an optimal solve")[v.0]
    }

    pub fn values(&self, vars: &[Var]) -> Vec<f64> {
        vars.iter().map(|&v| self.value(v)).collect()
    }

    /// Primal values keyed by variable name.
    pub fn primal_map(&self, p: &ConicProgram) -> Option<BTreeMap<String, f64>> {
        let x = self.primal.as_ref()?;
        Some(p.vars.iter().zip(x).map(|(d, &v)| (d.name.clone(), v)).collect())
    }
}

/// Largest constraint violation of a named point; unknown names are a model error.
pub fn check_feasible(p: &ConicProgram, point: &BTreeMap<String, f64>) -> Result<f64> {
    let mut x = vec![0.0; p.vars.len()];
    for (name, &val) in point {
        let v = p
            .var_by_name(name)
            .ok_or_else(|| Error::Model(format!("unknown variable {name}")))?;
        x[v.0] = val;
    }
    Ok(p.max_violation(&x))
}

/// Solves the program. Only malformed programs produce `Err`; solver outcomes are
/// reported through [`SolveResult::status`].
pub fn solve(p: &ConicProgram, settings: &SolverSettings) -> Result<SolveResult> {
    p.validate()?;
    let start = Instant::now();
    let n = p.vars.len();

    let mut rows: Vec<usize> = Vec::new();
    let mut cols: Vec<usize> = Vec::new();
    let mut vals: Vec<f64> = Vec::new();
    let mut b: Vec<f64> = Vec::new();
    let mut push_row = |terms: &[(Var, f64)], scale: f64, rhs: f64, b: &mut Vec<f64>| {
        let r = b.len();
        for &(v, c) in terms {
            rows.push(r);
            cols.push(v.0);
            vals.push(c * scale);
        }
        b.push(rhs);
    };

    let eqs: Vec<&LinearConstraint> = p.linear.iter().filter(|c| c.relation == Relation::Eq).collect();
    for c in &eqs {
        push_row(&c.expr.merged(), 1.0, c.rhs - c.expr.constant, &mut b);
    }
    let mut n_ineq = 0;
    for c in p.linear.iter().filter(|c| c.relation != Relation::Eq) {
        let s = if c.relation == Relation::Le { 1.0 } else { -1.0 };
        push_row(&c.expr.merged(), s, s * (c.rhs - c.expr.constant), &mut b);
        n_ineq += 1;
    }
    for (i, d) in p.vars.iter().enumerate() {
        if d.bound == Bound::NonNeg {
            push_row(&[(Var(i), 1.0)], -1.0, 0.0, &mut b);
            n_ineq += 1;
        }
    }
    for c in &p.cones {
        for e in [&c.bound, &c.first, &c.second] {
            push_row(&e.merged(), -1.0, e.constant, &mut b);
        }
    }
    let m = b.len();

    let mut cones: Vec<SupportedConeT<f64>> = Vec::new();
    if !eqs.is_empty() {
        cones.push(SupportedConeT::ZeroConeT(eqs.len()));
    }
    if n_ineq > 0 {
        cones.push(SupportedConeT::NonnegativeConeT(n_ineq));
    }
    cones.extend(p.cones.iter().map(|_| SupportedConeT::SecondOrderConeT(3)));

    let sign = match p.sense {
        Sense::Minimize => 1.0,
        Sense::Maximize => -1.0,
    };
    let mut q = vec![0.0; n];
    for (v, c) in p.objective.merged() {
        q[v.0] = sign * c;
    }

    if n == 0 {
        let feasible = p.max_violation(&[]) <= OPTIMALITY_VIOLATION_TOL;
        return Ok(SolveResult {
            status: if feasible { SolveStatus::Optimal } else { SolveStatus::Infeasible },
            objective: p.objective.constant,
            primal: feasible.then(Vec::new),
            solve_time: start.elapsed().as_secs_f64(),
            iterations: 0,
            max_violation: 0.0,
        });
    }

    let a = CscMatrix::new_from_triplets(m, n, rows, cols, vals);
    let pmat = CscMatrix::zeros((n, n));

    // Interior-point runs that stall short of full accuracy are retried with tighter
    // tolerances and extra refinement, then without equilibration.
    let mut attempt = 0;
    let (x, status, violation, iterations) = loop {
        let mut builder = DefaultSettingsBuilder::default();
        builder
            .verbose(false)
            .max_iter(settings.max_iter)
            .tol_feas(settings.feasibility_tol)
            .tol_gap_abs(settings.gap_tol)
            .tol_gap_rel(settings.gap_tol);
        if attempt >= 1 {
            builder
                .max_iter(settings.max_iter * 2)
                .tol_feas(settings.feasibility_tol * 1e-2)
                .tol_gap_abs(settings.gap_tol * 1e-2)
                .tol_gap_rel(settings.gap_tol * 1e-2)
                .iterative_refinement_max_iter(50)
                .iterative_refinement_reltol(1e-14)
                .iterative_refinement_abstol(1e-14);
        }
        if attempt >= 2 {
            builder.equilibrate_enable(false).static_regularization_constant(1e-10);
        }
        let solver_settings = builder.build().map_err(|e| Error::Model(format!("solver settings: {e:?}")))?;
        let mut solver = DefaultSolver::new(&pmat, &q, &a, &b, &cones, solver_settings)
            .map_err(|e| Error::Model(format!("solver rejected program: {e:?}")))?;
        solver.solve();

        let sol = &solver.solution;
        let x = sol.x.clone();
        let violation = p.max_violation(&x);
        let relative = p.max_relative_violation(&x);
        let status = match sol.status {
            SolverStatus::Solved | SolverStatus::AlmostSolved if relative <= OPTIMALITY_VIOLATION_TOL => {
                SolveStatus::Optimal
            }
            SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => SolveStatus::Infeasible,
            SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => SolveStatus::Unbounded,
            _ => SolveStatus::NumericFailure,
        };
        if status != SolveStatus::NumericFailure || attempt == 2 {
            break (x, status, violation, sol.iterations);
        }
        tracing::debug!(status = ?sol.status, violation, relative, attempt, "retrying solve");
        attempt += 1;
    };
    let optimal = status == SolveStatus::Optimal;
    let objective = if optimal {
        p.objective.eval(&x)
    } else {
        match status {
            SolveStatus::Infeasible => sign * f64::INFINITY,
            SolveStatus::Unbounded => -sign * f64::INFINITY,
            _ => f64::NAN,
        }
    };
    Ok(SolveResult {
        status,
        objective,
        primal: optimal.then_some(x),
        solve_time: start.elapsed().as_secs_f64(),
        iterations,
        max_violation: if optimal { violation } else { 0.0 },
    })
}

/// Solves and requires an optimal outcome, mapping other statuses to errors.
pub fn solve_optimal(p: &ConicProgram, settings: &SolverSettings, what: &str) -> Result<SolveResult> {
    let r = solve(p, settings)?;
    match r.status {
        SolveStatus::Optimal => Ok(r),
        SolveStatus::Infeasible => Err(Error::Infeasible(format!("{what} has no feasible point"))),
        SolveStatus::Unbounded => Err(Error::Solver(format!("{what} is unbounded"))),
        SolveStatus::NumericFailure => Err(Error::Solver(format!("{what}: numeric failure"))),
    }
}

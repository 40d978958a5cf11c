//! Virtual-user experiments: SPQ against random questionnaires, convergence in the number of
//! questions, preference graphs and population Gini statistics.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytics::gini_coefficient;
use crate::elicitation::{
    build_scenarios, elicit_all, AnswerSheet, BenchmarkSpec, Choice, ElicitSettings, Estimator, ScenarioSet,
};
use crate::error::{Error, Result};
use crate::kantorovich::distance_to_closed_form;
use crate::lfm::{fit_lfm, LfmConfig, Rating, RatingsMatrix};
use crate::lottery::{build_breakpoints, BreakpointGrid, ItemSet};
use crate::questionnaire::{select_pairs_random, select_pairs_spq_traced, Provenance, Questionnaire};
use crate::utility::ClosedFormUtility;

/// Expected-utility differences at or below this are answered with no preference.
pub const INDIFFERENCE_TOL: f64 = 1e-12;

pub const DEFAULT_RATERS: usize = 200;

/// Redraw cap for degenerate rating vectors.
const MAX_REDRAWS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VirtualUser {
    pub true_utility: ClosedFormUtility,
}

impl Default for VirtualUser {
    fn default() -> Self {
        VirtualUser { true_utility: ClosedFormUtility::simulation_default() }
    }
}

impl VirtualUser {
    pub fn choose(&self, first: &crate::lottery::Lottery, second: &crate::lottery::Lottery) -> Result<Choice> {
        let d = self.true_utility.expected_utility(first)? - self.true_utility.expected_utility(second)?;
        Ok(if d.abs() <= INDIFFERENCE_TOL {
            Choice::None
        } else if d > 0.0 {
            Choice::First
        } else {
            Choice::Second
        })
    }
}

pub fn answer_questionnaire(user: &VirtualUser, q: &Questionnaire) -> Result<AnswerSheet> {
    let choices = q
        .pairs
        .iter()
        .map(|p| user.choose(&p.first, &p.second))
        .collect::<Result<Vec<_>>>()?;
    AnswerSheet::new(q.clone(), choices)
}

/// Mixes a master seed with a stream index into an independent seed.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Ratings from random quadratic tastes `f(x) = a x^2 + b x + c`, `a, b, c ~ U[-50, 50]`,
/// applied to item outcomes in currency. Each rater's expected tastes are min-max scaled to
/// `[0, 10]`.
pub fn simulate_rating_matrix(items: &ItemSet, m: usize, seed: u64) -> Result<RatingsMatrix> {
    if m == 0 {
        return Err(Error::validation("at least one rater is required"));
    }
    let moments: Vec<(f64, f64)> = items.items.iter().map(|l| (l.expect(|y| y), l.expect(|y| y * y))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(m * items.len());
    for user in 0..m {
        let mut draws = 0;
        let scores = loop {
            let (a, b, c): (f64, f64, f64) =
                (rng.gen_range(-50.0..=50.0), rng.gen_range(-50.0..=50.0), rng.gen_range(-50.0..=50.0));
            let s: Vec<f64> = moments.iter().map(|&(m1, m2)| a * m2 + b * m1 + c).collect();
            let lo = s.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if hi - lo > 1e-12 * hi.abs().max(lo.abs()).max(1.0) {
                break s.into_iter().map(|v| (10.0 * (v - lo) / (hi - lo)).clamp(0.0, 10.0)).collect::<Vec<_>>();
            }
            draws += 1;
            tracing::debug!(user, "degenerate rating draw, redrawing");
            if draws >= MAX_REDRAWS {
                return Err(Error::Model("rating simulation kept producing constant ratings".into()));
            }
        };
        entries.extend(scores.into_iter().enumerate().map(|(item, value)| Rating { user, item, value }));
    }
    RatingsMatrix::new(
        (0..m).map(|u| format!("u{u}")).collect(),
        items.items.iter().map(|l| l.id.clone()).collect(),
        entries,
    )
}

/// Directed edges `from -> to` meaning `to` was preferred over `from`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceGraph {
    pub vertices: Vec<String>,
    pub edges: Vec<(String, String)>,
}

pub fn build_preference_graph(answers: &AnswerSheet) -> PreferenceGraph {
    let mut vertices = Vec::new();
    let mut edges = Vec::new();
    for (p, c) in answers.questionnaire.pairs.iter().zip(&answers.choices) {
        for id in [&p.first.id, &p.second.id] {
            if !vertices.contains(id) {
                vertices.push(id.clone());
            }
        }
        match c {
            Choice::First => edges.push((p.second.id.clone(), p.first.id.clone())),
            Choice::Second => edges.push((p.first.id.clone(), p.second.id.clone())),
            Choice::None => {}
        }
    }
    PreferenceGraph { vertices, edges }
}

/// Which outcomes form the breakpoint grid of each elicitation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GridPolicy {
    /// Only the outcomes of the questionnaire being answered.
    Questionnaire,
    /// Every outcome of the item set.
    ItemSet,
}

/// Setup shared by the experiments.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub k_values: Vec<usize>,
    pub repetitions: usize,
    pub seed: u64,
    pub raters: usize,
    pub lfm: LfmConfig,
    pub benchmark: BenchmarkSpec,
    pub user: VirtualUser,
    pub grid: GridPolicy,
}

impl ExperimentConfig {
    pub fn new(items: &ItemSet, k_values: Vec<usize>, repetitions: usize, seed: u64) -> Self {
        ExperimentConfig {
            k_values,
            repetitions,
            seed,
            raters: DEFAULT_RATERS,
            lfm: LfmConfig::default(),
            benchmark: BenchmarkSpec::default_for(items),
            // default rate, domain stretched to the item set
            user: VirtualUser {
                true_utility: ClosedFormUtility::Exponential { rate: 1e-5, upper: items.max_outcome() },
            },
            grid: GridPolicy::Questionnaire,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: Provenance,
    pub estimator: Estimator,
    #[serde(rename = "K")]
    pub k: usize,
    pub repetition: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub method: Provenance,
    pub estimator: Estimator,
    #[serde(rename = "K")]
    pub k: usize,
    pub mean: f64,
    pub stddev: f64,
    pub runs: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    /// Seed used by each repetition, indexed by repetition.
    pub seeds: Vec<u64>,
    pub runs: Vec<RunRecord>,
    pub summary: Vec<CellSummary>,
}

impl ExperimentReport {
    fn new(config: ExperimentConfig, seeds: Vec<u64>, mut runs: Vec<RunRecord>) -> Self {
        runs.sort_by_key(|r| (r.method as u8, r.estimator, r.k, r.repetition));
        let mut cells: BTreeMap<(u8, Estimator, usize), (Provenance, Vec<f64>)> = BTreeMap::new();
        for r in &runs {
            cells
                .entry((r.method as u8, r.estimator, r.k))
                .or_insert_with(|| (r.method, Vec::new()))
                .1
                .push(r.distance);
        }
        let summary = cells
            .into_iter()
            .map(|((_, estimator, k), (method, d))| {
                let n = d.len() as f64;
                let mean = d.iter().sum::<f64>() / n;
                let var = if d.len() > 1 { d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
                CellSummary { method, estimator, k, mean, stddev: var.sqrt(), runs: d.len() }
            })
            .collect();
        ExperimentReport { config, seeds, runs, summary }
    }

    pub fn mean(&self, method: Provenance, estimator: Estimator, k: usize) -> Option<f64> {
        self.summary
            .iter()
            .find(|c| c.method == method && c.estimator == estimator && c.k == k)
            .map(|c| c.mean)
    }
}

fn distances(
    cfg: &ExperimentConfig,
    q: &Questionnaire,
    grid: &BreakpointGrid,
    scen: &ScenarioSet,
    repetition: usize,
) -> Result<Vec<RunRecord>> {
    let user = &cfg.user;
    let answers = answer_questionnaire(user, q)?;
    let own;
    let grid = match cfg.grid {
        GridPolicy::ItemSet => grid,
        GridPolicy::Questionnaire => {
            own = q.breakpoints(grid.upper())?;
            &own
        }
    };
    let nominal = elicit_all(&answers, grid, scen, &ElicitSettings::default())?;
    nominal
        .iter()
        .map(|e| {
            Ok(RunRecord {
                method: q.provenance,
                estimator: e.estimator,
                k: q.len(),
                repetition,
                distance: distance_to_closed_form(&e.utility, &user.true_utility)?,
            })
        })
        .collect()
}

fn check_config(items: &ItemSet, cfg: &ExperimentConfig) -> Result<()> {
    if cfg.k_values.is_empty() || cfg.repetitions == 0 {
        return Err(Error::validation("experiments need at least one K value and one repetition"));
    }
    if let Some(&k) = cfg.k_values.iter().find(|&&k| k == 0 || k > items.pair_count()) {
        return Err(Error::validation(format!("K = {k} outside 1..={}", items.pair_count())));
    }
    if (cfg.user.true_utility.upper() - items.max_outcome()).abs() > 1e-9 * items.max_outcome() {
        return Err(Error::validation("the virtual user's domain must end at the item set's largest outcome"));
    }
    Ok(())
}

/// SPQ and random questionnaires at each K, every repetition with fresh ratings.
pub fn run_spq_vs_random(items: &ItemSet, cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    check_config(items, cfg)?;
    let grid = build_breakpoints(items, items.max_outcome())?;
    let scen = build_scenarios(items, &cfg.benchmark)?;
    let kmax = *cfg.k_values.iter().max().expect("checked non-empty");
    let seeds: Vec<u64> = (0..cfg.repetitions).map(|r| derive_seed(cfg.seed, r as u64)).collect();
    let runs = seeds
        .par_iter()
        .enumerate()
        .map(|(rep, &seed)| -> Result<Vec<RunRecord>> {
            let ratings = simulate_rating_matrix(items, cfg.raters, derive_seed(seed, 1))?;
            let model = fit_lfm(&ratings, &LfmConfig { seed: derive_seed(seed, 2), ..cfg.lfm })?;
            let (spq, steps) = select_pairs_spq_traced(&model, items, kmax)?;
            let mut out = Vec::new();
            for (ki, &k) in cfg.k_values.iter().enumerate() {
                let prefix = Questionnaire::new(spq.pairs[..k].to_vec(), Provenance::Spq, Some(steps[k - 1].objective))?;
                out.extend(distances(cfg, &prefix, &grid, &scen, rep)?);
                let random = select_pairs_random(items, k, derive_seed(seed, 100 + ki as u64))?;
                out.extend(distances(cfg, &random, &grid, &scen, rep)?);
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentReport::new(cfg.clone(), seeds, runs.into_iter().flatten().collect()))
}

/// Random questionnaires of increasing size.
pub fn run_convergence(items: &ItemSet, cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    check_config(items, cfg)?;
    let grid = build_breakpoints(items, items.max_outcome())?;
    let scen = build_scenarios(items, &cfg.benchmark)?;
    let seeds: Vec<u64> = (0..cfg.repetitions).map(|r| derive_seed(cfg.seed, r as u64)).collect();
    let runs = seeds
        .par_iter()
        .enumerate()
        .map(|(rep, &seed)| -> Result<Vec<RunRecord>> {
            let mut out = Vec::new();
            for (ki, &k) in cfg.k_values.iter().enumerate() {
                let q = select_pairs_random(items, k, derive_seed(seed, 100 + ki as u64))?;
                out.extend(distances(cfg, &q, &grid, &scen, rep)?);
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentReport::new(cfg.clone(), seeds, runs.into_iter().flatten().collect()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserGini {
    pub group: String,
    pub pessimistic: f64,
    pub optimistic: f64,
    pub neutral: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupGini {
    pub group: String,
    pub users: usize,
    /// Pessimistic, optimistic, neutral.
    pub mean: [f64; 3],
    pub variance: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationReport {
    pub users: Vec<UserGini>,
    pub groups: Vec<GroupGini>,
    /// Sheets whose answers admit no consistent utility.
    pub skipped: usize,
}

/// Gini coefficients of the three nominal utilities for each labelled answer sheet.
pub fn population_gini(
    sheets: &[(String, AnswerSheet)],
    grid: &BreakpointGrid,
    scen: &ScenarioSet,
) -> Result<PopulationReport> {
    let results: Vec<Result<Option<UserGini>>> = sheets
        .par_iter()
        .map(|(group, sheet)| match elicit_all(sheet, grid, scen, &ElicitSettings::default()) {
            Ok(n) => Ok(Some(UserGini {
                group: group.clone(),
                pessimistic: gini_coefficient(&n.pessimistic.utility),
                optimistic: gini_coefficient(&n.optimistic.utility),
                neutral: gini_coefficient(&n.neutral.utility),
            })),
            Err(Error::Inconsistent(inc)) => {
                tracing::warn!(group, pairs = ?inc.conflicting_pairs, "skipping inconsistent answer sheet");
                Ok(None)
            }
            Err(e) => Err(e),
        })
        .collect();
    let mut users = Vec::new();
    let mut skipped = 0;
    for r in results {
        match r? {
            Some(u) => users.push(u),
            None => skipped += 1,
        }
    }
    let mut by_group: BTreeMap<&str, Vec<[f64; 3]>> = BTreeMap::new();
    for u in &users {
        by_group.entry(&u.group).or_default().push([u.pessimistic, u.optimistic, u.neutral]);
    }
    let groups = by_group
        .into_iter()
        .map(|(group, vals)| {
            let n = vals.len() as f64;
            let mut mean = [0.0; 3];
            let mut variance = [0.0; 3];
            for e in 0..3 {
                mean[e] = vals.iter().map(|v| v[e]).sum::<f64>() / n;
                variance[e] = vals.iter().map(|v| (v[e] - mean[e]).powi(2)).sum::<f64>() / n;
            }
            GroupGini { group: group.to_string(), users: vals.len(), mean, variance }
        })
        .collect();
    Ok(PopulationReport { users, groups, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lottery::{Lottery, Outcome};
    use crate::questionnaire::QuestionPair;

    fn lot(id: &str, outcomes: &[(f64, f64)]) -> Lottery {
        Lottery::new(id, "", outcomes.iter().map(|&(value, prob)| Outcome { value, prob }).collect()).unwrap()
    }

    fn q(pairs: Vec<(Lottery, Lottery)>) -> Questionnaire {
        Questionnaire::new(
            pairs.into_iter().map(|(first, second)| QuestionPair { first, second }).collect(),
            Provenance::Random,
            None,
        )
        .unwrap()
    }

    #[test]
    fn virtual_user_answers() {
        let user = VirtualUser::default();
        let sure = lot("I1", &[(800.0, 1.0)]);
        let risky = lot("I2", &[(1000.0, 0.8), (0.0, 0.2)]);
        let zero = lot("z", &[(0.0, 1.0)]);
        let top = lot("t", &[(500_000.0, 1.0)]);
        let sheet = answer_questionnaire(&user, &q(vec![(sure, risky), (zero, top)])).unwrap();
        assert_eq!(sheet.choices, vec![Choice::First, Choice::Second]);
    }

    #[test]
    fn preference_graph_direction() {
        let a = lot("a", &[(1.0, 1.0)]);
        let b = lot("b", &[(2.0, 1.0)]);
        let c = lot("c", &[(3.0, 1.0)]);
        let sheet = AnswerSheet::new(q(vec![(a.clone(), b.clone()), (b, c)]), vec![Choice::First, Choice::None]).unwrap();
        let g = build_preference_graph(&sheet);
        assert_eq!(g.edges, vec![("b".to_string(), "a".to_string())]);
        assert_eq!(g.vertices.len(), 3);
    }

    #[test]
    fn rating_simulation_is_seeded_and_bounded() {
        let items = ItemSet::new(
            "t",
            vec![lot("a", &[(10.0, 1.0)]), lot("b", &[(0.0, 0.5), (40.0, 0.5)]), lot("c", &[(5.0, 1.0)])],
        )
        .unwrap();
        let r1 = simulate_rating_matrix(&items, 20, 9).unwrap();
        let r2 = simulate_rating_matrix(&items, 20, 9).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(r1.entries().len(), 60);
        assert!(r1.entries().iter().all(|r| (0.0..=10.0).contains(&r.value)));
        for u in 0..20 {
            let vals: Vec<f64> = r1.entries().iter().filter(|r| r.user == u).map(|r| r.value).collect();
            assert!(vals.iter().any(|&v| v == 0.0) && vals.iter().any(|&v| v == 10.0));
        }
    }

    #[test]
    fn derived_seeds_differ() {
        let s: Vec<u64> = (0..100).map(|i| derive_seed(7, i)).collect();
        let mut d = s.clone();
        d.sort();
        d.dedup();
        assert_eq!(d.len(), s.len());
    }

    #[test]
    fn empty_population() {
        let grid = BreakpointGrid::new(vec![0.0, 1.0]).unwrap();
        let scen = ScenarioSet::sure(0.5).unwrap();
        let r = population_gini(&[], &grid, &scen).unwrap();
        assert!(r.users.is_empty() && r.groups.is_empty() && r.skipped == 0);
    }
}

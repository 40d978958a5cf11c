//! Static preference questionnaires: pairs of items chosen before any user interaction.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lfm::LfmModel;
use crate::lottery::{BreakpointGrid, ItemSet, Lottery};

/// Ridge added to the Gram matrix while it cannot yet be full rank.
pub const BOOTSTRAP_RIDGE: f64 = 1e-6;

/// Eigenvalues below this fraction of the largest one count as zero.
const SINGULAR_RATIO: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Spq,
    Random,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuestionPair {
    pub first: Lottery,
    pub second: Lottery,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Questionnaire {
    pub pairs: Vec<QuestionPair>,
    pub provenance: Provenance,
    /// Trace objective of the selected set (SPQ only).
    pub objective: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRef {
    pub first: String,
    pub second: String,
}

/// On-disk questionnaire: item ids resolved against an item set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionnaireFile {
    pub pairs: Vec<PairRef>,
    pub provenance: Provenance,
    pub objective: Option<f64>,
}

impl Questionnaire {
    pub fn new(pairs: Vec<QuestionPair>, provenance: Provenance, objective: Option<f64>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::validation("a questionnaire needs at least one pair"));
        }
        for (k, p) in pairs.iter().enumerate() {
            if p.first.same_distribution(&p.second) {
                return Err(Error::validation(format!("pair {k} compares an item with itself")));
            }
            for q in &pairs[..k] {
                let same = (q.first.same_distribution(&p.first) && q.second.same_distribution(&p.second))
                    || (q.first.same_distribution(&p.second) && q.second.same_distribution(&p.first));
                if same {
                    return Err(Error::validation(format!("pair {k} repeats an earlier pair")));
                }
            }
        }
        Ok(Questionnaire { pairs, provenance, objective })
    }

    /// No questions: elicitation then rests on the shape constraints alone.
    pub fn empty(provenance: Provenance) -> Self {
        Questionnaire { pairs: Vec::new(), provenance, objective: None }
    }

    fn from_indices(items: &ItemSet, idx: &[(usize, usize)], provenance: Provenance, objective: Option<f64>) -> Result<Self> {
        let pairs = idx
            .iter()
            .map(|&(i, j)| QuestionPair { first: items.items[i].clone(), second: items.items[j].clone() })
            .collect();
        Questionnaire::new(pairs, provenance, objective)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Breakpoints over `{0}`, the supports of every questioned item, and `upper`.
    pub fn breakpoints(&self, upper: f64) -> Result<BreakpointGrid> {
        BreakpointGrid::from_lotteries(self.pairs.iter().flat_map(|p| [&p.first, &p.second]), upper)
    }

    pub fn to_file(&self) -> QuestionnaireFile {
        QuestionnaireFile {
            pairs: self
                .pairs
                .iter()
                .map(|p| PairRef { first: p.first.id.clone(), second: p.second.id.clone() })
                .collect(),
            provenance: self.provenance,
            objective: self.objective,
        }
    }

    pub fn from_file(file: &QuestionnaireFile, items: &ItemSet) -> Result<Self> {
        let lookup = |id: &str| {
            items
                .get(id)
                .cloned()
                .ok_or_else(|| Error::validation(format!("unknown item id {id} in questionnaire")))
        };
        let pairs = file
            .pairs
            .iter()
            .map(|p| Ok(QuestionPair { first: lookup(&p.first)?, second: lookup(&p.second)? }))
            .collect::<Result<Vec<_>>>()?;
        Questionnaire::new(pairs, file.provenance, file.objective)
    }

    /// Content hash of the questionnaire (hex, 16 chars); answer sheets refer to it.
    pub fn id(&self) -> String {
        let canon = serde_json::to_vec(&(self.to_file().pairs, self.provenance)).expect("serializable");
        let digest = Sha256::digest(&canon);
        hex::encode(&digest[..8])
    }
}

fn all_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect()
}

fn gram(diffs: &[Vec<f64>], dim: usize) -> DMatrix<f64> {
    let mut g = DMatrix::<f64>::zeros(dim, dim);
    for d in diffs {
        for a in 0..dim {
            for b in 0..dim {
                g[(a, b)] += d[a] * d[b];
            }
        }
    }
    g
}

/// `tr((G + ridge I)^-1)` for the Gram matrix `G` of the difference vectors.
pub fn trace_inverse(diffs: &[Vec<f64>], dim: usize, ridge: f64) -> Result<f64> {
    if diffs.is_empty() {
        return Err(Error::validation("at least one pair is required"));
    }
    let mut g = gram(diffs, dim);
    for d in 0..dim {
        g[(d, d)] += ridge;
    }
    let eig = SymmetricEigen::new(g).eigenvalues;
    let max = eig.iter().copied().fold(0.0, f64::max);
    let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
    if !(max > 0.0) || min <= SINGULAR_RATIO * max {
        return Err(Error::Singular(format!(
            "Gram matrix of {} pair(s) in dimension {dim} is not invertible",
            diffs.len()
        )));
    }
    Ok(eig.iter().map(|l| 1.0 / l).sum())
}

fn diff(model: &LfmModel, i: usize, j: usize) -> Vec<f64> {
    model.item_factors[i].iter().zip(&model.item_factors[j]).map(|(a, b)| a - b).collect()
}

/// The selection criterion `tr((P_B P_B^T + ridge I)^-1)` where the columns of `P_B` are the
/// latent-factor differences of the pairs (item indices into the model).
pub fn spq_objective(pairs: &[(usize, usize)], model: &LfmModel, ridge: f64) -> Result<f64> {
    let n = model.item_factors.len();
    if let Some(&(i, j)) = pairs.iter().find(|&&(i, j)| i >= n || j >= n) {
        return Err(Error::validation(format!("pair ({i}, {j}) references an unknown item")));
    }
    let diffs: Vec<Vec<f64>> = pairs.iter().map(|&(i, j)| diff(model, i, j)).collect();
    trace_inverse(&diffs, model.dim(), ridge)
}

/// Objective with the bootstrap ridge rule: ridge while fewer than `dim` pairs, or while
/// the plain Gram matrix is still singular.
fn greedy_score(diffs: &[Vec<f64>], dim: usize) -> (f64, bool) {
    if diffs.len() >= dim {
        if let Ok(v) = trace_inverse(diffs, dim, 0.0) {
            return (v, false);
        }
    }
    match trace_inverse(diffs, dim, BOOTSTRAP_RIDGE) {
        Ok(v) => (v, true),
        Err(_) => (f64::INFINITY, true),
    }
}

/// One step of the greedy trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GreedyStep {
    pub pair: (usize, usize),
    pub objective: f64,
    pub ridged: bool,
}

/// Forward greedy selection of `k` unordered pairs minimizing the trace criterion,
/// returning the questionnaire and the objective after each step.
pub fn select_pairs_spq_traced(model: &LfmModel, items: &ItemSet, k: usize) -> Result<(Questionnaire, Vec<GreedyStep>)> {
    let n = items.len();
    if model.item_factors.len() != n {
        return Err(Error::validation(format!(
            "model has {} items but the item set has {n}",
            model.item_factors.len()
        )));
    }
    check_k(items, k)?;
    let dim = model.dim();
    let candidates = all_pairs(n);
    let mut chosen: Vec<(usize, usize)> = Vec::with_capacity(k);
    let mut taken = vec![false; candidates.len()];
    let mut diffs: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut steps = Vec::with_capacity(k);

    for _ in 0..k {
        let scores: Vec<(usize, f64, bool)> = candidates
            .par_iter()
            .enumerate()
            .filter(|(c, _)| !taken[*c])
            .map(|(c, &(i, j))| {
                let mut trial = diffs.clone();
                trial.push(diff(model, i, j));
                let (s, r) = greedy_score(&trial, dim);
                (c, s, r)
            })
            .collect();
        // candidates are in lexicographic order; keep the first minimum
        let mut best = scores[0];
        for &s in &scores[1..] {
            if s.1 < best.1 {
                best = s;
            }
        }
        let (c, objective, ridged) = best;
        taken[c] = true;
        chosen.push(candidates[c]);
        diffs.push(diff(model, candidates[c].0, candidates[c].1));
        steps.push(GreedyStep { pair: candidates[c], objective, ridged });
    }

    let objective = steps.last().map(|s| s.objective);
    let q = Questionnaire::from_indices(items, &chosen, Provenance::Spq, objective)?;
    Ok((q, steps))
}

pub fn select_pairs_spq(model: &LfmModel, items: &ItemSet, k: usize) -> Result<Questionnaire> {
    select_pairs_spq_traced(model, items, k).map(|(q, _)| q)
}

fn check_k(items: &ItemSet, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::validation("K must be at least 1"));
    }
    if k > items.pair_count() {
        return Err(Error::validation(format!(
            "K = {k} exceeds the {} available pairs",
            items.pair_count()
        )));
    }
    Ok(())
}

/// `k` distinct unordered pairs drawn uniformly without replacement.
pub fn select_pairs_random(items: &ItemSet, k: usize, seed: u64) -> Result<Questionnaire> {
    check_k(items, k)?;
    let candidates = all_pairs(items.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx: Vec<(usize, usize)> = sample(&mut rng, candidates.len(), k).into_iter().map(|c| candidates[c]).collect();
    Questionnaire::from_indices(items, &idx, Provenance::Random, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lottery::Outcome;

    fn items(n: usize) -> ItemSet {
        let items = (0..n)
            .map(|i| {
                Lottery::new(
                    format!("I{}", i + 1),
                    "",
                    vec![Outcome { value: 100.0 * (i + 1) as f64, prob: 0.5 }, Outcome { value: 0.0, prob: 0.5 }],
                )
                .unwrap()
            })
            .collect();
        ItemSet::new("test", items).unwrap()
    }

    fn model(factors: Vec<Vec<f64>>) -> LfmModel {
        let n = factors.len();
        LfmModel {
            mu: 5.0,
            item_bias: vec![0.0; n],
            user_bias: vec![],
            item_factors: factors,
            user_factors: vec![],
            objective: 0.0,
            history: vec![],
        }
    }

    #[test]
    fn scalar_objective() {
        let m = model(vec![vec![3.0], vec![1.0]]);
        assert!((spq_objective(&[(0, 1)], &m, 0.0).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn identity_gram() {
        let m = model(vec![vec![1.0, 0.0], vec![0.0, 0.0], vec![0.0, 1.0]]);
        assert!((spq_objective(&[(0, 1), (2, 1)], &m, 0.0).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn singular_without_ridge() {
        let m = model(vec![vec![1.0, 0.0], vec![0.0, 0.0], vec![2.0, 0.0]]);
        assert!(matches!(spq_objective(&[(0, 1), (2, 1)], &m, 0.0), Err(Error::Singular(_))));
        assert!(spq_objective(&[(0, 1), (2, 1)], &m, 1e-6).is_ok());
    }

    #[test]
    fn greedy_k1_scalar_picks_largest_gap() {
        let m = model(vec![vec![0.5], vec![-1.0], vec![2.0], vec![0.0]]);
        let q = select_pairs_spq(&m, &items(4), 1).unwrap();
        assert_eq!(q.pairs[0].first.id, "I2");
        assert_eq!(q.pairs[0].second.id, "I3");
        assert_eq!(q.provenance, Provenance::Spq);
    }

    #[test]
    fn random_selection() {
        let two = items(2);
        let q = select_pairs_random(&two, 1, 9).unwrap();
        assert_eq!((q.pairs[0].first.id.as_str(), q.pairs[0].second.id.as_str()), ("I1", "I2"));

        let five = items(5);
        assert_eq!(select_pairs_random(&five, 4, 3).unwrap(), select_pairs_random(&five, 4, 3).unwrap());
        let all = select_pairs_random(&five, 10, 1).unwrap();
        assert_eq!(all.len(), 10);
        assert!(select_pairs_random(&five, 11, 1).is_err());
        assert!(select_pairs_random(&five, 0, 1).is_err());
    }

    #[test]
    fn questionnaire_rejects_duplicates() {
        let s = items(3);
        let a = QuestionPair { first: s.items[0].clone(), second: s.items[1].clone() };
        let b = QuestionPair { first: s.items[1].clone(), second: s.items[0].clone() };
        assert!(Questionnaire::new(vec![a.clone(), b], Provenance::Random, None).is_err());
        let c = QuestionPair { first: s.items[0].clone(), second: s.items[0].clone() };
        assert!(Questionnaire::new(vec![c], Provenance::Random, None).is_err());
        assert!(Questionnaire::new(vec![], Provenance::Random, None).is_err());
    }

    #[test]
    fn file_round_trip_and_id() {
        let s = items(4);
        let q = select_pairs_random(&s, 3, 5).unwrap();
        let back = Questionnaire::from_file(&q.to_file(), &s).unwrap();
        assert_eq!(q, back);
        assert_eq!(q.id(), back.id());
        assert_eq!(q.id().len(), 16);
    }
}

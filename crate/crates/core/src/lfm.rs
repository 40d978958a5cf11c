//! Latent factor model fitted to historical item ratings by alternating ridge regression.
//!
//! `r_ui ~ mu + b_i + s_u + p_i . q_u`, with unobserved `(u, i)` pairs left out of the loss.

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const RATING_MIN: f64 = 0.0;
pub const RATING_MAX: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rating {
    pub user: usize,
    pub item: usize,
    pub value: f64,
}

/// Sparse user x item rating matrix; item indices are aligned with an item set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingsMatrix {
    users: Vec<String>,
    items: Vec<String>,
    entries: Vec<Rating>,
}

impl RatingsMatrix {
    pub fn new(users: Vec<String>, items: Vec<String>, entries: Vec<Rating>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(entries.len());
        for e in &entries {
            if e.user >= users.len() || e.item >= items.len() {
                return Err(Error::validation(format!("rating ({}, {}) out of range", e.user, e.item)));
            }
            if !e.value.is_finite() {
                return Err(Error::validation(format!(
                    "non-finite rating for user {} item {}",
                    users[e.user], items[e.item]
                )));
            }
            if !(RATING_MIN..=RATING_MAX).contains(&e.value) {
                return Err(Error::validation(format!(
                    "rating {} for user {} item {} outside [0, 10]",
                    e.value, users[e.user], items[e.item]
                )));
            }
            if !seen.insert((e.user, e.item)) {
                return Err(Error::validation(format!(
                    "duplicate rating for user {} item {}",
                    users[e.user], items[e.item]
                )));
            }
        }
        Ok(RatingsMatrix { users, items, entries })
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn users(&self) -> &[String] {
        &self.users
    }

    pub fn item_ids(&self) -> &[String] {
        &self.items
    }

    pub fn entries(&self) -> &[Rating] {
        &self.entries
    }

    pub fn mean(&self) -> f64 {
        self.entries.iter().map(|e| e.value).sum::<f64>() / self.entries.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LfmConfig {
    pub dim: usize,
    pub lambda_user: f64,
    pub lambda_item: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for LfmConfig {
    fn default() -> Self {
        LfmConfig { dim: 3, lambda_user: 0.1, lambda_item: 0.1, max_iters: 200, tol: 1e-8, seed: 0 }
    }
}

impl LfmConfig {
    fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::validation("latent dimension must be >= 1"));
        }
        if !(self.tol > 0.0) {
            return Err(Error::validation("tolerance must be positive"));
        }
        if !(self.lambda_user >= 0.0 && self.lambda_item >= 0.0) {
            return Err(Error::validation("regularization weights must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LfmModel {
    pub mu: f64,
    pub item_bias: Vec<f64>,
    pub user_bias: Vec<f64>,
    pub item_factors: Vec<Vec<f64>>,
    pub user_factors: Vec<Vec<f64>>,
    pub objective: f64,
    /// Objective after every alternating pass.
    pub history: Vec<f64>,
}

impl LfmModel {
    pub fn dim(&self) -> usize {
        self.item_factors.first().map_or(0, Vec::len)
    }

    pub fn predict(&self, user: usize, item: usize) -> f64 {
        self.mu
            + self.item_bias[item]
            + self.user_bias[user]
            + dot(&self.item_factors[item], &self.user_factors[user])
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Params {
    p: Vec<Vec<f64>>,
    b: Vec<f64>,
    q: Vec<Vec<f64>>,
    s: Vec<f64>,
}

fn objective(r: &RatingsMatrix, mu: f64, x: &Params, cfg: &LfmConfig) -> f64 {
    let loss: f64 = r
        .entries
        .iter()
        .map(|e| {
            let pred = mu + x.b[e.item] + x.s[e.user] + dot(&x.p[e.item], &x.q[e.user]);
            (e.value - pred).powi(2)
        })
        .sum();
    let user_reg: f64 = x.q.iter().map(|q| dot(q, q)).sum::<f64>() + x.s.iter().map(|s| s * s).sum::<f64>();
    let item_reg: f64 = x.p.iter().map(|p| dot(p, p)).sum::<f64>() + x.b.iter().map(|b| b * b).sum::<f64>();
    loss + cfg.lambda_user * user_reg + cfg.lambda_item * item_reg
}

/// Ridge solve of `min sum (t - f.w)^2 + lambda |w|^2` over observations `(f, t)`.
fn ridge(obs: impl Iterator<Item = (Vec<f64>, f64)>, k: usize, lambda: f64) -> Vec<f64> {
    let mut a = DMatrix::<f64>::zeros(k, k);
    let mut rhs = DVector::<f64>::zeros(k);
    let mut any = false;
    for (f, t) in obs {
        any = true;
        let fv = DVector::from_vec(f);
        a += &fv * fv.transpose();
        rhs += fv * t;
    }
    if !any {
        return vec![0.0; k];
    }
    for d in 0..k {
        a[(d, d)] += lambda;
    }
    if let Some(ch) = a.clone().cholesky() {
        return ch.solve(&rhs).iter().copied().collect();
    }
    // rank-deficient with lambda = 0: least-norm solution
    a.svd(true, true)
        .solve(&rhs, 1e-12)
        .map(|x| x.iter().copied().collect())
        .unwrap_or_else(|_| vec![0.0; k])
}

/// Fits the model by alternating exact block minimization over `(q, s)` and `(p, b)`.
/// The global mean `mu` is fixed to the mean of the observed ratings.
pub fn fit_lfm(r: &RatingsMatrix, cfg: &LfmConfig) -> Result<LfmModel> {
    cfg.validate()?;
    if r.entries.is_empty() {
        return Err(Error::validation("ratings matrix has no entries"));
    }
    let (m, n, v) = (r.num_users(), r.num_items(), cfg.dim);
    let mu = r.mean();

    let mut by_user: Vec<Vec<(usize, f64)>> = vec![Vec::new(); m];
    let mut by_item: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for e in &r.entries {
        by_user[e.user].push((e.item, e.value));
        by_item[e.item].push((e.user, e.value));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = Normal::new(0.0, 0.1).expect("valid normal");
    let mut x = Params {
        p: (0..n).map(|_| (0..v).map(|_| init.sample(&mut rng)).collect()).collect(),
        b: vec![0.0; n],
        q: vec![vec![0.0; v]; m],
        s: vec![0.0; m],
    };

    let zero = Params {
        p: vec![vec![0.0; v]; n],
        b: vec![0.0; n],
        q: vec![vec![0.0; v]; m],
        s: vec![0.0; m],
    };
    let zero_obj = objective(r, mu, &zero, cfg);

    let mut history = Vec::new();
    let mut prev = f64::INFINITY;
    for _ in 0..cfg.max_iters {
        for u in 0..m {
            let obs = by_user[u].iter().map(|&(i, val)| {
                let mut f = x.p[i].clone();
                f.push(1.0);
                (f, val - mu - x.b[i])
            });
            let w = ridge(obs, v + 1, cfg.lambda_user);
            x.q[u] = w[..v].to_vec();
            x.s[u] = w[v];
        }
        for i in 0..n {
            let obs = by_item[i].iter().map(|&(u, val)| {
                let mut f = x.q[u].clone();
                f.push(1.0);
                (f, val - mu - x.s[u])
            });
            let w = ridge(obs, v + 1, cfg.lambda_item);
            x.p[i] = w[..v].to_vec();
            x.b[i] = w[v];
        }
        let obj = objective(r, mu, &x, cfg);
        history.push(obj);
        if prev - obj < cfg.tol {
            break;
        }
        prev = obj;
    }

    let mut obj = *history.last().expect("at least one pass");
    if obj > zero_obj {
        x = zero;
        obj = zero_obj;
    }
    Ok(LfmModel {
        mu,
        item_bias: x.b,
        user_bias: x.s,
        item_factors: x.p,
        user_factors: x.q,
        objective: obj,
        history,
    })
}

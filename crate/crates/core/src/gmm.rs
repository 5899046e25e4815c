//! Diagonal-covariance Gaussian mixtures fit by federated EM.
//!
//! Clients never share raw points: each round they report the sufficient
//! statistics (responsibility mass, first and second moments) of their local
//! data under the current model, and the server merges them in client order.
//! Fitting the union of all shards centrally gives the same model up to
//! floating-point summation order.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::log_sum_exp;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GmmFitConfig {
    pub components: usize,
    pub max_iters: usize,
    /// Stop when the log-likelihood improvement falls below
    /// `rel_tol * max(1, |ll|)`.
    pub rel_tol: f64,
    pub var_floor: f64,
}

impl Default for GmmFitConfig {
    fn default() -> Self {
        GmmFitConfig { components: 2, max_iters: 60, rel_tol: 1e-6, var_floor: 1e-6 }
    }
}

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Gmm {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub vars: Vec<Vec<f64>>,
}

impl Gmm {
    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    /// `log(pi_m) + log N(x | mu_m, diag sigma^2_m)` for every component.
    pub fn weighted_log_densities(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.dim());
        (0..self.components())
            .map(|m| {
                let mut acc = self.weights[m].ln();
                for d in 0..x.len() {
                    let v = self.vars[m][d];
                    let z = x[d] - self.means[m][d];
                    acc -= 0.5 * (LN_2PI + v.ln() + z * z / v);
                }
                acc
            })
            .collect()
    }

    pub fn log_likelihood(&self, x: &[f64]) -> f64 {
        log_sum_exp(&self.weighted_log_densities(x))
    }

    /// Posterior component probabilities of one point (log-space softmax).
    pub fn membership(&self, x: &[f64]) -> Vec<f64> {
        let logs = self.weighted_log_densities(x);
        let lse = log_sum_exp(&logs);
        logs.iter().map(|l| (l - lse).exp()).collect()
    }
}

/// One party's sufficient statistics under the current model.
struct Stats {
    /// Responsibility mass per component.
    s0: Vec<f64>,
    /// Responsibility-weighted first moments, per component.
    s1: Vec<Vec<f64>>,
    /// Responsibility-weighted second moments, per component.
    s2: Vec<Vec<f64>>,
    ll: f64,
    /// Lowest-likelihood local point, kept as a re-seed candidate.
    worst: Option<(f64, Vec<f64>)>,
}

fn client_stats(gmm: &Gmm, points: &[Vec<f64>]) -> Stats {
    let (m, d) = (gmm.components(), gmm.dim());
    let mut s = Stats {
        s0: vec![0.0; m],
        s1: vec![vec![0.0; d]; m],
        s2: vec![vec![0.0; d]; m],
        ll: 0.0,
        worst: None,
    };
    for x in points {
        let logs = gmm.weighted_log_densities(x);
        let lse = log_sum_exp(&logs);
        s.ll += lse;
        if s.worst.as_ref().map_or(true, |(w, _)| lse < *w) {
            s.worst = Some((lse, x.clone()));
        }
        for k in 0..m {
            let r = (logs[k] - lse).exp();
            s.s0[k] += r;
            for j in 0..d {
                s.s1[k][j] += r * x[j];
                s.s2[k][j] += r * x[j] * x[j];
            }
        }
    }
    s
}

fn merge_stats(into: &mut Stats, from: Stats) {
    for k in 0..into.s0.len() {
        into.s0[k] += from.s0[k];
        for j in 0..into.s1[k].len() {
            into.s1[k][j] += from.s1[k][j];
            into.s2[k][j] += from.s2[k][j];
        }
    }
    into.ll += from.ll;
    // strict comparison keeps the earlier client on ties
    if let Some((l, x)) = from.worst {
        if into.worst.as_ref().map_or(true, |(w, _)| l < *w) {
            into.worst = Some((l, x));
        }
    }
}

/// M-step in place; empty components are re-seeded on the lowest-likelihood
/// point with the given fallback variance. Returns the number of re-seeds.
fn m_step(gmm: &mut Gmm, stats: &Stats, cfg: &GmmFitConfig, reseed_var: &[f64]) -> usize {
    let total: f64 = stats.s0.iter().sum();
    let d = gmm.dim();
    let mut reseeded = 0;
    for k in 0..gmm.components() {
        if stats.s0[k] < 1e-12 * total {
            let (_, worst) = stats.worst.as_ref().expect("stats over at least one point");
            log::warn!("gmm component {k} went empty, re-seeding on the lowest-likelihood point");
            gmm.means[k] = worst.clone();
            gmm.vars[k] = reseed_var.to_vec();
            gmm.weights[k] = 1.0 / total;
            reseeded += 1;
            continue;
        }
        let nk = stats.s0[k];
        gmm.weights[k] = nk / total;
        for j in 0..d {
            let mu = stats.s1[k][j] / nk;
            gmm.means[k][j] = mu;
            gmm.vars[k][j] = (stats.s2[k][j] / nk - mu * mu).max(cfg.var_floor);
        }
    }
    if reseeded > 0 {
        let norm: f64 = gmm.weights.iter().sum();
        for w in &mut gmm.weights {
            *w /= norm;
        }
    }
    reseeded
}

#[derive(Debug, Clone)]
pub struct GmmFit {
    pub gmm: Gmm,
    /// Total log-likelihood of the model before each update; non-decreasing
    /// (up to 1e-8) whenever no component was re-seeded.
    pub ll_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub reseeded: usize,
}

/// Fits a mixture to the union of client point sets by federated EM.
///
/// Initialization is data-driven and partition-independent: every component
/// mean starts at the global mean plus `0.5 * std` seeded Gaussian noise,
/// variances at the global per-dimension variance, weights uniform.
pub fn fed_gmm_fit(clients: &[&[Vec<f64>]], cfg: &GmmFitConfig, rng: &mut ChaCha8Rng) -> Result<GmmFit> {
    let n: usize = clients.iter().map(|c| c.len()).sum();
    if cfg.components == 0 {
        return Err(Error::Config("gmm needs at least one component".into()));
    }
    if n < cfg.components {
        return Err(Error::Config(format!(
            "{n} points cannot support {} mixture components",
            cfg.components
        )));
    }
    let d = clients
        .iter()
        .flat_map(|c| c.iter())
        .next()
        .map(Vec::len)
        .expect("counted above");
    for c in clients.iter() {
        if let Some(bad) = c.iter().find(|x| x.len() != d) {
            return Err(Error::Shape(format!("gmm point of dim {} among dim {d}", bad.len())));
        }
    }

    // federated global moments, merged in client order
    let mut mean = vec![0.0; d];
    let mut e2 = vec![0.0; d];
    for c in clients.iter() {
        for x in c.iter() {
            for j in 0..d {
                mean[j] += x[j];
                e2[j] += x[j] * x[j];
            }
        }
    }
    for j in 0..d {
        mean[j] /= n as f64;
        e2[j] = (e2[j] / n as f64 - mean[j] * mean[j]).max(cfg.var_floor);
    }
    let global_var = e2;

    let mut gmm = Gmm {
        weights: vec![1.0 / cfg.components as f64; cfg.components],
        means: (0..cfg.components)
            .map(|_| {
                (0..d)
                    .map(|j| {
                        let eps: f64 = StandardNormal.sample(rng);
                        mean[j] + 0.5 * global_var[j].sqrt() * eps
                    })
                    .collect()
            })
            .collect(),
        vars: vec![global_var.clone(); cfg.components],
    };

    let mut ll_history = Vec::new();
    let mut converged = false;
    let mut reseeded = 0;
    let mut iterations = 0;
    for _ in 0..cfg.max_iters {
        let mut stats: Option<Stats> = None;
        for c in clients.iter() {
            let local = client_stats(&gmm, c);
            match &mut stats {
                None => stats = Some(local),
                Some(acc) => merge_stats(acc, local),
            }
        }
        let stats = stats.expect("at least one point");
        if !stats.ll.is_finite() {
            return Err(Error::NumericOverflow { layer: "gmm e-step".into() });
        }
        ll_history.push(stats.ll);
        if ll_history.len() >= 2 {
            let prev = ll_history[ll_history.len() - 2];
            let ll = stats.ll;
            if (ll - prev).abs() <= cfg.rel_tol * ll.abs().max(1.0) {
                converged = true;
                break;
            }
        }
        reseeded += m_step(&mut gmm, &stats, cfg, &global_var);
        iterations += 1;
    }

    Ok(GmmFit { gmm, ll_history, iterations, converged, reseeded })
}

/// Convenience wrapper fitting a single party's points.
pub fn gmm_fit(points: &[Vec<f64>], cfg: &GmmFitConfig, rng: &mut ChaCha8Rng) -> Result<GmmFit> {
    fed_gmm_fit(&[points], cfg, rng)
}

//! Score and Fisher information of the Gaussian-noise model, and empirical
//! checks of the forgetting inequalities behind the limiting-EM argument.

use std::io::Write;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::Serialize;

use crate::batch::e_step_fb;
use crate::error::{Error, Result};
use crate::experiment::derive_seed;
use crate::model::{emission_weights_into, format_f64, random_params, simulate, stationary_distribution, uniform, HmmParams};
use crate::online::EstimateTrace;

/// Which variance component of the score to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScoreForm {
    /// Gradient of the normalized log-likelihood.
    #[default]
    Exact,
    /// Variance component without the `-sum_i S0(i) / (2 v)` term of the
    /// Gaussian log-normalizer, as the formula is sometimes quoted.
    Literal,
}

/// Gradient of `loglik / (n + 1)` in the chart where the last column of
/// each transition row is eliminated.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreVector {
    pub m: usize,
    /// Row-major `m x (m - 1)`: derivative w.r.t. `q(i, j)`, `j < m - 1`.
    pub d_q: Vec<f64>,
    pub d_mu: Vec<f64>,
    pub d_v: f64,
}

impl ScoreVector {
    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = self.d_q.clone();
        out.extend_from_slice(&self.d_mu);
        out.push(self.d_v);
        out
    }
}

/// Names of the free parameters, in [`ScoreVector::to_vec`] order.
pub fn free_parameter_names(m: usize) -> Vec<String> {
    let mut names = Vec::new();
    for i in 1..=m {
        for j in 1..m {
            names.push(format!("q{i}{j}"));
        }
    }
    names.extend((1..=m).map(|i| format!("mu{i}")));
    names.push("v".into());
    names
}

/// Score by the Fisher identity: the complete-data score evaluated at the
/// exact smoothed statistics.
pub fn score(params: &HmmParams, nu: &[f64], ys: &[f64], form: ScoreForm) -> Result<ScoreVector> {
    if params.q_flat().iter().any(|&q| !(q > 0.0)) || !(params.v() > 0.0) {
        return Err(Error::precondition("the score needs interior parameters"));
    }
    let m = params.m();
    let s = e_step_fb(params, nu, ys)?.stats;
    let mut d_q = Vec::with_capacity(m * (m - 1));
    for i in 0..m {
        let last = s.sq(i, m - 1) / params.q(i, m - 1);
        for j in 0..m - 1 {
            d_q.push(s.sq(i, j) / params.q(i, j) - last);
        }
    }
    let v = params.v();
    let mu = params.mu();
    let d_mu = (0..m).map(|i| (s.sg1[i] - mu[i] * s.sg0[i]) / v).collect();
    let mut d_v: f64 = (0..m)
        .map(|i| (s.sg2[i] - 2.0 * mu[i] * s.sg1[i] + mu[i] * mu[i] * s.sg0[i]) / (2.0 * v * v))
        .sum();
    if form == ScoreForm::Exact {
        d_v -= s.sg0.iter().sum::<f64>() / (2.0 * v);
    }
    Ok(ScoreVector { m, d_q, d_mu, d_v })
}

/// Monte Carlo estimate of the per-observation Fisher information.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FisherEstimate {
    pub m: usize,
    pub dim: usize,
    /// Row-major `dim x dim`.
    pub matrix: Vec<f64>,
    pub n_sequences: usize,
    pub sequence_length: usize,
    /// Square roots of the diagonal of the inverse, absent when singular.
    pub asymptotic_sd: Option<Vec<f64>>,
    #[serde(skip)]
    inverse: Option<Vec<f64>>,
}

impl FisherEstimate {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix[i * self.dim + j]
    }

    pub fn min_eigenvalue(&self) -> f64 {
        let mat = DMatrix::from_row_slice(self.dim, self.dim, &self.matrix);
        mat.symmetric_eigen().eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Asymptotic standard deviations of the summary parameters
    /// `q11..qmm, mu1..mum, v`. The last diagonal transition entry is a
    /// function of the free entries of its row; its variance follows by the
    /// delta method.
    pub fn summary_sd(&self) -> Result<Vec<f64>> {
        let inv = self
            .inverse
            .as_ref()
            .ok_or_else(|| Error::precondition("Fisher information is singular, no standard deviations"))?;
        let m = self.m;
        let d = self.dim;
        let free = m - 1;
        let mut out = Vec::with_capacity(2 * m + 1);
        for i in 0..m {
            if i < free {
                let k = i * free + i;
                out.push(inv[k * d + k].sqrt());
            } else {
                let base = i * free;
                let mut var = 0.0;
                for a in 0..free {
                    for b in 0..free {
                        var += inv[(base + a) * d + base + b];
                    }
                }
                out.push(var.sqrt());
            }
        }
        let off = m * free;
        for k in off..d {
            out.push(inv[k * d + k].sqrt());
        }
        Ok(out)
    }

    pub fn write_matrix_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let names = free_parameter_names(self.m);
        let mut header = vec![String::new()];
        header.extend(names.iter().cloned());
        wtr.write_record(&header)?;
        for (i, name) in names.iter().enumerate() {
            let mut row = vec![name.clone()];
            row.extend((0..self.dim).map(|j| format_f64(self.get(i, j))));
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "d": self.dim,
            "parameters": free_parameter_names(self.m),
            "n_sequences": self.n_sequences,
            "sequence_length": self.sequence_length,
            "asymptotic_sd": self.asymptotic_sd,
            "summary_sd": self.summary_sd().ok(),
            "min_eigenvalue": self.min_eigenvalue(),
        })
    }
}

/// Averages `length * s s^T` over independent sequences simulated under
/// `params` (started from the stationary distribution), where `s` is the
/// normalized score at `params`. Sequence `i` uses seed
/// `derive_seed(seed, i)`.
pub fn fisher_information(params: &HmmParams, n_sequences: usize, sequence_length: usize, seed: u64) -> Result<FisherEstimate> {
    if n_sequences == 0 || sequence_length < 2 {
        return Err(Error::config("need at least one sequence of at least two observations"));
    }
    let m = params.m();
    let pi = stationary_distribution(params)?;
    let nu = uniform(m);
    let scores = (0..n_sequences)
        .into_par_iter()
        .map(|i| {
            let tr = simulate(params, sequence_length - 1, &pi, derive_seed(seed, i as u64))?;
            score(params, &nu, &tr.observations, ScoreForm::Exact).map(|s| s.to_vec())
        })
        .collect::<Result<Vec<_>>>()?;
    let dim = scores[0].len();
    let mut matrix = vec![0.0; dim * dim];
    let w = sequence_length as f64 / n_sequences as f64;
    for s in &scores {
        for i in 0..dim {
            for j in 0..dim {
                matrix[i * dim + j] += w * s[i] * s[j];
            }
        }
    }
    let mat = DMatrix::from_row_slice(dim, dim, &matrix);
    let inverse = mat
        .cholesky()
        .map(|c| c.inverse())
        .map(|inv| (0..dim).flat_map(|i| (0..dim).map(move |j| (i, j))).map(|(i, j)| inv[(i, j)]).collect::<Vec<_>>());
    let asymptotic_sd = inverse.as_ref().map(|inv| (0..dim).map(|k| inv[k * dim + k].sqrt()).collect());
    Ok(FisherEstimate { m, dim, matrix, n_sequences, sequence_length, asymptotic_sd, inverse })
}

/// Trace rows rescaled to `sqrt(n) (theta_n - theta_true) / sd`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledRow {
    pub n: usize,
    pub raw: Vec<f64>,
    pub avg: Option<Vec<f64>>,
}

pub fn center_and_scale(trace: &EstimateTrace, truth: &HmmParams, fisher: &FisherEstimate) -> Result<Vec<ScaledRow>> {
    let sd = fisher.summary_sd()?;
    let center = truth.summary_values();
    let scale = |n: usize, vals: Vec<f64>| -> Vec<f64> {
        let root = (n as f64).sqrt();
        vals.iter().zip(&center).zip(&sd).map(|((v, c), s)| root * (v - c) / s).collect()
    };
    Ok(trace
        .rows
        .iter()
        .map(|r| ScaledRow {
            n: r.n,
            raw: scale(r.n, r.theta.summary_values()),
            avg: r.avg.as_ref().map(|a| scale(r.n, a.summary_values())),
        })
        .collect())
}

/// Both sides of the Bayes-formula perturbation bound
/// `||J1 - J2||_1 <= (||a1 - a2||_1 + ||b1 - b2||_1) / eps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundReport {
    pub lhs: f64,
    pub rhs: f64,
    pub pass: bool,
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

fn joint(alpha: &[f64], q: &[f64], beta: &[f64]) -> Vec<f64> {
    let m = alpha.len();
    let mut j = vec![0.0; m * m];
    for x in 0..m {
        for xp in 0..m {
            j[x * m + xp] = alpha[x] * q[x * m + xp] * beta[xp];
        }
    }
    let s: f64 = j.iter().sum();
    j.iter_mut().for_each(|v| *v /= s);
    j
}

/// `J(x, x') ∝ alpha(x) q(x, x') beta(x')` compared for two pairs of
/// marginals; `q` is row-major and must be bounded below by `epsilon`.
pub fn check_perturbation_bound(
    alpha1: &[f64],
    alpha2: &[f64],
    beta1: &[f64],
    beta2: &[f64],
    q: &[f64],
    epsilon: f64,
) -> Result<BoundReport> {
    let m = alpha1.len();
    if [alpha2.len(), beta1.len(), beta2.len()].iter().any(|&l| l != m) || q.len() != m * m {
        return Err(Error::config("bound inputs disagree on size"));
    }
    if !(epsilon > 0.0) || q.iter().any(|&v| v < epsilon) {
        return Err(Error::precondition("transition entries must be bounded below by a positive epsilon"));
    }
    let lhs = l1(&joint(alpha1, q, beta1), &joint(alpha2, q, beta2));
    let rhs = (l1(alpha1, alpha2) + l1(beta1, beta2)) / epsilon;
    Ok(BoundReport { lhs, rhs, pass: lhs <= rhs + 1e-12 })
}

fn random_simplex<R: Rng>(rng: &mut R, m: usize) -> Vec<f64> {
    // Occasionally draw near-degenerate points to stress the bound.
    let sparse = rng.random_bool(0.25);
    let mut v: Vec<f64> = (0..m)
        .map(|_| {
            let e: f64 = Exp1.sample(rng);
            if sparse && rng.random_bool(0.5) { e * 1e-9 } else { e }
        })
        .collect();
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

/// Row-stochastic matrix with every entry at least `epsilon` (`m epsilon <= 1`).
pub fn random_floored_kernel<R: Rng>(rng: &mut R, m: usize, epsilon: f64) -> Vec<f64> {
    let slack = 1.0 - m as f64 * epsilon;
    let mut q = Vec::with_capacity(m * m);
    for _ in 0..m {
        let row = random_simplex(rng, m);
        q.extend(row.iter().map(|r| epsilon + slack * r));
    }
    q
}

/// Outcome of a batch of randomized bound checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrialSummary {
    pub draws: usize,
    pub violations: usize,
    /// Largest `lhs / rhs` over draws with a nonzero right-hand side.
    pub max_ratio: f64,
}

/// Checks the perturbation bound on random marginals and kernels.
pub fn perturbation_random_trials(m: usize, epsilon: f64, draws: usize, seed: u64) -> Result<TrialSummary> {
    if m as f64 * epsilon > 1.0 + 1e-12 {
        return Err(Error::config("m * epsilon must not exceed one"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0;
    let mut max_ratio: f64 = 0.0;
    for _ in 0..draws {
        let q = random_floored_kernel(&mut rng, m, epsilon);
        let (a1, a2) = (random_simplex(&mut rng, m), random_simplex(&mut rng, m));
        let (b1, b2) = (random_simplex(&mut rng, m), random_simplex(&mut rng, m));
        // Rounding can leave an entry a hair under epsilon.
        let r = check_perturbation_bound(&a1, &a2, &b1, &b2, &q, epsilon * (1.0 - 1e-12))?;
        violations += usize::from(!r.pass);
        if r.rhs > 0.0 {
            max_ratio = max_ratio.max(r.lhs / r.rhs);
        }
    }
    Ok(TrialSummary { draws, violations, max_ratio })
}

/// Two-sided forgetting check for one time index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TwoSidedReport {
    pub t: usize,
    /// Largest difference between endpoint-pinned conditional expectations.
    pub max_diff: f64,
    /// `||f||_inf / eps * (rho^(t-1) + rho^(n-t))`, `rho = 1 - eps`.
    pub bound: f64,
    pub pass: bool,
}

/// Enumerates every state path of `ys` to compute
/// `E[f(X_{t-1}, X_t) | Y_{0:n}, X_0 = a, X_n = b]` for all endpoint pairs,
/// and compares the largest spread against the two-sided forgetting bound.
/// `f` is row-major `m x m`. Exponential in `ys.len()`; meant for short records.
pub fn check_two_sided_forgetting(params: &HmmParams, ys: &[f64], f: &[f64], t: usize) -> Result<TwoSidedReport> {
    params.require_positive_variance()?;
    let m = params.m();
    let n = ys.len().saturating_sub(1);
    if n < 1 || t < 1 || t > n {
        return Err(Error::precondition("need 1 <= t <= n"));
    }
    if f.len() != m * m {
        return Err(Error::config("f must be an m x m table"));
    }
    let paths = (m as u64)
        .checked_pow(ys.len() as u32)
        .filter(|&p| p <= 1 << 22)
        .ok_or_else(|| Error::precondition("record too long for path enumeration"))?;
    let eps = params.q_min();
    if !(eps > 0.0) {
        return Err(Error::precondition("transition matrix must be bounded away from zero"));
    }
    let weights: Vec<Vec<f64>> = ys
        .iter()
        .map(|&y| {
            let mut w = vec![0.0; m];
            emission_weights_into(params, y, &mut w);
            w
        })
        .collect();
    let mut num = vec![0.0; m * m];
    let mut den = vec![0.0; m * m];
    let mut path = vec![0usize; ys.len()];
    for code in 0..paths {
        let mut c = code;
        for s in path.iter_mut() {
            *s = (c % m as u64) as usize;
            c /= m as u64;
        }
        let mut w = weights[0][path[0]];
        for k in 1..ys.len() {
            w *= params.q(path[k - 1], path[k]) * weights[k][path[k]];
        }
        let key = path[0] * m + path[n];
        num[key] += w * f[path[t - 1] * m + path[t]];
        den[key] += w;
    }
    let cond: Vec<f64> = num.iter().zip(&den).map(|(a, b)| a / b).collect();
    let hi = cond.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = cond.iter().copied().fold(f64::INFINITY, f64::min);
    let f_sup = f.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let rho = 1.0 - eps;
    let bound = f_sup / eps * (rho.powi(t as i32 - 1) + rho.powi((n - t) as i32));
    let max_diff = hi - lo;
    Ok(TwoSidedReport { t, max_diff, bound, pass: max_diff <= bound + 1e-12 })
}

/// Runs the two-sided forgetting check on random `m`-state models, every
/// record length `2..=max_len` and every time index, with `f` drawn in `[-1, 1]`.
pub fn forgetting_random_trials(m: usize, max_len: usize, instances: usize, seed: u64) -> Result<TrialSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draws = 0;
    let mut violations = 0;
    let mut max_ratio: f64 = 0.0;
    for _ in 0..instances {
        let params = random_params(&mut rng, m, 0.05);
        let f: Vec<f64> = (0..m * m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let len = rng.random_range(2..=max_len.max(2));
        let ys = simulate(&params, len - 1, &uniform(m), rng.random())?.observations;
        for t in 1..len {
            let r = check_two_sided_forgetting(&params, &ys, &f, t)?;
            draws += 1;
            violations += usize::from(!r.pass);
            if r.bound > 0.0 {
                max_ratio = max_ratio.max(r.max_diff / r.bound);
            }
        }
    }
    Ok(TrialSummary { draws, violations, max_ratio })
}

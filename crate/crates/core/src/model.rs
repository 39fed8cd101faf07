//! Parameterization of a finite-state Markov chain observed in additive
//! Gaussian noise, `Y_t = mu(X_t) + V_t` with `V_t ~ N(0, v)`.
//!
//! States are 0-based everywhere in the API; files and reports written for
//! people use 1-based state labels.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ROW_SUM_TOL: f64 = 1e-12;
const NU_SUM_TOL: f64 = 1e-9;

/// Transition matrix, per-state means and shared noise variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawParams", into = "RawParams")]
pub struct HmmParams {
    m: usize,
    q: Vec<f64>,
    mu: Vec<f64>,
    v: f64,
}

#[derive(Serialize, Deserialize)]
struct RawParams {
    q: Vec<Vec<f64>>,
    mu: Vec<f64>,
    v: f64,
}

impl TryFrom<RawParams> for HmmParams {
    type Error = Error;

    fn try_from(raw: RawParams) -> Result<Self> {
        HmmParams::from_rows(&raw.q, raw.mu, raw.v)
    }
}

impl From<HmmParams> for RawParams {
    fn from(p: HmmParams) -> Self {
        RawParams {
            q: p.q.chunks(p.m).map(<[f64]>::to_vec).collect(),
            mu: p.mu,
            v: p.v,
        }
    }
}

impl HmmParams {
    /// Builds parameters from a row-major `m x m` transition matrix.
    pub fn new(q: Vec<f64>, mu: Vec<f64>, v: f64) -> Result<Self> {
        let p = Self::build(q, mu, v)?;
        if !(p.v > 0.0) || !p.v.is_finite() {
            return Err(Error::config(format!("noise variance must be positive, got {}", p.v)));
        }
        Ok(p)
    }

    pub fn from_rows(rows: &[Vec<f64>], mu: Vec<f64>, v: f64) -> Result<Self> {
        let m = rows.len();
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::config("transition matrix must be square"));
        }
        Self::new(rows.concat(), mu, v)
    }

    /// Zero-variance model. Only usable for simulation: every filtering
    /// routine rejects it.
    pub fn noiseless(q: Vec<f64>, mu: Vec<f64>) -> Result<Self> {
        Self::build(q, mu, 0.0)
    }

    /// Two-state model given its diagonal transition probabilities.
    pub fn two_state(q11: f64, q22: f64, mu1: f64, mu2: f64, v: f64) -> Result<Self> {
        Self::new(vec![q11, 1.0 - q11, 1.0 - q22, q22], vec![mu1, mu2], v)
    }

    /// Data-generating parameter of the reference Gaussian-noise experiment.
    pub fn reference_truth() -> Self {
        Self::two_state(0.95, 0.7, 0.0, 1.0, 0.5).expect("valid constants")
    }

    /// Starting point used by every estimator in the reference experiment.
    pub fn reference_init() -> Self {
        Self::two_state(0.7, 0.5, -0.5, 0.5, 2.0).expect("valid constants")
    }

    fn build(q: Vec<f64>, mu: Vec<f64>, v: f64) -> Result<Self> {
        let m = mu.len();
        if m == 0 {
            return Err(Error::config("at least one state is required"));
        }
        if q.len() != m * m {
            return Err(Error::config(format!(
                "transition matrix has {} entries, expected {}",
                q.len(),
                m * m
            )));
        }
        if mu.iter().any(|x| !x.is_finite()) {
            return Err(Error::config("state means must be finite"));
        }
        for (i, row) in q.chunks(m).enumerate() {
            if row.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
                return Err(Error::config(format!("row {} of q has a negative or non-finite entry", i + 1)));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::config(format!("row {} of q sums to {s}", i + 1)));
            }
        }
        if !(v >= 0.0) {
            return Err(Error::config(format!("noise variance must be non-negative, got {v}")));
        }
        Ok(HmmParams { m, q, mu, v })
    }

    #[inline]
    /// Overwrites the parameters with values already known to be valid.
    pub(crate) fn assign(&mut self, q: &[f64], mu: &[f64], v: f64) {
        debug_assert!(q.len() == self.m * self.m && mu.len() == self.m && v > 0.0);
        self.q.copy_from_slice(q);
        self.mu.copy_from_slice(mu);
        self.v = v;
    }

    pub fn m(&self) -> usize {
        self.m
    }

    #[inline]
    pub fn q(&self, i: usize, j: usize) -> f64 {
        self.q[i * self.m + j]
    }

    /// Row-major transition matrix.
    pub fn q_flat(&self) -> &[f64] {
        &self.q
    }

    pub fn q_row(&self, i: usize) -> &[f64] {
        &self.q[i * self.m..(i + 1) * self.m]
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn v(&self) -> f64 {
        self.v
    }

    /// Smallest transition probability.
    pub fn q_min(&self) -> f64 {
        self.q.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub(crate) fn require_positive_variance(&self) -> Result<()> {
        if self.v > 0.0 {
            Ok(())
        } else {
            Err(Error::precondition("noise variance must be positive for inference"))
        }
    }

    /// Flat parameter vector `(q row-major, mu, v)`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = self.q.clone();
        out.extend_from_slice(&self.mu);
        out.push(self.v);
        out
    }

    /// Largest absolute difference between any two parameter entries.
    pub fn max_abs_diff(&self, other: &HmmParams) -> f64 {
        self.to_vec()
            .iter()
            .zip(other.to_vec())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Named scalar summaries `q11..qmm, mu1..mum, v` as used in trace files.
    pub fn summary_names(m: usize) -> Vec<String> {
        let mut names: Vec<String> = (1..=m).map(|i| format!("q{i}{i}")).collect();
        names.extend((1..=m).map(|i| format!("mu{i}")));
        names.push("v".to_string());
        names
    }

    /// Values matching [`HmmParams::summary_names`].
    pub fn summary_values(&self) -> Vec<f64> {
        let mut vals: Vec<f64> = (0..self.m).map(|i| self.q(i, i)).collect();
        vals.extend_from_slice(&self.mu);
        vals.push(self.v);
        vals
    }
}

/// Uniform distribution over `m` states.
pub fn uniform(m: usize) -> Vec<f64> {
    vec![1.0 / m as f64; m]
}

pub(crate) fn check_distribution(nu: &[f64], m: usize) -> Result<()> {
    if nu.len() != m {
        return Err(Error::config(format!("initial distribution has {} entries, expected {m}", nu.len())));
    }
    if nu.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(Error::config("initial distribution has a negative or non-finite entry"));
    }
    let s: f64 = nu.iter().sum();
    if (s - 1.0).abs() > NU_SUM_TOL {
        return Err(Error::config(format!("initial distribution sums to {s}")));
    }
    Ok(())
}

pub(crate) fn check_observations(ys: &[f64]) -> Result<()> {
    match ys.iter().position(|y| !y.is_finite()) {
        Some(t) => Err(Error::config(format!("observation {t} is not finite"))),
        None => Ok(()),
    }
}

/// Random `m`-state model with transition entries at least `q_floor`,
/// means in `[-2, 2]` and variance in `[0.2, 2]`.
pub fn random_params<R: Rng>(rng: &mut R, m: usize, q_floor: f64) -> HmmParams {
    let slack = 1.0 - m as f64 * q_floor;
    let mut q = Vec::with_capacity(m * m);
    for _ in 0..m {
        let row: Vec<f64> = (0..m).map(|_| -rng.random::<f64>().max(1e-300).ln()).collect();
        let s: f64 = row.iter().sum();
        q.extend(row.iter().map(|r| q_floor + slack * r / s));
    }
    for i in 0..m {
        let s: f64 = q[i * m..(i + 1) * m].iter().sum();
        q[i * m..(i + 1) * m].iter_mut().for_each(|v| *v /= s);
    }
    let mu = (0..m).map(|_| rng.random_range(-2.0..2.0)).collect();
    let v = rng.random_range(0.2..2.0);
    HmmParams::new(q, mu, v).expect("valid by construction")
}

/// Unnormalized Gaussian kernels `exp(-(y - mu(k))^2 / (2 v))`, rescaled so the
/// largest entry is exactly one.
pub fn emission_weights(params: &HmmParams, y: f64) -> Vec<f64> {
    let mut out = vec![0.0; params.m];
    emission_weights_into(params, y, &mut out);
    out
}

/// Writes the rescaled kernels into `out` and returns the exponent that was
/// subtracted, so that `ln(out[k]) - shift` is the raw log-kernel.
pub(crate) fn emission_weights_into(params: &HmmParams, y: f64, out: &mut [f64]) -> f64 {
    let scale = 0.5 / params.v;
    let mut min_e = f64::INFINITY;
    for (o, &mu) in out.iter_mut().zip(&params.mu) {
        let d = y - mu;
        *o = d * d * scale;
        min_e = min_e.min(*o);
    }
    for o in out.iter_mut() {
        *o = (min_e - *o).exp();
    }
    min_e
}

/// Simulated hidden states and observations, `n + 1` of each.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<usize>,
    pub observations: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    /// Writes `t,state,y` rows with 1-based states.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["t", "state", "y"])?;
        for (t, (s, y)) in self.states.iter().zip(&self.observations).enumerate() {
            wtr.write_record([t.to_string(), (s + 1).to_string(), format_f64(*y)])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let headers = rdr.headers()?.clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::config(format!("trajectory file lacks a `{name}` column")))
        };
        let (state_col, y_col) = (col("state")?, col("y")?);
        let mut states = Vec::new();
        let mut observations = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let s: usize = rec[state_col]
                .trim()
                .parse()
                .map_err(|_| Error::config(format!("bad state label `{}`", &rec[state_col])))?;
            if s == 0 {
                return Err(Error::config("state labels are 1-based"));
            }
            let y: f64 = rec[y_col]
                .trim()
                .parse()
                .map_err(|_| Error::config(format!("bad observation `{}`", &rec[y_col])))?;
            states.push(s - 1);
            observations.push(y);
        }
        check_observations(&observations)?;
        Ok(Trajectory { states, observations })
    }
}

/// 17 significant digits, enough to round-trip any `f64`.
pub fn format_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn sample_index<R: Rng>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    // Rounding left a sliver above the cumulative sum: take the last state with mass.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Draws `n + 1` states and observations from the model started at `nu`.
///
/// The generator is ChaCha8 seeded with `seed`; at each time the state is
/// drawn before the observation noise, so output is reproducible bit for bit.
pub fn simulate(params: &HmmParams, n: usize, nu: &[f64], seed: u64) -> Result<Trajectory> {
    check_distribution(nu, params.m)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd = params.v.sqrt();
    let mut states = Vec::with_capacity(n + 1);
    let mut observations = Vec::with_capacity(n + 1);
    let mut x = sample_index(&mut rng, nu);
    for t in 0..=n {
        if t > 0 {
            x = sample_index(&mut rng, params.q_row(x));
        }
        let z: f64 = rng.sample(StandardNormal);
        states.push(x);
        observations.push(params.mu[x] + sd * z);
    }
    Ok(Trajectory { states, observations })
}

fn is_irreducible(params: &HmmParams) -> bool {
    let m = params.m;
    let reach = |forward: bool| {
        let mut seen = vec![false; m];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for j in 0..m {
                let w = if forward { params.q(i, j) } else { params.q(j, i) };
                if w > 0.0 && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    };
    reach(true) && reach(false)
}

/// Invariant distribution `pi q = pi` of an irreducible chain.
pub fn stationary_distribution(params: &HmmParams) -> Result<Vec<f64>> {
    let m = params.m;
    if !is_irreducible(params) {
        return Err(Error::degenerate("transition matrix is reducible"));
    }
    // (q^T - I) pi = 0 with the last balance equation replaced by sum(pi) = 1.
    let mut a = DMatrix::<f64>::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            a[(i, j)] = params.q(j, i) - if i == j { 1.0 } else { 0.0 };
        }
    }
    for j in 0..m {
        a[(m - 1, j)] = 1.0;
    }
    let mut b = DVector::<f64>::zeros(m);
    b[m - 1] = 1.0;
    let pi = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::degenerate("stationary system is singular"))?;
    let mut pi: Vec<f64> = pi.iter().map(|&x| x.max(0.0)).collect();
    let s: f64 = pi.iter().sum();
    pi.iter_mut().for_each(|x| *x /= s);
    Ok(pi)
}

//! Normalized forward filter, backward retrospective probabilities and
//! likelihood accumulation.

use std::f64::consts::PI;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{check_distribution, check_observations, emission_weights_into, HmmParams, Trajectory};

/// Posterior of the current state given `Y_{0:n}`, with the running
/// log-likelihood of those observations.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FilterState {
    pub phi: Vec<f64>,
    pub n: usize,
    /// Exact log-density of `Y_{0:n}` in nats, Gaussian constants included.
    pub loglik: f64,
}

/// `r(i|j)`: probability of the previous state `i` given the next state `j`
/// and the observations up to the previous time. Each column sums to one.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetroMatrix {
    m: usize,
    r: Vec<f64>,
}

impl RetroMatrix {
    pub fn new(m: usize) -> Self {
        RetroMatrix { m, r: vec![0.0; m * m] }
    }

    /// Builds a matrix from row-major entries `r[i * m + j] = r(i|j)`.
    pub fn from_entries(m: usize, r: Vec<f64>) -> Result<Self> {
        if r.len() != m * m {
            return Err(Error::config("retrospective matrix has the wrong size"));
        }
        Ok(RetroMatrix { m, r })
    }

    #[inline]
    pub fn m(&self) -> usize {
        self.m
    }

    #[inline]
    pub fn get(&self, prev: usize, next: usize) -> f64 {
        self.r[prev * self.m + next]
    }

    pub fn entries(&self) -> &[f64] {
        &self.r
    }
}

fn log_normalizer(v: f64) -> f64 {
    -0.5 * (2.0 * PI * v).ln()
}

/// Filter after absorbing the first observation.
pub fn filter_init(params: &HmmParams, nu: &[f64], y0: f64) -> Result<FilterState> {
    params.require_positive_variance()?;
    check_distribution(nu, params.m())?;
    check_observations(&[y0])?;
    let mut phi = vec![0.0; params.m()];
    let shift = emission_weights_into(params, y0, &mut phi);
    phi.iter_mut().zip(nu).for_each(|(p, n)| *p *= n);
    let c: f64 = phi.iter().sum();
    if !(c > 0.0) {
        return Err(Error::degenerate("initial distribution puts no mass on plausible states"));
    }
    phi.iter_mut().for_each(|p| *p /= c);
    Ok(FilterState { phi, n: 0, loglik: c.ln() - shift + log_normalizer(params.v()) })
}

impl FilterState {
    /// Absorbs `y` in place and writes the retrospective matrix computed from
    /// the filter *before* the update into `retro`.
    pub fn advance(&mut self, params: &HmmParams, y: f64, retro: &mut RetroMatrix) -> Result<()> {
        let m = params.m();
        debug_assert_eq!(self.phi.len(), m);
        if !y.is_finite() {
            return Err(Error::config(format!("observation {} is not finite", self.n + 1)));
        }
        if retro.m != m {
            *retro = RetroMatrix::new(m);
        }
        let mut pred = vec![0.0; m];
        for (i, &p) in self.phi.iter().enumerate() {
            for (j, pr) in pred.iter_mut().enumerate() {
                let joint = p * params.q(i, j);
                retro.r[i * m + j] = joint;
                *pr += joint;
            }
        }
        for (j, &pr) in pred.iter().enumerate() {
            if !(pr > 0.0) {
                return Err(Error::degenerate(format!(
                    "state {} has zero predictive probability at time {}",
                    j + 1,
                    self.n + 1
                )));
            }
        }
        for i in 0..m {
            for j in 0..m {
                retro.r[i * m + j] /= pred[j];
            }
        }

        let shift = emission_weights_into(params, y, &mut self.phi);
        let mut c = 0.0;
        for (p, pr) in self.phi.iter_mut().zip(&pred) {
            *p *= pr;
            c += *p;
        }
        if !(c > 0.0) {
            return Err(Error::degenerate(format!("observation {} has zero likelihood", self.n + 1)));
        }
        self.phi.iter_mut().for_each(|p| *p /= c);
        self.n += 1;
        self.loglik += c.ln() - shift + log_normalizer(params.v());
        Ok(())
    }
}

/// One step of the filter recursion, returning the new filter together with
/// the retrospective matrix of the transition just taken.
pub fn filter_step(state: &FilterState, params: &HmmParams, y: f64) -> Result<(FilterState, RetroMatrix)> {
    params.require_positive_variance()?;
    let mut next = state.clone();
    let mut retro = RetroMatrix::new(params.m());
    next.advance(params, y, &mut retro)?;
    Ok((next, retro))
}

/// Runs the filter over `ys`, returning every filter distribution.
pub fn filter_all(params: &HmmParams, nu: &[f64], ys: &[f64]) -> Result<(Vec<Vec<f64>>, f64)> {
    let (&y0, rest) = ys
        .split_first()
        .ok_or_else(|| Error::precondition("at least one observation is required"))?;
    let mut state = filter_init(params, nu, y0)?;
    let mut retro = RetroMatrix::new(params.m());
    let mut phis = Vec::with_capacity(ys.len());
    phis.push(state.phi.clone());
    for &y in rest {
        state.advance(params, y, &mut retro)?;
        phis.push(state.phi.clone());
    }
    Ok((phis, state.loglik))
}

/// Exact log-density of `ys` under `(nu, params)`.
pub fn loglikelihood(params: &HmmParams, nu: &[f64], ys: &[f64]) -> Result<f64> {
    let (&y0, rest) = ys
        .split_first()
        .ok_or_else(|| Error::precondition("at least one observation is required"))?;
    let mut state = filter_init(params, nu, y0)?;
    let mut retro = RetroMatrix::new(params.m());
    for &y in rest {
        state.advance(params, y, &mut retro)?;
    }
    Ok(state.loglik)
}

/// Index of the largest entry, ties going to the lowest index.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (k, &x) in p.iter().enumerate().skip(1) {
        if x > p[best] {
            best = k;
        }
    }
    best
}

/// Fraction of times where the filtered (causal) Bayes decision differs from
/// the true state. The filter starts from the uniform distribution.
pub fn bayes_error_rate(params: &HmmParams, trajectory: &Trajectory) -> Result<f64> {
    let ys = &trajectory.observations;
    if ys.is_empty() || trajectory.states.len() != ys.len() {
        return Err(Error::precondition("trajectory must be nonempty with matching lengths"));
    }
    let nu = crate::model::uniform(params.m());
    let mut state = filter_init(params, &nu, ys[0])?;
    let mut retro = RetroMatrix::new(params.m());
    let mut errors = usize::from(argmax(&state.phi) != trajectory.states[0]);
    for (&y, &x) in ys[1..].iter().zip(&trajectory.states[1..]) {
        state.advance(params, y, &mut retro)?;
        errors += usize::from(argmax(&state.phi) != x);
    }
    Ok(errors as f64 / ys.len() as f64)
}

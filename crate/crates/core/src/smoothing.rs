//! Recursive computation of smoothed sum functionals.
//!
//! For a complete-data statistic `s(x_prev, x, y)` the recursion keeps, for
//! every end state `x`, the running average of `s` conditioned on the
//! current state being `x`:
//!
//! ```text
//! rho_{n+1}(x) = sum_{x'} [ gamma s(x', x, y_{n+1}) + (1 - gamma) rho_n(x') ] r(x'|x)
//! ```
//!
//! With `gamma = 1 / (number of observations)` this is an exact rewriting of
//! the smoothing E-step; with a slower schedule it is the stochastic
//! approximation E-step of online EM. Averaging the rows against the filter
//! gives the smoothed statistic itself.
//!
//! The product `tau(x) = phi(x) rho(x)` may be propagated instead; see
//! [`tau_step`].

use serde::Serialize;

use crate::batch::SummedStats;
use crate::error::{Error, Result};
use crate::filtering::{FilterState, RetroMatrix};
use crate::model::{emission_weights_into, HmmParams};

/// A complete-data sufficient statistic `s(x_prev, x, y)` with values in
/// `R^dim`.
pub trait SufficientStatistic {
    fn states(&self) -> usize;

    fn dim(&self) -> usize;

    /// Writes `s(prev, x, y)` into `out` (length `dim`).
    fn eval_into(&self, prev: usize, x: usize, y: f64, out: &mut [f64]);

    /// Adds `weight * s(prev, x, y)` to `out`. Implementations with sparse
    /// statistics should override this.
    fn accumulate(&self, prev: usize, x: usize, y: f64, weight: f64, out: &mut [f64]) {
        let mut buf = vec![0.0; self.dim()];
        self.eval_into(prev, x, y, &mut buf);
        out.iter_mut().zip(&buf).for_each(|(o, b)| *o += weight * b);
    }

    /// Statistic attached to the first observation when the state at time 0
    /// is `x`. Zero unless the statistic has an emission part.
    fn initial_into(&self, _x: usize, _y0: f64, out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }
}

/// Statistics of the Gaussian-noise model.
///
/// Flat layout of length `m^2 + 3m`: the transition block
/// `1{x_prev = i, x = j}` in row-major order, then for `d = 0, 1, 2` the block
/// `1{x = i} y^d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GaussianNoiseStats {
    m: usize,
}

impl GaussianNoiseStats {
    pub fn new(m: usize) -> Self {
        GaussianNoiseStats { m }
    }

    #[inline]
    pub fn q_index(&self, i: usize, j: usize) -> usize {
        i * self.m + j
    }

    #[inline]
    pub fn g_index(&self, d: usize, i: usize) -> usize {
        self.m * self.m + d * self.m + i
    }
}

impl SufficientStatistic for GaussianNoiseStats {
    fn states(&self) -> usize {
        self.m
    }

    fn dim(&self) -> usize {
        self.m * self.m + 3 * self.m
    }

    fn eval_into(&self, prev: usize, x: usize, y: f64, out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        out[self.q_index(prev, x)] = 1.0;
        out[self.g_index(0, x)] = 1.0;
        out[self.g_index(1, x)] = y;
        out[self.g_index(2, x)] = y * y;
    }

    fn accumulate(&self, prev: usize, x: usize, y: f64, weight: f64, out: &mut [f64]) {
        out[self.q_index(prev, x)] += weight;
        out[self.g_index(0, x)] += weight;
        out[self.g_index(1, x)] += weight * y;
        out[self.g_index(2, x)] += weight * y * y;
    }

    fn initial_into(&self, x: usize, y0: f64, out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        out[self.g_index(0, x)] = 1.0;
        out[self.g_index(1, x)] = y0;
        out[self.g_index(2, x)] = y0 * y0;
    }
}

/// Per-end-state averaged statistics, an `m x dim` row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuxStats {
    m: usize,
    dim: usize,
    rho: Vec<f64>,
}

impl AuxStats {
    pub fn zeros(m: usize, dim: usize) -> Self {
        AuxStats { m, dim, rho: vec![0.0; m * dim] }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, x: usize) -> &[f64] {
        &self.rho[x * self.dim..(x + 1) * self.dim]
    }

    pub fn entries(&self) -> &[f64] {
        &self.rho
    }

    /// Largest sup-norm distance between two rows.
    pub fn row_spread(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for a in 0..self.m {
            for b in a + 1..self.m {
                let d = self
                    .row(a)
                    .iter()
                    .zip(self.row(b))
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0, f64::max);
                worst = worst.max(d);
            }
        }
        worst
    }

    /// In-place version of [`aux_step`].
    pub fn advance<S: SufficientStatistic + ?Sized>(
        &mut self,
        retro: &RetroMatrix,
        spec: &S,
        y: f64,
        gamma: f64,
    ) -> Result<()> {
        self.advance_with(retro, spec, y, gamma, &mut Vec::new())
    }

    /// [`AuxStats::advance`] using `scratch` as working space.
    pub(crate) fn advance_with<S: SufficientStatistic + ?Sized>(
        &mut self,
        retro: &RetroMatrix,
        spec: &S,
        y: f64,
        gamma: f64,
        scratch: &mut Vec<f64>,
    ) -> Result<()> {
        check_gamma(gamma)?;
        self.check_shape(retro, spec)?;
        let (m, dim) = (self.m, self.dim);
        scratch.clear();
        scratch.resize(m * dim, 0.0);
        for x in 0..m {
            let out = &mut scratch[x * dim..(x + 1) * dim];
            for xp in 0..m {
                let r = retro.get(xp, x);
                if r == 0.0 {
                    continue;
                }
                let w = (1.0 - gamma) * r;
                for (o, v) in out.iter_mut().zip(&self.rho[xp * dim..(xp + 1) * dim]) {
                    *o += w * v;
                }
                spec.accumulate(xp, x, y, gamma * r, out);
            }
        }
        std::mem::swap(&mut self.rho, scratch);
        Ok(())
    }

    fn check_shape<S: SufficientStatistic + ?Sized>(&self, retro: &RetroMatrix, spec: &S) -> Result<()> {
        if spec.states() != self.m || spec.dim() != self.dim || retro.m() != self.m {
            return Err(Error::config("statistic, retrospective matrix and accumulator disagree on size"));
        }
        Ok(())
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma <= 1.0 {
        Ok(())
    } else {
        Err(Error::precondition(format!("step size must lie in (0, 1], got {gamma}")))
    }
}

/// Initial accumulator: zero, or the time-0 statistic placed in the row of
/// the matching state when `include_t0` is set.
pub fn aux_init<S: SufficientStatistic + ?Sized>(spec: &S, y0: f64, include_t0: bool) -> AuxStats {
    let (m, dim) = (spec.states(), spec.dim());
    let mut aux = AuxStats::zeros(m, dim);
    if include_t0 {
        for x in 0..m {
            spec.initial_into(x, y0, &mut aux.rho[x * dim..(x + 1) * dim]);
        }
    }
    aux
}

/// One step of the per-end-state recursion with step size `gamma`.
pub fn aux_step<S: SufficientStatistic + ?Sized>(
    aux: &AuxStats,
    retro: &RetroMatrix,
    spec: &S,
    y_next: f64,
    gamma: f64,
) -> Result<AuxStats> {
    let mut next = aux.clone();
    next.advance(retro, spec, y_next, gamma)?;
    Ok(next)
}

/// Reference implementation of [`aux_step`] evaluating the full statistic
/// for every state pair.
pub fn aux_step_dense<S: SufficientStatistic + ?Sized>(
    aux: &AuxStats,
    retro: &RetroMatrix,
    spec: &S,
    y_next: f64,
    gamma: f64,
) -> Result<AuxStats> {
    check_gamma(gamma)?;
    aux.check_shape(retro, spec)?;
    let (m, dim) = (aux.m, aux.dim);
    let mut next = AuxStats::zeros(m, dim);
    let mut s = vec![0.0; dim];
    for x in 0..m {
        for xp in 0..m {
            spec.eval_into(xp, x, y_next, &mut s);
            let r = retro.get(xp, x);
            for k in 0..dim {
                next.rho[x * dim + k] += (gamma * s[k] + (1.0 - gamma) * aux.rho[xp * dim + k]) * r;
            }
        }
    }
    Ok(next)
}

/// `sum_x phi(x) rho(x)`, the smoothed statistic as a flat vector.
pub fn weighted_rows(aux: &AuxStats, phi: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; aux.dim];
    weighted_rows_into(aux, phi, &mut out);
    out
}

pub(crate) fn weighted_rows_into(aux: &AuxStats, phi: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    for (x, &p) in phi.iter().enumerate().take(aux.m) {
        for (o, v) in out.iter_mut().zip(aux.row(x)) {
            *o += p * v;
        }
    }
}

/// Smoothed Gaussian-noise statistics from the accumulator and the filter.
pub fn summed_stats(aux: &AuxStats, phi: &FilterState) -> Result<SummedStats> {
    if phi.phi.len() != aux.m {
        return Err(Error::config("filter and accumulator disagree on the number of states"));
    }
    SummedStats::from_flat(aux.m, &weighted_rows(aux, &phi.phi))
}

/// Product form `tau(x) = phi(x) rho(x)`, an `m x dim` row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TauStats {
    m: usize,
    dim: usize,
    tau: Vec<f64>,
}

impl TauStats {
    /// Product of a filter and an accumulator.
    pub fn from_parts(aux: &AuxStats, phi: &[f64]) -> Self {
        let mut tau = aux.rho.clone();
        for (x, &p) in phi.iter().enumerate().take(aux.m) {
            tau[x * aux.dim..(x + 1) * aux.dim].iter_mut().for_each(|t| *t *= p);
        }
        TauStats { m: aux.m, dim: aux.dim, tau }
    }

    pub fn row(&self, x: usize) -> &[f64] {
        &self.tau[x * self.dim..(x + 1) * self.dim]
    }

    pub fn entries(&self) -> &[f64] {
        &self.tau
    }

    /// `sum_x tau(x)`, which equals `sum_x phi(x) rho(x)`.
    pub fn total(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for x in 0..self.m {
            out.iter_mut().zip(self.row(x)).for_each(|(o, t)| *o += t);
        }
        out
    }
}

/// Joint update of `tau`, using the filter *before* absorbing `y_next`.
///
/// ```text
/// tau'(x) = [ gamma sum_{x'} s(x', x, y) phi(x') q(x', x) g(x, y)
///           + (1 - gamma) sum_{x'} tau(x') q(x', x) g(x, y) ] / Z
/// Z       = sum_{x', x''} phi(x') q(x', x'') g(x'', y)
/// ```
pub fn tau_step<S: SufficientStatistic + ?Sized>(
    tau: &TauStats,
    phi_old: &FilterState,
    params: &HmmParams,
    spec: &S,
    y_next: f64,
    gamma: f64,
) -> Result<TauStats> {
    check_gamma(gamma)?;
    params.require_positive_variance()?;
    let (m, dim) = (tau.m, tau.dim);
    if params.m() != m || spec.states() != m || spec.dim() != dim || phi_old.phi.len() != m {
        return Err(Error::config("inputs disagree on size"));
    }
    let mut g = vec![0.0; m];
    emission_weights_into(params, y_next, &mut g);
    let mut z = 0.0;
    for (xp, &p) in phi_old.phi.iter().enumerate() {
        for (x, &gx) in g.iter().enumerate() {
            z += p * params.q(xp, x) * gx;
        }
    }
    if !(z > 0.0) {
        return Err(Error::degenerate("observation has zero predictive likelihood"));
    }
    let mut next = vec![0.0; m * dim];
    for x in 0..m {
        let out = &mut next[x * dim..(x + 1) * dim];
        for xp in 0..m {
            let k = params.q(xp, x) * g[x] / z;
            if k == 0.0 {
                continue;
            }
            spec.accumulate(xp, x, y_next, gamma * phi_old.phi[xp] * k, out);
            let w = (1.0 - gamma) * k;
            for (o, t) in out.iter_mut().zip(tau.row(xp)) {
                *o += w * t;
            }
        }
    }
    Ok(TauStats { m, dim, tau: next })
}

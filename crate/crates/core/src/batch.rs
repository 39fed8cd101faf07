//! Batch EM for the Gaussian-noise model.
//!
//! Two interchangeable E-steps are provided: scaled forward-backward
//! smoothing and the recursive rewriting driven by
//! [`crate::smoothing`]. Both return statistics normalized by the number of
//! observations `n + 1`: the transition block sums over `t = 1..n`, the
//! emission blocks over `t = 0..n`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filtering::{filter_init, RetroMatrix};
use crate::model::{check_distribution, check_observations, emission_weights_into, format_f64, HmmParams};
use crate::smoothing::{aux_init, summed_stats, GaussianNoiseStats};

/// Smoothed complete-data statistics of the Gaussian-noise model.
#[derive(Debug, Clone, PartialEq)]
pub struct SummedStats {
    pub m: usize,
    /// Row-major `m x m` expected transition frequencies.
    pub sq: Vec<f64>,
    /// Expected state occupancies.
    pub sg0: Vec<f64>,
    /// Expected occupancy-weighted observation sums.
    pub sg1: Vec<f64>,
    /// Expected occupancy-weighted squared observation sums.
    pub sg2: Vec<f64>,
}

impl SummedStats {
    /// Splits a flat vector laid out as in [`GaussianNoiseStats`].
    pub fn from_flat(m: usize, flat: &[f64]) -> Result<Self> {
        if flat.len() != m * m + 3 * m {
            return Err(Error::config(format!("flat statistic has {} entries, expected {}", flat.len(), m * m + 3 * m)));
        }
        let mm = m * m;
        Ok(SummedStats {
            m,
            sq: flat[..mm].to_vec(),
            sg0: flat[mm..mm + m].to_vec(),
            sg1: flat[mm + m..mm + 2 * m].to_vec(),
            sg2: flat[mm + 2 * m..].to_vec(),
        })
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = self.sq.clone();
        out.extend_from_slice(&self.sg0);
        out.extend_from_slice(&self.sg1);
        out.extend_from_slice(&self.sg2);
        out
    }

    pub fn sq(&self, i: usize, j: usize) -> f64 {
        self.sq[i * self.m + j]
    }
}

/// Output of an E-step: statistics plus the exact log-likelihood of the
/// parameter they were computed under.
#[derive(Debug, Clone)]
pub struct EStep {
    pub stats: SummedStats,
    pub loglik: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EStepMode {
    ForwardBackward,
    Recursive,
}

/// Scaled forward-backward quantities for one parameter and record.
struct ForwardBackward {
    m: usize,
    /// Filter distributions, `(n + 1) x m`.
    phi: Vec<f64>,
    /// Rescaled backward variables, `(n + 1) x m`.
    beta: Vec<f64>,
    /// Shifted emission kernels, `(n + 1) x m`.
    w: Vec<f64>,
    /// Per-step normalizers of the filter, `c[0]` unused.
    c: Vec<f64>,
    loglik: f64,
}

impl ForwardBackward {
    fn run(params: &HmmParams, nu: &[f64], ys: &[f64]) -> Result<Self> {
        check_observations(ys)?;
        let m = params.m();
        let len = ys.len();
        let mut w = vec![0.0; len * m];
        let mut phi = vec![0.0; len * m];
        let mut c = vec![0.0; len];

        let f0 = filter_init(params, nu, ys[0])?;
        phi[..m].copy_from_slice(&f0.phi);
        emission_weights_into(params, ys[0], &mut w[..m]);
        let mut loglik = f0.loglik;
        let log_norm = -0.5 * (2.0 * std::f64::consts::PI * params.v()).ln();

        for t in 1..len {
            let shift = emission_weights_into(params, ys[t], &mut w[t * m..(t + 1) * m]);
            let mut ct = 0.0;
            for j in 0..m {
                let mut pred = 0.0;
                for i in 0..m {
                    pred += phi[(t - 1) * m + i] * params.q(i, j);
                }
                let a = pred * w[t * m + j];
                phi[t * m + j] = a;
                ct += a;
            }
            if !(ct > 0.0) {
                return Err(Error::degenerate(format!("observation {t} has zero likelihood")));
            }
            phi[t * m..(t + 1) * m].iter_mut().for_each(|p| *p /= ct);
            c[t] = ct;
            loglik += ct.ln() - shift + log_norm;
        }

        let mut beta = vec![0.0; len * m];
        beta[(len - 1) * m..].iter_mut().for_each(|b| *b = 1.0);
        for t in (0..len - 1).rev() {
            for i in 0..m {
                let mut acc = 0.0;
                for j in 0..m {
                    acc += params.q(i, j) * w[(t + 1) * m + j] * beta[(t + 1) * m + j];
                }
                beta[t * m + i] = acc / c[t + 1];
            }
        }
        Ok(ForwardBackward { m, phi, beta, w, c, loglik })
    }

    fn len(&self) -> usize {
        self.c.len()
    }

    /// Smoothed marginal of `X_t`.
    fn marginal(&self, t: usize, out: &mut [f64]) {
        let m = self.m;
        for i in 0..m {
            out[i] = self.phi[t * m + i] * self.beta[t * m + i];
        }
        // Guard against drift from the rescaling.
        let s: f64 = out.iter().sum();
        out.iter_mut().for_each(|x| *x /= s);
    }
}

fn check_e_step_inputs(params: &HmmParams, nu: &[f64], ys: &[f64]) -> Result<()> {
    params.require_positive_variance()?;
    check_distribution(nu, params.m())?;
    if ys.len() < 2 {
        return Err(Error::precondition("the E-step needs at least two observations"));
    }
    Ok(())
}

/// E-step by forward-backward smoothing.
pub fn e_step_fb(params: &HmmParams, nu: &[f64], ys: &[f64]) -> Result<EStep> {
    check_e_step_inputs(params, nu, ys)?;
    let fb = ForwardBackward::run(params, nu, ys)?;
    let m = fb.m;
    let len = fb.len();
    let mut sq = vec![0.0; m * m];
    let mut sg0 = vec![0.0; m];
    let mut sg1 = vec![0.0; m];
    let mut sg2 = vec![0.0; m];
    let mut marg = vec![0.0; m];
    for (t, &y) in ys.iter().enumerate() {
        fb.marginal(t, &mut marg);
        for i in 0..m {
            sg0[i] += marg[i];
            sg1[i] += marg[i] * y;
            sg2[i] += marg[i] * y * y;
        }
        if t > 0 {
            let ct = fb.c[t];
            for i in 0..m {
                let a = fb.phi[(t - 1) * m + i];
                for j in 0..m {
                    sq[i * m + j] += a * params.q(i, j) * fb.w[t * m + j] * fb.beta[t * m + j] / ct;
                }
            }
        }
    }
    let scale = 1.0 / len as f64;
    for v in sq.iter_mut().chain(&mut sg0).chain(&mut sg1).chain(&mut sg2) {
        *v *= scale;
    }
    Ok(EStep { stats: SummedStats { m, sq, sg0, sg1, sg2 }, loglik: fb.loglik })
}

/// E-step by the recursive smoother with exact weights `1 / (t + 1)`, the
/// emission block seeded with the time-0 term.
pub fn e_step_recursive(params: &HmmParams, nu: &[f64], ys: &[f64]) -> Result<EStep> {
    check_e_step_inputs(params, nu, ys)?;
    let spec = GaussianNoiseStats::new(params.m());
    let mut filter = filter_init(params, nu, ys[0])?;
    let mut aux = aux_init(&spec, ys[0], true);
    let mut retro = RetroMatrix::new(params.m());
    for (t, &y) in ys.iter().enumerate().skip(1) {
        filter.advance(params, y, &mut retro)?;
        aux.advance(&retro, &spec, y, 1.0 / (t as f64 + 1.0))?;
    }
    Ok(EStep { stats: summed_stats(&aux, &filter)?, loglik: filter.loglik })
}

pub fn e_step(params: &HmmParams, nu: &[f64], ys: &[f64], mode: EStepMode) -> Result<EStep> {
    match mode {
        EStepMode::ForwardBackward => e_step_fb(params, nu, ys),
        EStepMode::Recursive => e_step_recursive(params, nu, ys),
    }
}

/// Smoothed state posteriors `P(X_t | Y_{0:n})`, one row per time.
pub fn smoothed_marginals(params: &HmmParams, nu: &[f64], ys: &[f64]) -> Result<Vec<Vec<f64>>> {
    params.require_positive_variance()?;
    check_distribution(nu, params.m())?;
    if ys.is_empty() {
        return Err(Error::precondition("at least one observation is required"));
    }
    let fb = ForwardBackward::run(params, nu, ys)?;
    let mut out = Vec::with_capacity(fb.len());
    for t in 0..fb.len() {
        let mut marg = vec![0.0; fb.m];
        fb.marginal(t, &mut marg);
        out.push(marg);
    }
    Ok(out)
}

/// Relative variance floor applied by the M-step.
pub const VARIANCE_FLOOR_RATIO: f64 = 1e-8;

/// Result of the M-step.
#[derive(Debug, Clone, PartialEq)]
pub struct MStep {
    pub params: HmmParams,
    /// The variance fell below the floor and was clamped to it.
    pub variance_clamped: bool,
}

/// Maximizer of the intermediate quantity for the given statistics.
///
/// The variance is floored at `1e-8` times the overall variance implied by
/// the statistics (the sample variance when they come from a batch E-step).
pub fn m_step(stats: &SummedStats) -> Result<MStep> {
    let m = stats.m;
    let mut q = vec![0.0; m * m];
    let mut mu = vec![0.0; m];
    let (v, variance_clamped) = m_step_into(m, &stats.to_flat(), &mut q, &mut mu)?;
    Ok(MStep { params: HmmParams::new(q, mu, v)?, variance_clamped })
}

/// M-step on flat statistics, writing `q` and `mu` in place and returning
/// the variance and whether it was clamped.
pub(crate) fn m_step_into(m: usize, flat: &[f64], q: &mut [f64], mu: &mut [f64]) -> Result<(f64, bool)> {
    let mm = m * m;
    let (sq, sg0, sg1, sg2) = (&flat[..mm], &flat[mm..mm + m], &flat[mm + m..mm + 2 * m], &flat[mm + 2 * m..mm + 3 * m]);
    for i in 0..m {
        let row = &sq[i * m..(i + 1) * m];
        let s: f64 = row.iter().sum();
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::degenerate(format!("transition statistics of state {} have no mass", i + 1)));
        }
        for j in 0..m {
            q[i * m + j] = row[j] / s;
        }
        // Push the rounding residue onto the largest entry so the row sums to one.
        let resid = 1.0 - q[i * m..(i + 1) * m].iter().sum::<f64>();
        let jmax = crate::filtering::argmax(&q[i * m..(i + 1) * m]);
        q[i * m + jmax] += resid;
    }
    for i in 0..m {
        if !(sg0[i] > 0.0) || !sg0[i].is_finite() {
            return Err(Error::degenerate(format!("state {} has zero expected occupancy", i + 1)));
        }
        mu[i] = sg1[i] / sg0[i];
    }
    let occ: f64 = sg0.iter().sum();
    let resid: f64 = (0..m).map(|i| sg2[i] - mu[i] * mu[i] * sg0[i]).sum();
    let v_raw = resid / occ;

    let total_mean = sg1.iter().sum::<f64>() / occ;
    let total_var = sg2.iter().sum::<f64>() / occ - total_mean * total_mean;
    let floor = if total_var > 0.0 { VARIANCE_FLOOR_RATIO * total_var } else { 1e-12 };
    let variance_clamped = !(v_raw >= floor);
    let v = if variance_clamped { floor } else { v_raw };
    if !v.is_finite() {
        return Err(Error::degenerate("variance is not finite"));
    }
    Ok((v, variance_clamped))
}

/// One EM iterate and its log-likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct EmRecord {
    pub iter: usize,
    pub params: HmmParams,
    pub loglik: f64,
}

/// Sequence of batch EM iterates, starting with the initial parameter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmTrace {
    pub records: Vec<EmRecord>,
}

impl EmTrace {
    pub fn final_params(&self) -> Option<&HmmParams> {
        self.records.last().map(|r| &r.params)
    }

    /// First iteration whose log-likelihood drops by more than `slack`.
    pub fn first_decrease(&self, slack: f64) -> Option<usize> {
        self.records
            .windows(2)
            .find(|w| w[1].loglik < w[0].loglik - slack)
            .map(|w| w[1].iter)
    }

    /// Largest parameter difference between matching records.
    pub fn max_param_diff(&self, other: &EmTrace) -> f64 {
        self.records
            .iter()
            .zip(&other.records)
            .map(|(a, b)| a.params.max_abs_diff(&b.params))
            .fold(0.0, f64::max)
    }

    /// Writes `iter,loglik,q11,...,qmm,mu1,...,mum,v`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let m = self.records.first().map_or(2, |r| r.params.m());
        let mut header = vec!["iter".to_string(), "loglik".to_string()];
        header.extend(HmmParams::summary_names(m));
        wtr.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![r.iter.to_string(), format_f64(r.loglik)];
            row.extend(r.params.summary_values().into_iter().map(format_f64));
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Runs `iters` EM iterations from `params0`.
///
/// Record `k` holds the parameter after `k` M-steps and its exact
/// log-likelihood, so the trace has `iters + 1` records.
pub fn batch_em_run(params0: &HmmParams, nu: &[f64], ys: &[f64], iters: usize, mode: EStepMode) -> Result<EmTrace> {
    if iters == 0 {
        return Err(Error::precondition("at least one EM iteration is required"));
    }
    let mut params = params0.clone();
    let mut records = Vec::with_capacity(iters + 1);
    for iter in 0..=iters {
        let e = e_step(&params, nu, ys, mode)?;
        records.push(EmRecord { iter, params: params.clone(), loglik: e.loglik });
        if iter < iters {
            params = m_step(&e.stats)?.params;
        }
    }
    Ok(EmTrace { records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{simulate, uniform};

    #[test]
    fn m_step_examples() {
        let stats = SummedStats {
            m: 2,
            sq: vec![3.0, 1.0, 2.0, 2.0],
            sg0: vec![2.0, 1.0],
            sg1: vec![3.0, 0.5],
            sg2: vec![5.0, 1.0],
        };
        let out = m_step(&stats).unwrap();
        assert_eq!(out.params.q_flat(), &[0.75, 0.25, 0.5, 0.5]);
        assert_eq!(out.params.mu()[0], 1.5);

        let one = SummedStats { m: 1, sq: vec![1.0], sg0: vec![2.0], sg1: vec![3.0], sg2: vec![5.0] };
        let out = m_step(&one).unwrap();
        assert!((out.params.v() - 0.25).abs() < 1e-15);
        assert!(!out.variance_clamped);
    }

    #[test]
    fn m_step_degeneracies() {
        let empty_row = SummedStats { m: 2, sq: vec![0.0, 0.0, 1.0, 1.0], sg0: vec![1.0, 1.0], sg1: vec![0.0; 2], sg2: vec![1.0; 2] };
        assert!(matches!(m_step(&empty_row), Err(Error::Degenerate(_))));
        let empty_state = SummedStats { m: 2, sq: vec![1.0; 4], sg0: vec![1.0, 0.0], sg1: vec![0.0; 2], sg2: vec![1.0; 2] };
        assert!(matches!(m_step(&empty_state), Err(Error::Degenerate(_))));
    }

    #[test]
    fn m_step_clamps_variance() {
        // Each state sees a single exact value: zero residual variance.
        let stats = SummedStats { m: 2, sq: vec![1.0; 4], sg0: vec![0.5, 0.5], sg1: vec![0.0, 0.5], sg2: vec![0.0, 0.5] };
        let out = m_step(&stats).unwrap();
        assert!(out.variance_clamped);
        assert!((out.params.v() - 1e-8 * 0.25).abs() < 1e-20);
    }

    #[test]
    fn single_state_statistics() {
        let p = HmmParams::new(vec![1.0], vec![0.4], 0.9).unwrap();
        let ys = [0.5, 1.5, -0.3, 2.0, 0.1];
        let e = e_step_fb(&p, &[1.0], &ys).unwrap();
        let n = ys.len() - 1;
        assert!((e.stats.sq[0] - n as f64 / (n as f64 + 1.0)).abs() < 1e-15);
        assert!((e.stats.sg0[0] - 1.0).abs() < 1e-15);
        let mean = ys.iter().sum::<f64>() / ys.len() as f64;
        assert!((e.stats.sg1[0] - mean).abs() < 1e-15);
    }

    #[test]
    fn uninformative_observations_give_prior_marginals() {
        let p = HmmParams::two_state(0.8, 0.6, 0.3, 0.3, 1.0).unwrap();
        let nu = [0.9, 0.1];
        let ys = [0.1, 2.0, -1.0, 0.5];
        let marg = smoothed_marginals(&p, &nu, &ys).unwrap();
        let mut prior = nu.to_vec();
        for row in &marg {
            assert!((row[0] - prior[0]).abs() < 1e-14);
            prior = vec![prior[0] * 0.8 + prior[1] * 0.4, prior[0] * 0.2 + prior[1] * 0.6];
        }
    }

    #[test]
    fn fb_and_recursive_agree() {
        let p = HmmParams::reference_truth();
        let tr = simulate(&p, 200, &[0.5, 0.5], 4).unwrap();
        let a = e_step_fb(&HmmParams::reference_init(), &uniform(2), &tr.observations).unwrap();
        let b = e_step_recursive(&HmmParams::reference_init(), &uniform(2), &tr.observations).unwrap();
        for (x, y) in a.stats.to_flat().iter().zip(b.stats.to_flat()) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
        assert!((a.loglik - b.loglik).abs() < 1e-9);
        assert!((a.stats.sg0.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn em_is_monotone_and_records_every_iterate() {
        let truth = HmmParams::reference_truth();
        let tr = simulate(&truth, 500, &[6.0 / 7.0, 1.0 / 7.0], 10).unwrap();
        let trace = batch_em_run(&HmmParams::reference_init(), &uniform(2), &tr.observations, 20, EStepMode::ForwardBackward)
            .unwrap();
        assert_eq!(trace.records.len(), 21);
        assert_eq!(trace.records[0].params, HmmParams::reference_init());
        assert_eq!(trace.first_decrease(1e-9), None);
    }

    #[test]
    fn em_from_truth_on_noiseless_data_barely_moves() {
        let truth = HmmParams::two_state(0.9, 0.8, 0.0, 1.0, 1e-4).unwrap();
        let tr = simulate(&truth, 4000, &[2.0 / 3.0, 1.0 / 3.0], 12).unwrap();
        let trace = batch_em_run(&truth, &uniform(2), &tr.observations, 1, EStepMode::ForwardBackward).unwrap();
        let fitted = trace.final_params().unwrap();
        assert!((fitted.mu()[0] - 0.0).abs() < 1e-3);
        assert!((fitted.mu()[1] - 1.0).abs() < 1e-3);
        assert!((fitted.q(0, 0) - 0.9).abs() < 0.03);
    }

    #[test]
    fn trace_csv_header() {
        let trace = EmTrace {
            records: vec![EmRecord { iter: 0, params: HmmParams::reference_init(), loglik: -1.0 }],
        };
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("iter,loglik,q11,q22,mu1,mu2,v\n"));
    }
}

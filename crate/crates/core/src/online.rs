//! Online EM for the Gaussian-noise model.
//!
//! Each observation advances the filter and the per-end-state statistics
//! with the *current* parameter estimate, then (after `n_min` observations)
//! re-estimates the parameter by applying the M-step to the smoothed
//! statistics. Memory use does not depend on the stream length.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::batch::{m_step, m_step_into, SummedStats};
use crate::error::{Error, Result};
use crate::filtering::{filter_init, FilterState, RetroMatrix};
use crate::model::{check_distribution, format_f64, uniform, HmmParams};
use crate::smoothing::{aux_init, summed_stats, tau_step, weighted_rows_into, AuxStats, GaussianNoiseStats, TauStats};

/// Step sizes `gamma_n` of the stochastic approximation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StepSchedule {
    /// `gamma_n = n^(-exponent)`.
    Power { exponent: f64 },
    /// `gamma_n = value` for every `n`. Tracks but does not converge.
    Constant { value: f64 },
}

impl StepSchedule {
    /// Power schedule; the exponent must lie in `(0.5, 1]` so that the steps
    /// are not summable but their squares are.
    pub fn power(exponent: f64) -> Result<Self> {
        let s = StepSchedule::Power { exponent };
        s.validate()?;
        Ok(s)
    }

    pub fn constant(value: f64) -> Result<Self> {
        let s = StepSchedule::Constant { value };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            StepSchedule::Power { exponent } if exponent > 0.5 && exponent <= 1.0 => Ok(()),
            StepSchedule::Power { exponent } => Err(Error::config(format!(
                "power schedule exponent must lie in (0.5, 1], got {exponent}"
            ))),
            StepSchedule::Constant { value } if value > 0.0 && value <= 1.0 => Ok(()),
            StepSchedule::Constant { value } => {
                Err(Error::config(format!("constant step size must lie in (0, 1], got {value}")))
            }
        }
    }

    /// Step size used when absorbing observation `n >= 1`.
    #[inline]
    pub fn gamma(&self, n: usize) -> f64 {
        match *self {
            StepSchedule::Power { exponent } => (n as f64).powf(-exponent),
            StepSchedule::Constant { value } => value,
        }
    }

    /// Whether the schedule satisfies the usual consistency conditions.
    pub fn is_consistent(&self) -> bool {
        matches!(self, StepSchedule::Power { .. })
    }
}

impl Default for StepSchedule {
    fn default() -> Self {
        StepSchedule::Power { exponent: 0.6 }
    }
}

/// Settings of one online EM run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub schedule: StepSchedule,
    /// Observations absorbed before the first parameter update.
    pub n_min: usize,
    /// Polyak-Ruppert averaging of the estimates after this index, if set.
    pub n_avg: Option<usize>,
    pub seed: u64,
    pub theta0: HmmParams,
    pub nu: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schedule: StepSchedule::default(),
            n_min: 20,
            n_avg: None,
            seed: 0,
            theta0: HmmParams::reference_init(),
            nu: uniform(2),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.n_min < 1 {
            return Err(Error::config("n_min must be at least 1"));
        }
        if let Some(a) = self.n_avg {
            if a <= self.n_min {
                return Err(Error::config(format!("n_avg ({a}) must exceed n_min ({})", self.n_min)));
            }
        }
        self.theta0.require_positive_variance()?;
        check_distribution(&self.nu, self.theta0.m())
    }
}

/// Running arithmetic mean of flattened parameters.
#[derive(Debug, Clone, PartialEq, Serialize)]
struct RunningMean {
    count: usize,
    mean: Vec<f64>,
}

impl RunningMean {
    fn new(dim: usize) -> Self {
        RunningMean { count: 0, mean: vec![0.0; dim] }
    }

    fn push(&mut self, params: &HmmParams) {
        self.count += 1;
        let k = self.count as f64;
        let v = params.v();
        let values = params.q_flat().iter().chain(params.mu()).chain(std::iter::once(&v));
        for (m, x) in self.mean.iter_mut().zip(values) {
            *m += (x - *m) / k;
        }
    }

    fn params(&self, m: usize) -> Result<Option<HmmParams>> {
        if self.count == 0 {
            return Ok(None);
        }
        params_from_vec(m, &self.mean).map(Some)
    }
}

/// Rebuilds parameters from `(q, mu, v)` layout, renormalizing rows of `q`
/// whose sum drifted by more than `1e-12`.
fn params_from_vec(m: usize, flat: &[f64]) -> Result<HmmParams> {
    let mut q = flat[..m * m].to_vec();
    for row in q.chunks_mut(m) {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-12 {
            row.iter_mut().for_each(|x| *x /= s);
        }
    }
    HmmParams::new(q, flat[m * m..m * m + m].to_vec(), flat[m * m + m])
}

/// Estimator state after absorbing `Y_{0:n}`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OnlineState {
    pub filter: FilterState,
    pub aux: AuxStats,
    pub theta: HmmParams,
    pub n: usize,
    /// M-steps skipped because the statistics were degenerate.
    pub skips: usize,
    /// M-steps whose variance hit the floor.
    pub variance_clamps: usize,
    #[serde(skip)]
    retro: RetroMatrix,
    average: Option<RunningMean>,
    #[serde(skip)]
    scratch: Scratch,
}

/// Working buffers reused across steps.
#[derive(Debug, Clone, Default)]
struct Scratch {
    aux: Vec<f64>,
    stats: Vec<f64>,
    q: Vec<f64>,
    mu: Vec<f64>,
}

// Buffers carry no state between steps.
impl PartialEq for Scratch {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

/// Starts a run on the first observation.
pub fn online_init(config: &RunConfig, y0: f64) -> Result<OnlineState> {
    config.validate()?;
    let m = config.theta0.m();
    let spec = GaussianNoiseStats::new(m);
    Ok(OnlineState {
        filter: filter_init(&config.theta0, &config.nu, y0)?,
        aux: aux_init(&spec, y0, true),
        theta: config.theta0.clone(),
        n: 0,
        skips: 0,
        variance_clamps: 0,
        retro: RetroMatrix::new(m),
        average: config.n_avg.map(|_| RunningMean::new(m * m + m + 1)),
        scratch: Scratch {
            aux: Vec::new(),
            stats: vec![0.0; m * m + 3 * m],
            q: vec![0.0; m * m],
            mu: vec![0.0; m],
        },
    })
}

impl OnlineState {
    /// Absorbs one observation in place.
    pub fn advance(&mut self, config: &RunConfig, y: f64) -> Result<()> {
        let spec = GaussianNoiseStats::new(self.theta.m());
        let n = self.n;
        let gamma = config.schedule.gamma(n + 1);
        // Filter and statistics both use the estimate before this update.
        self.filter.advance(&self.theta, y, &mut self.retro)?;
        self.aux.advance_with(&self.retro, &spec, y, gamma, &mut self.scratch.aux)?;
        if n >= config.n_min {
            let s = &mut self.scratch;
            weighted_rows_into(&self.aux, &self.filter.phi, &mut s.stats);
            match m_step_into(self.theta.m(), &s.stats, &mut s.q, &mut s.mu) {
                Ok((v, clamped)) => {
                    self.variance_clamps += usize::from(clamped);
                    self.theta.assign(&s.q, &s.mu, v);
                }
                Err(Error::Degenerate(_)) => self.skips += 1,
                Err(e) => return Err(e),
            }
        }
        self.n = n + 1;
        if let (Some(avg), Some(start)) = (self.average.as_mut(), config.n_avg) {
            if self.n > start {
                avg.push(&self.theta);
            }
        }
        Ok(())
    }

    /// Polyak-Ruppert average of the estimates after `n_avg`, once available.
    pub fn avg_theta(&self) -> Option<HmmParams> {
        self.average
            .as_ref()
            .and_then(|a| a.params(self.theta.m()).ok().flatten())
    }

    /// Current smoothed statistics.
    pub fn stats(&self) -> Result<SummedStats> {
        summed_stats(&self.aux, &self.filter)
    }
}

/// Pure form of [`OnlineState::advance`].
pub fn online_step(state: &OnlineState, config: &RunConfig, y: f64) -> Result<OnlineState> {
    let mut next = state.clone();
    next.advance(config, y)?;
    Ok(next)
}

/// Mean of `thetas[i]` over `n_avg < i <= n`, where `n = thetas.len() - 1`.
pub fn polyak_average(thetas: &[HmmParams], n_avg: usize) -> Result<HmmParams> {
    if thetas.len() <= n_avg + 1 {
        return Err(Error::precondition(format!(
            "averaging from {n_avg} needs estimates beyond that index, have {}",
            thetas.len().saturating_sub(1)
        )));
    }
    let m = thetas[0].m();
    let mut avg = RunningMean::new(m * m + m + 1);
    thetas[n_avg + 1..].iter().for_each(|t| avg.push(t));
    Ok(avg.params(m)?.expect("nonempty average"))
}

/// Indices at which a run reports its estimates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Checkpoints {
    /// Every index.
    Dense,
    /// The given indices (plus the initial and final ones).
    At(Vec<usize>),
}

impl Checkpoints {
    /// `start, 2 start, 4 start, ...` up to `max`.
    pub fn geometric(start: usize, max: usize) -> Self {
        let mut v = Vec::new();
        let mut c = start.max(1);
        while c <= max {
            v.push(c);
            c *= 2;
        }
        Checkpoints::At(v)
    }

    fn contains(&self, n: usize) -> bool {
        match self {
            Checkpoints::Dense => true,
            Checkpoints::At(v) => v.binary_search(&n).is_ok(),
        }
    }
}

/// Estimates reported at one index.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateRow {
    pub n: usize,
    pub theta: HmmParams,
    pub avg: Option<HmmParams>,
    pub skips: usize,
}

/// `(n, theta, averaged theta)` as read back from an estimate CSV, each
/// parameter flattened as `q11..qmm, mu1..mum, v`.
pub type SummaryRecord = (usize, Vec<f64>, Option<Vec<f64>>);

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EstimateTrace {
    pub rows: Vec<EstimateRow>,
}

impl EstimateTrace {
    pub fn at(&self, n: usize) -> Option<&EstimateRow> {
        self.rows.iter().find(|r| r.n == n)
    }

    pub fn last(&self) -> Option<&EstimateRow> {
        self.rows.last()
    }

    /// `n,q11,..,v,q11_avg,..,v_avg,skips`; averaged columns are empty
    /// before averaging starts.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let m = self.rows.first().map_or(2, |r| r.theta.m());
        let names = HmmParams::summary_names(m);
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["n".to_string()];
        header.extend(names.iter().cloned());
        header.extend(names.iter().map(|s| format!("{s}_avg")));
        header.push("skips".into());
        wtr.write_record(&header)?;
        for r in &self.rows {
            let mut row = vec![r.n.to_string()];
            row.extend(r.theta.summary_values().into_iter().map(format_f64));
            match &r.avg {
                Some(a) => row.extend(a.summary_values().into_iter().map(format_f64)),
                None => row.extend(names.iter().map(|_| String::new())),
            }
            row.push(r.skips.to_string());
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Reads the summary columns back as `(n, values, averaged values)`.
    pub fn read_summary_csv<R: Read>(r: R) -> Result<Vec<SummaryRecord>> {
        let mut rdr = csv::Reader::from_reader(r);
        let width = rdr.headers()?.len();
        if width < 4 || (width - 2) % 2 != 0 {
            return Err(Error::config("estimate file has an unexpected number of columns"));
        }
        let k = (width - 2) / 2;
        let parse = |s: &str| -> Result<f64> {
            s.trim().parse().map_err(|_| Error::config(format!("bad number `{s}` in estimate file")))
        };
        let mut out = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let n: usize = rec[0].parse().map_err(|_| Error::config("bad index in estimate file"))?;
            let vals = (1..=k).map(|c| parse(&rec[c])).collect::<Result<Vec<_>>>()?;
            let avg = if rec[k + 1].is_empty() {
                None
            } else {
                Some((k + 1..=2 * k).map(|c| parse(&rec[c])).collect::<Result<Vec<_>>>()?)
            };
            out.push((n, vals, avg));
        }
        Ok(out)
    }
}

/// Folds the online recursion over `ys`, reporting at the checkpoints.
pub fn run_online(config: &RunConfig, ys: &[f64], checkpoints: &Checkpoints) -> Result<EstimateTrace> {
    run_online_with_state(config, ys, checkpoints).map(|(trace, _)| trace)
}

/// [`run_online`] that also returns the final estimator state.
pub fn run_online_with_state(config: &RunConfig, ys: &[f64], checkpoints: &Checkpoints) -> Result<(EstimateTrace, OnlineState)> {
    let (&y0, rest) = ys
        .split_first()
        .ok_or_else(|| Error::precondition("the stream must contain at least one observation"))?;
    let mut state = online_init(config, y0)?;
    let row = |s: &OnlineState| EstimateRow { n: s.n, theta: s.theta.clone(), avg: s.avg_theta(), skips: s.skips };
    let mut rows = vec![row(&state)];
    for &y in rest {
        state.advance(config, y)?;
        if checkpoints.contains(state.n) {
            rows.push(row(&state));
        }
    }
    if rows.last().map(|r| r.n) != Some(state.n) {
        rows.push(row(&state));
    }
    Ok((EstimateTrace { rows }, state))
}

/// Online EM driven by the product recursion on `tau = phi rho` instead of
/// `rho`; the M-step is applied to `sum_x tau(x)`. Returns every estimate
/// `theta_0, ..., theta_n`.
pub fn run_online_tau(config: &RunConfig, ys: &[f64]) -> Result<Vec<HmmParams>> {
    config.validate()?;
    let (&y0, rest) = ys
        .split_first()
        .ok_or_else(|| Error::precondition("the stream must contain at least one observation"))?;
    let m = config.theta0.m();
    let spec = GaussianNoiseStats::new(m);
    let mut theta = config.theta0.clone();
    let mut filter = filter_init(&theta, &config.nu, y0)?;
    let mut tau = TauStats::from_parts(&aux_init(&spec, y0, true), &filter.phi);
    let mut retro = RetroMatrix::new(m);
    let mut out = vec![theta.clone()];
    for (n, &y) in rest.iter().enumerate() {
        let gamma = config.schedule.gamma(n + 1);
        tau = tau_step(&tau, &filter, &theta, &spec, y, gamma)?;
        filter.advance(&theta, y, &mut retro)?;
        if n >= config.n_min {
            match m_step(&SummedStats::from_flat(m, &tau.total())?) {
                Ok(o) => theta = o.params,
                Err(Error::Degenerate(_)) => {}
                Err(e) => return Err(e),
            }
        }
        out.push(theta.clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::simulate;

    fn data(n: usize, seed: u64) -> Vec<f64> {
        simulate(&HmmParams::reference_truth(), n, &[6.0 / 7.0, 1.0 / 7.0], seed).unwrap().observations
    }

    #[test]
    fn schedule_admissibility() {
        assert!(StepSchedule::power(0.5).is_err());
        assert!(StepSchedule::power(1.01).is_err());
        assert!(StepSchedule::power(0.6).is_ok());
        assert!(StepSchedule::power(1.0).is_ok());
        assert!(StepSchedule::constant(0.0).is_err());
        let c = StepSchedule::constant(0.01).unwrap();
        assert!(!c.is_consistent());
        assert!(StepSchedule::default().is_consistent());
        assert_eq!(StepSchedule::power(1.0).unwrap().gamma(4), 0.25);
    }

    #[test]
    fn config_validation() {
        let mut c = RunConfig::default();
        assert!(c.validate().is_ok());
        c.n_avg = Some(10);
        assert!(c.validate().is_err());
        c.n_avg = None;
        c.n_min = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn init_examples() {
        let mut c = RunConfig::default();
        let s = online_init(&c, 0.0).unwrap();
        let spec = GaussianNoiseStats::new(2);
        for k in 0..2 {
            assert!(s.aux.row(k)[..4].iter().all(|&v| v == 0.0));
            for i in 0..2 {
                assert_eq!(s.aux.row(k)[spec.g_index(1, i)], 0.0);
                assert_eq!(s.aux.row(k)[spec.g_index(2, i)], 0.0);
            }
        }
        c.nu = vec![1.0, 0.0];
        let s = online_init(&c, 0.7).unwrap();
        assert_eq!(s.filter.phi, vec![1.0, 0.0]);
        assert_eq!(s.n, 0);
    }

    #[test]
    fn parameter_frozen_before_n_min() {
        let c = RunConfig { n_min: 50, ..RunConfig::default() };
        let ys = data(60, 1);
        let mut s = online_init(&c, ys[0]).unwrap();
        for &y in &ys[1..=50] {
            let before = s.theta.clone();
            s.advance(&c, y).unwrap();
            assert_eq!(s.theta, before);
        }
        s.advance(&c, ys[51]).unwrap();
        assert_ne!(s.theta, c.theta0);
    }

    #[test]
    fn unit_constant_step_forgets_old_statistics() {
        let c = RunConfig { schedule: StepSchedule::constant(1.0).unwrap(), n_min: 1, ..RunConfig::default() };
        let ys = data(40, 2);
        let mut a = online_init(&c, ys[0]).unwrap();
        for &y in &ys[1..30] {
            a.advance(&c, y).unwrap();
        }
        let mut b = a.clone();
        b.aux = AuxStats::zeros(2, b.aux.dim());
        a.advance(&c, ys[30]).unwrap();
        b.advance(&c, ys[30]).unwrap();
        assert_eq!(a.theta, b.theta);
    }

    #[test]
    fn parameters_stay_valid() {
        let c = RunConfig::default();
        let ys = data(5000, 3);
        let mut s = online_init(&c, ys[0]).unwrap();
        for &y in &ys[1..] {
            s.advance(&c, y).unwrap();
            for i in 0..2 {
                let r: f64 = s.theta.q_row(i).iter().sum();
                assert!((r - 1.0).abs() < 1e-10);
            }
            assert!(s.theta.v() > 0.0);
        }
    }

    #[test]
    fn state_size_is_constant() {
        let c = RunConfig { n_avg: Some(500), ..RunConfig::default() };
        let ys = data(100_000, 4);
        let mut s = online_init(&c, ys[0]).unwrap();
        let mut sizes = Vec::new();
        for (n, &y) in ys.iter().enumerate().skip(1) {
            s.advance(&c, y).unwrap();
            if n == 1_000 || n == 100_000 {
                sizes.push(serde_json::to_vec(&s).unwrap().len());
            }
        }
        // Only digit counts of the integers and floats may differ.
        assert!(sizes[0].abs_diff(sizes[1]) < 64, "{sizes:?}");
    }

    #[test]
    fn polyak_examples() {
        let a = HmmParams::reference_init();
        let b = HmmParams::reference_truth();
        assert_eq!(polyak_average(&vec![a.clone(); 5], 2).unwrap(), a);
        assert_eq!(polyak_average(&[a.clone(), b.clone()], 0).unwrap(), b);
        assert!(polyak_average(&[a.clone(), b], 1).is_err());
    }

    #[test]
    fn running_average_matches_offline_average() {
        let c = RunConfig { n_avg: Some(100), ..RunConfig::default() };
        let ys = data(400, 5);
        let dense = run_online(&c, &ys, &Checkpoints::Dense).unwrap();
        let thetas: Vec<HmmParams> = dense.rows.iter().map(|r| r.theta.clone()).collect();
        let offline = polyak_average(&thetas, 100).unwrap();
        let online = dense.last().unwrap().avg.clone().unwrap();
        assert!(offline.max_abs_diff(&online) < 1e-12);
        assert!(dense.at(100).unwrap().avg.is_none());
        assert!(dense.at(101).unwrap().avg.is_some());
    }

    #[test]
    fn run_online_edges() {
        let c = RunConfig::default();
        let t = run_online(&c, &[0.3], &Checkpoints::Dense).unwrap();
        assert_eq!(t.rows.len(), 1);
        assert_eq!(t.rows[0].theta, c.theta0);

        let ys = data(3000, 6);
        let cp = Checkpoints::At(vec![500, 2000]);
        let a = run_online(&c, &ys, &cp).unwrap();
        let b = run_online(&c, &ys, &cp).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rows.iter().map(|r| r.n).collect::<Vec<_>>(), vec![0, 500, 2000, 3000]);
    }

    #[test]
    fn tau_driven_run_matches() {
        let c = RunConfig::default();
        let ys = data(3000, 7);
        let dense = run_online(&c, &ys, &Checkpoints::Dense).unwrap();
        let tau = run_online_tau(&c, &ys).unwrap();
        assert_eq!(dense.rows.len(), tau.len());
        for (r, t) in dense.rows.iter().zip(&tau) {
            assert!(r.theta.max_abs_diff(t) < 1e-8, "n = {}", r.n);
        }
    }

    #[test]
    fn trace_csv_round_trip() {
        let c = RunConfig { n_avg: Some(30), ..RunConfig::default() };
        let ys = data(100, 8);
        let t = run_online(&c, &ys, &Checkpoints::At(vec![25, 50])).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("n,q11,q22,mu1,mu2,v,q11_avg,q22_avg,mu1_avg,mu2_avg,v_avg,skips\n"));
        let back = EstimateTrace::read_summary_csv(buf.as_slice()).unwrap();
        assert_eq!(back.len(), t.rows.len());
        for ((n, vals, avg), row) in back.iter().zip(&t.rows) {
            assert_eq!(*n, row.n);
            assert_eq!(vals, &row.theta.summary_values());
            assert_eq!(avg.as_ref(), row.avg.as_ref().map(|a| a.summary_values()).as_ref());
        }
    }
}

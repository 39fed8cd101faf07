//! Replication harness for simulation studies: configuration, per-replicate
//! runs, summaries over replicates and timing.
//!
//! Replicate `i` of a study simulates its trajectory with seed
//! `derive_seed(master_seed, i)`, so any subset of replicates can be rerun on
//! its own.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::batch::{batch_em_run, e_step_fb, e_step_recursive, m_step, smoothed_marginals, EStepMode, EmTrace};
use crate::error::{Error, Result};
use crate::filtering::{argmax, bayes_error_rate};
use crate::model::{format_f64, simulate, stationary_distribution, uniform, HmmParams, Trajectory};
use crate::online::{run_online, Checkpoints, EstimateRow, EstimateTrace, RunConfig, StepSchedule};

/// SplitMix64 finalizer applied to `master ^ mix(index)`.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(master ^ mix(index))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Fixed number of batch EM iterations on each prefix length.
    Batch,
    /// Online EM, raw estimates.
    #[default]
    Online,
    /// Online EM with Polyak-Ruppert averaging.
    OnlineAveraged,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    PaperBatch,
    PaperOnline,
    PaperAveraged,
}

/// Full description of a replication study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub truth: HmmParams,
    pub init: HmmParams,
    pub replications: usize,
    /// Record lengths (number of transitions) at which estimates are reported.
    pub lengths: Vec<usize>,
    pub method: Method,
    pub schedule: StepSchedule,
    pub n_min: usize,
    pub n_avg: Option<usize>,
    pub batch_iters: usize,
    pub seed: u64,
    pub workers: Option<usize>,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            truth: HmmParams::reference_truth(),
            init: HmmParams::reference_init(),
            replications: 20,
            lengths: vec![500, 2000, 8000, 32000, 128000],
            method: Method::Online,
            schedule: StepSchedule::default(),
            n_min: 20,
            n_avg: None,
            batch_iters: 50,
            seed: 1,
            workers: None,
            out_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn preset(p: Preset) -> Self {
        let base = ExperimentConfig::default();
        match p {
            Preset::PaperBatch => ExperimentConfig { method: Method::Batch, ..base },
            Preset::PaperOnline => base,
            Preset::PaperAveraged => ExperimentConfig { method: Method::OnlineAveraged, n_avg: Some(8000), ..base },
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: ExperimentConfig = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications < 1 {
            return Err(Error::config("replications must be at least 1"));
        }
        if self.lengths.is_empty() || self.lengths.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("lengths must be nonempty and strictly increasing"));
        }
        if self.lengths[0] < 1 {
            return Err(Error::config("lengths must be positive"));
        }
        if self.truth.m() != self.init.m() {
            return Err(Error::config("truth and init disagree on the number of states"));
        }
        if self.method == Method::Batch && self.batch_iters < 1 {
            return Err(Error::config("batch_iters must be at least 1"));
        }
        if self.method == Method::OnlineAveraged && self.n_avg.is_none() {
            return Err(Error::config("online-averaged needs n_avg"));
        }
        if self.method != Method::Batch {
            self.run_config(0).validate()?;
        }
        if self.workers == Some(0) {
            return Err(Error::config("workers must be positive"));
        }
        Ok(())
    }

    /// Online settings for replicate `i`.
    pub fn run_config(&self, i: usize) -> RunConfig {
        RunConfig {
            schedule: self.schedule,
            n_min: self.n_min,
            n_avg: if self.method == Method::OnlineAveraged { self.n_avg } else { None },
            seed: self.replicate_seed(i),
            theta0: self.init.clone(),
            nu: uniform(self.init.m()),
        }
    }

    pub fn replicate_seed(&self, i: usize) -> u64 {
        derive_seed(self.seed, i as u64)
    }

    /// Trajectory of replicate `i`, started from the stationary distribution.
    pub fn simulate_replicate(&self, i: usize) -> Result<Trajectory> {
        let pi = stationary_distribution(&self.truth)?;
        simulate(&self.truth, *self.lengths.last().expect("validated"), &pi, self.replicate_seed(i))
    }
}

/// Output of one replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateResult {
    pub index: usize,
    pub seed: u64,
    /// Estimates at each checkpoint (online) or after the final batch
    /// iteration on each prefix (batch).
    pub estimates: EstimateTrace,
    /// Batch EM traces, one per length; empty for online methods.
    pub batch_traces: Vec<(usize, EmTrace)>,
}

pub fn run_replicate(config: &ExperimentConfig, i: usize) -> Result<ReplicateResult> {
    let tr = config.simulate_replicate(i)?;
    let ys = &tr.observations;
    match config.method {
        Method::Batch => {
            let nu = uniform(config.init.m());
            let mut rows = Vec::new();
            let mut traces = Vec::new();
            for &len in &config.lengths {
                let trace = batch_em_run(&config.init, &nu, &ys[..=len], config.batch_iters, EStepMode::ForwardBackward)?;
                rows.push(EstimateRow {
                    n: len,
                    theta: trace.final_params().expect("nonempty trace").clone(),
                    avg: None,
                    skips: 0,
                });
                traces.push((len, trace));
            }
            Ok(ReplicateResult {
                index: i,
                seed: config.replicate_seed(i),
                estimates: EstimateTrace { rows },
                batch_traces: traces,
            })
        }
        Method::Online | Method::OnlineAveraged => {
            let rc = config.run_config(i);
            let estimates = run_online(&rc, ys, &Checkpoints::At(config.lengths.clone()))?;
            Ok(ReplicateResult { index: i, seed: rc.seed, estimates, batch_traces: Vec::new() })
        }
    }
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, 0.5)
}

/// Summary statistics of one parameter at one checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub checkpoint: usize,
    pub parameter: String,
    pub count: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub mean: f64,
    pub sd: f64,
    pub values: Vec<f64>,
}

impl SummaryRow {
    pub fn from_values(checkpoint: usize, parameter: String, values: Vec<f64>) -> Self {
        let mut sorted = values.clone();
        sorted.sort_by(f64::total_cmp);
        let count = values.len();
        let mean = values.iter().sum::<f64>() / count as f64;
        let sd = if count > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (count - 1) as f64).sqrt()
        } else {
            0.0
        };
        SummaryRow {
            checkpoint,
            parameter,
            count,
            median: quantile_sorted(&sorted, 0.5),
            q1: quantile_sorted(&sorted, 0.25),
            q3: quantile_sorted(&sorted, 0.75),
            mean,
            sd,
            values,
        }
    }
}

/// Per-checkpoint, per-parameter summaries across replicates.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReplicationSummary {
    pub rows: Vec<SummaryRow>,
}

impl ReplicationSummary {
    /// Summarizes `(checkpoint, values)` tables, one table per replicate, with
    /// values laid out as `names`.
    pub fn from_tables(names: &[String], checkpoints: &[usize], tables: &[Vec<(usize, Vec<f64>)>]) -> Self {
        let mut rows = Vec::new();
        for &cp in checkpoints {
            for (k, name) in names.iter().enumerate() {
                let values: Vec<f64> = tables
                    .iter()
                    .filter_map(|t| t.iter().find(|(n, _)| *n == cp).map(|(_, v)| v[k]))
                    .collect();
                if !values.is_empty() {
                    rows.push(SummaryRow::from_values(cp, name.clone(), values));
                }
            }
        }
        ReplicationSummary { rows }
    }

    /// Summary of the reported estimates; the averaged method reports the
    /// averaged estimate wherever it exists.
    pub fn from_replicates(config: &ExperimentConfig, reps: &[ReplicateResult]) -> Self {
        let names = HmmParams::summary_names(config.init.m());
        let tables: Vec<Vec<(usize, Vec<f64>)>> = reps
            .iter()
            .map(|r| {
                r.estimates
                    .rows
                    .iter()
                    .map(|row| (row.n, reported(config.method, &row.theta, row.avg.as_ref()).summary_values()))
                    .collect()
            })
            .collect();
        Self::from_tables(&names, &config.lengths, &tables)
    }

    pub fn get(&self, checkpoint: usize, parameter: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.checkpoint == checkpoint && r.parameter == parameter)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["checkpoint", "parameter", "count", "median", "q1", "q3", "mean", "sd"])?;
        for r in &self.rows {
            wtr.write_record([
                r.checkpoint.to_string(),
                r.parameter.clone(),
                r.count.to_string(),
                format_f64(r.median),
                format_f64(r.q1),
                format_f64(r.q3),
                format_f64(r.mean),
                format_f64(r.sd),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

fn reported<'a>(method: Method, raw: &'a HmmParams, avg: Option<&'a HmmParams>) -> &'a HmmParams {
    match (method, avg) {
        (Method::OnlineAveraged, Some(a)) => a,
        _ => raw,
    }
}

/// Median and quartiles of batch EM iterates, keyed by `(length, iter)`.
pub fn batch_iteration_summary(config: &ExperimentConfig, reps: &[ReplicateResult]) -> Vec<(usize, ReplicationSummary)> {
    let names = HmmParams::summary_names(config.init.m());
    let iters: Vec<usize> = (0..=config.batch_iters).collect();
    config
        .lengths
        .iter()
        .map(|&len| {
            let tables: Vec<Vec<(usize, Vec<f64>)>> = reps
                .iter()
                .filter_map(|r| r.batch_traces.iter().find(|(l, _)| *l == len))
                .map(|(_, t)| t.records.iter().map(|rec| (rec.iter, rec.params.summary_values())).collect())
                .collect();
            (len, ReplicationSummary::from_tables(&names, &iters, &tables))
        })
        .collect()
}

/// All replicates of a study, failures kept per replicate.
#[derive(Debug)]
pub struct ExperimentOutcome {
    pub replicates: Vec<Result<ReplicateResult>>,
    pub summary: ReplicationSummary,
}

impl ExperimentOutcome {
    pub fn successes(&self) -> Vec<ReplicateResult> {
        self.replicates.iter().filter_map(|r| r.as_ref().ok().cloned()).collect()
    }

    pub fn failures(&self) -> usize {
        self.replicates.iter().filter(|r| r.is_err()).count()
    }
}

fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        None => Ok(f()),
        Some(w) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(w)
                .build()
                .map_err(|e| Error::config(format!("cannot start worker pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// Runs every replicate (in parallel) and summarizes the successful ones.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    config.validate()?;
    let replicates: Vec<Result<ReplicateResult>> = with_workers(config.workers, || {
        (0..config.replications).into_par_iter().map(|i| run_replicate(config, i)).collect()
    })?;
    let ok: Vec<ReplicateResult> = replicates.iter().filter_map(|r| r.as_ref().ok().cloned()).collect();
    let summary = ReplicationSummary::from_replicates(config, &ok);
    Ok(ExperimentOutcome { replicates, summary })
}

fn write_atomic(path: &Path, write: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    write(&mut buf)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &buf)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn replicate_file_name(i: usize) -> String {
    format!("replicate_{i:04}.csv")
}

/// Writes the configuration, per-replicate estimates, batch traces,
/// failures and the summary into `dir`.
pub fn write_experiment(dir: &Path, config: &ExperimentConfig, outcome: &ExperimentOutcome) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_atomic(&dir.join("config.json"), |b| {
        serde_json::to_writer_pretty(&mut *b, config)?;
        b.push(b'\n');
        Ok(())
    })?;
    let mut failures = Vec::new();
    for (i, rep) in outcome.replicates.iter().enumerate() {
        match rep {
            Ok(r) => {
                write_atomic(&dir.join(replicate_file_name(i)), |b| r.estimates.write_csv(b))?;
                for (len, trace) in &r.batch_traces {
                    write_atomic(&dir.join(format!("replicate_{i:04}_em_n{len}.csv")), |b| trace.write_csv(b))?;
                }
            }
            Err(e) => failures.push(format!("{i},{}", e.to_string().replace(',', ";"))),
        }
    }
    write_atomic(&dir.join("failures.csv"), |b| {
        writeln!(b, "replicate,error")?;
        for f in &failures {
            writeln!(b, "{f}")?;
        }
        Ok(())
    })?;
    write_atomic(&dir.join("summary.csv"), |b| outcome.summary.write_csv(b))?;
    if config.method == Method::Batch {
        for (len, s) in batch_iteration_summary(config, &outcome.successes()) {
            write_atomic(&dir.join(format!("summary_em_iterations_n{len}.csv")), |b| s.write_csv(b))?;
        }
    }
    Ok(())
}

/// Recomputes the summary from the per-replicate files in `dir`.
pub fn summary_from_dir(dir: &Path, config: &ExperimentConfig) -> Result<ReplicationSummary> {
    let names = HmmParams::summary_names(config.init.m());
    let mut tables = Vec::new();
    for i in 0..config.replications {
        let path = dir.join(replicate_file_name(i));
        if !path.exists() {
            continue;
        }
        let rows = EstimateTrace::read_summary_csv(fs::File::open(path)?)?;
        tables.push(
            rows.into_iter()
                .map(|(n, raw, avg)| match (config.method, avg) {
                    (Method::OnlineAveraged, Some(a)) => (n, a),
                    _ => (n, raw),
                })
                .collect(),
        );
    }
    Ok(ReplicationSummary::from_tables(&names, &config.lengths, &tables))
}

/// Best-of-`reps` wall-clock seconds for each estimator on one record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimingReport {
    pub n: usize,
    pub online: f64,
    pub batch_recursive: f64,
    pub batch_fb: f64,
}

fn best_of<T>(reps: usize, mut f: impl FnMut() -> Result<T>) -> Result<f64> {
    let mut best = f64::INFINITY;
    for _ in 0..reps.max(1) {
        let start = Instant::now();
        std::hint::black_box(f()?);
        best = best.min(start.elapsed().as_secs_f64());
    }
    Ok(best)
}

/// Times a full online pass and one iteration of each batch EM variant.
pub fn time_methods(truth: &HmmParams, init: &HmmParams, n: usize, reps: usize, seed: u64) -> Result<TimingReport> {
    let pi = stationary_distribution(truth)?;
    let ys = simulate(truth, n, &pi, seed)?.observations;
    let nu = uniform(init.m());
    let rc = RunConfig { theta0: init.clone(), nu: nu.clone(), ..RunConfig::default() };
    let online = best_of(reps, || run_online(&rc, &ys, &Checkpoints::At(Vec::new())))?;
    let batch_recursive = best_of(reps, || m_step(&e_step_recursive(init, &nu, &ys)?.stats))?;
    let batch_fb = best_of(reps, || m_step(&e_step_fb(init, &nu, &ys)?.stats))?;
    Ok(TimingReport { n, online, batch_recursive, batch_fb })
}

/// Misclassification rates of the Bayes decision under the true parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BayesReport {
    pub n: usize,
    /// Argmax of the causal filter.
    pub filtered: f64,
    /// Argmax of the smoothed marginals.
    pub smoothed: f64,
}

pub fn bayes_error_report(truth: &HmmParams, n: usize, seed: u64) -> Result<BayesReport> {
    let pi = stationary_distribution(truth)?;
    let tr = simulate(truth, n, &pi, seed)?;
    let filtered = bayes_error_rate(truth, &tr)?;
    let marg = smoothed_marginals(truth, &uniform(truth.m()), &tr.observations)?;
    let wrong = marg.iter().zip(&tr.states).filter(|(p, &x)| argmax(p) != x).count();
    Ok(BayesReport { n, filtered, smoothed: wrong as f64 / tr.len() as f64 })
}

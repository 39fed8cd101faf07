//! `oemhmm`: simulation, estimation runs and replication studies for hidden
//! Markov models observed in Gaussian noise.

use std::fs::{self, File};
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use oemhmm_core::analysis::{fisher_information, forgetting_random_trials, perturbation_random_trials};
use oemhmm_core::batch::{batch_em_run, EStepMode};
use oemhmm_core::experiment::{
    bayes_error_report, derive_seed, run_experiment, time_methods, write_experiment, ExperimentConfig, Preset,
};
use oemhmm_core::filtering::loglikelihood;
use oemhmm_core::model::{format_f64, simulate, stationary_distribution, uniform, HmmParams, Trajectory};
use oemhmm_core::online::{run_online_with_state, Checkpoints, StepSchedule};
use oemhmm_core::{Error, Result};

#[derive(Parser)]
#[command(name = "oemhmm", version, about = "Online and batch EM for HMMs in Gaussian noise")]
struct Cli {
    #[command(flatten)]
    common: Common,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON); missing fields take their defaults
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Built-in configuration, applied when no --config is given
    #[arg(long, global = true, value_enum)]
    preset: Option<PresetArg>,

    /// Master seed
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[arg(long, global = true)]
    replications: Option<usize>,

    /// Worker threads for replication-level parallelism
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
#[allow(clippy::enum_variant_names)]
enum PresetArg {
    PaperBatch,
    PaperOnline,
    PaperAveraged,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::PaperBatch => Preset::PaperBatch,
            PresetArg::PaperOnline => Preset::PaperOnline,
            PresetArg::PaperAveraged => Preset::PaperAveraged,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Fb,
    Recursive,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one trajectory per replication from the true parameter
    Simulate {
        /// Number of transitions (defaults to the largest configured length)
        #[arg(long)]
        n: Option<usize>,
    },
    /// Log-likelihood of a trajectory file
    Loglik {
        #[arg(long)]
        data: PathBuf,
        /// Parameter JSON; defaults to the configured truth
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Batch EM from the configured initial value
    BatchEm {
        /// Trajectory file; simulates replication 0 when absent
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long, value_enum, default_value = "fb")]
        mode: ModeArg,
    },
    /// Online EM over a single record
    OnlineEm {
        /// Trajectory file; simulates replication 0 when absent
        #[arg(long)]
        data: Option<PathBuf>,
        /// Step sizes n^-exponent
        #[arg(long)]
        gamma_exponent: Option<f64>,
        #[arg(long)]
        n_avg: Option<usize>,
    },
    /// Replication study writing per-replicate estimates and a summary
    Experiment,
    /// Wall-clock times of online EM and one iteration of each batch E-step
    Timing {
        #[arg(long, default_value_t = 10_000)]
        n: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
    },
    /// Misclassification rate of the Bayes classifier under the truth
    BayesError {
        #[arg(long, default_value_t = 1_000_000)]
        n: usize,
    },
    /// Monte Carlo Fisher information at the truth
    Fisher {
        #[arg(long, default_value_t = 20)]
        sequences: usize,
        #[arg(long, default_value_t = 100_000)]
        length: usize,
    },
    /// Randomized checks of the forgetting inequalities
    CheckBounds {
        #[arg(long, default_value_t = 100_000)]
        draws: usize,
        /// Most transitions in a record for the path-enumeration check
        #[arg(long, default_value_t = 8)]
        max_n: usize,
    },
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut config = match (&c.config, c.preset) {
        (Some(path), _) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            ExperimentConfig::from_json(&text)?
        }
        (None, Some(p)) => ExperimentConfig::preset(p.into()),
        (None, None) => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        config.seed = s;
    }
    if let Some(r) = c.replications {
        config.replications = r;
    }
    if c.workers.is_some() {
        config.workers = c.workers;
    }
    if let Some(o) = &c.out {
        config.out_dir = o.clone();
    }
    config.validate()?;
    Ok(config)
}

fn read_trajectory(path: &Path) -> Result<Trajectory> {
    Trajectory::read_csv(BufReader::new(File::open(path)?))
}

fn observations(config: &ExperimentConfig, data: Option<&Path>) -> Result<Vec<f64>> {
    match data {
        Some(p) => Ok(read_trajectory(p)?.observations),
        None => Ok(config.simulate_replicate(0)?.observations),
    }
}

fn create(dir: &Path, name: &str) -> Result<File> {
    fs::create_dir_all(dir)?;
    Ok(File::create(dir.join(name))?)
}

fn print_json(v: &serde_json::Value) -> Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, v)?;
    writeln!(out)?;
    Ok(())
}

/// Returns `false` when a check ran to completion but found violations.
fn run(cli: Cli) -> Result<bool> {
    let config = load_config(&cli.common)?;
    let out = config.out_dir.clone();
    match cli.command {
        Command::Simulate { n } => {
            let n = n.unwrap_or(*config.lengths.last().expect("validated"));
            let pi = stationary_distribution(&config.truth)?;
            for i in 0..config.replications {
                let tr = simulate(&config.truth, n, &pi, config.replicate_seed(i))?;
                tr.write_csv(create(&out, &format!("trajectory_{i:04}.csv"))?)?;
            }
            info!("wrote {} trajectories to {}", config.replications, out.display());
        }
        Command::Loglik { data, params } => {
            let params = match params {
                Some(p) => serde_json::from_str::<HmmParams>(&fs::read_to_string(p)?)?,
                None => config.truth.clone(),
            };
            let ys = read_trajectory(&data)?.observations;
            let ll = loglikelihood(&params, &uniform(params.m()), &ys)?;
            print_json(&serde_json::json!({ "observations": ys.len(), "loglik": ll }))?;
        }
        Command::BatchEm { data, iters, mode } => {
            let ys = observations(&config, data.as_deref())?;
            let mode = match mode {
                ModeArg::Fb => EStepMode::ForwardBackward,
                ModeArg::Recursive => EStepMode::Recursive,
            };
            let trace = batch_em_run(&config.init, &uniform(config.init.m()), &ys, iters.unwrap_or(config.batch_iters), mode)?;
            trace.write_csv(create(&out, "batch_em.csv")?)?;
            let last = trace.records.last().expect("nonempty trace");
            print_json(&serde_json::json!({ "iterations": last.iter, "loglik": last.loglik, "params": last.params }))?;
        }
        Command::OnlineEm { data, gamma_exponent, n_avg } => {
            let ys = observations(&config, data.as_deref())?;
            let mut rc = config.run_config(0);
            if let Some(e) = gamma_exponent {
                rc.schedule = StepSchedule::power(e)?;
            }
            if n_avg.is_some() {
                rc.n_avg = n_avg;
            }
            rc.validate()?;
            let checkpoints = Checkpoints::geometric(rc.n_min.max(1), ys.len().saturating_sub(1));
            let (trace, state) = run_online_with_state(&rc, &ys, &checkpoints)?;
            trace.write_csv(create(&out, "online_em.csv")?)?;
            let last = trace.last().expect("nonempty trace");
            print_json(&serde_json::json!({
                "n": last.n,
                "params": last.theta,
                "averaged": last.avg,
                "skips": last.skips,
                "variance_clamps": state.variance_clamps,
                // spread of the per-end-state accumulators; small when their limit does not depend on the end state
                "aux_row_spread": state.aux.row_spread(),
            }))?;
        }
        Command::Experiment => {
            let outcome = run_experiment(&config)?;
            write_experiment(&out, &config, &outcome)?;
            let failed = outcome.failures();
            info!("{} of {} replications succeeded", config.replications - failed, config.replications);
            if failed == config.replications {
                return Err(Error::Degenerate(format!("all {failed} replications failed")));
            }
            let mut stdout = io::stdout().lock();
            writeln!(stdout, "checkpoint,parameter,count,median,q1,q3")?;
            for r in &outcome.summary.rows {
                writeln!(
                    stdout,
                    "{},{},{},{},{},{}",
                    r.checkpoint,
                    r.parameter,
                    r.count,
                    format_f64(r.median),
                    format_f64(r.q1),
                    format_f64(r.q3)
                )?;
            }
        }
        Command::Timing { n, reps } => {
            let t = time_methods(&config.truth, &config.init, n, reps, config.seed)?;
            let mut stdout = io::stdout().lock();
            writeln!(stdout, "method,seconds")?;
            writeln!(stdout, "online,{:.6}", t.online)?;
            writeln!(stdout, "batch-recursive,{:.6}", t.batch_recursive)?;
            writeln!(stdout, "batch-fb,{:.6}", t.batch_fb)?;
        }
        Command::BayesError { n } => {
            let r = bayes_error_report(&config.truth, n, config.seed)?;
            print_json(&serde_json::to_value(r)?)?;
        }
        Command::Fisher { sequences, length } => {
            let f = fisher_information(&config.truth, sequences, length, config.seed)?;
            f.write_matrix_csv(create(&out, "fisher.csv")?)?;
            print_json(&f.summary_json())?;
        }
        Command::CheckBounds { draws, max_n } => {
            let mut violations = 0;
            let mut reports = Vec::new();
            for (k, m) in [2usize, 3, 5].into_iter().enumerate() {
                for (l, eps) in [0.05, 0.2, 1.0 / m as f64].into_iter().enumerate() {
                    let r = perturbation_random_trials(m, eps, draws / 9 + 1, derive_seed(config.seed, (3 * k + l) as u64))?;
                    violations += r.violations;
                    reports.push(serde_json::json!({ "check": "perturbation", "m": m, "epsilon": eps, "summary": r }));
                }
            }
            let r = forgetting_random_trials(2, max_n + 1, 200, derive_seed(config.seed, 100))?;
            violations += r.violations;
            reports.push(serde_json::json!({ "check": "two-sided", "m": 2, "max_n": max_n, "summary": r }));
            print_json(&serde_json::Value::Array(reports))?;
            if violations > 0 {
                eprintln!("{violations} bound violations");
                return Ok(false);
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

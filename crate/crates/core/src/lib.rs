//! Online and batch Expectation-Maximization for finite-state hidden Markov
//! models observed in Gaussian noise.
//!
//! The crate is organized bottom-up:
//!
//! * [`model`]: parameters, Gaussian kernels, simulation;
//! * [`filtering`]: normalized forward filter, retrospective probabilities,
//!   log-likelihood and Bayes classification;
//! * [`smoothing`]: recursive smoothing of sum functionals, generic over the
//!   complete-data statistic;
//! * [`batch`]: forward-backward and recursive E-steps, the M-step and batch EM;
//! * [`online`]: the online EM recursion with step-size schedules and
//!   Polyak-Ruppert averaging;
//! * [`analysis`]: Fisher-identity score, Monte Carlo Fisher information and
//!   forgetting-bound checks;
//! * [`experiment`]: replication harness, summaries and timing used by the CLI.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod analysis;
pub mod batch;
pub mod error;
pub mod experiment;
pub mod filtering;
pub mod model;
pub mod online;
pub mod smoothing;

pub use batch::{batch_em_run, e_step_fb, e_step_recursive, m_step, EStepMode, EmTrace, SummedStats};
pub use error::{Error, Result};
pub use filtering::{bayes_error_rate, filter_init, filter_step, loglikelihood, FilterState, RetroMatrix};
pub use model::{emission_weights, random_params, simulate, stationary_distribution, uniform, HmmParams, Trajectory};
pub use online::{run_online, Checkpoints, EstimateTrace, OnlineState, RunConfig, StepSchedule};
pub use smoothing::{aux_init, aux_step, summed_stats, tau_step, AuxStats, GaussianNoiseStats, SufficientStatistic, TauStats};

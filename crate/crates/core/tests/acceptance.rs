//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure.

mod common;

use std::cell::RefCell;
use std::process::ExitCode;
use std::time::Instant;

use common::{blockwise_rel_err, enumerate, fd_score, random_instance};
use oemhmm_core::analysis::{
    center_and_scale, fisher_information, forgetting_random_trials, perturbation_random_trials, score, ScoreForm,
};
use oemhmm_core::batch::{batch_em_run, e_step_fb, e_step_recursive, EStepMode, EmTrace};
use oemhmm_core::experiment::{
    batch_iteration_summary, median, run_experiment, time_methods, ExperimentConfig, Method, ReplicateResult,
};
use oemhmm_core::{
    aux_init, aux_step, bayes_error_rate, filter_init, filter_step, loglikelihood, simulate, stationary_distribution,
    tau_step, GaussianNoiseStats, HmmParams, StepSchedule, TauStats,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<(bool, String), String>;
type Criterion = (usize, &'static str, fn() -> Outcome);

thread_local! {
    /// (runs checked, runs with a decrease) over every batch EM run in the suite.
    static MONOTONE: RefCell<(usize, usize)> = const { RefCell::new((0, 0)) };
}

fn record_monotonicity(trace: &EmTrace) {
    MONOTONE.with(|c| {
        let mut c = c.borrow_mut();
        c.0 += 1;
        c.1 += usize::from(trace.first_decrease(1e-9).is_some());
    });
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn bayes_error() -> Outcome {
    let truth = HmmParams::reference_truth();
    let pi = stationary_distribution(&truth).map_err(e)?;
    let tr = simulate(&truth, 1_000_000, &pi, 2024).map_err(e)?;
    let rate = bayes_error_rate(&truth, &tr).map_err(e)?;
    Ok(((0.096..=0.110).contains(&rate), format!("error rate {rate:.4} (want [0.096, 0.110])")))
}

fn tau_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for k in 0..20 {
        let m = 2 + k % 2;
        let (params, nu) = random_instance(&mut rng, m);
        let spec = GaussianNoiseStats::new(m);
        let ys = simulate(&params, 2000, &nu, rng.random()).map_err(e)?.observations;
        let mut filter = filter_init(&params, &nu, ys[0]).map_err(e)?;
        let mut aux = aux_init(&spec, ys[0], true);
        let mut tau = TauStats::from_parts(&aux, &filter.phi);
        for (n, &y) in ys.iter().enumerate().skip(1) {
            let gamma = (n as f64).powf(-0.6);
            tau = tau_step(&tau, &filter, &params, &spec, y, gamma).map_err(e)?;
            let (next, retro) = filter_step(&filter, &params, y).map_err(e)?;
            aux = aux_step(&aux, &retro, &spec, y, gamma).map_err(e)?;
            filter = next;
            let prod = TauStats::from_parts(&aux, &filter.phi);
            for (a, b) in prod.entries().iter().zip(tau.entries()) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    Ok((worst < 1e-10, format!("max |tau - phi rho| = {worst:.2e} (want < 1e-10)")))
}

fn recursive_fb_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut stat_err: f64 = 0.0;
    let mut trace_err: f64 = 0.0;
    for k in 0..10 {
        let m = 2 + k % 2;
        let (truth, nu) = random_instance(&mut rng, m);
        let (start, _) = random_instance(&mut rng, m);
        for n in [50, 500] {
            let ys = simulate(&truth, n, &nu, rng.random()).map_err(e)?.observations;
            let a = e_step_fb(&start, &nu, &ys).map_err(e)?;
            let b = e_step_recursive(&start, &nu, &ys).map_err(e)?;
            stat_err = stat_err.max(blockwise_rel_err(m, &b.stats.to_flat(), &a.stats.to_flat()));
            let ta = batch_em_run(&start, &nu, &ys, 50, EStepMode::ForwardBackward).map_err(e)?;
            let tb = batch_em_run(&start, &nu, &ys, 50, EStepMode::Recursive).map_err(e)?;
            record_monotonicity(&ta);
            record_monotonicity(&tb);
            trace_err = trace_err.max(ta.max_param_diff(&tb));
        }
    }
    Ok((
        stat_err < 1e-9 && trace_err < 1e-8,
        format!("statistics rel err {stat_err:.2e} (want < 1e-9), trace diff {trace_err:.2e} (want < 1e-8)"),
    ))
}

fn em_monotone_random() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for k in 0..20 {
        let m = 2 + k % 3;
        let (truth, nu) = random_instance(&mut rng, m);
        let (start, _) = random_instance(&mut rng, m);
        let ys = simulate(&truth, 1000, &nu, rng.random()).map_err(e)?.observations;
        record_monotonicity(&batch_em_run(&start, &nu, &ys, 50, EStepMode::ForwardBackward).map_err(e)?);
    }
    Ok(())
}

fn path_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut ll_err: f64 = 0.0;
    let mut stat_err: f64 = 0.0;
    for _ in 0..50 {
        let m = rng.random_range(1..=3);
        let n = rng.random_range(1..=8);
        let (params, nu) = random_instance(&mut rng, m);
        let ys = simulate(&params, n, &nu, rng.random()).map_err(e)?.observations;
        let exact = enumerate(&params, &nu, &ys);
        let ll = loglikelihood(&params, &nu, &ys).map_err(e)?;
        ll_err = ll_err.max((ll - exact.loglik).abs() / exact.loglik.abs().max(1.0));
        for s in [e_step_fb(&params, &nu, &ys).map_err(e)?, e_step_recursive(&params, &nu, &ys).map_err(e)?] {
            ll_err = ll_err.max((s.loglik - exact.loglik).abs() / exact.loglik.abs().max(1.0));
            stat_err = stat_err.max(blockwise_rel_err(m, &s.stats.to_flat(), &exact.stats));
        }
    }
    Ok((
        ll_err < 1e-10 && stat_err < 1e-10,
        format!("loglik rel err {ll_err:.2e}, statistics rel err {stat_err:.2e} (want < 1e-10)"),
    ))
}

fn score_fd() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for k in 0..20 {
        let m = 2 + k % 2;
        let (params, nu) = random_instance(&mut rng, m);
        let ys = simulate(&params, 1000, &nu, rng.random()).map_err(e)?.observations;
        let exact = score(&params, &nu, &ys, ScoreForm::Exact).map_err(e)?.to_vec();
        let fd = fd_score(&params, &nu, &ys, 1e-5);
        for (a, b) in exact.iter().zip(&fd) {
            worst = worst.max((a - b).abs() / b.abs());
        }
    }
    Ok((worst < 1e-4, format!("max component rel err {worst:.2e} (want < 1e-4)")))
}

fn forgetting_bounds() -> Outcome {
    let mut draws = 0;
    let mut violations = 0;
    let mut k = 0u64;
    for m in [2usize, 3, 5] {
        for eps in [0.05, 0.2, 1.0 / m as f64] {
            let per = if k == 0 { 100_000 - 8 * (100_000 / 9) } else { 100_000 / 9 };
            let r = perturbation_random_trials(m, eps, per, 70 + k).map_err(e)?;
            draws += r.draws;
            violations += r.violations;
            k += 1;
        }
    }
    let c = forgetting_random_trials(2, 9, 300, 77).map_err(e)?;
    Ok((
        violations == 0 && c.violations == 0,
        format!(
            "perturbation: {violations} violations in {draws} draws; two-sided: {} violations in {} checks (max ratio {:.3})",
            c.violations, c.draws, c.max_ratio
        ),
    ))
}

fn limiting_em() -> Outcome {
    let config = ExperimentConfig {
        replications: 20,
        lengths: vec![500, 8000],
        method: Method::Batch,
        batch_iters: 50,
        seed: 8,
        ..ExperimentConfig::default()
    };
    let out = run_experiment(&config).map_err(e)?;
    let reps: Vec<ReplicateResult> = out.successes();
    for r in &reps {
        r.batch_traces.iter().for_each(|(_, t)| record_monotonicity(t));
    }
    let summaries = batch_iteration_summary(&config, &reps);
    let mut sup: f64 = 0.0;
    for name in ["q11", "mu1"] {
        for it in 0..=config.batch_iters {
            let a = summaries[0].1.get(it, name).ok_or("missing summary")?.median;
            let b = summaries[1].1.get(it, name).ok_or("missing summary")?.median;
            sup = sup.max((a - b).abs());
        }
    }
    Ok((
        sup < 0.05 && out.failures() == 0,
        format!("sup |median(n=500) - median(n=8000)| over q11, mu1 = {sup:.4} (want < 0.05), {} replicates", reps.len()),
    ))
}

fn online_errors(exponent: f64) -> Result<(f64, f64), String> {
    let config = ExperimentConfig {
        replications: 20,
        lengths: vec![32000],
        method: Method::Online,
        schedule: StepSchedule::power(exponent).map_err(e)?,
        seed: 9,
        ..ExperimentConfig::default()
    };
    let reps = run_experiment(&config).map_err(e)?.successes();
    if reps.len() != 20 {
        return Err(format!("{} of 20 replicates failed", 20 - reps.len()));
    }
    let at = |r: &ReplicateResult| r.estimates.at(32000).map(|row| row.theta.clone()).ok_or("missing checkpoint");
    let mut mu2 = Vec::new();
    let mut v = Vec::new();
    for r in &reps {
        let t = at(r)?;
        mu2.push((t.mu()[1] - 1.0).abs());
        v.push((t.v() - 0.5).abs());
    }
    Ok((median(&mu2), median(&v)))
}

fn online_ordering() -> Outcome {
    let (mu_a, v_a) = online_errors(0.6)?;
    let (mu_b, v_b) = online_errors(1.0)?;
    Ok((
        mu_a < mu_b && v_a < v_b && mu_a < 0.15 && v_a < 0.1,
        format!("median |mu2 err|: {mu_a:.4} (n^-0.6) vs {mu_b:.4} (n^-1); median |v err|: {v_a:.4} vs {v_b:.4}"),
    ))
}

fn averaging_efficiency() -> Outcome {
    let truth = HmmParams::reference_truth();
    let fisher = fisher_information(&truth, 20, 100_000, 10).map_err(e)?;
    let config = ExperimentConfig {
        replications: 20,
        lengths: vec![128_000],
        method: Method::OnlineAveraged,
        n_avg: Some(8000),
        seed: 10,
        ..ExperimentConfig::default()
    };
    let reps = run_experiment(&config).map_err(e)?.successes();
    let names = HmmParams::summary_names(2);
    let idx = |n: &str| names.iter().position(|x| x == n).expect("known name");
    let mut cols = vec![Vec::new(); names.len()];
    for r in &reps {
        let scaled = center_and_scale(&r.estimates, &truth, &fisher).map_err(e)?;
        let row = scaled.iter().find(|s| s.n == 128_000).ok_or("missing checkpoint")?;
        let avg = row.avg.as_ref().ok_or("missing average")?;
        for (c, v) in cols.iter_mut().zip(avg) {
            c.push(*v);
        }
    }
    let sd = |v: &[f64]| {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
    };
    let sd_mu1 = sd(&cols[idx("mu1")]);
    let sd_v = sd(&cols[idx("v")]);
    let q11 = &cols[idx("q11")];
    let q11_mean = q11.iter().sum::<f64>() / q11.len() as f64;
    Ok((
        (0.6..=1.6).contains(&sd_mu1) && (0.6..=1.6).contains(&sd_v) && reps.len() == 20,
        format!(
            "scaled SD mu1 {sd_mu1:.3}, v {sd_v:.3} (want [0.6, 1.6]); q11 scaled mean {q11_mean:.3}, SD {:.3} (reported only)",
            sd(q11)
        ),
    ))
}

fn timing_ordering() -> Outcome {
    let t = time_methods(&HmmParams::reference_truth(), &HmmParams::reference_init(), 10_000, 5, 11).map_err(e)?;
    Ok((
        t.batch_fb < t.batch_recursive && t.online <= 3.0 * t.batch_recursive,
        format!(
            "online {:.4}s, batch-recursive {:.4}s, batch-fb {:.4}s (want fb < recursive, online <= 3x recursive)",
            t.online, t.batch_recursive, t.batch_fb
        ),
    ))
}

fn em_monotonicity() -> Outcome {
    em_monotone_random()?;
    let (runs, bad) = MONOTONE.with(|c| *c.borrow());
    Ok((bad == 0 && runs > 0, format!("{bad} of {runs} batch EM runs decreased the log-likelihood (slack 1e-9)")))
}

fn main() -> ExitCode {
    // Criterion 4 aggregates the batch runs of criteria 3 and 8, so it runs last.
    let criteria: [Criterion; 11] = [
        (1, "Bayes misclassification", bayes_error),
        (2, "tau equals phi times rho", tau_equivalence),
        (3, "recursive and forward-backward E-steps agree", recursive_fb_equivalence),
        (5, "path-enumeration oracle", path_oracle),
        (6, "score matches finite differences", score_fd),
        (7, "forgetting bounds", forgetting_bounds),
        (8, "limiting EM coincidence", limiting_em),
        (9, "online step-size ordering", online_ordering),
        (10, "averaging efficiency", averaging_efficiency),
        (11, "timing ordering", timing_ordering),
        (4, "EM monotonicity", em_monotonicity),
    ];
    let mut failed = 0;
    for (id, name, f) in criteria {
        let start = Instant::now();
        let (pass, detail) = match f() {
            Ok(r) => r,
            Err(msg) => (false, format!("error: {msg}")),
        };
        failed += usize::from(!pass);
        println!(
            "criterion {id:>2} {}: {name}: {detail} [{:.1}s]",
            if pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        println!("all criteria passed");
        ExitCode::SUCCESS
    }
}

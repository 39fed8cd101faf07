//! Brute-force references shared by the integration suites.
#![allow(dead_code)]

use oemhmm_core::{loglikelihood, HmmParams};
use rand::Rng;

pub struct Enumerated {
    pub loglik: f64,
    /// `sq, sg0, sg1, sg2` flattened, each summed over the record and divided
    /// by its length.
    pub stats: Vec<f64>,
}

fn gauss(y: f64, mu: f64, v: f64) -> f64 {
    (-(y - mu) * (y - mu) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt()
}

/// Exact posterior expectations by summing over every state path.
pub fn enumerate(params: &HmmParams, nu: &[f64], ys: &[f64]) -> Enumerated {
    let m = params.m();
    let len = ys.len();
    let dim = m * m + 3 * m;
    let mut total = 0.0;
    let mut acc = vec![0.0; dim];
    let mut path = vec![0usize; len];
    for code in 0..m.pow(len as u32) {
        let mut c = code;
        for s in path.iter_mut() {
            *s = c % m;
            c /= m;
        }
        let mut w = nu[path[0]] * gauss(ys[0], params.mu()[path[0]], params.v());
        for t in 1..len {
            w *= params.q(path[t - 1], path[t]) * gauss(ys[t], params.mu()[path[t]], params.v());
        }
        total += w;
        for t in 0..len {
            let x = path[t];
            if t > 0 {
                acc[path[t - 1] * m + x] += w;
            }
            acc[m * m + x] += w;
            acc[m * m + m + x] += w * ys[t];
            acc[m * m + 2 * m + x] += w * ys[t] * ys[t];
        }
    }
    let stats = acc.iter().map(|a| a / total / len as f64).collect();
    Enumerated { loglik: total.ln(), stats }
}

/// Random model with transition entries at least 0.05, plus an initial law.
pub fn random_instance<R: Rng>(rng: &mut R, m: usize) -> (HmmParams, Vec<f64>) {
    let params = oemhmm_core::random_params(rng, m, 0.05);
    let mut nu: Vec<f64> = (0..m).map(|_| rng.random_range(0.1..1.0)).collect();
    let s: f64 = nu.iter().sum();
    nu.iter_mut().for_each(|v| *v /= s);
    (params, nu)
}

/// Rebuilds a model from the free coordinates `q(i, 1..m-1), mu, v`.
pub fn from_free(m: usize, free: &[f64]) -> HmmParams {
    let mut q = Vec::with_capacity(m * m);
    for i in 0..m {
        let row = &free[i * (m - 1)..(i + 1) * (m - 1)];
        q.extend_from_slice(row);
        q.push(1.0 - row.iter().sum::<f64>());
    }
    let off = m * (m - 1);
    HmmParams::new(q, free[off..off + m].to_vec(), free[off + m]).unwrap()
}

pub fn to_free(p: &HmmParams) -> Vec<f64> {
    let m = p.m();
    let mut out = Vec::new();
    for i in 0..m {
        out.extend_from_slice(&p.q_row(i)[..m - 1]);
    }
    out.extend_from_slice(p.mu());
    out.push(p.v());
    out
}

/// Central differences of the log-likelihood per observation in the free
/// coordinates.
pub fn fd_score(params: &HmmParams, nu: &[f64], ys: &[f64], h: f64) -> Vec<f64> {
    let x = to_free(params);
    let f = |z: &[f64]| loglikelihood(&from_free(params.m(), z), nu, ys).unwrap() / ys.len() as f64;
    (0..x.len())
        .map(|k| {
            let mut up = x.clone();
            let mut dn = x.clone();
            up[k] += h;
            dn[k] -= h;
            (f(&up) - f(&dn)) / (2.0 * h)
        })
        .collect()
}

/// Largest entry-wise error, each block measured relative to its sup norm.
pub fn blockwise_rel_err(m: usize, a: &[f64], b: &[f64]) -> f64 {
    let mm = m * m;
    let blocks = [(0, mm), (mm, mm + m), (mm + m, mm + 2 * m), (mm + 2 * m, mm + 3 * m)];
    blocks
        .iter()
        .map(|&(lo, hi)| {
            let scale = b[lo..hi].iter().fold(0.0f64, |s, v| s.max(v.abs())).max(f64::MIN_POSITIVE);
            (lo..hi).map(|k| (a[k] - b[k]).abs() / scale).fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}

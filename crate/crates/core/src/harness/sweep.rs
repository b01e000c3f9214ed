//! Parameter sweeps. Points run concurrently and are collected in input
//! order, so reports do not depend on the thread count.

use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;

use super::report::{ScanTiming, SweepReport};
use super::{finish, load_weights, prepare, run_pipeline_with, ScenarioConfig};
use crate::error::{invalid, Result};
use crate::rng;
use crate::serialization::OrderingMode;
use crate::ssm::{fssm_scan, scan_flops, SsmParams};
use crate::tensor::Matrix;

pub const DEFAULT_KS: [usize; 6] = [128, 256, 512, 1024, 2048, 4096];
pub const DEFAULT_POS_NOISE: [f64; 6] = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];
/// Rotational noise that accompanies each meter of positional noise.
pub const ROT_PER_POS: f64 = std::f64::consts::PI / 180.0;
pub const DEFAULT_SCAN_NS: [usize; 7] = [1024, 2048, 4096, 8192, 16384, 32768, 65536];

fn run_all(kind: &str, configs: Vec<ScenarioConfig>) -> Result<SweepReport> {
    let Some(first) = configs.first() else {
        return Ok(SweepReport { kind: kind.into(), runs: Vec::new() });
    };
    let weights = load_weights(first)?;
    let prepared = prepare(first, &weights)?;
    let runs = configs
        .par_iter()
        .map(|c| if prepared.matches(c) { finish(c, &weights, &prepared) } else { run_pipeline_with(c, &weights) })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepReport { kind: kind.into(), runs })
}

pub fn sweep_k(base: &ScenarioConfig, ks: &[usize]) -> Result<SweepReport> {
    run_all("sweep-k", ks.iter().map(|&k| ScenarioConfig { top_k: Some(k), ..base.clone() }).collect())
}

/// One run per `(pos_std, rot_std)` pair.
pub fn sweep_noise(base: &ScenarioConfig, levels: &[(f64, f64)]) -> Result<SweepReport> {
    run_all(
        "sweep-noise",
        levels
            .iter()
            .map(|&(p, r)| ScenarioConfig { noise_pos_std: p, noise_rot_std: r, ..base.clone() })
            .collect(),
    )
}

pub fn default_noise_levels() -> Vec<(f64, f64)> {
    DEFAULT_POS_NOISE.iter().map(|&p| (p, p * ROT_PER_POS)).collect()
}

pub fn ordering_bench(base: &ScenarioConfig) -> Result<SweepReport> {
    run_all(
        "ordering-bench",
        OrderingMode::ALL.iter().map(|&ordering| ScenarioConfig { ordering, ..base.clone() }).collect(),
    )
}

/// Least-squares `y ≈ slope·x + intercept` and its coefficient of determination.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

pub fn fit_line(xs: &[f64], ys: &[f64]) -> Result<LineFit> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(invalid("line fit needs at least two paired points"));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(invalid("line fit needs distinct x values"));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let ss_res: f64 = xs.iter().zip(ys).map(|(x, y)| (y - slope * x - intercept).powi(2)).sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok(LineFit { slope, intercept, r2 })
}

fn random_params(n_tokens: usize, d: usize, n_state: usize, seed: u64) -> (Matrix<f64>, SsmParams) {
    let mut r = rng::stream(seed, rng::stream_id("ssm-bench", n_tokens as u64));
    let x = Matrix::from_fn(n_tokens, d, |_, _| r.random_range(-1.0..1.0));
    let params = SsmParams {
        a: (0..n_state).map(|i| -((i + 1) as f64)).collect(),
        delta: (0..n_tokens).map(|_| r.random_range(0.01..0.2)).collect(),
        b: Matrix::from_fn(n_tokens, n_state, |_, _| r.random_range(-1.0..1.0)),
        c: Matrix::from_fn(n_tokens, n_state, |_, _| r.random_range(-1.0..1.0)),
        d: vec![1.0; d],
        gamma: 0.0,
    };
    (x, params)
}

/// Median wall time of `fssm_scan` over `repeats` runs per length.
/// Lengths are timed one after another so they do not compete for cores.
pub fn ssm_bench(ns: &[usize], d: usize, n_state: usize, repeats: usize, seed: u64) -> Result<Vec<ScanTiming>> {
    if repeats == 0 || d == 0 || n_state == 0 {
        return Err(invalid("ssm bench needs positive repeats, d and n_state"));
    }
    ns.iter()
        .map(|&n| {
            let (x, params) = random_params(n, d, n_state, seed);
            // warm caches and the allocator once
            std::hint::black_box(fssm_scan(&x, &params, None)?);
            let mut times = (0..repeats)
                .map(|_| {
                    let t = Instant::now();
                    std::hint::black_box(fssm_scan(&x, &params, None)?);
                    Ok(t.elapsed().as_secs_f64() * 1e3)
                })
                .collect::<Result<Vec<f64>>>()?;
            times.sort_by(f64::total_cmp);
            let mid = times.len() / 2;
            let median_ms = if times.len() % 2 == 1 { times[mid] } else { 0.5 * (times[mid - 1] + times[mid]) };
            Ok(ScanTiming { tokens: n, d, n_state, repeats, median_ms, flops: scan_flops(n, n_state, d) })
        })
        .collect()
}

//! Sensitivity of interventional effects to simulator parameters, the
//! injected-bias sign-flip probe, and error-scaling diagnostics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::discovery::{estimate_edge_effect, EffectOptions};
use crate::error::{Error, Result};
use crate::graph::CausalGraph;
use crate::rng;
use crate::simulators::{true_effect, SimulatorSpec};
use crate::stats;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityEntry {
    pub source: String,
    pub target: String,
    pub lag: usize,
    pub parameter: String,
    pub phi: f64,
    /// Absolute perturbation size.
    pub delta: f64,
    pub base_effect: f64,
    pub effect_plus: f64,
    pub effect_minus: f64,
    pub s_plus: f64,
    pub s_minus: f64,
    /// Average of the two one-sided quotients.
    pub s: f64,
    pub unstable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub delta_rel: f64,
    pub m: usize,
    pub seed: u64,
    pub entries: Vec<SensitivityEntry>,
}

impl SensitivityReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per (edge, parameter).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("source,target,lag,parameter,phi,delta,base_effect,effect_plus,effect_minus,s,unstable\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                e.source, e.target, e.lag, e.parameter, e.phi, e.delta, e.base_effect, e.effect_plus, e.effect_minus, e.s, e.unstable
            ));
        }
        out
    }

    pub fn get(&self, source: &str, target: &str, parameter: &str) -> Option<&SensitivityEntry> {
        self.entries
            .iter()
            .find(|e| e.source == source && e.target == target && e.parameter == parameter)
    }
}

fn edge_names(spec: &SimulatorSpec, graph: &CausalGraph) -> Vec<(String, String, usize)> {
    let names = graph.names().map(|n| n.to_vec()).unwrap_or_else(|| spec.var_names());
    graph
        .edges()
        .iter()
        .map(|e| (names[e.source].clone(), names[e.target].clone(), e.lag))
        .collect()
}

fn effect_at(spec: &SimulatorSpec, source: &str, target: &str, lag: usize, m: usize, seed: u64, opts: &EffectOptions) -> Result<f64> {
    let opts = EffectOptions {
        horizon: if lag > 0 { Some(lag) } else { opts.horizon },
        ..opts.clone()
    };
    Ok(estimate_edge_effect(spec, source, target, m, seed, &opts)?.point)
}

/// Perturbs every physical parameter by `±delta_rel` of its value (absolute
/// `delta_rel` when the value is zero) and re-estimates each edge with the
/// same random numbers. `s = |ê(φ') − ê(φ)| / δ`, averaged over both signs.
pub fn sensitivities(spec: &SimulatorSpec, graph: &CausalGraph, delta_rel: f64, m: usize, seed: u64) -> Result<SensitivityReport> {
    sensitivities_with(spec, graph, delta_rel, m, seed, &EffectOptions::default())
}

pub fn sensitivities_with(
    spec: &SimulatorSpec,
    graph: &CausalGraph,
    delta_rel: f64,
    m: usize,
    seed: u64,
    opts: &EffectOptions,
) -> Result<SensitivityReport> {
    if !(delta_rel > 0.0) {
        return Err(Error::Config(format!("delta_rel must be positive, got {delta_rel}")));
    }
    let edges = edge_names(spec, graph);
    let params: Vec<(String, f64)> = spec.phi().into_iter().collect();
    let mut perturbed = Vec::with_capacity(params.len());
    for (name, value) in &params {
        let delta = if *value == 0.0 { delta_rel } else { value.abs() * delta_rel };
        let plus = spec.with_phi(name, value + delta)?;
        let minus = spec.with_phi(name, value - delta)?;
        perturbed.push((name.clone(), *value, delta, plus, minus));
    }
    let base: Vec<f64> = edges
        .par_iter()
        .map(|(s, t, l)| effect_at(spec, s, t, *l, m, seed, opts))
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, usize)> = (0..edges.len()).flat_map(|e| (0..perturbed.len()).map(move |k| (e, k))).collect();
    let entries = jobs
        .par_iter()
        .map(|&(e, k)| {
            let (src, tgt, lag) = &edges[e];
            let (name, phi, delta, plus, minus) = &perturbed[k];
            let ep = effect_at(plus, src, tgt, *lag, m, seed, opts)?;
            let em = effect_at(minus, src, tgt, *lag, m, seed, opts)?;
            let s_plus = (ep - base[e]).abs() / delta;
            let s_minus = (em - base[e]).abs() / delta;
            let s = 0.5 * (s_plus + s_minus);
            Ok(SensitivityEntry {
                source: src.clone(),
                target: tgt.clone(),
                lag: *lag,
                parameter: name.clone(),
                phi: *phi,
                delta: *delta,
                base_effect: base[e],
                effect_plus: ep,
                effect_minus: em,
                s_plus,
                s_minus,
                s,
                unstable: s * delta > base[e].abs() / 2.0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SensitivityReport {
        delta_rel,
        m,
        seed,
        entries,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipProbe {
    pub true_effect: f64,
    pub grid: Vec<f64>,
    /// Share of seeds whose estimate has the sign of the true effect.
    pub accuracy: Vec<f64>,
    /// Smallest bias at which accuracy falls below one half, interpolated
    /// on the logit scale; `None` if it never does on the grid.
    pub threshold: Option<f64>,
}

impl FlipProbe {
    pub fn accuracy_at(&self, delta: f64) -> Option<f64> {
        self.grid.iter().position(|g| *g == delta).map(|k| self.accuracy[k])
    }
}

/// Injects a bias of `−sign(e*)·δ` into the target's interventional outcomes
/// for each `δ` in the grid and records how often the estimated sign stays
/// correct over `seeds` runs of `m` draws.
pub fn sign_flip_probe(spec: &SimulatorSpec, source: &str, target: &str, bias_grid: &[f64], m: usize, seeds: usize) -> Result<FlipProbe> {
    let e_star = true_effect(spec, source, target).ok_or_else(|| Error::NoOracle(format!("{source} → {target}")))?;
    if e_star == 0.0 {
        return Err(Error::NoOracle(format!("{source} → {target} has a zero effect, so no sign to flip")));
    }
    if bias_grid.is_empty() || seeds == 0 {
        return Err(Error::Config("need a non-empty bias grid and at least one seed".into()));
    }
    let mut grid = bias_grid.to_vec();
    grid.sort_by(f64::total_cmp);
    let opts = EffectOptions {
        b: 200,
        ..Default::default()
    };
    let accuracy = grid
        .iter()
        .enumerate()
        .map(|(g, delta)| {
            let biased = spec.clone().with_bias(target, -e_star.signum() * delta);
            let hits = (0..seeds)
                .into_par_iter()
                .map(|s| {
                    let seed = rng::derive_path(0x5161, &[g as u64, s as u64]);
                    let e = estimate_edge_effect(&biased, source, target, m, seed, &opts)?;
                    Ok((e.point.signum() == e_star.signum()) as usize)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(hits.iter().sum::<usize>() as f64 / seeds as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    let threshold = crossing(&grid, &accuracy, seeds);
    Ok(FlipProbe {
        true_effect: e_star,
        grid,
        accuracy,
        threshold,
    })
}

/// First 50% crossing of `acc` over `grid`, linear in logit(acc) between
/// the bracketing points.
fn crossing(grid: &[f64], acc: &[f64], seeds: usize) -> Option<f64> {
    let k = acc.iter().position(|a| *a < 0.5)?;
    if k == 0 {
        return Some(grid[0]);
    }
    let eps = 0.5 / seeds as f64;
    let lo = stats::logit(acc[k - 1].clamp(eps, 1.0 - eps));
    let hi = stats::logit(acc[k].clamp(eps, 1.0 - eps));
    if lo == hi {
        return Some(grid[k]);
    }
    let frac = lo / (lo - hi);
    Some(grid[k - 1] + frac.clamp(0.0, 1.0) * (grid[k] - grid[k - 1]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorCell {
    pub m: usize,
    pub delta: f64,
    pub mean_abs_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionFit {
    /// Coefficient on `1/√M`.
    pub c_sampling: f64,
    /// Coefficient on the injected bias.
    pub c_bias: f64,
    pub r2: f64,
    pub cells: Vec<ErrorCell>,
}

fn mean_abs_errors(
    spec: &SimulatorSpec,
    source: &str,
    target: &str,
    m: usize,
    delta: f64,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    let e_star = true_effect(spec, source, target).ok_or_else(|| Error::NoOracle(format!("{source} → {target}")))?;
    let biased = if delta != 0.0 {
        spec.clone().with_bias(target, -e_star.signum() * delta)
    } else {
        spec.clone()
    };
    let opts = EffectOptions {
        b: 100,
        ..Default::default()
    };
    let errs = (0..trials)
        .into_par_iter()
        .map(|k| {
            let e = estimate_edge_effect(&biased, source, target, m, rng::derive_path(seed, &[m as u64, k as u64]), &opts)?;
            Ok((e.point - e_star).abs())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(stats::mean(&errs))
}

/// Mean absolute effect error over a factorial `(M, δ)` grid, fitted as
/// `c_sampling/√M + c_bias·δ` without intercept.
pub fn error_decomposition(
    spec: &SimulatorSpec,
    source: &str,
    target: &str,
    ms: &[usize],
    deltas: &[f64],
    trials: usize,
    seed: u64,
) -> Result<DecompositionFit> {
    let mut cells = Vec::new();
    for &m in ms {
        for &delta in deltas {
            cells.push(ErrorCell {
                m,
                delta,
                mean_abs_error: mean_abs_errors(spec, source, target, m, delta, trials, seed)?,
            });
        }
    }
    if cells.len() < 3 {
        return Err(Error::TooFewSamples {
            needed: 3,
            got: cells.len(),
        });
    }
    let x = nalgebra::DMatrix::from_fn(cells.len(), 2, |r, c| if c == 0 { 1.0 / (cells[r].m as f64).sqrt() } else { cells[r].delta });
    let y = nalgebra::DMatrix::from_fn(cells.len(), 1, |r, _| cells[r].mean_abs_error);
    let b = stats::ols(&x, &y)?;
    let resid = &y - &x * &b;
    let ys: Vec<f64> = y.iter().copied().collect();
    let ym = stats::mean(&ys);
    let tot: f64 = ys.iter().map(|v| (v - ym).powi(2)).sum();
    Ok(DecompositionFit {
        c_sampling: b[(0, 0)],
        c_bias: b[(1, 0)],
        r2: 1.0 - resid.norm_squared() / tot,
        cells,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceFit {
    pub ms: Vec<usize>,
    pub mean_abs_error: Vec<f64>,
    /// Slope of log error on log M.
    pub slope: f64,
}

/// Log–log slope of mean absolute effect error against the number of draws.
pub fn convergence_rate(spec: &SimulatorSpec, source: &str, target: &str, ms: &[usize], trials: usize, seed: u64) -> Result<ConvergenceFit> {
    let errs = ms
        .iter()
        .map(|&m| mean_abs_errors(spec, source, target, m, 0.0, trials, seed))
        .collect::<Result<Vec<f64>>>()?;
    let lx: Vec<f64> = ms.iter().map(|m| (*m as f64).ln()).collect();
    let ly: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
    let fit = stats::simple_regression(&lx, &ly)?;
    Ok(ConvergenceFit {
        ms: ms.to_vec(),
        mean_abs_error: errs,
        slope: fit.slope,
    })
}

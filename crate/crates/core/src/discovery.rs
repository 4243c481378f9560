//! Edge identification from interventional effects, plus observational
//! score matrices used as priors and for cyclic systems.

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::graph::{CausalGraph, Edge, EffectEstimate};
use crate::intervention::InterventionDataset;
use crate::panel::TimeSeriesPanel;
use crate::rng;
use crate::simulators::{self, DoMode, DoRequest, SimulatorSpec, Variant};
use crate::stats;
use crate::var_engine;

/// Default weight of the Phase-0 prior when blended with other scores.
pub const PHASE0_WEIGHT: f64 = 0.2;
/// Phase-0 scores below this are treated as no signal.
pub const PHASE0_NULL_THRESHOLD: f64 = 0.1;
/// Residual level under which the Dyn2 operator-score slot is switched off.
pub const EPS_GUARD: f64 = 1e-3;

/// d×d directional scores, `s[(i, j)]` supports `i → j`. Diagonal is zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix(DMatrix<f64>);

impl ScoreMatrix {
    pub fn new(mut m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::NotSquare {
                rows: m.nrows(),
                cols: m.ncols(),
            });
        }
        m.fill_diagonal(0.0);
        Ok(Self(m))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn d(&self) -> usize {
        self.0.nrows()
    }

    /// Off-diagonal entries in row-major order.
    pub fn off_diagonal(&self) -> Vec<f64> {
        let d = self.d();
        let mut v = Vec::with_capacity(d * d.saturating_sub(1));
        for i in 0..d {
            for j in 0..d {
                if i != j {
                    v.push(self.0[(i, j)]);
                }
            }
        }
        v
    }

    pub fn max_off_diagonal(&self) -> f64 {
        self.off_diagonal().into_iter().fold(0.0, f64::max)
    }

    /// `(1 − w)·self + w·prior`.
    pub fn blend(&self, prior: &ScoreMatrix, w: f64) -> Result<ScoreMatrix> {
        if prior.d() != self.d() {
            return Err(Error::DimensionMismatch(format!("{} vs {} variables", self.d(), prior.d())));
        }
        ScoreMatrix::new(&self.0 * (1.0 - w) + &prior.0 * w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Correction {
    Bonferroni,
    BenjaminiHochberg,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TestConfig {
    pub alpha: f64,
    pub correction: Correction,
    /// Bootstrap replicates.
    pub b: usize,
    /// Interventional draws per clamp value.
    pub m: usize,
    pub seed: u64,
}

impl Default for TestConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            correction: Correction::Bonferroni,
            b: 1000,
            m: 500,
            seed: 0,
        }
    }
}

impl TestConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must be in (0, 1), got {}", self.alpha)));
        }
        if self.b < 100 {
            return Err(Error::Config(format!("need at least 100 bootstrap replicates, got {}", self.b)));
        }
        if self.m == 0 {
            return Err(Error::Config("m must be positive".into()));
        }
        Ok(())
    }
}

/// Standard deviation of `b` bootstrap means.
pub fn bootstrap_se(samples: &[f64], b: usize, seed: u64) -> Result<f64> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: n });
    }
    if samples.iter().all(|x| *x == samples[0]) {
        return Ok(0.0);
    }
    let mut r = rng::rng(seed);
    let means: Vec<f64> = (0..b)
        .map(|_| (0..n).map(|_| samples[r.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    Ok(stats::std_dev(&means))
}

/// `mean(outcomes) − obs_mean` with a bootstrap standard error. A single
/// draw carries no uncertainty estimate and gets an infinite se.
pub fn estimate_ate(outcomes: &[f64], obs_mean: f64, b: usize, seed: u64) -> Result<EffectEstimate> {
    if outcomes.is_empty() {
        return Err(Error::EmptySample);
    }
    let point = stats::mean(outcomes) - obs_mean;
    let se = if outcomes.len() == 1 {
        f64::INFINITY
    } else {
        bootstrap_se(outcomes, b, seed)?
    };
    Ok(EffectEstimate::new(point, se, outcomes.len(), 0.05))
}

/// Sample size for which every one of the d² pairwise mean estimates is
/// within `eps` with probability at least `1 − delta` (Hoeffding).
pub fn required_m(d: usize, sigma: f64, eps: f64, delta: f64) -> Result<usize> {
    if d == 0 || !(sigma > 0.0) || !(eps > 0.0) || !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Config("required_m needs d ≥ 1, σ > 0, ε > 0 and δ in (0, 1)".into()));
    }
    let dd = (d * d) as f64;
    Ok((2.0 * sigma * sigma * (2.0 * dd / delta).ln() / (eps * eps)).ceil() as usize)
}

// ---------------------------------------------------------------------------
// Phase 3
// ---------------------------------------------------------------------------

/// Effects indexed `[source][target]`; `None` where not tested.
pub type EffectMatrix = Vec<Vec<Option<EffectEstimate>>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub source: usize,
    pub target: usize,
    pub lag: usize,
    pub ate: f64,
    pub se: f64,
    pub z: f64,
    pub p: f64,
    pub corrected_alpha: f64,
    pub included: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase3Result {
    pub graph: CausalGraph,
    pub pairs: Vec<PairReport>,
}

/// Lag-0 edge selection from a single effect matrix.
pub fn phase3_graph(effects: &EffectMatrix, cfg: &TestConfig) -> Result<CausalGraph> {
    Ok(phase3(&[effects.clone()], cfg)?.graph)
}

/// Edge selection over effect matrices at lags `0..effects.len()`. The
/// family size for the correction is `d(d−1)` per lag.
pub fn phase3(effects: &[EffectMatrix], cfg: &TestConfig) -> Result<Phase3Result> {
    if !(cfg.alpha > 0.0 && cfg.alpha < 1.0) {
        return Err(Error::Config(format!("alpha must be in (0, 1), got {}", cfg.alpha)));
    }
    let d = effects.first().map(|e| e.len()).unwrap_or(0);
    let mut tested = Vec::new();
    for (lag, mat) in effects.iter().enumerate() {
        if mat.len() != d || mat.iter().any(|row| row.len() != d) {
            return Err(Error::DimensionMismatch("effect matrices must all be d×d".into()));
        }
        for (i, row) in mat.iter().enumerate() {
            for (j, e) in row.iter().enumerate() {
                if let (true, Some(e)) = (i != j || lag > 0, e) {
                    tested.push((i, j, lag, *e));
                }
            }
        }
    }
    let family = (d * d.saturating_sub(1) * effects.len()).max(1);
    let threshold = match cfg.correction {
        Correction::None => cfg.alpha,
        Correction::Bonferroni => cfg.alpha / family as f64,
        Correction::BenjaminiHochberg => {
            let mut ps: Vec<f64> = tested.iter().map(|t| t.3.p_value()).collect();
            ps.sort_by(|a, b| a.total_cmp(b));
            let k = (1..=ps.len())
                .rev()
                .find(|&k| ps[k - 1] <= k as f64 * cfg.alpha / family as f64)
                .unwrap_or(0);
            if k == 0 {
                cfg.alpha / family as f64
            } else {
                k as f64 * cfg.alpha / family as f64
            }
        }
    };
    let z_crit = stats::normal_upper_quantile(threshold / 2.0);
    let mut graph = CausalGraph::new(d);
    let mut pairs = Vec::with_capacity(tested.len());
    for (i, j, lag, e) in tested {
        let included = match cfg.correction {
            Correction::BenjaminiHochberg => e.p_value() <= threshold && e.z != 0.0,
            _ => e.z.abs() > z_crit,
        };
        if included && i != j {
            graph.add_edge(Edge {
                source: i,
                target: j,
                lag,
                weight: e.point,
                se: if e.se.is_finite() { e.se } else { 0.0 },
                p_value: e.p_value(),
            })?;
        }
        pairs.push(PairReport {
            source: i,
            target: j,
            lag,
            ate: e.point,
            se: e.se,
            z: e.z,
            p: e.p_value(),
            corrected_alpha: threshold,
            included: included && i != j,
        });
    }
    Ok(Phase3Result { graph, pairs })
}

/// Options for simulator-based effect estimation.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectOptions {
    /// Baseline level of the source; defaults to its long-run mean.
    pub level: Option<f64>,
    /// Clamp offset above the baseline.
    pub delta: f64,
    /// Steps between clamp and read-out; defaults to the oracle horizon.
    pub horizon: Option<usize>,
    /// Step at which the clamp is applied.
    pub t0: usize,
    pub b: usize,
    /// Extra fixed variables (e.g. shower energy and mass).
    pub also: Vec<(String, f64)>,
}

impl Default for EffectOptions {
    fn default() -> Self {
        Self {
            level: None,
            delta: 1.0,
            horizon: None,
            t0: 50,
            b: 1000,
            also: Vec::new(),
        }
    }
}

fn baseline_level(spec: &SimulatorSpec, source: &str, seed: u64) -> Result<f64> {
    let j = spec.index_of(source)?;
    if let Some(mean) = spec.stationary_mean() {
        return Ok(mean[j]);
    }
    let names = spec.observed_names();
    let t = 500;
    let long = simulators::simulate_observational(spec, t, rng::derive(seed, u64::MAX))?;
    match names.iter().position(|n| n == source) {
        Some(k) => Ok(long.column_means()[k]),
        None => {
            // Latent variable: average over a free trajectory instead.
            let req = DoRequest::new(source, 0.0).mode(DoMode::AllSteps).horizon(0);
            let ds = simulators::simulate_do(spec, &req, 50, rng::derive(seed, u64::MAX - 1))?;
            Ok(ds.reference.as_ref().map(|r| r.column(j).mean()).unwrap_or(0.0))
        }
    }
}

/// Effects of `do(source)` on every variable under the default protocol:
/// clamp at `level + delta` once at step `t0`, read out `horizon` steps
/// later, and difference against paired unclamped draws. Estimates are per
/// unit of clamp offset.
pub fn source_effects(
    spec: &SimulatorSpec,
    source: &str,
    horizon: usize,
    m: usize,
    seed: u64,
    opts: &EffectOptions,
) -> Result<Vec<EffectEstimate>> {
    let level = match opts.level {
        Some(v) => v,
        None => baseline_level(spec, source, seed)?,
    };
    let mut req = DoRequest::new(source, level + opts.delta)
        .mode(DoMode::PointInTime { t0: opts.t0 })
        .horizon(horizon);
    for (k, v) in &opts.also {
        req = req.also(k.clone(), *v);
    }
    let ds = simulators::simulate_do(spec, &req, m, seed)?;
    let reference = ds.reference.as_ref().expect("simulator runs carry a reference");
    (0..ds.names.len())
        .map(|j| {
            let diffs: Vec<f64> = (0..m).map(|k| ds.outcomes[0][(k, j)] - reference[(k, j)]).collect();
            Ok(estimate_ate(&diffs, 0.0, opts.b, rng::derive(seed, 1 + j as u64))?.scaled(1.0 / opts.delta))
        })
        .collect()
}

/// Effect of `source` on `target` under the variant's protocol. Battery
/// `ir → cap` regresses across cells at a fixed temperature; shower
/// cross-section effects use paired slopes over a 450–550 mb grid; all other
/// pairs use [`source_effects`].
pub fn estimate_edge_effect(
    spec: &SimulatorSpec,
    source: &str,
    target: &str,
    m: usize,
    seed: u64,
    opts: &EffectOptions,
) -> Result<EffectEstimate> {
    let j = spec.index_of(target)?;
    spec.index_of(source)?;
    match (&spec.variant, source, target) {
        (Variant::ArrheniusBattery(p), "ir", "cap") => {
            let req = DoRequest::new("temp", p.t_low_c)
                .mode(DoMode::AllSteps)
                .horizon(opts.horizon.unwrap_or(p.cycles));
            let ds = simulators::simulate_do(spec, &req, m, seed)?;
            let fit = stats::simple_regression(&ds.column(0, "ir")?, &ds.column(0, "cap")?)?;
            Ok(EffectEstimate::new(fit.slope, fit.slope_se, m, 0.05))
        }
        (Variant::HeitlerMatthews(_), "sigma_inel", _) => {
            let grid = crate::intervention::design_grid(450.0, 550.0, 5, crate::intervention::GridStrategy::Uniform)?;
            let mut req = DoRequest::new(source, grid[0]).mode(DoMode::AllSteps).horizon(0);
            let also = if opts.also.is_empty() {
                vec![("energy".to_string(), 1e16), ("mass".to_string(), 1.0)]
            } else {
                opts.also.clone()
            };
            for (k, v) in also {
                req = req.also(k, v);
            }
            let ds = simulators::simulate_do_grid(spec, &req, &grid, m, seed)?;
            paired_slope(&ds.outcomes, &grid, j, opts.b, seed)
        }
        _ => {
            let horizon = opts.horizon.unwrap_or_else(|| simulators::oracle_horizon(spec, source, target));
            Ok(source_effects(spec, source, horizon, m, seed, opts)?[j])
        }
    }
}

/// Mean over draws of the least-squares slope of `y_{v,k} − y_{v0,k}`
/// on `v − v0`, with a bootstrap se over draws.
fn paired_slope(blocks: &[DMatrix<f64>], values: &[f64], col: usize, b: usize, seed: u64) -> Result<EffectEstimate> {
    let m = blocks[0].nrows();
    let xs: Vec<f64> = values.iter().map(|v| v - values[0]).collect();
    let xm = stats::mean(&xs);
    let sxx: f64 = xs.iter().map(|x| (x - xm).powi(2)).sum();
    let slopes: Vec<f64> = (0..m)
        .map(|k| {
            let base = blocks[0][(k, col)];
            let ds: Vec<f64> = blocks.iter().map(|bl| bl[(k, col)] - base).collect();
            if ds.iter().all(|v| *v == 0.0) {
                return 0.0;
            }
            let dm = stats::mean(&ds);
            xs.iter().zip(&ds).map(|(x, y)| (x - xm) * (y - dm)).sum::<f64>() / sxx
        })
        .collect();
    estimate_ate(&slopes, 0.0, b, seed)
}

/// Effects of every source on every target at horizons `0..=max_lag`;
/// result is indexed `[lag][source][target]`.
pub fn interventional_effects(
    spec: &SimulatorSpec,
    sources: &[String],
    max_lag: usize,
    cfg: &TestConfig,
    opts: &EffectOptions,
) -> Result<Vec<EffectMatrix>> {
    let names = spec.var_names();
    let d = names.len();
    let jobs: Vec<(usize, usize)> = (0..=max_lag)
        .flat_map(|lag| sources.iter().map(move |s| (lag, s)))
        .map(|(lag, s)| Ok((lag, spec.index_of(s)?)))
        .collect::<Result<_>>()?;
    let results: Vec<(usize, usize, Vec<EffectEstimate>)> = jobs
        .par_iter()
        .map(|&(lag, i)| {
            let seed = rng::derive_path(cfg.seed, &[lag as u64, i as u64]);
            let opts = EffectOptions { b: cfg.b, ..opts.clone() };
            Ok((lag, i, source_effects(spec, &names[i], lag, cfg.m, seed, &opts)?))
        })
        .collect::<Result<_>>()?;
    let mut out = vec![vec![vec![None; d]; d]; max_lag + 1];
    for (lag, i, effs) in results {
        for (j, e) in effs.into_iter().enumerate() {
            if i != j || lag > 0 {
                out[lag][i][j] = Some(e);
            }
        }
    }
    Ok(out)
}

/// Per-unit effects of a stored intervention on every variable of the
/// dataset. Uses the clamp value farthest from the baseline. With paired
/// reference draws the baseline is the reference mean of the target and
/// effects are paired differences; otherwise `obs_means` (in dataset column
/// order) serve as baseline. The target's own entry is `None`.
pub fn dataset_effects(
    ds: &InterventionDataset,
    obs_means: Option<&[f64]>,
    b: usize,
    seed: u64,
) -> Result<Vec<Option<EffectEstimate>>> {
    let src = ds.index_of(&ds.target)?;
    let d = ds.names.len();
    if let Some(m) = obs_means {
        if m.len() != d {
            return Err(Error::DimensionMismatch(format!("{} baseline means for {d} variables", m.len())));
        }
    }
    let baseline = |j: usize| -> Result<f64> {
        match (&ds.reference, obs_means) {
            (Some(r), _) => Ok(r.column(j).mean()),
            (None, Some(m)) => Ok(m[j]),
            (None, None) => Err(Error::Config(format!(
                "intervention on `{}` has no reference draws and no observational baseline",
                ds.target
            ))),
        }
    };
    let base_src = baseline(src)?;
    let k = (0..ds.values.len())
        .max_by(|&a, &b| (ds.values[a] - base_src).abs().total_cmp(&(ds.values[b] - base_src).abs()))
        .unwrap_or(0);
    let offset = ds.values[k] - base_src;
    if offset.abs() < 1e-12 {
        return Err(Error::BadRange(format!("clamp values of `{}` do not move it off its baseline", ds.target)));
    }
    let block = &ds.outcomes[k];
    (0..d)
        .map(|j| {
            if j == src {
                return Ok(None);
            }
            let est = match &ds.reference {
                Some(r) => {
                    let diffs: Vec<f64> = block.column(j).iter().zip(r.column(j).iter()).map(|(a, b)| a - b).collect();
                    estimate_ate(&diffs, 0.0, b, rng::derive(seed, j as u64))?
                }
                None => {
                    let xs: Vec<f64> = block.column(j).iter().copied().collect();
                    estimate_ate(&xs, baseline(j)?, b, rng::derive(seed, j as u64))?
                }
            };
            Ok(Some(est.scaled(1.0 / offset)))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Observational scores
// ---------------------------------------------------------------------------

fn standardized(panel: &TimeSeriesPanel) -> DMatrix<f64> {
    stats::standardize_columns(panel.values()).0
}

/// `|Φ₁|` of a VAR(1) fitted to the standardized panel, capped at 1.
pub fn var_coefficient_score(panel: &TimeSeriesPanel) -> Result<ScoreMatrix> {
    if panel.n_obs() < 20 {
        return Err(Error::TooShort(format!("need T ≥ 20, got {}", panel.n_obs())));
    }
    let z = TimeSeriesPanel::new(standardized(panel), panel.names().to_vec())?;
    let model = var_engine::fit_var(&z, 1)?;
    let phi = &model.coeffs[0];
    ScoreMatrix::new(DMatrix::from_fn(panel.n_vars(), panel.n_vars(), |i, j| phi[(j, i)].abs().min(1.0)))
}

fn ridge_mse(features: &[&[f64]], y: &[f64], lambda: f64) -> Result<f64> {
    let n = y.len();
    let x = DMatrix::from_fn(n, features.len() + 1, |r, c| if c == 0 { 1.0 } else { features[c - 1][r] });
    let yv = DMatrix::from_column_slice(n, 1, y);
    let b = stats::ridge(&x, &yv, lambda, &[0])?;
    Ok((&yv - &x * b).norm_squared() / n as f64)
}

fn improvement(base: f64, full: f64) -> f64 {
    if base <= 0.0 {
        0.0
    } else {
        ((base - full) / base).clamp(0.0, 1.0)
    }
}

/// Relative drop in one-step prediction error of `x_j` from adding lag-1
/// `x_i` to its own lag (Ridge on standardized data).
pub fn ridge_granger_score(panel: &TimeSeriesPanel, lambda: f64) -> Result<ScoreMatrix> {
    let t = panel.n_obs();
    if t < 20 {
        return Err(Error::TooShort(format!("need T ≥ 20, got {t}")));
    }
    let z = standardized(panel);
    let d = panel.n_vars();
    let lagged: Vec<Vec<f64>> = (0..d).map(|i| z.column(i).rows(0, t - 1).iter().copied().collect()).collect();
    let mut s = DMatrix::zeros(d, d);
    for j in 0..d {
        let y: Vec<f64> = z.column(j).rows(1, t - 1).iter().copied().collect();
        let base = ridge_mse(&[&lagged[j]], &y, lambda)?;
        for i in 0..d {
            if i != j {
                let full = ridge_mse(&[&lagged[j], &lagged[i]], &y, lambda)?;
                s[(i, j)] = improvement(base, full);
            }
        }
    }
    ScoreMatrix::new(s)
}

/// Linear two-stage prior: half the standardized VAR coefficient score plus
/// half the Ridge-Granger improvement.
pub fn phase0_scores(panel: &TimeSeriesPanel) -> Result<ScoreMatrix> {
    let a = var_coefficient_score(panel)?;
    let b = ridge_granger_score(panel, 1.0)?;
    ScoreMatrix::new((a.matrix() + b.matrix()) * 0.5)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Basis {
    Linear,
    /// Adds squares and the cross term to the regressors.
    Quadratic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffGrangerConfig {
    pub lambda: f64,
    pub basis: Basis,
}

impl Default for DiffGrangerConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            basis: Basis::Quadratic,
        }
    }
}

/// Differential Granger score: relative reduction in the error of predicting
/// `Δx_j/Δt` when `x_i` terms join `x_j`'s own terms.
pub fn diff_granger(panel: &TimeSeriesPanel) -> Result<ScoreMatrix> {
    diff_granger_with(panel, &DiffGrangerConfig::default())
}

pub fn diff_granger_with(panel: &TimeSeriesPanel, cfg: &DiffGrangerConfig) -> Result<ScoreMatrix> {
    let t = panel.n_obs();
    if t < 10 {
        return Err(Error::TooShort(format!("need T ≥ 10, got {t}")));
    }
    let dt = panel.dt().unwrap_or(1.0);
    let z = standardized(panel);
    let d = panel.n_vars();
    let n = t - 1;
    let cur: Vec<Vec<f64>> = (0..d).map(|i| z.column(i).rows(0, n).iter().copied().collect()).collect();
    let sq: Vec<Vec<f64>> = cur.iter().map(|c| c.iter().map(|v| v * v).collect()).collect();
    let quad = cfg.basis == Basis::Quadratic;
    let rows: Vec<Vec<f64>> = (0..d)
        .into_par_iter()
        .map(|j| -> Result<Vec<f64>> {
            let dx: Vec<f64> = (0..n).map(|r| (z[(r + 1, j)] - z[(r, j)]) / dt).collect();
            let mut base: Vec<&[f64]> = vec![&cur[j]];
            if quad {
                base.push(&sq[j]);
            }
            let e_base = ridge_mse(&base, &dx, cfg.lambda)?;
            let mut col = vec![0.0; d];
            for i in 0..d {
                if i == j {
                    continue;
                }
                let cross: Vec<f64> = cur[i].iter().zip(&cur[j]).map(|(a, b)| a * b).collect();
                let mut full = base.clone();
                full.push(&cur[i]);
                if quad {
                    full.push(&sq[i]);
                    full.push(&cross);
                }
                col[i] = improvement(e_base, ridge_mse(&full, &dx, cfg.lambda)?);
            }
            Ok(col)
        })
        .collect::<Result<_>>()?;
    ScoreMatrix::new(DMatrix::from_fn(d, d, |i, j| rows[j][i]))
}

// ---------------------------------------------------------------------------
// Routing and ensembles
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruthHint {
    ExpectDag,
    ExpectCycles,
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineVariant {
    SvarFm,
    SvarFmDag,
    Dyn1,
    Dyn2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteDecision {
    pub variant: PipelineVariant,
    /// Smallest McLeod–Li p-value over variables (1 when not computed).
    pub nonlinearity_p: f64,
    pub nonlinear: bool,
}

/// Ljung–Box p-value on the squared, centred series (McLeod–Li test).
pub fn mcleod_li(xs: &[f64], lags: usize) -> f64 {
    let n = xs.len();
    if n <= lags + 1 {
        return 1.0;
    }
    let m = stats::mean(xs);
    let sq: Vec<f64> = xs.iter().map(|x| (x - m).powi(2)).collect();
    let nf = n as f64;
    let q: f64 = (1..=lags)
        .map(|k| stats::autocorrelation(&sq, k).powi(2) / (nf - k as f64))
        .sum::<f64>()
        * nf
        * (nf + 2.0);
    let chi = ChiSquared::new(lags as f64).expect("positive degrees of freedom");
    chi.sf(q)
}

/// Nonlinearity flag: McLeod–Li on squared VAR residuals, lag 5, with the
/// level split across variables.
pub fn nonlinearity_test(panel: &TimeSeriesPanel, alpha: f64) -> Result<(bool, f64)> {
    let model = var_engine::fit_var(panel, 5.min(panel.n_obs().saturating_sub(3)).max(1))?;
    let res = var_engine::residuals(&model, panel)?;
    let p = (0..res.n_vars())
        .map(|j| mcleod_li(&res.column(j), 5))
        .fold(1.0, f64::min);
    Ok((p < alpha / panel.n_vars() as f64, p))
}

pub fn route(panel: &TimeSeriesPanel, hint: TruthHint) -> Result<RouteDecision> {
    let d = panel.n_vars();
    Ok(match hint {
        TruthHint::ExpectDag => RouteDecision {
            variant: PipelineVariant::SvarFmDag,
            nonlinearity_p: 1.0,
            nonlinear: false,
        },
        TruthHint::ExpectCycles => RouteDecision {
            variant: if d <= 3 { PipelineVariant::Dyn1 } else { PipelineVariant::Dyn2 },
            nonlinearity_p: 1.0,
            nonlinear: false,
        },
        TruthHint::Unknown => {
            let (nonlinear, p) = if panel.n_obs() >= 20 {
                nonlinearity_test(panel, 0.05)?
            } else {
                (false, 1.0)
            };
            RouteDecision {
                variant: if nonlinear { PipelineVariant::Dyn2 } else { PipelineVariant::SvarFm },
                nonlinearity_p: p,
                nonlinear,
            }
        }
    })
}

/// Off-diagonal ranks scaled to `(0, 1]`.
fn rank_scores(s: &ScoreMatrix) -> Vec<f64> {
    let v = s.off_diagonal();
    let n = v.len() as f64;
    stats::ranks(&v).into_iter().map(|r| r / n).collect()
}

fn from_off_diagonal(d: usize, v: &[f64]) -> Result<ScoreMatrix> {
    let mut m = DMatrix::zeros(d, d);
    let mut k = 0;
    for i in 0..d {
        for j in 0..d {
            if i != j {
                m[(i, j)] = v[k];
                k += 1;
            }
        }
    }
    ScoreMatrix::new(m)
}

/// Weighted average of rank-transformed components.
fn rank_average(parts: &[(ScoreMatrix, f64)]) -> Result<ScoreMatrix> {
    let d = parts[0].0.d();
    let total: f64 = parts.iter().map(|p| p.1).sum();
    let ranked: Vec<Vec<f64>> = parts.iter().map(|p| rank_scores(&p.0)).collect();
    let n = ranked[0].len();
    let avg: Vec<f64> = (0..n)
        .map(|k| parts.iter().zip(&ranked).map(|(p, r)| p.1 * r[k]).sum::<f64>() / total)
        .collect();
    from_off_diagonal(d, &avg)
}

/// Rank average of the VAR-coefficient score and the differential Granger
/// score.
pub fn dyn1(panel: &TimeSeriesPanel) -> Result<ScoreMatrix> {
    let a = var_coefficient_score(panel)?;
    let b = diff_granger(panel)?;
    rank_average(&[(a, 1.0), (b, 1.0)])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dyn2Result {
    pub scores: ScoreMatrix,
    /// Component name and weight, in input order.
    pub weights: Vec<(String, f64)>,
    /// True when the operator-score slot was switched off.
    pub eps_guard: bool,
}

/// Ensemble of VAR-coefficient, differential Granger (in the operator-score
/// slot), and optional interventional and flow effect scores. Weights are
/// Spearman correlations with the equal-weight ensemble, clipped at 0. The
/// operator slot gets weight 0 when the largest VAR residual is below
/// [`EPS_GUARD`].
pub fn dyn2(panel: &TimeSeriesPanel, ate: Option<&ScoreMatrix>, flow: Option<&ScoreMatrix>) -> Result<Dyn2Result> {
    let model = var_engine::fit_var(panel, 1)?;
    let res = var_engine::residuals(&model, panel)?;
    let guard = res.values().amax() < EPS_GUARD;
    let mut parts: Vec<(String, ScoreMatrix)> = vec![
        ("var".into(), var_coefficient_score(panel)?),
        ("operator".into(), diff_granger(panel)?),
    ];
    if let Some(a) = ate {
        parts.push(("ate".into(), a.clone()));
    }
    if let Some(f) = flow {
        parts.push(("flow".into(), f.clone()));
    }
    for (_, s) in &parts {
        if s.d() != panel.n_vars() {
            return Err(Error::DimensionMismatch("score matrix size differs from panel".into()));
        }
    }
    let active = |name: &str| !(guard && name == "operator");
    let equal: Vec<(ScoreMatrix, f64)> = parts
        .iter()
        .map(|(n, s)| (s.clone(), if active(n) { 1.0 } else { 0.0 }))
        .collect();
    let reference = rank_average(&equal)?.off_diagonal();
    let mut weights: Vec<(String, f64)> = parts
        .iter()
        .map(|(n, s)| {
            let w = if active(n) { stats::spearman(&s.off_diagonal(), &reference).max(0.0) } else { 0.0 };
            (n.clone(), w)
        })
        .collect();
    if weights.iter().all(|w| w.1 == 0.0) {
        for (n, w) in &mut weights {
            *w = if active(n) { 1.0 } else { 0.0 };
        }
    }
    let weighted: Vec<(ScoreMatrix, f64)> = parts.iter().zip(&weights).map(|((_, s), (_, w))| (s.clone(), *w)).collect();
    Ok(Dyn2Result {
        scores: rank_average(&weighted)?,
        weights,
        eps_guard: guard,
    })
}

/// |ATE| scores from a lag's effect matrix (zero where untested).
pub fn effect_scores(effects: &EffectMatrix) -> Result<ScoreMatrix> {
    let d = effects.len();
    ScoreMatrix::new(DMatrix::from_fn(d, d, |i, j| effects[i][j].map(|e| e.point.abs()).unwrap_or(0.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::score_auroc;
    use crate::simulators::{LinearSvarParams, OdeKind, OdeParams};
    use proptest::prelude::*;
    use rand_distr::StandardNormal;

    #[test]
    fn ate_arithmetic() {
        let e = estimate_ate(&[1.0, 2.0, 3.0], 1.0, 1000, 0).unwrap();
        assert_eq!(e.point, 1.0);
        let e = estimate_ate(&[2.0; 5], 2.0, 1000, 0).unwrap();
        assert_eq!((e.point, e.z, e.se), (0.0, 0.0, 0.0));
        assert!(matches!(estimate_ate(&[], 0.0, 100, 0), Err(Error::EmptySample)));
    }

    #[test]
    fn dataset_effects_per_unit() {
        use crate::intervention::{InterventionDataset, Provenance};
        let noise = [0.3, -0.1, 0.5, -0.7];
        let block = |a: f64| DMatrix::from_fn(4, 2, |r, c| if c == 0 { a } else { 3.0 * a + noise[r] });
        let reference = DMatrix::from_fn(4, 2, |r, c| {
            let a = if r % 2 == 0 { -1.0 } else { 1.0 };
            if c == 0 { a } else { 3.0 * a + noise[r] }
        });
        let names = vec!["a".to_string(), "b".to_string()];
        let ds = InterventionDataset::new(
            "a".into(),
            names.clone(),
            vec![0.5, 2.0],
            vec![block(0.5), block(2.0)],
            Some(reference),
            Provenance::SimulatorDo,
            0,
        )
        .unwrap();
        let effs = dataset_effects(&ds, None, 200, 1).unwrap();
        assert!(effs[0].is_none());
        // Paired differences are 6 − 3·a_ref; per unit of offset 2 the mean is 3.
        assert!((effs[1].unwrap().point - 3.0).abs() < 1e-12);

        let ds = InterventionDataset::new("a".into(), names, vec![2.0], vec![block(2.0)], None, Provenance::SimulatorDo, 0).unwrap();
        let e = dataset_effects(&ds, Some(&[1.0, 3.0]), 200, 1).unwrap()[1].unwrap();
        let mean_b = 6.0 + noise.iter().sum::<f64>() / 4.0;
        assert!((e.point - (mean_b - 3.0) / 1.0).abs() < 1e-12);
        assert!(dataset_effects(&ds, None, 200, 1).is_err());
    }

    #[test]
    fn bootstrap_se_behaviour() {
        assert_eq!(bootstrap_se(&[3.0; 10], 1000, 1).unwrap(), 0.0);
        assert!(matches!(bootstrap_se(&[1.0], 1000, 1), Err(Error::TooFewSamples { .. })));
        let mut r = rng::rng(4);
        let xs: Vec<f64> = (0..1600).map(|_| r.sample(StandardNormal)).collect();
        let se400 = bootstrap_se(&xs[..400], 1000, 2).unwrap();
        assert!((0.04..=0.06).contains(&se400), "{se400}");
        let se100 = bootstrap_se(&xs[400..500], 1000, 2).unwrap();
        let ratio = se100 / se400;
        assert!((1.7..=2.3).contains(&ratio), "{ratio}");
        assert_eq!(bootstrap_se(&xs, 200, 9).unwrap(), bootstrap_se(&xs, 200, 9).unwrap());
    }

    #[test]
    fn bonferroni_level() {
        let cfg = TestConfig::default();
        let effects: EffectMatrix = vec![vec![Some(EffectEstimate::new(0.0, 1.0, 10, 0.05)); 3]; 3];
        let res = phase3(&[effects], &cfg).unwrap();
        assert!((res.pairs[0].corrected_alpha - 0.05 / 6.0).abs() < 1e-15);
        assert!(res.graph.is_empty());
    }

    fn chain_effects(seed: u64, m: usize) -> EffectMatrix {
        let spec = SimulatorSpec::linear_svar(LinearSvarParams::chain(3, 0.8));
        let cfg = TestConfig { m, seed, ..Default::default() };
        let names = spec.var_names();
        interventional_effects(&spec, &names, 0, &cfg, &EffectOptions::default()).unwrap().remove(0)
    }

    #[test]
    fn chain_is_recovered() {
        for seed in 0..50 {
            let effects = chain_effects(seed, 500);
            let g = phase3_graph(&effects, &TestConfig::default()).unwrap();
            assert!(g.contains(0, 1, 0) && g.contains(1, 2, 0), "seed {seed}");
            assert!(!g.contains(2, 0, 0) && !g.contains(1, 0, 0) && !g.contains(2, 1, 0));
            // Cause → effect dominates effect → cause.
            assert!(effects[0][1].unwrap().point.abs() > effects[1][0].unwrap().point.abs());
        }
    }

    #[test]
    fn correction_monotonicity() {
        let effects = chain_effects(3, 30);
        let none = TestConfig { correction: Correction::None, ..Default::default() };
        let bonf = TestConfig::default();
        let bh = TestConfig { correction: Correction::BenjaminiHochberg, ..Default::default() };
        let g_none = phase3_graph(&effects, &none).unwrap();
        for g in [phase3_graph(&effects, &bonf).unwrap(), phase3_graph(&effects, &bh).unwrap()] {
            for e in g.edges() {
                assert!(g_none.contains(e.source, e.target, e.lag));
            }
        }
    }

    #[test]
    fn linear_effect_matches_coefficient() {
        let spec = SimulatorSpec::linear_svar(LinearSvarParams::chain(2, 0.6));
        let e = estimate_edge_effect(&spec, "x0", "x1", 4000, 1, &EffectOptions::default()).unwrap();
        assert!((e.point - 0.6).abs() < 4.0 * e.se + 1e-9, "{e:?}");
    }

    #[test]
    fn hm_cross_section_effects() {
        let spec = SimulatorSpec::heitler_matthews(Default::default()).with_noise(0.0);
        let mu = estimate_edge_effect(&spec, "sigma_inel", "ln_n_mu", 100, 2, &EffectOptions::default()).unwrap();
        assert_eq!(mu.point, 0.0);
        let xm = estimate_edge_effect(&spec, "sigma_inel", "x_max", 100, 2, &EffectOptions::default()).unwrap();
        assert!((-0.12..=-0.05).contains(&xm.point));
    }

    #[test]
    fn required_m_formula() {
        let m = required_m(3, 1.0, 0.1, 0.05).unwrap();
        assert_eq!(m, (2.0 * (18.0f64 / 0.05).ln() / 0.01).ceil() as usize);
        assert!(required_m(0, 1.0, 0.1, 0.05).is_err());
    }

    #[test]
    fn required_m_controls_error() {
        let (d, sigma, eps, delta) = (2, 1.0, 0.2, 0.1);
        let m = required_m(d, sigma, eps, delta).unwrap();
        let mut r = rng::rng(1);
        let trials = 500;
        let bad = (0..trials)
            .filter(|_| {
                let mean: f64 = (0..m).map(|_| sigma * r.sample::<f64, _>(StandardNormal)).sum::<f64>() / m as f64;
                mean.abs() > eps
            })
            .count();
        assert!((bad as f64 / trials as f64) < delta);
    }

    fn white(t: usize, d: usize, seed: u64) -> TimeSeriesPanel {
        let mut r = rng::rng(seed);
        TimeSeriesPanel::from_matrix(DMatrix::from_fn(t, d, |_, _| r.sample(StandardNormal))).unwrap()
    }

    fn var_chain(seed: u64) -> TimeSeriesPanel {
        let mut p = LinearSvarParams::from_b0(vec![vec![0.0; 2]; 2]);
        p.lags = vec![vec![vec![0.3, 0.0], vec![0.5, 0.3]]];
        simulators::simulate_observational(&SimulatorSpec::linear_svar(p), 500, seed).unwrap()
    }

    #[test]
    fn phase0_orients_chain() {
        let hits = (0..50)
            .filter(|&s| {
                let sc = phase0_scores(&var_chain(s)).unwrap();
                sc.matrix()[(0, 1)] > sc.matrix()[(1, 0)]
            })
            .count();
        assert!(hits >= 45, "{hits}/50");
        let null = phase0_scores(&white(500, 3, 1)).unwrap();
        assert!(null.max_off_diagonal() < PHASE0_NULL_THRESHOLD);
        assert!(matches!(phase0_scores(&white(10, 2, 0)), Err(Error::TooShort(_))));
        assert_eq!(PHASE0_WEIGHT, 0.2);
    }

    #[test]
    fn diff_granger_bounds() {
        // x1 increments are exactly x0: full model explains them.
        let t = 200;
        let mut r = rng::rng(2);
        let x0: Vec<f64> = (0..t).map(|_| r.sample(StandardNormal)).collect();
        let mut x1 = vec![0.0];
        for k in 0..t - 1 {
            x1.push(x1[k] + x0[k]);
        }
        let rows: Vec<Vec<f64>> = (0..t).map(|k| vec![x0[k], x1[k]]).collect();
        let panel = TimeSeriesPanel::from_rows(&rows, vec!["a".into(), "b".into()]).unwrap();
        let lin = DiffGrangerConfig { basis: Basis::Linear, ..Default::default() };
        let s = diff_granger_with(&panel, &lin).unwrap();
        assert!(s.matrix()[(0, 1)] > 0.999, "{}", s.matrix()[(0, 1)]);
        let noise = diff_granger(&white(500, 3, 5)).unwrap();
        for v in noise.off_diagonal() {
            assert!((0.0..0.05).contains(&v));
        }
        assert!(matches!(diff_granger(&white(5, 2, 0)), Err(Error::TooShort(_))));
    }

    #[test]
    fn diff_granger_on_lorenz() {
        let spec = SimulatorSpec::ode(OdeParams::new(OdeKind::lorenz63()));
        let panel = simulators::simulate_observational(&spec, 5000, 100).unwrap();
        let s = diff_granger(&panel).unwrap();
        assert!(score_auroc(s.matrix(), &OdeKind::lorenz63().coupling()) >= 0.75);
    }

    #[test]
    fn routing_table() {
        let p3 = white(100, 3, 0);
        assert_eq!(route(&p3, TruthHint::ExpectDag).unwrap().variant, PipelineVariant::SvarFmDag);
        assert_eq!(route(&p3, TruthHint::ExpectCycles).unwrap().variant, PipelineVariant::Dyn1);
        assert_eq!(route(&white(100, 4, 0), TruthHint::ExpectCycles).unwrap().variant, PipelineVariant::Dyn2);
        let lin = route(&white(1000, 3, 1), TruthHint::Unknown).unwrap();
        assert_eq!(lin.variant, PipelineVariant::SvarFm);
    }

    #[test]
    fn routing_flags_volatility_clustering() {
        // ARCH(1) noise has no linear structure but clustered variance.
        let mut r = rng::rng(3);
        let mut prev: f64 = 0.0;
        let rows: Vec<Vec<f64>> = (0..2000)
            .map(|_| {
                let e: f64 = r.sample(StandardNormal);
                prev = (0.2 + 0.7 * prev * prev).sqrt() * e;
                let other: f64 = r.sample(StandardNormal);
                vec![prev, other]
            })
            .collect();
        let panel = TimeSeriesPanel::from_rows(&rows, vec!["a".into(), "b".into()]).unwrap();
        let d = route(&panel, TruthHint::Unknown).unwrap();
        assert!(d.nonlinear);
        assert_eq!(d.variant, PipelineVariant::Dyn2);
    }

    #[test]
    fn eps_guard_switches_off_operator_slot() {
        let mut p = OdeParams::new(OdeKind::Lorenz96 { dim: 5, forcing: 8.0 });
        p.stride = 1;
        let spec = SimulatorSpec::ode(p);
        let panel = simulators::simulate_observational(&spec, 40, 0).unwrap();
        // Deterministic linear recursion: a VAR(1) fits it exactly.
        let rows: Vec<Vec<f64>> = (0..200).map(|t| vec![0.9f64.powi(t), 0.8f64.powi(t) + 0.9f64.powi(t)]).collect();
        let exact = TimeSeriesPanel::from_rows(&rows, vec!["a".into(), "b".into()]).unwrap();
        let res = dyn2(&exact, None, None).unwrap();
        assert!(res.eps_guard);
        assert_eq!(res.weights.iter().find(|w| w.0 == "operator").unwrap().1, 0.0);
        let res = dyn2(&panel, None, None).unwrap();
        assert!(!res.eps_guard);
        assert!(res.weights.iter().all(|w| w.1 >= 0.0));
    }

    #[test]
    fn dyn1_scores_lorenz() {
        let spec = SimulatorSpec::ode(OdeParams::new(OdeKind::lorenz63()));
        let panel = simulators::simulate_observational(&spec, 3000, 7).unwrap();
        let s = dyn1(&panel).unwrap();
        assert_eq!(s.d(), 3);
        assert!(s.off_diagonal().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn rescaling_keeps_significance(scale in prop_oneof![0.001f64..0.1, 10.0f64..1000.0], seed in 0u64..500) {
            let mut r = rng::rng(seed);
            let xs: Vec<f64> = (0..50).map(|_| 0.3 + r.sample::<f64, _>(StandardNormal)).collect();
            let scaled: Vec<f64> = xs.iter().map(|x| x * scale).collect();
            let a = estimate_ate(&xs, 0.0, 200, seed).unwrap();
            let b = estimate_ate(&scaled, 0.0, 200, seed).unwrap();
            prop_assert!((b.point - scale * a.point).abs() <= 1e-9 * scale.max(1.0));
            prop_assert!((a.z - b.z).abs() < 1e-6 * a.z.abs().max(1.0));
        }

        #[test]
        fn bonferroni_is_subset_of_uncorrected(zs in proptest::collection::vec(-6.0f64..6.0, 12)) {
            let mut effects: EffectMatrix = vec![vec![None; 4]; 4];
            let mut k = 0;
            for i in 0..4 {
                for j in 0..4 {
                    if i != j {
                        effects[i][j] = Some(EffectEstimate::new(zs[k], 1.0, 100, 0.05));
                        k += 1;
                    }
                }
            }
            let loose = phase3_graph(&effects, &TestConfig { correction: Correction::None, ..Default::default() }).unwrap();
            let strict = phase3_graph(&effects, &TestConfig::default()).unwrap();
            for e in strict.edges() {
                prop_assert!(loose.contains(e.source, e.target, e.lag));
            }
        }
    }
}

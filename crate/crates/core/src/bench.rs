//! Baselines and the multi-seed benchmark over the four analytic domains.

use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor};

use crate::discovery::{estimate_edge_effect, EffectOptions};
use crate::error::{Error, Result};
use crate::flow_match::{flow_ace, train_cfm, CfmDataset, TrainConfig};
use crate::graph::EffectEstimate;
use crate::panel::TimeSeriesPanel;
use crate::rng;
use crate::simulators::{
    self, true_effect, BatteryParams, DoMode, DoRequest, DsgeParams, FeedbackParams, HmParams, SimulatorSpec,
};
use crate::stats;
use crate::var_engine;

pub const REPORT_SCHEMA: &str = "causalsim-bench-v1";

/// Slope of `target` on `source` with intercept.
pub fn baseline_ols(panel: &TimeSeriesPanel, source: &str, target: &str) -> Result<EffectEstimate> {
    let x = panel.column_by_name(source)?;
    let y = panel.column_by_name(target)?;
    let fit = stats::simple_regression(&x, &y)?;
    Ok(EffectEstimate::new(fit.slope, fit.slope_se, x.len(), 0.05))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrangerResult {
    /// Sum of lagged-source coefficients with its standard error.
    pub estimate: EffectEstimate,
    pub f_stat: f64,
    pub p_value: f64,
}

fn lagged_design(panel: &TimeSeriesPanel, cols: &[usize], p: usize) -> DMatrix<f64> {
    let n = panel.n_obs() - p;
    let v = panel.values();
    DMatrix::from_fn(n, 1 + cols.len() * p, |r, c| {
        if c == 0 {
            1.0
        } else {
            let k = (c - 1) / p;
            let l = (c - 1) % p + 1;
            v[(r + p - l, cols[k])]
        }
    })
}

/// F-test of excluding `p` lags of `source` from the equation of `target`
/// that already holds `p` own lags.
pub fn baseline_granger(panel: &TimeSeriesPanel, source: &str, target: &str, p: usize) -> Result<GrangerResult> {
    let (i, j) = (panel.index_of(source)?, panel.index_of(target)?);
    let t = panel.n_obs();
    if p == 0 || t <= 4 * p {
        return Err(Error::TooShort(format!("need T > 4p, got T = {t}, p = {p}")));
    }
    let n = t - p;
    let y = DMatrix::from_fn(n, 1, |r, _| panel.values()[(r + p, j)]);
    let xr = lagged_design(panel, &[j], p);
    let xu = lagged_design(panel, &[j, i], p);
    let br = stats::ols(&xr, &y)?;
    let bu = stats::ols(&xu, &y)?;
    let rss_r = (&y - &xr * &br).norm_squared();
    let rss_u = (&y - &xu * &bu).norm_squared();
    let df = n as f64 - xu.ncols() as f64;
    if df <= 0.0 {
        return Err(Error::TooShort(format!("{n} usable rows for {} regressors", xu.ncols())));
    }
    let f_stat = ((rss_r - rss_u) / p as f64) / (rss_u / df);
    let p_value = if rss_u > 0.0 {
        FisherSnedecor::new(p as f64, df).map(|d| d.sf(f_stat.max(0.0))).unwrap_or(1.0)
    } else {
        0.0
    };
    let src_cols: Vec<usize> = (1 + p..1 + 2 * p).collect();
    let sum: f64 = src_cols.iter().map(|&c| bu[(c, 0)]).sum();
    let s2 = rss_u / df;
    let cov = (xu.transpose() * &xu).pseudo_inverse(1e-12).map_err(|_| Error::SingularDesign)? * s2;
    let var: f64 = src_cols.iter().flat_map(|&a| src_cols.iter().map(move |&b| (a, b))).map(|(a, b)| cov[(a, b)]).sum();
    Ok(GrangerResult {
        estimate: EffectEstimate::new(sum, var.max(0.0).sqrt(), n, 0.05),
        f_stat,
        p_value,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Macro,
    Battery,
    Cosmic,
    FeedbackToy,
}

impl std::str::FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "macro" | "dsge" => Ok(Domain::Macro),
            "battery" => Ok(Domain::Battery),
            "cosmic" | "heitler_matthews" => Ok(Domain::Cosmic),
            "feedback_toy" | "feedbacktoy" | "feedback" => Ok(Domain::FeedbackToy),
            other => Err(Error::Config(format!("unknown domain `{other}`"))),
        }
    }
}

impl Domain {
    pub fn spec(self) -> SimulatorSpec {
        match self {
            Domain::Macro => SimulatorSpec::dsge(DsgeParams::default()),
            Domain::Battery => SimulatorSpec::battery(BatteryParams::default()),
            Domain::Cosmic => SimulatorSpec::heitler_matthews(HmParams::default()),
            Domain::FeedbackToy => SimulatorSpec::feedback(FeedbackParams::default()),
        }
    }

    /// Edges scored by the benchmark.
    pub fn edges(self) -> Vec<(&'static str, &'static str)> {
        match self {
            Domain::Macro => vec![("i", "pi")],
            Domain::Battery => vec![("ir", "cap")],
            Domain::Cosmic => vec![("sigma_inel", "ln_n_mu"), ("sigma_inel", "x_max")],
            Domain::FeedbackToy => vec![("u", "x")],
        }
    }

    /// Observational sample length.
    pub fn default_t(self) -> usize {
        match self {
            Domain::Macro => 192,
            Domain::Battery => 500,
            Domain::Cosmic => 2000,
            Domain::FeedbackToy => 1000,
        }
    }

    /// Interventional draws per seed.
    pub fn default_m(self) -> usize {
        match self {
            Domain::Macro => 100,
            Domain::Battery => 50,
            Domain::Cosmic => 200,
            Domain::FeedbackToy => 500,
        }
    }

    fn id(self) -> u64 {
        self as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub seed: u64,
    pub t: Option<usize>,
    pub m: Option<usize>,
    pub p_max: usize,
    pub granger_lags: usize,
    pub b: usize,
    /// Re-fit the macro simulator's parameters to each observational draw.
    pub calibrate: bool,
    /// Add the flow-based estimator.
    pub nonlinear: bool,
    pub flow: TrainConfig,
    pub spec: Option<SimulatorSpec>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            t: None,
            m: None,
            p_max: 10,
            granger_lags: 4,
            b: 1000,
            calibrate: false,
            nonlinear: false,
            flow: TrainConfig {
                steps: 2000,
                ..Default::default()
            },
            spec: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub estimates: Vec<f64>,
    pub mean: f64,
    pub abs_bias: f64,
    pub rmse: f64,
    /// Percentage of seeds whose sign matches the truth (zero counts only
    /// as an exact zero).
    pub sign_accuracy: f64,
    /// Relative reduction of |bias| against OLS; absent when OLS is unbiased.
    pub bias_reduction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeReport {
    pub source: String,
    pub target: String,
    pub truth: f64,
    pub methods: Vec<MethodSummary>,
}

impl EdgeReport {
    pub fn method(&self, name: &str) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub schema: String,
    pub domain: Domain,
    pub seeds: usize,
    pub config: BenchConfig,
    pub edges: Vec<EdgeReport>,
    /// Mean VAR lag order chosen by BIC (time-stepped domains).
    pub mean_var_order: Option<f64>,
    pub runtime_secs: f64,
}

impl BenchReport {
    pub fn edge(&self, source: &str, target: &str) -> Option<&EdgeReport> {
        self.edges.iter().find(|e| e.source == source && e.target == target)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per (edge, method).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("domain,source,target,truth,method,estimate,abs_bias,rmse,sign_correct_pct,bias_reduction_pct\n");
        for e in &self.edges {
            for m in &e.methods {
                out.push_str(&format!(
                    "{:?},{},{},{},{},{},{},{},{},{}\n",
                    self.domain,
                    e.source,
                    e.target,
                    e.truth,
                    m.method,
                    m.mean,
                    m.abs_bias,
                    m.rmse,
                    m.sign_accuracy,
                    m.bias_reduction.map(|b| (100.0 * b).to_string()).unwrap_or_default()
                ));
            }
        }
        out
    }
}

struct SeedResult {
    /// Per edge: (method, estimate).
    per_edge: Vec<Vec<(String, f64)>>,
    var_order: Option<usize>,
}

fn sign_of(v: f64) -> i8 {
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}

fn summarize(method: &str, estimates: Vec<f64>, truth: f64) -> MethodSummary {
    let mean = stats::mean(&estimates);
    let rmse = (estimates.iter().map(|e| (e - truth).powi(2)).sum::<f64>() / estimates.len() as f64).sqrt();
    let correct = estimates.iter().filter(|e| sign_of(**e) == sign_of(truth)).count();
    MethodSummary {
        method: method.to_string(),
        mean,
        abs_bias: (mean - truth).abs(),
        rmse,
        sign_accuracy: 100.0 * correct as f64 / estimates.len() as f64,
        bias_reduction: None,
        estimates,
    }
}

/// Flow ACE per unit of conditioning change, fitted to `(c, x1)` pairs and
/// evaluated at the conditioning mean ± one sd.
fn flow_slope(c: Vec<f64>, x1: Vec<f64>, cfg: &TrainConfig, seed: u64) -> Result<f64> {
    let n = c.len();
    let cm = stats::mean(&c);
    let sd = stats::std_dev(&c);
    if !(sd > 0.0) {
        return Err(Error::Config("flow conditioning has no spread".into()));
    }
    let data = CfmDataset::new(DMatrix::from_vec(n, 1, x1), DMatrix::from_vec(n, 1, c), vec!["source".into()])?;
    let cfg = TrainConfig { seed, ..cfg.clone() };
    let (model, _) = train_cfm(&data, &cfg)?;
    let ace = flow_ace(&model, &[cm + sd], &[cm - sd], 2000, 0, 50, seed)?;
    Ok(ace.point / (2.0 * sd))
}

/// Paired draws `(clamp offset, outcome − reference)` over a small grid of
/// offsets around `level`.
fn paired_pairs(spec: &SimulatorSpec, source: &str, target: &str, level: f64, m: usize, seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    let offsets = [-1.0, -0.5, 0.0, 0.5, 1.0];
    let h = simulators::oracle_horizon(spec, source, target);
    let req = DoRequest::new(source, level).mode(DoMode::PointInTime { t0: 50 }).horizon(h);
    let values: Vec<f64> = offsets.iter().map(|o| level + o).collect();
    let ds = simulators::simulate_do_grid(spec, &req, &values, m, seed)?;
    let j = ds.index_of(target)?;
    let reference = ds.reference.as_ref().expect("simulator runs carry a reference");
    let (mut c, mut x) = (Vec::new(), Vec::new());
    for (k, o) in offsets.iter().enumerate() {
        for u in 0..m {
            c.push(*o);
            x.push(ds.outcomes[k][(u, j)] - reference[(u, j)]);
        }
    }
    Ok((c, x))
}

fn run_seed(domain: Domain, spec: &SimulatorSpec, cfg: &BenchConfig, s: usize) -> Result<SeedResult> {
    let seed = rng::derive_path(cfg.seed, &[domain.id(), s as u64]);
    let t = cfg.t.unwrap_or(domain.default_t());
    let m = cfg.m.unwrap_or(domain.default_m());
    let panel = simulators::simulate_observational(spec, t, rng::derive(seed, 0))?;
    let time_stepped = matches!(domain, Domain::Macro | Domain::FeedbackToy);

    let mut var_order = None;
    let mut do_spec = spec.clone();
    if time_stepped {
        var_order = Some(var_engine::fit_var(&panel, cfg.p_max)?.p);
    }
    if domain == Domain::Macro && cfg.calibrate {
        let mut fitted = DsgeParams::calibrate(&panel)?;
        if let simulators::Variant::Dsge(p) = &spec.variant {
            fitted.shock_y = p.shock_y;
            fitted.shock_pi = p.shock_pi;
            fitted.shock_i = p.shock_i;
        }
        do_spec = SimulatorSpec {
            variant: simulators::Variant::Dsge(fitted),
            ..spec.clone()
        };
    }

    let mut per_edge = Vec::new();
    for (ei, (src, tgt)) in domain.edges().into_iter().enumerate() {
        let mut row = vec![("ols".to_string(), baseline_ols(&panel, src, tgt)?.point)];
        if time_stepped || domain == Domain::Battery {
            let g = baseline_granger(&panel, src, tgt, cfg.granger_lags)?;
            row.push(("granger".to_string(), g.estimate.point));
        }
        let level = if time_stepped { Some(stats::mean(&panel.column_by_name(src)?)) } else { None };
        let opts = EffectOptions {
            level,
            b: cfg.b,
            ..Default::default()
        };
        let e = estimate_edge_effect(&do_spec, src, tgt, m, rng::derive(seed, 1 + ei as u64), &opts)?;
        row.push(("svar_fm".to_string(), e.point));
        if cfg.nonlinear {
            let fseed = rng::derive(seed, 100 + ei as u64);
            let (c, x) = match domain {
                Domain::Battery => {
                    let p = match &do_spec.variant {
                        simulators::Variant::ArrheniusBattery(p) => p.clone(),
                        _ => unreachable!(),
                    };
                    let req = DoRequest::new("temp", p.t_low_c).mode(DoMode::AllSteps).horizon(p.cycles);
                    let ds = simulators::simulate_do(&do_spec, &req, m.max(200), fseed)?;
                    (ds.column(0, src)?, ds.column(0, tgt)?)
                }
                Domain::Cosmic => {
                    let req = DoRequest::new(src, 450.0).mode(DoMode::AllSteps).horizon(0).also("energy", 1e16).also("mass", 1.0);
                    let grid = [450.0, 475.0, 500.0, 525.0, 550.0];
                    let ds = simulators::simulate_do_grid(&do_spec, &req, &grid, m, fseed)?;
                    let j = ds.index_of(tgt)?;
                    let mut c = Vec::new();
                    let mut x = Vec::new();
                    for (k, v) in grid.iter().enumerate() {
                        for u in 0..m {
                            c.push(*v);
                            x.push(ds.outcomes[k][(u, j)] - ds.outcomes[0][(u, j)]);
                        }
                    }
                    (c, x)
                }
                _ => paired_pairs(&do_spec, src, tgt, level.unwrap_or(0.0), m, fseed)?,
            };
            row.push(("svar_fm_flow".to_string(), flow_slope(c, x, &cfg.flow, fseed)?));
        }
        per_edge.push(row);
    }
    Ok(SeedResult { per_edge, var_order })
}

/// Runs `seeds` independent replicates of one domain and aggregates the
/// estimates against the analytic oracle.
pub fn run_causalsim(domain: Domain, seeds: usize, cfg: &BenchConfig) -> Result<BenchReport> {
    if seeds == 0 {
        return Err(Error::Config("need at least one seed".into()));
    }
    let start = Instant::now();
    let spec = cfg.spec.clone().unwrap_or_else(|| domain.spec());
    spec.validate()?;
    let results: Vec<SeedResult> = (0..seeds)
        .into_par_iter()
        .map(|s| run_seed(domain, &spec, cfg, s))
        .collect::<Result<_>>()?;
    let mut edges = Vec::new();
    for (ei, (src, tgt)) in domain.edges().into_iter().enumerate() {
        let truth = true_effect(&spec, src, tgt).ok_or_else(|| Error::NoOracle(format!("{src} → {tgt}")))?;
        let methods: Vec<String> = results[0].per_edge[ei].iter().map(|(m, _)| m.clone()).collect();
        let mut summaries: Vec<MethodSummary> = methods
            .iter()
            .enumerate()
            .map(|(k, name)| summarize(name, results.iter().map(|r| r.per_edge[ei][k].1).collect(), truth))
            .collect();
        let ols_bias = summaries[0].abs_bias;
        if ols_bias > 0.0 {
            for s in &mut summaries {
                s.bias_reduction = Some((ols_bias - s.abs_bias) / ols_bias);
            }
        }
        edges.push(EdgeReport {
            source: src.to_string(),
            target: tgt.to_string(),
            truth,
            methods: summaries,
        });
    }
    let orders: Vec<f64> = results.iter().filter_map(|r| r.var_order.map(|p| p as f64)).collect();
    Ok(BenchReport {
        schema: REPORT_SCHEMA.into(),
        domain,
        seeds,
        config: cfg.clone(),
        edges,
        mean_var_order: (!orders.is_empty()).then(|| stats::mean(&orders)),
        runtime_secs: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulators::LinearSvarParams;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn pair(t: usize, seed: u64, f: impl Fn(f64, f64) -> f64) -> TimeSeriesPanel {
        let mut r = rng::rng(seed);
        let rows: Vec<Vec<f64>> = (0..t)
            .map(|_| {
                let x: f64 = r.sample(StandardNormal);
                let e: f64 = r.sample(StandardNormal);
                vec![x, f(x, e)]
            })
            .collect();
        TimeSeriesPanel::from_rows(&rows, vec!["x".into(), "y".into()]).unwrap()
    }

    #[test]
    fn ols_examples() {
        let p = pair(200, 1, |x, e| 2.0 * x + 1e-6 * e);
        assert!((baseline_ols(&p, "x", "y").unwrap().point - 2.0).abs() < 1e-5);
        assert!(matches!(baseline_ols(&p, "x", "nope"), Err(Error::InvalidTarget(_))));
        let quiet = (0..100)
            .filter(|&s| {
                let e = baseline_ols(&pair(200, s, |_, e| e), "x", "y").unwrap();
                e.point.abs() < 2.0 * e.se
            })
            .count();
        assert!(quiet >= 90, "{quiet}");
    }

    fn var_chain(seed: u64) -> TimeSeriesPanel {
        let mut p = LinearSvarParams::from_b0(vec![vec![0.0; 2]; 2]);
        p.lags = vec![vec![vec![0.3, 0.0], vec![0.5, 0.3]]];
        simulators::simulate_observational(&SimulatorSpec::linear_svar(p), 300, seed).unwrap()
    }

    #[test]
    fn granger_chain_and_calibration() {
        let (mut forward, mut backward) = (0, 0);
        for s in 0..100 {
            let p = var_chain(s);
            forward += (baseline_granger(&p, "x0", "x1", 2).unwrap().p_value < 0.05) as usize;
            backward += (baseline_granger(&p, "x1", "x0", 2).unwrap().p_value >= 0.05) as usize;
        }
        assert!(forward >= 90 && backward >= 90, "{forward} {backward}");
        let rejections = (0..400)
            .filter(|&s| baseline_granger(&pair(200, 1000 + s, |_, e| e), "x", "y", 2).unwrap().p_value < 0.05)
            .count();
        let rate = rejections as f64 / 400.0;
        assert!((0.02..=0.09).contains(&rate), "{rate}");
        assert!(matches!(baseline_granger(&pair(8, 0, |_, e| e), "x", "y", 2), Err(Error::TooShort(_))));
    }

    #[test]
    fn granger_effect_is_lag_sum() {
        let p = var_chain(3);
        let g = baseline_granger(&p, "x0", "x1", 1).unwrap();
        assert!((g.estimate.point - 0.5).abs() < 0.2);
    }

    #[test]
    fn macro_granger_sign_near_coin_flip() {
        let spec = Domain::Macro.spec();
        let correct = (0..50)
            .filter(|&s| {
                let p = simulators::simulate_observational(&spec, 192, s).unwrap();
                baseline_granger(&p, "i", "pi", 4).unwrap().estimate.point < 0.0
            })
            .count();
        let pct = 100.0 * correct as f64 / 50.0;
        assert!((20.0..=80.0).contains(&pct), "{pct}");
    }

    #[test]
    fn domains_parse() {
        assert_eq!("macro".parse::<Domain>().unwrap(), Domain::Macro);
        assert_eq!("feedback-toy".parse::<Domain>().unwrap(), Domain::FeedbackToy);
        assert!("nope".parse::<Domain>().is_err());
    }

    #[test]
    fn feedback_domain_recovers_negative_effect() {
        let rep = run_causalsim(Domain::FeedbackToy, 8, &BenchConfig::default()).unwrap();
        let e = rep.edge("u", "x").unwrap();
        assert_eq!(e.method("svar_fm").unwrap().sign_accuracy, 100.0);
        assert!(e.method("svar_fm").unwrap().abs_bias < 0.1);
    }

    #[test]
    fn reports_are_reproducible() {
        let cfg = BenchConfig::default();
        let a = run_causalsim(Domain::Cosmic, 3, &cfg).unwrap();
        let b = run_causalsim(Domain::Cosmic, 3, &cfg).unwrap();
        assert_eq!(a.edges, b.edges);
        assert!(a.to_csv().lines().count() > 1);
    }
}

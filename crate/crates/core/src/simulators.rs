//! Analytic simulators used as do-operators.
//!
//! A [`SimulatorSpec`] describes one mechanistic system. Observational runs
//! keep every mechanism active; interventional runs replace the target's
//! mechanism by a clamp and leave the others untouched. Every unit draws the
//! same random numbers whether or not it is clamped, so runs sharing a seed
//! are paired (common random numbers).

use std::collections::{BTreeMap, VecDeque};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::topological_order;
use crate::intervention::{InterventionDataset, Provenance};
use crate::panel::TimeSeriesPanel;
use crate::rng;
use crate::stats;

pub const GAS_CONSTANT: f64 = 8.314;
const KELVIN: f64 = 273.15;

fn normal(r: &mut ChaCha8Rng) -> f64 {
    r.sample(StandardNormal)
}

fn one() -> f64 {
    1.0
}

// ---------------------------------------------------------------------------
// Parameter sets
// ---------------------------------------------------------------------------

/// Three-equation New Keynesian system over `[y, pi, i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DsgeParams {
    pub rho_i: f64,
    pub phi_pi: f64,
    pub phi_y: f64,
    pub kappa: f64,
    pub sigma: f64,
    pub rho_y: f64,
    pub rho_pi: f64,
    pub shock_y: f64,
    pub shock_pi: f64,
    pub shock_i: f64,
    pub burn_in: usize,
}

impl Default for DsgeParams {
    fn default() -> Self {
        Self {
            rho_i: 0.882,
            phi_pi: 0.357,
            phi_y: 0.229,
            kappa: 0.114,
            sigma: 0.038,
            rho_y: 0.5,
            rho_pi: 0.5,
            shock_y: 0.1,
            shock_pi: 0.1,
            shock_i: 0.02,
            burn_in: 200,
        }
    }
}

impl DsgeParams {
    /// Least-squares calibration of the three equations from a panel with
    /// columns `y`, `pi`, `i`. Shock scales are set to residual std devs.
    pub fn calibrate(panel: &TimeSeriesPanel) -> Result<Self> {
        let y = panel.column_by_name("y")?;
        let pi = panel.column_by_name("pi")?;
        let i = panel.column_by_name("i")?;
        let t = y.len();
        if t < 10 {
            return Err(Error::TooShort(format!("calibration needs 10 rows, got {t}")));
        }
        let n = t - 1;
        let fit = |cols: Vec<Vec<f64>>, resp: &[f64]| -> Result<(Vec<f64>, f64)> {
            let x = DMatrix::from_fn(n, cols.len(), |r, c| cols[c][r]);
            let yv = DMatrix::from_column_slice(n, 1, resp);
            let b = stats::ols(&x, &yv)?;
            let res = &yv - &x * &b;
            let sd = (res.norm_squared() / (n - cols.len()).max(1) as f64).sqrt();
            Ok((b.iter().copied().collect(), sd))
        };
        let lag = |v: &[f64]| v[..n].to_vec();
        let now = |v: &[f64]| v[1..].to_vec();
        let (is, sy) = fit(vec![lag(&i), lag(&y)], &now(&y))?;
        let (pc, sp) = fit(vec![now(&y), lag(&pi)], &now(&pi))?;
        let (tr, si) = fit(vec![lag(&i), now(&pi), now(&y)], &now(&i))?;
        let rho_i = tr[0].clamp(0.0, 0.999);
        let gap = (1.0 - rho_i).max(1e-6);
        let out = Self {
            rho_i,
            phi_pi: tr[1] / gap,
            phi_y: tr[2] / gap,
            kappa: pc[0].max(0.0),
            sigma: (-is[0]).max(0.0),
            rho_y: is[1],
            rho_pi: pc[1],
            shock_y: sy,
            shock_pi: sp,
            shock_i: si,
            burn_in: 200,
        };
        out.validate()?;
        Ok(out)
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.rho_i) {
            return Err(Error::InvalidSpec(format!("rho_i = {} outside [0, 1)", self.rho_i)));
        }
        if self.kappa < 0.0 || self.sigma < 0.0 {
            return Err(Error::InvalidSpec("kappa and sigma must be nonnegative".into()));
        }
        if self.shock_y < 0.0 || self.shock_pi < 0.0 || self.shock_i < 0.0 {
            return Err(Error::InvalidSpec("shock scales must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Battery ageing with a latent cycling temperature driving both SEI growth
/// (and hence internal resistance) and capacity fade.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BatteryParams {
    /// Activation energy in J/mol.
    pub activation_energy: f64,
    /// Rate prefactor relative to the reference temperature.
    pub rate_scale: f64,
    pub rate_ref_temp_k: f64,
    /// Temperature drift range over a cell's life, in °C.
    pub t_low_c: f64,
    pub t_high_c: f64,
    pub temp_noise: f64,
    pub sei_growth: f64,
    pub ir_per_sei: f64,
    pub ir0: f64,
    /// Cell-to-cell relative spread of the initial resistance.
    pub ir0_spread: f64,
    pub ir_noise: f64,
    pub cap0: f64,
    pub cap_ir_coupling: f64,
    pub cap_fade: f64,
    pub cap_noise: f64,
    pub cycles: usize,
}

impl Default for BatteryParams {
    fn default() -> Self {
        Self {
            activation_energy: 50_000.0,
            rate_scale: 1.0,
            rate_ref_temp_k: 333.15,
            t_low_c: 25.0,
            t_high_c: 45.0,
            temp_noise: 1.0,
            sei_growth: 0.01,
            ir_per_sei: 1.0,
            ir0: 1.0,
            ir0_spread: 0.05,
            ir_noise: 0.01,
            cap0: 2.0,
            cap_ir_coupling: 0.25,
            cap_fade: 1.06,
            cap_noise: 0.002,
            cycles: 500,
        }
    }
}

impl BatteryParams {
    /// Arrhenius rate at a temperature in °C.
    pub fn rate(&self, temp_c: f64) -> f64 {
        let tk = temp_c + KELVIN;
        self.rate_scale
            * (-self.activation_energy / GAS_CONSTANT * (1.0 / tk - 1.0 / self.rate_ref_temp_k)).exp()
    }

    fn validate(&self) -> Result<()> {
        if !(self.activation_energy > 0.0) || !(self.rate_scale > 0.0) {
            return Err(Error::InvalidSpec("activation energy and prefactor must be positive".into()));
        }
        if !(self.rate_ref_temp_k > 0.0) || self.t_low_c + KELVIN <= 0.0 || self.t_high_c + KELVIN <= 0.0 {
            return Err(Error::InvalidSpec("temperatures must be above absolute zero".into()));
        }
        if self.t_high_c < self.t_low_c {
            return Err(Error::InvalidSpec("t_high_c below t_low_c".into()));
        }
        if self.cycles == 0 {
            return Err(Error::InvalidSpec("cycles must be positive".into()));
        }
        Ok(())
    }
}

/// Heitler–Matthews air-shower approximation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HmParams {
    /// Interaction-length constant in mb·g/cm².
    pub k_air: f64,
    /// Elongation constant in g/cm².
    pub d_rad: f64,
    /// Electromagnetic critical energy in eV.
    pub xi_em_ev: f64,
    /// Pion critical energy in eV.
    pub xi_c_ev: f64,
    pub beta: f64,
    pub log10_e_low: f64,
    pub log10_e_high: f64,
    pub masses: Vec<f64>,
    /// Cross section at the low end of the energy range, mb.
    pub sigma_base: f64,
    /// Cross-section growth per energy decade, mb.
    pub sigma_slope: f64,
    pub sigma_spread: f64,
    /// Reference cross section for the analytic X_max slope.
    pub sigma_ref: f64,
    pub xmax_noise: f64,
    pub ln_mu_noise: f64,
}

impl Default for HmParams {
    fn default() -> Self {
        Self {
            k_air: 2.41e4,
            d_rad: 36.7,
            xi_em_ev: 85e6,
            xi_c_ev: 20e9,
            beta: 0.85,
            log10_e_low: 15.5,
            log10_e_high: 17.5,
            masses: vec![1.0, 4.0, 14.0, 56.0],
            sigma_base: 450.0,
            sigma_slope: 50.0,
            sigma_spread: 20.0,
            sigma_ref: 500.0,
            xmax_noise: 20.0,
            ln_mu_noise: 0.1,
        }
    }
}

impl HmParams {
    fn validate(&self) -> Result<()> {
        if !(self.k_air > 0.0 && self.xi_em_ev > 0.0 && self.xi_c_ev > 0.0) {
            return Err(Error::InvalidSpec("shower constants must be positive".into()));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::InvalidSpec(format!("beta = {} outside (0, 1)", self.beta)));
        }
        if self.log10_e_high < self.log10_e_low {
            return Err(Error::InvalidSpec("energy range reversed".into()));
        }
        if self.masses.is_empty() || self.masses.iter().any(|a| *a < 1.0 || a.fract() != 0.0) {
            return Err(Error::InvalidSpec("masses must be integers ≥ 1".into()));
        }
        check_range("sigma_ref", self.sigma_ref, 100.0, 2000.0).map_err(|e| Error::InvalidSpec(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OdeKind {
    Lorenz63 { sigma: f64, rho: f64, beta: f64 },
    Rossler { a: f64, b: f64, c: f64 },
    Lorenz96 { dim: usize, forcing: f64 },
    /// `dx/dt = A x`.
    Linear { matrix: Vec<Vec<f64>> },
}

impl Default for OdeKind {
    fn default() -> Self {
        Self::lorenz63()
    }
}

impl OdeKind {
    pub fn lorenz63() -> Self {
        Self::Lorenz63 {
            sigma: 10.0,
            rho: 28.0,
            beta: 8.0 / 3.0,
        }
    }

    pub fn rossler() -> Self {
        Self::Rossler {
            a: 0.2,
            b: 0.2,
            c: 5.7,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Lorenz63 { .. } | Self::Rossler { .. } => 3,
            Self::Lorenz96 { dim, .. } => *dim,
            Self::Linear { matrix } => matrix.len(),
        }
    }

    pub fn names(&self) -> Vec<String> {
        match self {
            Self::Lorenz63 { .. } | Self::Rossler { .. } => vec!["x".into(), "y".into(), "z".into()],
            _ => (0..self.dim()).map(|k| format!("x{k}")).collect(),
        }
    }

    /// Vector field `f(x)`.
    pub fn rhs(&self, x: &[f64], out: &mut [f64]) {
        match self {
            Self::Lorenz63 { sigma, rho, beta } => {
                out[0] = sigma * (x[1] - x[0]);
                out[1] = x[0] * (rho - x[2]) - x[1];
                out[2] = x[0] * x[1] - beta * x[2];
            }
            Self::Rossler { a, b, c } => {
                out[0] = -x[1] - x[2];
                out[1] = x[0] + a * x[1];
                out[2] = b + x[2] * (x[0] - c);
            }
            Self::Lorenz96 { dim, forcing } => {
                let d = *dim;
                for k in 0..d {
                    out[k] = (x[(k + 1) % d] - x[(k + d - 2) % d]) * x[(k + d - 1) % d] - x[k] + forcing;
                }
            }
            Self::Linear { matrix } => {
                for (k, row) in matrix.iter().enumerate() {
                    out[k] = row.iter().zip(x).map(|(a, b)| a * b).sum();
                }
            }
        }
    }

    /// Adjacency of the vector field: `adj[i][j]` when `f_j` depends on `x_i`.
    pub fn coupling(&self) -> Vec<Vec<bool>> {
        let d = self.dim();
        let mut adj = vec![vec![false; d]; d];
        let mut set = |i: usize, j: usize| {
            if i != j {
                adj[i][j] = true
            }
        };
        match self {
            Self::Lorenz63 { .. } => {
                for (i, j) in [(1, 0), (0, 1), (2, 1), (0, 2), (1, 2)] {
                    set(i, j);
                }
            }
            Self::Rossler { .. } => {
                for (i, j) in [(1, 0), (2, 0), (0, 1), (0, 2)] {
                    set(i, j);
                }
            }
            Self::Lorenz96 { dim, .. } => {
                let d = *dim;
                for k in 0..d {
                    set((k + 1) % d, k);
                    set((k + d - 2) % d, k);
                    set((k + d - 1) % d, k);
                }
            }
            Self::Linear { matrix } => {
                for (j, row) in matrix.iter().enumerate() {
                    for (i, a) in row.iter().enumerate() {
                        if *a != 0.0 {
                            set(i, j);
                        }
                    }
                }
            }
        }
        adj
    }

    fn params(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        match self {
            Self::Lorenz63 { sigma, rho, beta } => {
                m.insert("sigma".into(), *sigma);
                m.insert("rho".into(), *rho);
                m.insert("beta".into(), *beta);
            }
            Self::Rossler { a, b, c } => {
                m.insert("a".into(), *a);
                m.insert("b".into(), *b);
                m.insert("c".into(), *c);
            }
            Self::Lorenz96 { forcing, .. } => {
                m.insert("forcing".into(), *forcing);
            }
            Self::Linear { matrix } => {
                for (j, row) in matrix.iter().enumerate() {
                    for (i, a) in row.iter().enumerate() {
                        m.insert(format!("a_{i}_{j}"), *a);
                    }
                }
            }
        }
        m
    }

    fn set_param(&mut self, name: &str, value: f64) -> bool {
        match self {
            Self::Lorenz63 { sigma, rho, beta } => match name {
                "sigma" => *sigma = value,
                "rho" => *rho = value,
                "beta" => *beta = value,
                _ => return false,
            },
            Self::Rossler { a, b, c } => match name {
                "a" => *a = value,
                "b" => *b = value,
                "c" => *c = value,
                _ => return false,
            },
            Self::Lorenz96 { forcing, .. } => match name {
                "forcing" => *forcing = value,
                _ => return false,
            },
            Self::Linear { matrix } => {
                let Some((i, j)) = parse_pair(name, "a_") else {
                    return false;
                };
                match matrix.get_mut(j).and_then(|row| row.get_mut(i)) {
                    Some(slot) => *slot = value,
                    None => return false,
                }
            }
        }
        true
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OdeParams {
    pub system: OdeKind,
    /// RK4 step.
    pub dt: f64,
    /// Integration steps per recorded sample.
    pub stride: usize,
    /// Integration steps discarded before recording.
    pub burn_in: usize,
    /// Std dev of additive observation noise (times `noise_scale`).
    pub obs_noise: f64,
    /// Fixed initial state; drawn around the attractor when absent.
    pub init: Option<Vec<f64>>,
}

impl Default for OdeParams {
    fn default() -> Self {
        Self {
            system: OdeKind::default(),
            dt: 0.01,
            stride: 1,
            burn_in: 1000,
            obs_noise: 0.0,
            init: None,
        }
    }
}

impl OdeParams {
    pub fn new(system: OdeKind) -> Self {
        Self {
            system,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || self.stride == 0 {
            return Err(Error::InvalidSpec("dt and stride must be positive".into()));
        }
        let d = self.system.dim();
        if d == 0 {
            return Err(Error::InvalidSpec("empty ODE system".into()));
        }
        if let OdeKind::Linear { matrix } = &self.system {
            if matrix.iter().any(|r| r.len() != d) {
                return Err(Error::InvalidSpec("linear ODE matrix must be square".into()));
            }
        }
        if let OdeKind::Lorenz96 { dim, .. } = &self.system {
            if *dim < 4 {
                return Err(Error::InvalidSpec("Lorenz-96 needs at least 4 variables".into()));
            }
        }
        if let Some(x0) = &self.init {
            if x0.len() != d {
                return Err(Error::InvalidSpec("initial state has the wrong length".into()));
            }
        }
        Ok(())
    }
}

/// Linear structural VAR `x_t = c + B0 x_t + Σ_l B_l x_{t−l} + ε_t`.
/// Matrices are indexed `[target][source]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinearSvarParams {
    pub names: Option<Vec<String>>,
    pub b0: Vec<Vec<f64>>,
    pub lags: Vec<Vec<Vec<f64>>>,
    pub intercept: Vec<f64>,
    pub shock_sd: Vec<f64>,
    pub burn_in: usize,
}

impl Default for LinearSvarParams {
    fn default() -> Self {
        Self::chain(3, 0.8)
    }
}

impl LinearSvarParams {
    /// Contemporaneous structure only, unit shocks, zero intercept.
    pub fn from_b0(b0: Vec<Vec<f64>>) -> Self {
        Self {
            names: None,
            b0,
            lags: Vec::new(),
            intercept: Vec::new(),
            shock_sd: Vec::new(),
            burn_in: 50,
        }
    }

    /// Chain `x0 → x1 → … → x{d−1}` with a common coefficient.
    pub fn chain(d: usize, coef: f64) -> Self {
        let mut b0 = vec![vec![0.0; d]; d];
        for j in 1..d {
            b0[j][j - 1] = coef;
        }
        Self::from_b0(b0)
    }

    pub fn dim(&self) -> usize {
        self.b0.len()
    }

    pub fn var_names(&self) -> Vec<String> {
        self.names
            .clone()
            .unwrap_or_else(|| (0..self.dim()).map(|k| format!("x{k}")).collect())
    }

    fn intercept_at(&self, j: usize) -> f64 {
        self.intercept.get(j).copied().unwrap_or(0.0)
    }

    fn shock_at(&self, j: usize) -> f64 {
        self.shock_sd.get(j).copied().unwrap_or(1.0)
    }

    fn b0_adjacency(&self) -> Vec<Vec<bool>> {
        let d = self.dim();
        (0..d)
            .map(|i| (0..d).map(|j| i != j && self.b0[j][i] != 0.0).collect())
            .collect()
    }

    fn order(&self) -> Vec<usize> {
        topological_order(&self.b0_adjacency()).unwrap_or_else(|| (0..self.dim()).collect())
    }

    /// `(I − B0)⁻¹`: total contemporaneous effects, `[target][source]`.
    pub fn total_effects(&self) -> DMatrix<f64> {
        let d = self.dim();
        let b0 = DMatrix::from_fn(d, d, |j, i| self.b0[j][i]);
        (DMatrix::identity(d, d) - b0)
            .try_inverse()
            .unwrap_or_else(|| DMatrix::zeros(d, d))
    }

    fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d == 0 {
            return Err(Error::InvalidSpec("empty structural VAR".into()));
        }
        let square = |m: &Vec<Vec<f64>>| m.len() == d && m.iter().all(|r| r.len() == d);
        if !square(&self.b0) || !self.lags.iter().all(square) {
            return Err(Error::InvalidSpec("coefficient matrices must be d×d".into()));
        }
        if (0..d).any(|j| self.b0[j][j] != 0.0) {
            return Err(Error::InvalidSpec("lag-0 self-effects are not allowed".into()));
        }
        if topological_order(&self.b0_adjacency()).is_none() {
            return Err(Error::InvalidSpec("lag-0 structure is cyclic".into()));
        }
        if let Some(n) = &self.names {
            if n.len() != d {
                return Err(Error::InvalidSpec("name count differs from dimension".into()));
            }
        }
        if (!self.intercept.is_empty() && self.intercept.len() != d)
            || (!self.shock_sd.is_empty() && self.shock_sd.len() != d)
        {
            return Err(Error::InvalidSpec("intercept and shock_sd need d entries".into()));
        }
        if self.shock_sd.iter().any(|s| *s < 0.0) {
            return Err(Error::InvalidSpec("shock_sd must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Two-variable feedback loop: a controller `u` reacts to the state `x`,
/// and `x` responds to `u` with a negative gain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeedbackParams {
    /// Effect of `u_{t−1}` on `x_t` (negative).
    pub effect: f64,
    /// Controller gain on the deviation from the setpoint.
    pub gain: f64,
    pub setpoint: f64,
    pub meal_prob: f64,
    pub meal_size: f64,
    pub x_noise: f64,
    pub u_noise: f64,
    pub burn_in: usize,
}

impl Default for FeedbackParams {
    fn default() -> Self {
        Self {
            effect: -0.5,
            gain: 0.8,
            setpoint: 5.0,
            meal_prob: 0.1,
            meal_size: 2.0,
            x_noise: 0.2,
            u_noise: 0.05,
            burn_in: 100,
        }
    }
}

impl FeedbackParams {
    fn validate(&self) -> Result<()> {
        if !(self.effect < 0.0) {
            return Err(Error::InvalidSpec("feedback effect must be negative".into()));
        }
        if (1.0 + self.effect * self.gain).abs() >= 1.0 {
            return Err(Error::InvalidSpec("closed loop is unstable".into()));
        }
        if !(0.0..=1.0).contains(&self.meal_prob) {
            return Err(Error::InvalidSpec("meal_prob outside [0, 1]".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Spec, requests, mechanisms
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum Variant {
    Dsge(DsgeParams),
    ArrheniusBattery(BatteryParams),
    HeitlerMatthews(HmParams),
    OdeSystem(OdeParams),
    LinearSvar(LinearSvarParams),
    FeedbackToy(FeedbackParams),
}

impl Variant {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Dsge(_) => "dsge",
            Self::ArrheniusBattery(_) => "arrhenius_battery",
            Self::HeitlerMatthews(_) => "heitler_matthews",
            Self::OdeSystem(_) => "ode_system",
            Self::LinearSvar(_) => "linear_svar",
            Self::FeedbackToy(_) => "feedback_toy",
        }
    }
}

/// Constant shift added to one interventional output column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasInject {
    pub target: String,
    pub shift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatorSpec {
    #[serde(flatten)]
    pub variant: Variant,
    #[serde(default = "one")]
    pub noise_scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias_inject: Option<BiasInject>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DoMode {
    /// Clamp once at step `t0` (counted after burn-in).
    PointInTime { t0: usize },
    /// Clamp at every recorded step up to the horizon.
    AllSteps,
    /// Restoring force `λ (value − x)` on the target (ODE systems only).
    Soft { lambda: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoRequest {
    pub target: String,
    pub value: f64,
    pub mode: DoMode,
    /// Steps between the clamp and the recorded outcome.
    pub horizon: usize,
    /// Extra variables held fixed in both the clamped and the reference runs.
    #[serde(default)]
    pub also: BTreeMap<String, f64>,
}

impl DoRequest {
    /// Point-in-time clamp at step 50 read out one step later.
    pub fn new(target: impl Into<String>, value: f64) -> Self {
        Self {
            target: target.into(),
            value,
            mode: DoMode::PointInTime { t0: 50 },
            horizon: 1,
            also: BTreeMap::new(),
        }
    }

    pub fn mode(mut self, mode: DoMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn horizon(mut self, horizon: usize) -> Self {
        self.horizon = horizon;
        self
    }

    pub fn also(mut self, name: impl Into<String>, value: f64) -> Self {
        self.also.insert(name.into(), value);
        self
    }

    /// Index of the recorded outcome step.
    fn outcome_step(&self) -> usize {
        match self.mode {
            DoMode::PointInTime { t0 } => t0 + self.horizon,
            _ => self.horizon,
        }
    }

    fn clamped_at(&self, t: usize) -> bool {
        match self.mode {
            DoMode::PointInTime { t0 } => t == t0,
            _ => true,
        }
    }
}

/// One structural equation: the variable, its parents and its parameters.
/// A clamped equation has no parents and a fixed value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mechanism {
    pub variable: String,
    pub parents: Vec<String>,
    pub params: BTreeMap<String, f64>,
    pub clamped: Option<f64>,
}

impl Mechanism {
    fn new(variable: &str, parents: &[&str], params: &[(&str, f64)]) -> Self {
        Self {
            variable: variable.to_string(),
            parents: parents.iter().map(|s| s.to_string()).collect(),
            params: params.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            clamped: None,
        }
    }
}

fn check_range(name: &str, value: f64, low: f64, high: f64) -> Result<()> {
    if value.is_finite() && value >= low && value <= high {
        Ok(())
    } else {
        Err(Error::OutOfPhysicalRange {
            name: name.to_string(),
            value,
            low,
            high,
        })
    }
}

fn parse_pair(name: &str, prefix: &str) -> Option<(usize, usize)> {
    let rest = name.strip_prefix(prefix)?;
    let (a, b) = rest.split_once('_')?;
    Some((a.parse().ok()?, b.parse().ok()?))
}

impl SimulatorSpec {
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            noise_scale: 1.0,
            bias_inject: None,
        }
    }

    pub fn dsge(params: DsgeParams) -> Self {
        Self::new(Variant::Dsge(params))
    }

    pub fn battery(params: BatteryParams) -> Self {
        Self::new(Variant::ArrheniusBattery(params))
    }

    pub fn heitler_matthews(params: HmParams) -> Self {
        Self::new(Variant::HeitlerMatthews(params))
    }

    pub fn ode(params: OdeParams) -> Self {
        Self::new(Variant::OdeSystem(params))
    }

    pub fn linear_svar(params: LinearSvarParams) -> Self {
        Self::new(Variant::LinearSvar(params))
    }

    pub fn feedback(params: FeedbackParams) -> Self {
        Self::new(Variant::FeedbackToy(params))
    }

    pub fn with_noise(mut self, noise_scale: f64) -> Self {
        self.noise_scale = noise_scale;
        self
    }

    pub fn with_bias(mut self, target: impl Into<String>, shift: f64) -> Self {
        self.bias_inject = Some(BiasInject {
            target: target.into(),
            shift,
        });
        self
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::InvalidSpec("noise_scale must be a nonnegative number".into()));
        }
        match &self.variant {
            Variant::Dsge(p) => p.validate()?,
            Variant::ArrheniusBattery(p) => p.validate()?,
            Variant::HeitlerMatthews(p) => p.validate()?,
            Variant::OdeSystem(p) => p.validate()?,
            Variant::LinearSvar(p) => p.validate()?,
            Variant::FeedbackToy(p) => p.validate()?,
        }
        if let Some(b) = &self.bias_inject {
            if !self.var_names().contains(&b.target) {
                return Err(Error::InvalidTarget(b.target.clone()));
            }
            if !b.shift.is_finite() {
                return Err(Error::InvalidSpec("bias shift must be finite".into()));
            }
        }
        Ok(())
    }

    /// All variables, including latent ones that can be intervened on.
    pub fn var_names(&self) -> Vec<String> {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect();
        match &self.variant {
            Variant::Dsge(_) => s(&["y", "pi", "i"]),
            Variant::ArrheniusBattery(_) => s(&["temp", "ir", "cap"]),
            Variant::HeitlerMatthews(_) => s(&["energy", "mass", "sigma_inel", "x_max", "ln_n_mu"]),
            Variant::OdeSystem(p) => p.system.names(),
            Variant::LinearSvar(p) => p.var_names(),
            Variant::FeedbackToy(_) => s(&["x", "u"]),
        }
    }

    /// Columns of observational panels (the battery temperature is latent).
    pub fn observed_names(&self) -> Vec<String> {
        match &self.variant {
            Variant::ArrheniusBattery(_) => vec!["ir".into(), "cap".into()],
            _ => self.var_names(),
        }
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.var_names()
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::InvalidTarget(name.to_string()))
    }

    /// Physical parameters by name.
    pub fn phi(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: f64| {
            m.insert(k.to_string(), v);
        };
        match &self.variant {
            Variant::Dsge(p) => {
                put("rho_i", p.rho_i);
                put("phi_pi", p.phi_pi);
                put("phi_y", p.phi_y);
                put("kappa", p.kappa);
                put("sigma", p.sigma);
                put("rho_y", p.rho_y);
                put("rho_pi", p.rho_pi);
            }
            Variant::ArrheniusBattery(p) => {
                put("activation_energy", p.activation_energy);
                put("rate_scale", p.rate_scale);
                put("sei_growth", p.sei_growth);
                put("ir_per_sei", p.ir_per_sei);
                put("cap_ir_coupling", p.cap_ir_coupling);
                put("cap_fade", p.cap_fade);
            }
            Variant::HeitlerMatthews(p) => {
                put("k_air", p.k_air);
                put("d_rad", p.d_rad);
                put("beta", p.beta);
                put("xi_c_ev", p.xi_c_ev);
                put("xi_em_ev", p.xi_em_ev);
            }
            Variant::OdeSystem(p) => return p.system.params(),
            Variant::LinearSvar(p) => {
                let d = p.dim();
                for j in 0..d {
                    for i in 0..d {
                        if p.b0[j][i] != 0.0 {
                            put(&format!("b0_{i}_{j}"), p.b0[j][i]);
                        }
                    }
                }
                for (l, mat) in p.lags.iter().enumerate() {
                    for j in 0..d {
                        for i in 0..d {
                            if mat[j][i] != 0.0 {
                                put(&format!("lag{}_{i}_{j}", l + 1), mat[j][i]);
                            }
                        }
                    }
                }
            }
            Variant::FeedbackToy(p) => {
                put("effect", p.effect);
                put("gain", p.gain);
                put("setpoint", p.setpoint);
                put("meal_prob", p.meal_prob);
                put("meal_size", p.meal_size);
            }
        }
        m
    }

    /// Copy with one physical parameter replaced; validated.
    pub fn with_phi(&self, name: &str, value: f64) -> Result<Self> {
        let mut out = self.clone();
        let unknown = || Error::InvalidSpec(format!("unknown parameter `{name}`"));
        match &mut out.variant {
            Variant::Dsge(p) => match name {
                "rho_i" => p.rho_i = value,
                "phi_pi" => p.phi_pi = value,
                "phi_y" => p.phi_y = value,
                "kappa" => p.kappa = value,
                "sigma" => p.sigma = value,
                "rho_y" => p.rho_y = value,
                "rho_pi" => p.rho_pi = value,
                _ => return Err(unknown()),
            },
            Variant::ArrheniusBattery(p) => match name {
                "activation_energy" => p.activation_energy = value,
                "rate_scale" => p.rate_scale = value,
                "sei_growth" => p.sei_growth = value,
                "ir_per_sei" => p.ir_per_sei = value,
                "cap_ir_coupling" => p.cap_ir_coupling = value,
                "cap_fade" => p.cap_fade = value,
                _ => return Err(unknown()),
            },
            Variant::HeitlerMatthews(p) => match name {
                "k_air" => p.k_air = value,
                "d_rad" => p.d_rad = value,
                "beta" => p.beta = value,
                "xi_c_ev" => p.xi_c_ev = value,
                "xi_em_ev" => p.xi_em_ev = value,
                _ => return Err(unknown()),
            },
            Variant::OdeSystem(p) => {
                if !p.system.set_param(name, value) {
                    return Err(unknown());
                }
            }
            Variant::LinearSvar(p) => {
                let d = p.dim();
                if let Some((i, j)) = parse_pair(name, "b0_") {
                    if i >= d || j >= d {
                        return Err(unknown());
                    }
                    p.b0[j][i] = value;
                } else if let Some(rest) = name.strip_prefix("lag") {
                    let (l, pair) = rest.split_once('_').ok_or_else(unknown)?;
                    let l: usize = l.parse().map_err(|_| unknown())?;
                    let (i, j) = parse_pair(&format!("_{pair}"), "_").ok_or_else(unknown)?;
                    if l == 0 || l > p.lags.len() || i >= d || j >= d {
                        return Err(unknown());
                    }
                    p.lags[l - 1][j][i] = value;
                } else {
                    return Err(unknown());
                }
            }
            Variant::FeedbackToy(p) => match name {
                "effect" => p.effect = value,
                "gain" => p.gain = value,
                "setpoint" => p.setpoint = value,
                "meal_prob" => p.meal_prob = value,
                "meal_size" => p.meal_size = value,
                _ => return Err(unknown()),
            },
        }
        out.validate().map_err(|e| match e {
            Error::InvalidSpec(msg) => Error::OutOfPhysicalRange {
                name: format!("{name} ({msg})"),
                value,
                low: f64::NAN,
                high: f64::NAN,
            },
            other => other,
        })?;
        Ok(out)
    }

    /// Checks that `value` is inside the validity domain of variable `name`.
    pub fn check_value(&self, name: &str, value: f64) -> Result<()> {
        self.index_of(name)?;
        match (&self.variant, name) {
            (Variant::ArrheniusBattery(_), "temp") => check_range(name, value, -40.0, 100.0),
            (Variant::ArrheniusBattery(_), "ir") => check_range(name, value, 1e-6, 100.0),
            (Variant::ArrheniusBattery(_), "cap") => check_range(name, value, 0.0, 100.0),
            (Variant::HeitlerMatthews(_), "sigma_inel") => check_range(name, value, 100.0, 2000.0),
            (Variant::HeitlerMatthews(_), "energy") => check_range(name, value, 1e9, 1e22),
            (Variant::HeitlerMatthews(_), "mass") => {
                check_range(name, value, 1.0, 238.0)?;
                if value.fract() != 0.0 {
                    return Err(Error::OutOfPhysicalRange {
                        name: name.into(),
                        value,
                        low: 1.0,
                        high: 238.0,
                    });
                }
                Ok(())
            }
            _ => check_range(name, value, -1e6, 1e6),
        }
    }

    /// The structural equations of the variant.
    pub fn mechanisms(&self) -> Vec<Mechanism> {
        match &self.variant {
            Variant::Dsge(p) => vec![
                Mechanism::new("y", &["i", "y"], &[("sigma", p.sigma), ("rho_y", p.rho_y), ("shock", p.shock_y)]),
                Mechanism::new("pi", &["y", "pi"], &[("kappa", p.kappa), ("rho_pi", p.rho_pi), ("shock", p.shock_pi)]),
                Mechanism::new(
                    "i",
                    &["i", "pi", "y"],
                    &[("rho_i", p.rho_i), ("phi_pi", p.phi_pi), ("phi_y", p.phi_y), ("shock", p.shock_i)],
                ),
            ],
            Variant::ArrheniusBattery(p) => vec![
                Mechanism::new("temp", &[], &[("t_low_c", p.t_low_c), ("t_high_c", p.t_high_c)]),
                Mechanism::new(
                    "ir",
                    &["temp"],
                    &[
                        ("activation_energy", p.activation_energy),
                        ("sei_growth", p.sei_growth),
                        ("ir_per_sei", p.ir_per_sei),
                    ],
                ),
                Mechanism::new(
                    "cap",
                    &["temp", "ir"],
                    &[
                        ("activation_energy", p.activation_energy),
                        ("cap_ir_coupling", p.cap_ir_coupling),
                        ("cap_fade", p.cap_fade),
                    ],
                ),
            ],
            Variant::HeitlerMatthews(p) => vec![
                Mechanism::new("energy", &[], &[("log10_e_low", p.log10_e_low), ("log10_e_high", p.log10_e_high)]),
                Mechanism::new("mass", &[], &[]),
                Mechanism::new("sigma_inel", &["energy"], &[("sigma_base", p.sigma_base), ("sigma_slope", p.sigma_slope)]),
                Mechanism::new(
                    "x_max",
                    &["energy", "mass", "sigma_inel"],
                    &[("k_air", p.k_air), ("d_rad", p.d_rad), ("xi_em_ev", p.xi_em_ev)],
                ),
                Mechanism::new("ln_n_mu", &["energy", "mass"], &[("beta", p.beta), ("xi_c_ev", p.xi_c_ev)]),
            ],
            Variant::OdeSystem(p) => {
                let names = p.system.names();
                let adj = p.system.coupling();
                let params = p.system.params();
                (0..names.len())
                    .map(|j| Mechanism {
                        variable: names[j].clone(),
                        parents: std::iter::once(names[j].clone())
                            .chain((0..names.len()).filter(|&i| adj[i][j]).map(|i| names[i].clone()))
                            .collect(),
                        params: params.clone(),
                        clamped: None,
                    })
                    .collect()
            }
            Variant::LinearSvar(p) => {
                let names = p.var_names();
                let d = p.dim();
                (0..d)
                    .map(|j| {
                        let mut params = BTreeMap::new();
                        let mut parents = Vec::new();
                        for i in 0..d {
                            if p.b0[j][i] != 0.0 {
                                parents.push(names[i].clone());
                                params.insert(format!("b0_{i}_{j}"), p.b0[j][i]);
                            }
                        }
                        for (l, mat) in p.lags.iter().enumerate() {
                            for i in 0..d {
                                if mat[j][i] != 0.0 {
                                    parents.push(format!("{}(t-{})", names[i], l + 1));
                                    params.insert(format!("lag{}_{i}_{j}", l + 1), mat[j][i]);
                                }
                            }
                        }
                        params.insert("intercept".into(), p.intercept_at(j));
                        params.insert("shock_sd".into(), p.shock_at(j));
                        Mechanism {
                            variable: names[j].clone(),
                            parents,
                            params,
                            clamped: None,
                        }
                    })
                    .collect()
            }
            Variant::FeedbackToy(p) => vec![
                Mechanism::new(
                    "x",
                    &["x", "u"],
                    &[("effect", p.effect), ("meal_prob", p.meal_prob), ("meal_size", p.meal_size)],
                ),
                Mechanism::new("u", &["x"], &[("gain", p.gain), ("setpoint", p.setpoint)]),
            ],
        }
    }

    /// Structural equations after `do(target = value)`: only the target's
    /// equation changes.
    pub fn intervened_mechanisms(&self, target: &str, value: f64) -> Result<Vec<Mechanism>> {
        self.index_of(target)?;
        let mut eqs = self.mechanisms();
        for eq in &mut eqs {
            if eq.variable == target {
                eq.parents.clear();
                eq.params.clear();
                eq.clamped = Some(value);
            }
        }
        Ok(eqs)
    }

    /// Long-run mean of each variable when available in closed form.
    pub fn stationary_mean(&self) -> Option<DVector<f64>> {
        match &self.variant {
            Variant::Dsge(_) => Some(DVector::zeros(3)),
            Variant::LinearSvar(p) => {
                let d = p.dim();
                let mut a = DMatrix::identity(d, d) - DMatrix::from_fn(d, d, |j, i| p.b0[j][i]);
                for mat in &p.lags {
                    a -= DMatrix::from_fn(d, d, |j, i| mat[j][i]);
                }
                let c = DVector::from_fn(d, |j, _| p.intercept_at(j));
                a.lu().solve(&c)
            }
            Variant::FeedbackToy(p) => {
                let x = p.setpoint + p.meal_prob * p.meal_size / (-p.effect * p.gain);
                Some(DVector::from_vec(vec![x, p.gain * (x - p.setpoint)]))
            }
            _ => None,
        }
    }
}

// ---------------------------------------------------------------------------
// Oracles
// ---------------------------------------------------------------------------

/// Analytic interventional slope of `source → target` under the variant's
/// reference protocol, or `None` when no closed form exists.
pub fn true_effect(spec: &SimulatorSpec, source: &str, target: &str) -> Option<f64> {
    match &spec.variant {
        Variant::Dsge(p) => match (source, target) {
            ("i", "pi") => Some(-p.sigma * p.kappa),
            ("i", "y") => Some(-p.sigma),
            ("y", "pi") => Some(p.kappa),
            _ => None,
        },
        Variant::ArrheniusBattery(p) => match (source, target) {
            ("ir", "cap") => Some(p.cap_ir_coupling * p.rate(p.t_low_c)),
            _ => None,
        },
        Variant::HeitlerMatthews(p) => match (source, target) {
            ("sigma_inel", "ln_n_mu") => Some(0.0),
            ("sigma_inel", "x_max") => Some(-p.k_air * std::f64::consts::LN_2 / (p.sigma_ref * p.sigma_ref)),
            _ => None,
        },
        Variant::OdeSystem(_) => None,
        Variant::LinearSvar(p) => {
            let i = spec.index_of(source).ok()?;
            let j = spec.index_of(target).ok()?;
            (i != j).then(|| p.total_effects()[(j, i)])
        }
        Variant::FeedbackToy(p) => match (source, target) {
            ("u", "x") => Some(p.effect),
            ("x", "u") => Some(p.gain),
            _ => None,
        },
    }
}

/// Horizon at which [`true_effect`] applies for a time-stepped variant.
pub fn oracle_horizon(spec: &SimulatorSpec, source: &str, target: &str) -> usize {
    match (&spec.variant, source, target) {
        (Variant::Dsge(_), "i", _) => 1,
        (Variant::FeedbackToy(_), "u", "x") => 1,
        _ => 0,
    }
}

// ---------------------------------------------------------------------------
// Heitler–Matthews shower
// ---------------------------------------------------------------------------

/// Depth of shower maximum (g/cm²) and muon number for one primary.
///
/// Two standard normals are always drawn, in a fixed order, so the muon
/// number does not depend on `sigma_inel` even with noise on.
pub fn hm_shower(
    params: &HmParams,
    energy_ev: f64,
    mass: f64,
    sigma_inel: f64,
    noise_scale: f64,
    r: &mut ChaCha8Rng,
) -> Result<(f64, f64)> {
    check_range("sigma_inel", sigma_inel, 100.0, 2000.0)?;
    if !(energy_ev > 0.0 && energy_ev.is_finite()) {
        return Err(Error::OutOfPhysicalRange {
            name: "energy".into(),
            value: energy_ev,
            low: 0.0,
            high: f64::INFINITY,
        });
    }
    if !(mass >= 1.0 && mass.fract() == 0.0) {
        return Err(Error::OutOfPhysicalRange {
            name: "mass".into(),
            value: mass,
            low: 1.0,
            high: f64::INFINITY,
        });
    }
    let (z1, z2) = (normal(r), normal(r));
    Ok(hm_core(params, energy_ev, mass, sigma_inel, noise_scale, z1, z2))
}

fn hm_core(p: &HmParams, e: f64, a: f64, sigma: f64, noise: f64, z1: f64, z2: f64) -> (f64, f64) {
    let lambda = p.k_air / sigma;
    let x_max = lambda * std::f64::consts::LN_2 + p.d_rad * (e / (a * 3.0 * p.xi_em_ev)).ln()
        + noise * p.xmax_noise * z1;
    let n_mu = a.powf(1.0 - p.beta) * (e / p.xi_c_ev).powf(p.beta) * (noise * p.ln_mu_noise * z2).exp();
    (x_max, n_mu)
}

struct HmEvent {
    energy: f64,
    mass: f64,
    sigma: f64,
    z1: f64,
    z2: f64,
}

fn hm_draw(p: &HmParams, noise: f64, r: &mut ChaCha8Rng) -> HmEvent {
    let u: f64 = r.random();
    let log10e = p.log10_e_low + u * (p.log10_e_high - p.log10_e_low);
    let mass = p.masses[r.random_range(0..p.masses.len())];
    let zs = normal(r);
    let sigma = (p.sigma_base + p.sigma_slope * (log10e - p.log10_e_low) + noise * p.sigma_spread * zs)
        .clamp(100.0, 2000.0);
    let (z1, z2) = (normal(r), normal(r));
    HmEvent {
        energy: 10f64.powf(log10e),
        mass,
        sigma,
        z1,
        z2,
    }
}

/// Event row `[energy, mass, sigma_inel, x_max, ln_n_mu]` with optional clamps.
fn hm_event(p: &HmParams, noise: f64, r: &mut ChaCha8Rng, clamps: &BTreeMap<usize, f64>) -> Vec<f64> {
    let ev = hm_draw(p, noise, r);
    let energy = clamps.get(&0).copied().unwrap_or(ev.energy);
    let mass = clamps.get(&1).copied().unwrap_or(ev.mass);
    // Cross section follows energy when energy is clamped.
    let sigma = match clamps.get(&2) {
        Some(v) => *v,
        None if clamps.contains_key(&0) => {
            let shift = ev.sigma - (p.sigma_base + p.sigma_slope * (ev.energy.log10() - p.log10_e_low));
            (p.sigma_base + p.sigma_slope * (energy.log10() - p.log10_e_low) + shift).clamp(100.0, 2000.0)
        }
        None => ev.sigma,
    };
    let (x_max, n_mu) = hm_core(p, energy, mass, sigma, noise, ev.z1, ev.z2);
    vec![
        energy,
        mass,
        sigma,
        clamps.get(&3).copied().unwrap_or(x_max),
        clamps.get(&4).copied().unwrap_or(n_mu.ln()),
    ]
}

// ---------------------------------------------------------------------------
// Time-stepped variants
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub(crate) enum Clamp {
    Hard(f64),
    Soft { lambda: f64, target: f64 },
}

/// Per-step clamps: variable index → clamp.
type Clamps = Vec<(usize, Clamp)>;

fn hard(clamps: &Clamps, k: usize) -> Option<f64> {
    clamps.iter().find_map(|(i, c)| match c {
        Clamp::Hard(v) if *i == k => Some(*v),
        _ => None,
    })
}

trait Stepper {
    fn dim(&self) -> usize;
    fn burn_in(&self) -> usize;
    fn max_lag(&self) -> usize {
        1
    }
    fn init(&self, r: &mut ChaCha8Rng) -> DVector<f64>;
    /// Next state; `hist[0]` is the previous state.
    fn step(&self, hist: &VecDeque<DVector<f64>>, r: &mut ChaCha8Rng, clamps: &Clamps) -> Result<DVector<f64>>;
    /// Measurement of a state (adds observation noise where modelled).
    fn observe(&self, state: &DVector<f64>, _r: &mut ChaCha8Rng) -> DVector<f64> {
        state.clone()
    }
}

struct DsgeStepper<'a> {
    p: &'a DsgeParams,
    noise: f64,
}

impl Stepper for DsgeStepper<'_> {
    fn dim(&self) -> usize {
        3
    }
    fn burn_in(&self) -> usize {
        self.p.burn_in
    }
    fn init(&self, _r: &mut ChaCha8Rng) -> DVector<f64> {
        DVector::zeros(3)
    }
    fn step(&self, hist: &VecDeque<DVector<f64>>, r: &mut ChaCha8Rng, clamps: &Clamps) -> Result<DVector<f64>> {
        let p = self.p;
        let prev = &hist[0];
        let e = [normal(r), normal(r), normal(r)];
        let y = hard(clamps, 0)
            .unwrap_or(-p.sigma * prev[2] + p.rho_y * prev[0] + self.noise * p.shock_y * e[0]);
        let pi = hard(clamps, 1)
            .unwrap_or(p.kappa * y + p.rho_pi * prev[1] + self.noise * p.shock_pi * e[1]);
        let i = hard(clamps, 2).unwrap_or(
            p.rho_i * prev[2] + (1.0 - p.rho_i) * (p.phi_pi * pi + p.phi_y * y) + self.noise * p.shock_i * e[2],
        );
        Ok(DVector::from_vec(vec![y, pi, i]))
    }
}

struct SvarStepper<'a> {
    p: &'a LinearSvarParams,
    order: Vec<usize>,
    noise: f64,
}

impl Stepper for SvarStepper<'_> {
    fn dim(&self) -> usize {
        self.p.dim()
    }
    fn burn_in(&self) -> usize {
        self.p.burn_in
    }
    fn max_lag(&self) -> usize {
        self.p.lags.len().max(1)
    }
    fn init(&self, _r: &mut ChaCha8Rng) -> DVector<f64> {
        DVector::zeros(self.dim())
    }
    fn step(&self, hist: &VecDeque<DVector<f64>>, r: &mut ChaCha8Rng, clamps: &Clamps) -> Result<DVector<f64>> {
        let p = self.p;
        let d = p.dim();
        let eps: Vec<f64> = (0..d).map(|_| normal(r)).collect();
        let mut x = DVector::zeros(d);
        for &j in &self.order {
            x[j] = match hard(clamps, j) {
                Some(v) => v,
                None => {
                    let mut v = p.intercept_at(j) + self.noise * p.shock_at(j) * eps[j];
                    for i in 0..d {
                        v += p.b0[j][i] * x[i];
                    }
                    for (l, mat) in p.lags.iter().enumerate() {
                        let past = &hist[l];
                        for i in 0..d {
                            v += mat[j][i] * past[i];
                        }
                    }
                    v
                }
            };
        }
        Ok(x)
    }
}

struct FeedbackStepper<'a> {
    p: &'a FeedbackParams,
    noise: f64,
}

impl Stepper for FeedbackStepper<'_> {
    fn dim(&self) -> usize {
        2
    }
    fn burn_in(&self) -> usize {
        self.p.burn_in
    }
    fn init(&self, _r: &mut ChaCha8Rng) -> DVector<f64> {
        DVector::from_vec(vec![self.p.setpoint, 0.0])
    }
    fn step(&self, hist: &VecDeque<DVector<f64>>, r: &mut ChaCha8Rng, clamps: &Clamps) -> Result<DVector<f64>> {
        let p = self.p;
        let prev = &hist[0];
        let ex = normal(r);
        let meal = if r.random::<f64>() < p.meal_prob { p.meal_size } else { 0.0 };
        let eu = normal(r);
        let x = hard(clamps, 0)
            .unwrap_or(prev[0] + p.effect * prev[1] + meal + self.noise * p.x_noise * ex);
        let u = hard(clamps, 1).unwrap_or(p.gain * (x - p.setpoint) + self.noise * p.u_noise * eu);
        Ok(DVector::from_vec(vec![x, u]))
    }
}

struct OdeStepper<'a> {
    p: &'a OdeParams,
    noise: f64,
}

impl OdeStepper<'_> {
    fn rk4(&self, x: &mut [f64], frozen: &[usize]) {
        let d = x.len();
        let h = self.p.dt;
        let f = |s: &[f64], out: &mut [f64]| {
            self.p.system.rhs(s, out);
            for &k in frozen {
                out[k] = 0.0;
            }
        };
        let mut k1 = vec![0.0; d];
        let mut k2 = vec![0.0; d];
        let mut k3 = vec![0.0; d];
        let mut k4 = vec![0.0; d];
        let mut tmp = vec![0.0; d];
        f(x, &mut k1);
        for k in 0..d {
            tmp[k] = x[k] + 0.5 * h * k1[k];
        }
        f(&tmp, &mut k2);
        for k in 0..d {
            tmp[k] = x[k] + 0.5 * h * k2[k];
        }
        f(&tmp, &mut k3);
        for k in 0..d {
            tmp[k] = x[k] + h * k3[k];
        }
        f(&tmp, &mut k4);
        for k in 0..d {
            x[k] += h / 6.0 * (k1[k] + 2.0 * k2[k] + 2.0 * k3[k] + k4[k]);
        }
    }

    /// One integration step with clamps. Soft clamps use Strang splitting:
    /// the linear restoring force is solved exactly over half steps, so very
    /// large strengths stay stable.
    fn substep(&self, x: &mut [f64], clamps: &Clamps) {
        let half = 0.5 * self.p.dt;
        let relax = |x: &mut [f64]| {
            for (k, c) in clamps {
                if let Clamp::Soft { lambda, target } = c {
                    x[*k] = target + (x[*k] - target) * (-lambda * half).exp();
                }
            }
        };
        let frozen: Vec<usize> = clamps
            .iter()
            .filter_map(|(k, c)| matches!(c, Clamp::Hard(_)).then_some(*k))
            .collect();
        for (k, c) in clamps {
            if let Clamp::Hard(v) = c {
                x[*k] = *v;
            }
        }
        relax(x);
        self.rk4(x, &frozen);
        relax(x);
    }
}

impl Stepper for OdeStepper<'_> {
    fn dim(&self) -> usize {
        self.p.system.dim()
    }
    fn burn_in(&self) -> usize {
        0
    }
    fn init(&self, r: &mut ChaCha8Rng) -> DVector<f64> {
        let d = self.dim();
        let draws: Vec<f64> = (0..d).map(|_| normal(r)).collect();
        let mut x = match (&self.p.init, &self.p.system) {
            (Some(x0), _) => DVector::from_vec(x0.clone()),
            (None, OdeKind::Lorenz63 { .. }) => {
                DVector::from_vec(vec![5.0 * draws[0], 5.0 * draws[1], 25.0 + 5.0 * draws[2]])
            }
            (None, OdeKind::Rossler { .. }) => DVector::from_vec(vec![1.0 + draws[0], 1.0 + draws[1], draws[2].abs()]),
            (None, OdeKind::Lorenz96 { forcing, .. }) => DVector::from_fn(d, |k, _| forcing + draws[k]),
            (None, OdeKind::Linear { .. }) => DVector::from_vec(draws),
        };
        let xs = x.as_mut_slice();
        for _ in 0..self.p.burn_in {
            self.rk4(xs, &[]);
        }
        x
    }
    fn step(&self, hist: &VecDeque<DVector<f64>>, _r: &mut ChaCha8Rng, clamps: &Clamps) -> Result<DVector<f64>> {
        let mut x = hist[0].clone();
        for _ in 0..self.p.stride {
            self.substep(x.as_mut_slice(), clamps);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::IntegrationFailure("trajectory left the finite range".into()));
        }
        Ok(x)
    }
    fn observe(&self, state: &DVector<f64>, r: &mut ChaCha8Rng) -> DVector<f64> {
        let s = self.noise * self.p.obs_noise;
        DVector::from_fn(state.len(), |k, _| state[k] + s * normal(r))
    }
}

impl SimulatorSpec {
    fn stepper(&self) -> Option<Box<dyn Stepper + '_>> {
        let noise = self.noise_scale;
        match &self.variant {
            Variant::Dsge(p) => Some(Box::new(DsgeStepper { p, noise })),
            Variant::LinearSvar(p) => Some(Box::new(SvarStepper {
                p,
                order: p.order(),
                noise,
            })),
            Variant::FeedbackToy(p) => Some(Box::new(FeedbackStepper { p, noise })),
            Variant::OdeSystem(p) => Some(Box::new(OdeStepper { p, noise })),
            _ => None,
        }
    }
}

/// Runs one unit for `n` recorded steps; `clamps_at(t)` gives the clamps at
/// recorded step t. Burn-in steps are never clamped.
fn run_unit(
    st: &dyn Stepper,
    r: &mut ChaCha8Rng,
    n: usize,
    clamps_at: &dyn Fn(usize) -> Clamps,
    base: &Clamps,
) -> Result<Vec<DVector<f64>>> {
    let lag = st.max_lag();
    let x0 = st.init(r);
    let mut hist: VecDeque<DVector<f64>> = std::iter::repeat_n(x0, lag).collect();
    for _ in 0..st.burn_in() {
        let x = st.step(&hist, r, base)?;
        hist.push_front(x);
        hist.truncate(lag);
    }
    let mut out = Vec::with_capacity(n);
    for t in 0..n {
        let mut clamps = base.clone();
        clamps.extend(clamps_at(t));
        let x = st.step(&hist, r, &clamps)?;
        out.push(st.observe(&x, r));
        hist.push_front(x);
        hist.truncate(lag);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Battery
// ---------------------------------------------------------------------------

/// Runs one cell for `n` cycles; rows are `[temp, ir, cap]`. Clamps apply
/// from cycle `from` onwards.
fn battery_cell(
    p: &BatteryParams,
    noise: f64,
    r: &mut ChaCha8Rng,
    n: usize,
    clamps: &BTreeMap<usize, f64>,
    from: usize,
) -> Vec<[f64; 3]> {
    let ir0 = p.ir0 * (1.0 + p.ir0_spread * normal(r));
    let span = (n.max(2) - 1) as f64;
    let mut sei = 0.0;
    let mut out = Vec::with_capacity(n);
    for c in 0..n {
        let (et, ei, ec) = (normal(r), normal(r), normal(r));
        let on = c >= from;
        let get = |k: usize| if on { clamps.get(&k).copied() } else { None };
        let temp = get(0).unwrap_or_else(|| {
            (p.t_low_c + (p.t_high_c - p.t_low_c) * c as f64 / span + noise * p.temp_noise * et)
                .clamp(p.t_low_c, p.t_high_c)
        });
        let k = p.rate(temp);
        sei += p.sei_growth * k;
        let ir = get(1).unwrap_or(ir0 + p.ir_per_sei * sei + noise * p.ir_noise * ei);
        let cap = get(2).unwrap_or(p.cap0 + p.cap_ir_coupling * k * ir - p.cap_fade * k + noise * p.cap_noise * ec);
        out.push([temp, ir, cap]);
    }
    out
}

// ---------------------------------------------------------------------------
// Public entry points
// ---------------------------------------------------------------------------

/// Observational run of `t` steps (cycles for the battery, events for the
/// shower model). Deterministic in `(spec, t, seed)`.
pub fn simulate_observational(spec: &SimulatorSpec, t: usize, seed: u64) -> Result<TimeSeriesPanel> {
    spec.validate()?;
    if t == 0 {
        return Err(Error::InvalidSpec("need at least one step".into()));
    }
    let mut r = rng::rng(seed);
    let rows: Vec<Vec<f64>> = match &spec.variant {
        Variant::ArrheniusBattery(p) => battery_cell(p, spec.noise_scale, &mut r, t, &BTreeMap::new(), 0)
            .into_iter()
            .map(|row| vec![row[1], row[2]])
            .collect(),
        Variant::HeitlerMatthews(p) => (0..t)
            .map(|_| hm_event(p, spec.noise_scale, &mut r, &BTreeMap::new()))
            .collect(),
        _ => {
            let st = spec.stepper().expect("time-stepped variant");
            run_unit(st.as_ref(), &mut r, t, &|_| Vec::new(), &Vec::new())?
                .into_iter()
                .map(|x| x.iter().copied().collect())
                .collect()
        }
    };
    let panel = TimeSeriesPanel::from_rows(&rows, spec.observed_names())?;
    match &spec.variant {
        Variant::OdeSystem(p) => panel.with_dt(p.dt * p.stride as f64),
        _ => Ok(panel),
    }
}

fn check_request(spec: &SimulatorSpec, req: &DoRequest, values: &[f64]) -> Result<()> {
    spec.validate()?;
    spec.index_of(&req.target)?;
    if let DoMode::Soft { lambda } = req.mode {
        if !matches!(spec.variant, Variant::OdeSystem(_)) {
            return Err(Error::UnsupportedVariant(format!(
                "soft interventions need an ODE system, not {}",
                spec.variant.kind()
            )));
        }
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidSpec(format!("soft strength must be positive, got {lambda}")));
        }
    }
    for v in values {
        spec.check_value(&req.target, *v)?;
    }
    for (name, v) in &req.also {
        spec.check_value(name, *v)?;
    }
    Ok(())
}

/// Outcome row of one unit, with the target clamped at `value` (or left
/// alone when `value` is `None`).
fn unit_outcome(spec: &SimulatorSpec, req: &DoRequest, value: Option<f64>, seed: u64) -> Result<Vec<f64>> {
    let mut r = rng::rng(seed);
    let target = spec.index_of(&req.target)?;
    let also: BTreeMap<usize, f64> = req
        .also
        .iter()
        .map(|(k, v)| Ok((spec.index_of(k)?, *v)))
        .collect::<Result<_>>()?;
    match &spec.variant {
        Variant::ArrheniusBattery(p) => {
            let n = if req.horizon > 0 { req.horizon } else { p.cycles };
            let from = match req.mode {
                DoMode::PointInTime { t0 } => t0.min(n - 1),
                _ => 0,
            };
            let mut clamps = also.clone();
            if let Some(v) = value {
                clamps.insert(target, v);
            }
            let rows = battery_cell(p, spec.noise_scale, &mut r, n, &clamps, from);
            Ok(rows[n - 1].to_vec())
        }
        Variant::HeitlerMatthews(p) => {
            let mut clamps = also.clone();
            if let Some(v) = value {
                clamps.insert(target, v);
            }
            Ok(hm_event(p, spec.noise_scale, &mut r, &clamps))
        }
        _ => {
            let st = spec.stepper().expect("time-stepped variant");
            let base: Clamps = also.iter().map(|(k, v)| (*k, Clamp::Hard(*v))).collect();
            let clamp = value.map(|v| match req.mode {
                DoMode::Soft { lambda } => Clamp::Soft { lambda, target: v },
                _ => Clamp::Hard(v),
            });
            let n = req.outcome_step() + 1;
            let schedule = |t: usize| match clamp {
                Some(c) if req.clamped_at(t) => vec![(target, c)],
                _ => Vec::new(),
            };
            let traj = run_unit(st.as_ref(), &mut r, n, &schedule, &base)?;
            Ok(traj[n - 1].iter().copied().collect())
        }
    }
}

fn unit_block(spec: &SimulatorSpec, req: &DoRequest, value: Option<f64>, m: usize, seed: u64) -> Result<DMatrix<f64>> {
    let rows: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|k| unit_outcome(spec, req, value, rng::derive(seed, k as u64)))
        .collect::<Result<_>>()?;
    let d = spec.var_names().len();
    Ok(DMatrix::from_fn(m, d, |r, c| rows[r][c]))
}

/// Full trajectory of `t` recorded steps over all variables, optionally with
/// one variable clamped at every step. Uses the same random stream as
/// [`simulate_observational`] for the same seed.
pub(crate) fn trajectory(
    spec: &SimulatorSpec,
    t: usize,
    seed: u64,
    clamp: Option<(usize, Clamp)>,
) -> Result<DMatrix<f64>> {
    spec.validate()?;
    let mut r = rng::rng(seed);
    let d = spec.var_names().len();
    match &spec.variant {
        Variant::HeitlerMatthews(_) => Err(Error::UnsupportedVariant(
            "the shower model has no time dimension to clamp along".into(),
        )),
        Variant::ArrheniusBattery(p) => {
            let mut clamps = BTreeMap::new();
            if let Some((k, c)) = clamp {
                match c {
                    Clamp::Hard(v) => clamps.insert(k, v),
                    Clamp::Soft { .. } => {
                        return Err(Error::UnsupportedVariant("soft clamps need an ODE system".into()))
                    }
                };
            }
            let rows = battery_cell(p, spec.noise_scale, &mut r, t, &clamps, 0);
            Ok(DMatrix::from_fn(t, d, |i, j| rows[i][j]))
        }
        _ => {
            let st = spec.stepper().expect("time-stepped variant");
            let schedule = |_t: usize| clamp.into_iter().collect::<Clamps>();
            let rows = run_unit(st.as_ref(), &mut r, t, &schedule, &Vec::new())?;
            Ok(DMatrix::from_fn(t, d, |i, j| rows[i][j]))
        }
    }
}

/// `m` interventional draws at `req.value`, plus `m` paired reference draws
/// without the clamp.
pub fn simulate_do(spec: &SimulatorSpec, req: &DoRequest, m: usize, seed: u64) -> Result<InterventionDataset> {
    simulate_do_grid(spec, req, &[req.value], m, seed)
}

/// Like [`simulate_do`] for several clamp values. Draw k uses the same
/// random stream for every value and for the reference.
pub fn simulate_do_grid(
    spec: &SimulatorSpec,
    req: &DoRequest,
    values: &[f64],
    m: usize,
    seed: u64,
) -> Result<InterventionDataset> {
    check_request(spec, req, values)?;
    if m == 0 {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    let names = spec.var_names();
    let bias = spec
        .bias_inject
        .as_ref()
        .map(|b| (names.iter().position(|n| *n == b.target).unwrap_or(0), b.shift));
    let mut outcomes = Vec::with_capacity(values.len());
    for &v in values {
        let mut block = unit_block(spec, req, Some(v), m, seed)?;
        if let Some((col, shift)) = bias {
            block.column_mut(col).add_scalar_mut(shift);
        }
        outcomes.push(block);
    }
    let reference = unit_block(spec, req, None, m, seed)?;
    InterventionDataset::new(
        req.target.clone(),
        names,
        values.to_vec(),
        outcomes,
        Some(reference),
        Provenance::SimulatorDo,
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dsge() -> SimulatorSpec {
        SimulatorSpec::dsge(DsgeParams::default())
    }

    #[test]
    fn determinism() {
        for spec in [
            dsge(),
            SimulatorSpec::battery(BatteryParams::default()),
            SimulatorSpec::heitler_matthews(HmParams::default()),
            SimulatorSpec::ode(OdeParams::new(OdeKind::lorenz63())),
            SimulatorSpec::linear_svar(LinearSvarParams::chain(3, 0.5)),
            SimulatorSpec::feedback(FeedbackParams::default()),
        ] {
            let a = simulate_observational(&spec, 50, 9).unwrap();
            let b = simulate_observational(&spec, 50, 9).unwrap();
            assert_eq!(a, b);
            let target = spec.var_names()[0].clone();
            let v = match spec.variant {
                Variant::ArrheniusBattery(_) => 25.0,
                Variant::HeitlerMatthews(_) => 1e16,
                _ => 1.0,
            };
            let req = DoRequest::new(target, v);
            let x = simulate_do(&spec, &req, 5, 3).unwrap();
            let y = simulate_do(&spec, &req, 5, 3).unwrap();
            assert_eq!(x, y);
        }
    }

    #[test]
    fn dsge_ols_slope_is_positive_under_feedback() {
        let spec = dsge();
        let positive = (0..50)
            .filter(|&s| {
                let p = simulate_observational(&spec, 192, s).unwrap();
                let fit = stats::simple_regression(&p.column(2), &p.column(1)).unwrap();
                fit.slope > 0.0
            })
            .count();
        assert!(positive >= 40, "{positive}/50");
    }

    #[test]
    fn dsge_do_matches_minus_sigma_kappa() {
        let spec = dsge();
        let ds = simulate_do(&spec, &DoRequest::new("i", 1.0), 100, 1).unwrap();
        // The horizon-0 reference holds the natural rate at the clamp step.
        let at_clamp = simulate_do(&spec, &DoRequest::new("i", 1.0).horizon(0), 100, 1).unwrap();
        let reference = ds.reference.as_ref().unwrap();
        let natural = at_clamp.reference.as_ref().unwrap();
        let mut diffs = Vec::new();
        for k in 0..100 {
            let d = ds.outcomes[0][(k, 1)] - reference[(k, 1)];
            let offset = 1.0 - natural[(k, 2)];
            assert!((d - (-0.038 * 0.114) * offset).abs() < 1e-12);
            diffs.push(d);
        }
        assert!(stats::mean(&diffs) < 0.0);
    }

    #[test]
    fn dsge_oracles() {
        assert!((true_effect(&dsge(), "i", "pi").unwrap() + 0.004332).abs() < 1e-9);
        let flat = dsge().with_phi("sigma", 0.0).unwrap();
        assert_eq!(true_effect(&flat, "i", "pi"), Some(-0.0));
        assert_eq!(true_effect(&dsge(), "pi", "i"), None);
    }

    #[test]
    fn dsge_calibration_recovers_parameters() {
        let spec = dsge();
        let p = simulate_observational(&spec, 20_000, 5).unwrap();
        let fit = DsgeParams::calibrate(&p).unwrap();
        assert!((fit.rho_i - 0.882).abs() < 0.02);
        assert!((fit.kappa - 0.114).abs() < 0.02);
        assert!((fit.rho_y - 0.5).abs() < 0.03);
    }

    #[test]
    fn battery_observational_correlation_is_negative() {
        let spec = SimulatorSpec::battery(BatteryParams::default());
        for s in 0..5 {
            let p = simulate_observational(&spec, 500, s).unwrap();
            assert!(stats::correlation(&p.column(0), &p.column(1)) < 0.0);
        }
    }

    #[test]
    fn battery_do_temperature_gives_positive_slope() {
        let spec = SimulatorSpec::battery(BatteryParams::default());
        let req = DoRequest::new("temp", 25.0).mode(DoMode::AllSteps).horizon(500);
        let ds = simulate_do(&spec, &req, 50, 2).unwrap();
        let ir: Vec<f64> = ds.outcomes[0].column(1).iter().copied().collect();
        let cap: Vec<f64> = ds.outcomes[0].column(2).iter().copied().collect();
        let fit = stats::simple_regression(&ir, &cap).unwrap();
        assert!(fit.slope > 0.0, "{}", fit.slope);
        let truth = true_effect(&spec, "ir", "cap").unwrap();
        assert!((truth - 0.030).abs() < 0.002);
    }

    #[test]
    fn battery_temperature_out_of_range() {
        let spec = SimulatorSpec::battery(BatteryParams::default());
        let err = simulate_do(&spec, &DoRequest::new("temp", -300.0), 3, 0);
        assert!(matches!(err, Err(Error::OutOfPhysicalRange { .. })));
        assert!(matches!(
            simulate_do(&spec, &DoRequest::new("voltage", 1.0), 3, 0),
            Err(Error::InvalidTarget(_))
        ));
    }

    #[test]
    fn hm_muon_number_ignores_cross_section() {
        let p = HmParams::default();
        let a = hm_shower(&p, 1e16, 1.0, 450.0, 0.0, &mut rng::rng(1)).unwrap();
        let b = hm_shower(&p, 1e16, 1.0, 550.0, 0.0, &mut rng::rng(1)).unwrap();
        assert_eq!(a.1, b.1);
        let c = hm_shower(&p, 1e16, 1.0, 450.0, 1.0, &mut rng::rng(1)).unwrap();
        let d = hm_shower(&p, 1e16, 1.0, 550.0, 1.0, &mut rng::rng(1)).unwrap();
        assert_eq!(c.1, d.1);
    }

    #[test]
    fn hm_energy_scaling_and_slope() {
        let p = HmParams::default();
        let mut r = rng::rng(0);
        let (_, n1) = hm_shower(&p, 1e16, 1.0, 500.0, 0.0, &mut r).unwrap();
        let (_, n2) = hm_shower(&p, 2e16, 1.0, 500.0, 0.0, &mut r).unwrap();
        assert!((n2 / n1 - 2f64.powf(0.85)).abs() < 1e-9);
        let (x450, _) = hm_shower(&p, 1e16, 1.0, 450.0, 0.0, &mut r).unwrap();
        let (x550, _) = hm_shower(&p, 1e16, 1.0, 550.0, 0.0, &mut r).unwrap();
        let slope = (x550 - x450) / 100.0;
        assert!((-0.12..=-0.05).contains(&slope), "{slope}");
        assert!(matches!(
            hm_shower(&p, 1e16, 1.0, 50.0, 0.0, &mut r),
            Err(Error::OutOfPhysicalRange { .. })
        ));
    }

    #[test]
    fn hm_observational_muon_slope_is_positive() {
        let spec = SimulatorSpec::heitler_matthews(HmParams::default());
        let p = simulate_observational(&spec, 2000, 4).unwrap();
        let fit = stats::simple_regression(&p.column(2), &p.column(4)).unwrap();
        assert!(fit.slope > 0.0);
    }

    #[test]
    fn hm_do_has_zero_muon_effect() {
        let spec = SimulatorSpec::heitler_matthews(HmParams::default());
        let req = DoRequest::new("sigma_inel", 450.0).also("energy", 1e16).also("mass", 1.0);
        let ds = simulate_do_grid(&spec, &req, &[450.0, 500.0, 550.0], 500, 8).unwrap();
        assert_eq!(ds.outcomes[0].column(4), ds.outcomes[2].column(4));
        assert!(ds.outcomes[0].column(3).mean() > ds.outcomes[2].column(3).mean());
    }

    #[test]
    fn linear_svar_child_shift_matches_coefficient() {
        let spec = SimulatorSpec::linear_svar(LinearSvarParams::chain(3, 0.7));
        let req = DoRequest::new("x0", 0.0).horizon(0);
        let ds = simulate_do_grid(&spec, &req, &[0.0, 2.0], 400, 1).unwrap();
        let shift = ds.outcomes[1].column(1).mean() - ds.outcomes[0].column(1).mean();
        assert!((shift - 1.4).abs() < 1e-9);
        let grand = ds.outcomes[1].column(2).mean() - ds.outcomes[0].column(2).mean();
        assert!((grand - 0.98).abs() < 1e-9);
        // Upstream of the clamp nothing moves.
        let req = DoRequest::new("x1", 5.0).horizon(0);
        let ds = simulate_do(&spec, &req, 50, 1).unwrap();
        assert_eq!(ds.outcomes[0].column(0), ds.reference.as_ref().unwrap().column(0));
    }

    #[test]
    fn linear_svar_rejects_cycles() {
        let spec = SimulatorSpec::linear_svar(LinearSvarParams::from_b0(vec![vec![0.0, 0.5], vec![0.5, 0.0]]));
        assert!(matches!(spec.validate(), Err(Error::InvalidSpec(_))));
        assert!(matches!(
            simulate_observational(&spec, 10, 0),
            Err(Error::InvalidSpec(_))
        ));
    }

    #[test]
    fn feedback_loop_confounds() {
        let spec = SimulatorSpec::feedback(FeedbackParams::default());
        let p = simulate_observational(&spec, 2000, 3).unwrap();
        let u: Vec<f64> = p.column(1)[..1999].to_vec();
        let x_next: Vec<f64> = p.column(0)[1..].to_vec();
        let fit = stats::simple_regression(&u, &x_next).unwrap();
        assert!(fit.slope > 0.0, "observational slope {}", fit.slope);
        assert_eq!(true_effect(&spec, "u", "x"), Some(-0.5));
        let mean = spec.stationary_mean().unwrap();
        assert!((stats::mean(&p.column(0)) - mean[0]).abs() < 0.2);
    }

    #[test]
    fn soft_mode_needs_ode() {
        let req = DoRequest::new("i", 1.0).mode(DoMode::Soft { lambda: 10.0 });
        assert!(matches!(
            simulate_do(&dsge(), &req, 2, 0),
            Err(Error::UnsupportedVariant(_))
        ));
    }

    #[test]
    fn bias_only_touches_interventional_outputs() {
        let spec = dsge().with_bias("pi", 0.5);
        let plain = simulate_do(&dsge(), &DoRequest::new("i", 1.0), 20, 4).unwrap();
        let biased = simulate_do(&spec, &DoRequest::new("i", 1.0), 20, 4).unwrap();
        assert_eq!(plain.reference, biased.reference);
        let gap = &biased.outcomes[0] - &plain.outcomes[0];
        for k in 0..20 {
            assert!((gap[(k, 1)] - 0.5).abs() < 1e-12);
            assert_eq!(gap[(k, 0)], 0.0);
        }
    }

    #[test]
    fn clamping_changes_only_the_target_mechanism() {
        for spec in [
            dsge(),
            SimulatorSpec::battery(BatteryParams::default()),
            SimulatorSpec::heitler_matthews(HmParams::default()),
            SimulatorSpec::linear_svar(LinearSvarParams::chain(4, 0.5)),
            SimulatorSpec::feedback(FeedbackParams::default()),
            SimulatorSpec::ode(OdeParams::new(OdeKind::rossler())),
        ] {
            let before = spec.mechanisms();
            for target in spec.var_names() {
                let after = spec.intervened_mechanisms(&target, 1.0).unwrap();
                for (a, b) in before.iter().zip(&after) {
                    if a.variable == target {
                        assert!(b.parents.is_empty() && b.clamped == Some(1.0));
                    } else {
                        assert_eq!(a, b);
                    }
                }
            }
        }
    }

    #[test]
    fn spec_round_trips_through_toml_and_json() {
        let spec = SimulatorSpec::linear_svar(LinearSvarParams::chain(3, 0.5)).with_bias("x2", 0.1);
        let text = spec.to_toml().unwrap();
        assert_eq!(SimulatorSpec::from_toml(&text).unwrap(), spec);
        let json = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<SimulatorSpec>(&json).unwrap(), spec);
        let short = "variant = \"dsge\"\nkappa = 0.2\n";
        let parsed = SimulatorSpec::from_toml(short).unwrap();
        assert_eq!(parsed.phi()["kappa"], 0.2);
        assert_eq!(parsed.noise_scale, 1.0);
    }

    #[test]
    fn phi_round_trip() {
        let spec = SimulatorSpec::linear_svar(LinearSvarParams::chain(3, 0.5));
        let phi = spec.phi();
        assert_eq!(phi["b0_0_1"], 0.5);
        let changed = spec.with_phi("b0_1_2", 0.9).unwrap();
        assert_eq!(true_effect(&changed, "x1", "x2"), Some(0.9));
        let dsge = dsge();
        assert!(matches!(dsge.with_phi("rho_i", 1.5), Err(Error::OutOfPhysicalRange { .. })));
        assert!(dsge.with_phi("nope", 1.0).is_err());
    }

    #[test]
    fn lorenz_observational_is_bounded() {
        let spec = SimulatorSpec::ode(OdeParams::new(OdeKind::lorenz63()));
        let p = simulate_observational(&spec, 2000, 1).unwrap();
        assert!(p.values().amax() < 60.0);
        assert_eq!(p.dt(), Some(0.01));
    }
}

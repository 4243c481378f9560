//! Reduced-form VAR estimation.
//!
//! Columns are standardized before fitting and the coefficients mapped back,
//! so the Ridge fallback penalty is scale-free. The lag order minimizes BIC
//! over `1..=p_max` on the common sample `t = p_max..T`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::TimeSeriesPanel;
use crate::stats;

/// How the coefficients were obtained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum FitMethod {
    Ols,
    Ridge { lambda: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarConfig {
    /// Penalty used when OLS is infeasible.
    pub ridge_lambda: f64,
}

impl Default for VarConfig {
    fn default() -> Self {
        Self { ridge_lambda: 1.0 }
    }
}

/// `y_t = c + Σ_l Φ_l y_{t−l} + u_t`. `coeffs[l-1][(j, i)]` is the effect of
/// variable i at lag l on variable j.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarModel {
    pub p: usize,
    pub coeffs: Vec<DMatrix<f64>>,
    pub intercept: DVector<f64>,
    pub resid_cov: DMatrix<f64>,
    pub method: FitMethod,
    pub names: Vec<String>,
    /// BIC for each candidate lag `1..=p_max` (empty when fitted at a fixed lag).
    pub bic_path: Vec<f64>,
    /// Spectral radius of the companion matrix.
    pub spectral_radius: f64,
}

impl VarModel {
    pub fn d(&self) -> usize {
        self.intercept.len()
    }

    /// Model with all coefficients zero.
    pub fn zeros(d: usize, p: usize, names: Vec<String>) -> Self {
        Self {
            p,
            coeffs: vec![DMatrix::zeros(d, d); p],
            intercept: DVector::zeros(d),
            resid_cov: DMatrix::zeros(d, d),
            method: FitMethod::Ols,
            names,
            bic_path: Vec::new(),
            spectral_radius: 0.0,
        }
    }

    /// Stability flag: companion spectral radius strictly below one.
    pub fn is_stable(&self) -> bool {
        self.spectral_radius < 1.0
    }

    /// Conditional mean of `y_t` given `history[0] = y_{t−1}, history[1] = y_{t−2}, …`.
    pub fn predict(&self, history: &[DVector<f64>]) -> DVector<f64> {
        let mut y = self.intercept.clone();
        for (l, phi) in self.coeffs.iter().enumerate() {
            y += phi * &history[l];
        }
        y
    }

    pub fn companion_spectral_radius(&self) -> f64 {
        companion_radius(&self.coeffs)
    }
}

fn companion_radius(coeffs: &[DMatrix<f64>]) -> f64 {
    let p = coeffs.len();
    if p == 0 {
        return 0.0;
    }
    let d = coeffs[0].nrows();
    let n = d * p;
    let mut comp = DMatrix::zeros(n, n);
    for (l, phi) in coeffs.iter().enumerate() {
        comp.view_mut((0, l * d), (d, d)).copy_from(phi);
    }
    for k in d..n {
        comp[(k, k - d)] = 1.0;
    }
    comp.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Lagged design `[1, z_{t−1}, …, z_{t−p}]` and response `z_t` for `t = start..T`.
fn design(z: &DMatrix<f64>, p: usize, start: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let (t_len, d) = z.shape();
    let rows = t_len - start;
    let x = DMatrix::from_fn(rows, 1 + p * d, |r, c| {
        if c == 0 {
            1.0
        } else {
            let l = (c - 1) / d + 1;
            let i = (c - 1) % d;
            z[(start + r - l, i)]
        }
    });
    let y = z.rows(start, rows).into_owned();
    (x, y)
}

struct RawFit {
    beta: DMatrix<f64>,
    resid: DMatrix<f64>,
    method: FitMethod,
}

fn fit_design(x: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64) -> Result<RawFit> {
    let ols = if x.nrows() > x.ncols() {
        stats::ols(x, y).ok()
    } else {
        None
    };
    let (beta, method) = match ols {
        Some(b) => (b, FitMethod::Ols),
        None => (
            stats::ridge(x, y, lambda, &[0])?,
            FitMethod::Ridge { lambda },
        ),
    };
    if beta.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularDesign);
    }
    let resid = y - x * &beta;
    Ok(RawFit {
        beta,
        resid,
        method,
    })
}

fn log_det_cov(resid: &DMatrix<f64>) -> f64 {
    let n = resid.nrows() as f64;
    let cov = resid.transpose() * resid / n;
    let eig = cov.symmetric_eigen();
    eig.eigenvalues.iter().map(|v| v.max(1e-300).ln()).sum()
}

fn bic_value(resid: &DMatrix<f64>, p: usize) -> f64 {
    let (t_eff, d) = resid.shape();
    let k = (d * (1 + p * d)) as f64;
    t_eff as f64 * log_det_cov(resid) + k * (t_eff as f64).ln()
}

/// BIC of a VAR(p) fitted on the sample `t = p..T` of the standardized panel.
pub fn bic(panel: &TimeSeriesPanel, p: usize) -> Result<f64> {
    bic_with(panel, p, &VarConfig::default())
}

pub fn bic_with(panel: &TimeSeriesPanel, p: usize, cfg: &VarConfig) -> Result<f64> {
    let t = panel.n_obs();
    if t <= 2 || p == 0 || t < p + 2 {
        return Err(Error::TooShort(format!("T = {t} cannot support lag {p}")));
    }
    let (z, _, _) = stats::standardize_columns(panel.values());
    let (x, y) = design(&z, p, p);
    let fit = fit_design(&x, &y, cfg.ridge_lambda)?;
    Ok(bic_value(&fit.resid, p))
}

/// Fits a VAR with BIC lag selection over `1..=p_max`.
pub fn fit_var(panel: &TimeSeriesPanel, p_max: usize) -> Result<VarModel> {
    fit_var_with(panel, p_max, &VarConfig::default())
}

pub fn fit_var_with(panel: &TimeSeriesPanel, p_max: usize, cfg: &VarConfig) -> Result<VarModel> {
    let t = panel.n_obs();
    if t <= 2 {
        return Err(Error::TooShort(format!("T = {t}; need at least 3 observations")));
    }
    if p_max == 0 {
        return Err(Error::Config("p_max must be at least 1".into()));
    }
    let p_cap = p_max.min(t - 2);
    let (z, means, scales) = stats::standardize_columns(panel.values());

    let mut bic_path = Vec::with_capacity(p_cap);
    for p in 1..=p_cap {
        let (x, y) = design(&z, p, p_cap);
        let fit = fit_design(&x, &y, cfg.ridge_lambda)?;
        bic_path.push(bic_value(&fit.resid, p));
    }
    let p = 1 + bic_path
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(k, _)| k)
        .unwrap_or(0);

    let (x, y) = design(&z, p, p);
    let mut fit = fit_design(&x, &y, cfg.ridge_lambda)?;
    let d = panel.n_vars();
    if t < d && fit.method == FitMethod::Ols {
        fit = RawFit {
            beta: stats::ridge(&x, &y, cfg.ridge_lambda, &[0])?,
            resid: DMatrix::zeros(0, 0),
            method: FitMethod::Ridge {
                lambda: cfg.ridge_lambda,
            },
        };
    }

    // Back to original units: Φ_l = S A_l S⁻¹, c = m + S a − Σ Φ_l m.
    let mut coeffs = Vec::with_capacity(p);
    for l in 0..p {
        coeffs.push(DMatrix::from_fn(d, d, |j, i| {
            fit.beta[(1 + l * d + i, j)] * scales[j] / scales[i]
        }));
    }
    let mut intercept = DVector::from_fn(d, |j, _| means[j] + scales[j] * fit.beta[(0, j)]);
    for phi in &coeffs {
        intercept -= phi * &means;
    }

    let mut model = VarModel {
        p,
        coeffs,
        intercept,
        resid_cov: DMatrix::zeros(d, d),
        method: fit.method,
        names: panel.names().to_vec(),
        bic_path,
        spectral_radius: 0.0,
    };
    let resid = residual_matrix(&model, panel.values());
    let n = resid.nrows() as f64;
    let cov = resid.transpose() * &resid / n;
    model.resid_cov = (&cov + cov.transpose()) * 0.5;
    model.spectral_radius = model.companion_spectral_radius();
    Ok(model)
}

fn residual_matrix(model: &VarModel, y: &DMatrix<f64>) -> DMatrix<f64> {
    let (t, d) = y.shape();
    let p = model.p;
    let mut out = DMatrix::zeros(t - p, d);
    for r in p..t {
        let mut u: DVector<f64> = y.row(r).transpose() - &model.intercept;
        for (l, phi) in model.coeffs.iter().enumerate() {
            u -= phi * y.row(r - l - 1).transpose();
        }
        out.set_row(r - p, &u.transpose());
    }
    out
}

/// Residuals `û_t = y_t − c − Σ Φ_l y_{t−l}` for `t = p+1..T`.
pub fn residuals(model: &VarModel, panel: &TimeSeriesPanel) -> Result<TimeSeriesPanel> {
    if panel.n_vars() != model.d() {
        return Err(Error::DimensionMismatch(format!(
            "model has {} variables, panel has {}",
            model.d(),
            panel.n_vars()
        )));
    }
    if panel.n_obs() <= model.p {
        return Err(Error::DimensionMismatch(format!(
            "panel has {} rows; lag {} needs more",
            panel.n_obs(),
            model.p
        )));
    }
    TimeSeriesPanel::new(residual_matrix(model, panel.values()), panel.names().to_vec())
}

/// Reduced-form covariance `Σ_u = A Σ_ε Aᵀ` implied by an impact matrix A.
pub fn reduced_form_covariance(impact: &DMatrix<f64>, shock_cov: &DMatrix<f64>) -> DMatrix<f64> {
    impact * shock_cov * impact.transpose()
}

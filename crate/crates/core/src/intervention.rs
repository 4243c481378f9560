//! Intervention design and surrogate interventional data.
//!
//! Besides simulator runs, three surrogates produce interventional data when
//! only a fitted model or the generating equations are at hand: forward
//! simulation of a fitted VAR with the target clamped, a hard clamp inside
//! the generating process, and a soft restoring force on an ODE system.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::TimeSeriesPanel;
use crate::rng;
use crate::simulators::{self, Clamp, SimulatorSpec, Variant};
use crate::var_engine::{self, VarModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    SimulatorDo,
    VarForward,
    DgpHard,
    OdeSoft,
}

/// Interventional draws for one target over a set of clamp values.
#[derive(Debug, Clone, PartialEq)]
pub struct InterventionDataset {
    pub target: String,
    /// Column names of every outcome block.
    pub names: Vec<String>,
    pub values: Vec<f64>,
    /// One M×d block per value.
    pub outcomes: Vec<DMatrix<f64>>,
    /// Paired draws without the clamp, when the generator provides them.
    pub reference: Option<DMatrix<f64>>,
    pub provenance: Provenance,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    target: String,
    names: Vec<String>,
    values: Vec<f64>,
    m: usize,
    provenance: Provenance,
    seed: u64,
    files: Vec<String>,
    #[serde(default)]
    reference: Option<String>,
}

impl InterventionDataset {
    pub fn new(
        target: String,
        names: Vec<String>,
        values: Vec<f64>,
        outcomes: Vec<DMatrix<f64>>,
        reference: Option<DMatrix<f64>>,
        provenance: Provenance,
        seed: u64,
    ) -> Result<Self> {
        if values.is_empty() || values.len() != outcomes.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} values for {} outcome blocks",
                values.len(),
                outcomes.len()
            )));
        }
        for (a, v) in values.iter().enumerate() {
            if values[..a].contains(v) {
                return Err(Error::InvalidSpec(format!("clamp value {v} repeated")));
            }
        }
        let d = names.len();
        for block in outcomes.iter().chain(reference.iter()) {
            if block.nrows() == 0 {
                return Err(Error::EmptySample);
            }
            if block.ncols() != d {
                return Err(Error::DimensionMismatch(format!(
                    "outcome block has {} columns for {d} names",
                    block.ncols()
                )));
            }
        }
        if !names.contains(&target) {
            return Err(Error::InvalidTarget(target));
        }
        Ok(Self {
            target,
            names,
            values,
            outcomes,
            reference,
            provenance,
            seed,
        })
    }

    /// Draws in the first block.
    pub fn m(&self) -> usize {
        self.outcomes[0].nrows()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::InvalidTarget(name.to_string()))
    }

    /// Draws of variable `name` at clamp value number `k`.
    pub fn column(&self, k: usize, name: &str) -> Result<Vec<f64>> {
        let j = self.index_of(name)?;
        let block = self
            .outcomes
            .get(k)
            .ok_or_else(|| Error::DimensionMismatch(format!("no clamp value number {k}")))?;
        Ok(block.column(j).iter().copied().collect())
    }

    pub fn reference_column(&self, name: &str) -> Result<Option<Vec<f64>>> {
        let j = self.index_of(name)?;
        Ok(self.reference.as_ref().map(|r| r.column(j).iter().copied().collect()))
    }

    /// Writes one CSV per clamp value (plus the reference) and a JSON
    /// manifest into `dir`; returns the manifest path.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut files = Vec::new();
        for (k, block) in self.outcomes.iter().enumerate() {
            let file = format!("value_{k}.csv");
            TimeSeriesPanel::new(block.clone(), self.names.clone())?.write_csv(dir.join(&file))?;
            files.push(file);
        }
        let reference = match &self.reference {
            Some(r) => {
                TimeSeriesPanel::new(r.clone(), self.names.clone())?.write_csv(dir.join("reference.csv"))?;
                Some("reference.csv".to_string())
            }
            None => None,
        };
        let manifest = Manifest {
            version: 1,
            target: self.target.clone(),
            names: self.names.clone(),
            values: self.values.clone(),
            m: self.m(),
            provenance: self.provenance,
            seed: self.seed,
            files,
            reference,
        };
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
        Ok(path)
    }

    /// Reads a dataset from its manifest; block paths are relative to it.
    pub fn read(manifest: impl AsRef<Path>) -> Result<Self> {
        let path = manifest.as_ref();
        let m: Manifest = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        let load = |f: &str| -> Result<DMatrix<f64>> {
            let panel = TimeSeriesPanel::read_csv(dir.join(f))?;
            if panel.names() != m.names.as_slice() {
                return Err(Error::DimensionMismatch(format!("columns of {f} differ from the manifest")));
            }
            Ok(panel.values().clone())
        };
        let outcomes = m.files.iter().map(|f| load(f)).collect::<Result<Vec<_>>>()?;
        let reference = m.reference.as_deref().map(load).transpose()?;
        Self::new(m.target, m.names, m.values, outcomes, reference, m.provenance, m.seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GridStrategy {
    /// Equal spacing, both endpoints included.
    Uniform,
    /// One uniform draw in each of `m` equal bins, in bin order.
    LatinHypercube { seed: u64 },
}

/// `m` clamp values in `[low, high]`.
pub fn design_grid(low: f64, high: f64, m: usize, strategy: GridStrategy) -> Result<Vec<f64>> {
    if !(low.is_finite() && high.is_finite() && low < high) {
        return Err(Error::BadRange(format!("need low < high, got [{low}, {high}]")));
    }
    if m < 2 {
        return Err(Error::BadRange(format!("need at least 2 values, got {m}")));
    }
    let width = high - low;
    Ok(match strategy {
        GridStrategy::Uniform => (0..m)
            .map(|k| if k + 1 == m { high } else { low + width * k as f64 / (m - 1) as f64 })
            .collect(),
        GridStrategy::LatinHypercube { seed } => {
            let mut r = rng::rng(seed);
            let bin = width / m as f64;
            (0..m)
                .map(|k| {
                    let u: f64 = r.random();
                    (low + bin * (k as f64 + u)).min(high)
                })
                .collect()
        }
    })
}

/// Clamp level `mean + k·sd` of a panel column.
pub fn clamp_level(panel: &TimeSeriesPanel, target: &str, k_sigma: f64) -> Result<f64> {
    let j = panel.index_of(target)?;
    Ok(panel.column_means()[j] + k_sigma * panel.column_stds()[j])
}

/// Forward simulation of a fitted VAR for `steps` steps with the target held
/// at `mean + 5·sd` of the panel. Residuals are resampled by row with
/// replacement; the reference block uses the same draws without the clamp.
pub fn var_forward_do(
    model: &VarModel,
    panel: &TimeSeriesPanel,
    target: &str,
    steps: usize,
    seed: u64,
) -> Result<InterventionDataset> {
    let level = clamp_level(panel, target, 5.0)?;
    var_forward_do_at(model, panel, target, level, steps, seed)
}

/// [`var_forward_do`] at an explicit clamp level.
pub fn var_forward_do_at(
    model: &VarModel,
    panel: &TimeSeriesPanel,
    target: &str,
    level: f64,
    steps: usize,
    seed: u64,
) -> Result<InterventionDataset> {
    let j = panel.index_of(target)?;
    if steps == 0 {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    let resid = var_engine::residuals(model, panel)?;
    let u = resid.values();
    let n_res = u.nrows();
    let d = model.d();
    let t = panel.n_obs();
    let p = model.p;
    let mut r = rng::rng(seed);
    let draws: Vec<usize> = (0..steps).map(|_| r.random_range(0..n_res)).collect();

    let run = |clamp: Option<f64>| -> DMatrix<f64> {
        let mut hist: Vec<DVector<f64>> = (1..=p).map(|l| panel.values().row(t - l).transpose()).collect();
        let mut out = DMatrix::zeros(steps, d);
        for (s, &k) in draws.iter().enumerate() {
            let mut y = model.predict(&hist) + u.row(k).transpose();
            if let Some(v) = clamp {
                y[j] = v;
            }
            out.set_row(s, &y.transpose());
            hist.insert(0, y);
            hist.truncate(p);
        }
        out
    };
    InterventionDataset::new(
        target.to_string(),
        panel.names().to_vec(),
        vec![level],
        vec![run(Some(level))],
        Some(run(None)),
        Provenance::VarForward,
        seed,
    )
}

/// Hard clamp inside the generating process at `mean + level_sigma·sd`
/// (moments from an observational run with the same seed), held for all
/// `t` steps. The reference block is that observational run.
pub fn dgp_hard_do(
    spec: &SimulatorSpec,
    target: &str,
    level_sigma: f64,
    t: usize,
    seed: u64,
) -> Result<InterventionDataset> {
    let j = spec.index_of(target)?;
    if t < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: t });
    }
    let free = simulators::trajectory(spec, t, seed, None)?;
    let col = free.column(j);
    let sd = (col.variance() * t as f64 / (t - 1) as f64).sqrt();
    let level = col.mean() + level_sigma * sd;
    spec.check_value(target, level)?;
    let clamped = simulators::trajectory(spec, t, seed, Some((j, Clamp::Hard(level))))?;
    InterventionDataset::new(
        target.to_string(),
        spec.var_names(),
        vec![level],
        vec![clamped],
        Some(free),
        Provenance::DgpHard,
        seed,
    )
}

/// Integrates `dx/dt = f(x) + λ (x* − x_target) e_target` for `t` recorded
/// steps; the reference block is the free trajectory.
pub fn ode_soft_do(
    spec: &SimulatorSpec,
    target: &str,
    x_star: f64,
    lambda: f64,
    t: usize,
    seed: u64,
) -> Result<InterventionDataset> {
    if !matches!(spec.variant, Variant::OdeSystem(_)) {
        return Err(Error::UnsupportedVariant(format!(
            "soft interventions need an ODE system, not {}",
            spec.variant.kind()
        )));
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidSpec(format!("restoring strength must be positive, got {lambda}")));
    }
    let j = spec.index_of(target)?;
    spec.check_value(target, x_star)?;
    let free = simulators::trajectory(spec, t, seed, None)?;
    let soft = simulators::trajectory(spec, t, seed, Some((j, Clamp::Soft { lambda, target: x_star })))?;
    InterventionDataset::new(
        target.to_string(),
        spec.var_names(),
        vec![x_star],
        vec![soft],
        Some(free),
        Provenance::OdeSoft,
        seed,
    )
}

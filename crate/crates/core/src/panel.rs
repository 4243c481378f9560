//! The T×d observation matrix shared by every phase, plus its CSV format.
//!
//! CSV layout: first row holds the variable names, each following row is one
//! time step, `.` as decimal point, no index column.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesPanel {
    values: DMatrix<f64>,
    names: Vec<String>,
    dt: Option<f64>,
}

impl TimeSeriesPanel {
    /// Builds and validates a panel.
    pub fn new(values: DMatrix<f64>, names: Vec<String>) -> Result<Self> {
        validate_panel(Self::unchecked(values, names))
    }

    /// Builds a panel without checking invariants; pair with [`validate_panel`].
    pub fn unchecked(values: DMatrix<f64>, names: Vec<String>) -> Self {
        Self {
            values,
            names,
            dt: None,
        }
    }

    /// Panel with generated names `x0, x1, ...`.
    pub fn from_matrix(values: DMatrix<f64>) -> Result<Self> {
        let names = (0..values.ncols()).map(|j| format!("x{j}")).collect();
        Self::new(values, names)
    }

    /// Builds a panel from row vectors.
    pub fn from_rows(rows: &[Vec<f64>], names: Vec<String>) -> Result<Self> {
        let d = names.len();
        if let Some(bad) = rows.iter().find(|r| r.len() != d) {
            return Err(Error::DimensionMismatch(format!(
                "row has {} entries, expected {d}",
                bad.len()
            )));
        }
        let values = DMatrix::from_fn(rows.len(), d, |t, j| rows[t][j]);
        Self::new(values, names)
    }

    pub fn with_dt(mut self, dt: f64) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::Config(format!("sampling interval must be positive, got {dt}")));
        }
        self.dt = Some(dt);
        Ok(self)
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn dt(&self) -> Option<f64> {
        self.dt
    }

    /// Number of time steps T.
    pub fn n_obs(&self) -> usize {
        self.values.nrows()
    }

    /// Number of variables d.
    pub fn n_vars(&self) -> usize {
        self.values.ncols()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::InvalidTarget(name.to_string()))
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.values.column(j).iter().copied().collect()
    }

    pub fn column_by_name(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self.column(self.index_of(name)?))
    }

    pub fn column_means(&self) -> DVector<f64> {
        DVector::from_fn(self.n_vars(), |j, _| self.values.column(j).mean())
    }

    /// Sample standard deviations (n − 1 denominator); 0 for single-row panels.
    pub fn column_stds(&self) -> DVector<f64> {
        let t = self.n_obs();
        DVector::from_fn(self.n_vars(), |j, _| {
            if t < 2 {
                0.0
            } else {
                self.values.column(j).variance() * t as f64 / (t - 1) as f64
            }
            .sqrt()
        })
    }

    /// Rows `start..` as a new panel.
    pub fn tail_from(&self, start: usize) -> Result<Self> {
        if start >= self.n_obs() {
            return Err(Error::EmptyPanel);
        }
        let rows = self.n_obs() - start;
        Ok(Self {
            values: self.values.rows(start, rows).into_owned(),
            names: self.names.clone(),
            dt: self.dt,
        })
    }

    /// Columns selected by name, in the given order.
    pub fn select(&self, names: &[&str]) -> Result<Self> {
        let idx = names
            .iter()
            .map(|n| self.index_of(n))
            .collect::<Result<Vec<_>>>()?;
        let values = DMatrix::from_fn(self.n_obs(), idx.len(), |t, k| self.values[(t, idx[k])]);
        Ok(Self {
            values,
            names: names.iter().map(|s| s.to_string()).collect(),
            dt: self.dt,
        })
    }

    pub fn read_csv<P: AsRef<Path>>(path: P) -> Result<Self> {
        Self::from_csv_reader(std::fs::File::open(path)?)
    }

    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let names: Vec<String> = rdr.headers()?.iter().map(|s| s.trim().to_string()).collect();
        let mut data = Vec::new();
        let mut n_rows = 0;
        for record in rdr.records() {
            let record = record?;
            if record.len() != names.len() {
                return Err(Error::DimensionMismatch(format!(
                    "row {} has {} fields, header has {}",
                    n_rows + 1,
                    record.len(),
                    names.len()
                )));
            }
            for field in record.iter() {
                let v: f64 = field.trim().parse().map_err(|_| {
                    Error::Config(format!("cannot parse `{field}` as a number in row {}", n_rows + 1))
                })?;
                data.push(v);
            }
            n_rows += 1;
        }
        let values = DMatrix::from_row_slice(n_rows, names.len(), &data);
        Self::new(values, names)
    }

    pub fn write_csv<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        self.to_csv_writer(std::fs::File::create(path)?)
    }

    pub fn to_csv_writer<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(&self.names)?;
        for t in 0..self.n_obs() {
            wtr.write_record(self.values.row(t).iter().map(|v| format!("{v:?}")))?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Checks the panel invariants and hands the panel back unchanged.
pub fn validate_panel(panel: TimeSeriesPanel) -> Result<TimeSeriesPanel> {
    if panel.values.nrows() == 0 || panel.values.ncols() == 0 {
        return Err(Error::EmptyPanel);
    }
    if panel.names.len() != panel.values.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "{} names for {} columns",
            panel.names.len(),
            panel.values.ncols()
        )));
    }
    let mut seen = HashSet::new();
    for name in &panel.names {
        if !seen.insert(name.as_str()) {
            return Err(Error::DuplicateName(name.clone()));
        }
    }
    for t in 0..panel.values.nrows() {
        for j in 0..panel.values.ncols() {
            if !panel.values[(t, j)].is_finite() {
                return Err(Error::NonFinite { row: t, col: j });
            }
        }
    }
    if let Some(dt) = panel.dt {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::Config(format!("sampling interval must be positive, got {dt}")));
        }
    }
    Ok(panel)
}

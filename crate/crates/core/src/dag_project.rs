//! Projection of a contemporaneous score matrix onto a nearby weighted DAG
//! using the trace-exponential acyclicity function and an augmented
//! Lagrangian.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{topological_order, CausalGraph, Edge};
use crate::panel::TimeSeriesPanel;
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DagProjectConfig {
    pub h_tol: f64,
    pub max_outer: usize,
    pub rho_init: f64,
    pub rho_mult: f64,
    /// Entries with smaller magnitude are dropped after projection.
    pub final_threshold: f64,
}

impl Default for DagProjectConfig {
    fn default() -> Self {
        Self {
            h_tol: 1e-8,
            max_outer: 100,
            rho_init: 1.0,
            rho_mult: 10.0,
            final_threshold: 0.05,
        }
    }
}

impl DagProjectConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.h_tol > 0.0) || !(self.rho_mult > 1.0) || !(self.rho_init > 0.0) || self.final_threshold < 0.0 {
            return Err(Error::Config("need h_tol > 0, rho_init > 0, rho_mult > 1, final_threshold ≥ 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OuterStep {
    pub rho: f64,
    pub alpha: f64,
    pub h: f64,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DagProjection {
    /// Thresholded, acyclic weights.
    pub w: DMatrix<f64>,
    /// Optimizer output before thresholding.
    pub raw: DMatrix<f64>,
    /// Acyclicity of `raw`.
    pub h: f64,
    pub converged: bool,
    pub trace: Vec<OuterStep>,
}

fn check_square(w: &DMatrix<f64>) -> Result<()> {
    if w.nrows() != w.ncols() {
        return Err(Error::NotSquare {
            rows: w.nrows(),
            cols: w.ncols(),
        });
    }
    Ok(())
}

/// Matrix exponential by scaling and squaring of a truncated Taylor series.
pub fn expm(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let norm = m.row_iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
    let mut s = 0;
    while norm / 2f64.powi(s) > 0.5 {
        s += 1;
    }
    let a = m / 2f64.powi(s);
    let mut sum = DMatrix::identity(n, n);
    let mut term = DMatrix::identity(n, n);
    for k in 1..=18 {
        term = &term * &a / k as f64;
        sum += &term;
        if term.amax() == 0.0 {
            break;
        }
    }
    for _ in 0..s {
        sum = &sum * &sum;
    }
    sum
}

/// `tr(exp(W∘W)) − d`; zero exactly when the nonzero pattern of `W` has no
/// directed cycle.
pub fn h_acyclicity(w: &DMatrix<f64>) -> Result<f64> {
    check_square(w)?;
    Ok(h_and_exp(w).0)
}

fn h_and_exp(w: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
    let e = expm(&w.component_mul(w));
    ((e.trace() - w.nrows() as f64).max(0.0), e)
}

fn h_grad(w: &DMatrix<f64>, e: &DMatrix<f64>) -> DMatrix<f64> {
    e.transpose().component_mul(w) * 2.0
}

struct Lagrangian<'a> {
    target: &'a DMatrix<f64>,
    alpha: f64,
    rho: f64,
}

impl Lagrangian<'_> {
    fn value_grad(&self, w: &DMatrix<f64>) -> (f64, DMatrix<f64>, f64) {
        let (h, e) = h_and_exp(w);
        let diff = w - self.target;
        let f = 0.5 * diff.norm_squared() + self.alpha * h + 0.5 * self.rho * h * h;
        let mut g = diff + h_grad(w, &e) * (self.alpha + self.rho * h);
        g.fill_diagonal(0.0);
        (f, g, h)
    }

    /// Barzilai–Borwein steps with Armijo backtracking.
    fn minimize(&self, start: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
        let mut w = start.clone();
        let (mut f, mut g, mut h) = self.value_grad(&w);
        let mut step = 1.0;
        for _ in 0..2000 {
            let gnorm2 = g.norm_squared();
            if gnorm2.sqrt() < 1e-12 {
                break;
            }
            let mut t = step;
            let (mut w_new, mut f_new, mut g_new, mut h_new);
            loop {
                w_new = &w - &g * t;
                (f_new, g_new, h_new) = self.value_grad(&w_new);
                if f_new <= f - 1e-4 * t * gnorm2 || t < 1e-20 {
                    break;
                }
                t *= 0.5;
            }
            let s = &w_new - &w;
            let y = &g_new - &g;
            let sy = s.dot(&y);
            step = if sy > 0.0 { (s.norm_squared() / sy).clamp(1e-12, 1e6) } else { 1.0 };
            let done = (f - f_new).abs() <= 1e-16 * f.abs().max(1e-300);
            w = w_new;
            f = f_new;
            g = g_new;
            h = h_new;
            if done {
                break;
            }
        }
        (w, h)
    }
}

/// Shrinks the lower-row entry of every exactly symmetric 2-cycle slightly,
/// so the pair with the larger source row survives.
fn break_symmetric_ties(w: &mut DMatrix<f64>) {
    let d = w.nrows();
    for i in 0..d {
        for j in i + 1..d {
            if w[(i, j)] != 0.0 && w[(i, j)].abs() == w[(j, i)].abs() {
                w[(i, j)] *= 1.0 - 1e-3;
            }
        }
    }
}

fn pattern(w: &DMatrix<f64>) -> Vec<Vec<bool>> {
    let d = w.nrows();
    (0..d).map(|i| (0..d).map(|j| i != j && w[(i, j)] != 0.0).collect()).collect()
}

fn reaches(adj: &[Vec<bool>], from: usize, to: usize) -> bool {
    let mut seen = vec![false; adj.len()];
    let mut stack = vec![from];
    while let Some(u) = stack.pop() {
        if u == to {
            return true;
        }
        if std::mem::replace(&mut seen[u], true) {
            continue;
        }
        stack.extend((0..adj.len()).filter(|&v| adj[u][v] && !seen[v]));
    }
    false
}

/// Drops the weakest edge lying on a cycle until none remain.
fn remove_residual_cycles(w: &mut DMatrix<f64>) {
    loop {
        let adj = pattern(w);
        if topological_order(&adj).is_some() {
            return;
        }
        let d = w.nrows();
        let weakest = (0..d)
            .flat_map(|i| (0..d).map(move |j| (i, j)))
            .filter(|&(i, j)| adj[i][j] && reaches(&adj, j, i))
            .min_by(|a, b| w[*a].abs().total_cmp(&w[*b].abs()));
        match weakest {
            Some(k) => w[k] = 0.0,
            None => return,
        }
    }
}

/// Nearest weighted DAG to `w` in Frobenius distance. When the constraint
/// is not met within `max_outer` rounds the best iterate is still
/// thresholded and cycle-free, with `converged = false`.
pub fn project_dag(w: &DMatrix<f64>, cfg: &DagProjectConfig) -> Result<DagProjection> {
    check_square(w)?;
    cfg.validate()?;
    if let Some(k) = w.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            row: k % w.nrows(),
            col: k / w.nrows(),
        });
    }
    let mut target = w.clone();
    target.fill_diagonal(0.0);
    break_symmetric_ties(&mut target);

    let mut current = target.clone();
    let mut h = h_acyclicity(&current)?;
    let (mut alpha, mut rho) = (0.0, cfg.rho_init);
    let mut trace = Vec::new();
    let mut best = (h, current.clone());
    for _ in 0..cfg.max_outer {
        if h <= cfg.h_tol {
            break;
        }
        let (next, h_next) = loop {
            let (cand, h_cand) = Lagrangian {
                target: &target,
                alpha,
                rho,
            }
            .minimize(&current);
            if h_cand > 0.25 * h && rho < 1e16 {
                rho *= cfg.rho_mult;
            } else {
                break (cand, h_cand);
            }
        };
        current = next;
        h = h_next;
        alpha += rho * h;
        trace.push(OuterStep {
            rho,
            alpha,
            h,
            distance: (&current - &target).norm(),
        });
        if h < best.0 {
            best = (h, current.clone());
        }
    }
    let (h, raw) = if h <= best.0 { (h, current) } else { best };
    let mut out = raw.map(|v| if v.abs() < cfg.final_threshold { 0.0 } else { v });
    remove_residual_cycles(&mut out);
    Ok(DagProjection {
        w: out,
        raw,
        h,
        converged: h <= cfg.h_tol,
        trace,
    })
}

/// Projects the lag-0 edges of `graph` and keeps every lagged edge. Weights
/// are scaled by the largest lag-0 magnitude; an unweighted graph counts
/// every edge as 1.
pub fn project_graph(graph: &CausalGraph, cfg: &DagProjectConfig) -> Result<(CausalGraph, DagProjection)> {
    let d = graph.d();
    let lag0: Vec<&Edge> = graph.edges().iter().filter(|e| e.lag == 0).collect();
    let top = lag0.iter().map(|e| e.weight.abs()).fold(0.0, f64::max);
    let mut w = DMatrix::zeros(d, d);
    for e in lag0 {
        w[(e.source, e.target)] = if top > 0.0 { (e.weight.abs() / top).max(cfg.final_threshold) } else { 1.0 };
    }
    let proj = project_dag(&w, cfg)?;
    let mut out = CausalGraph::new_dag(d);
    if let Some(names) = graph.names() {
        out = out.with_names(names.to_vec())?;
    }
    for e in graph.edges() {
        if e.lag > 0 || proj.w[(e.source, e.target)] != 0.0 {
            out.add_edge(Edge { ..*e })?;
        }
    }
    Ok((out, proj))
}

/// Contemporaneous score matrix from regressions of each variable on all
/// others, in the panel's own units: `s[(i, j)] = |coefficient of x_i for
/// x_j|`. Standardizing first would orient most pairs from effect to cause.
pub fn regression_scores(panel: &TimeSeriesPanel) -> Result<DMatrix<f64>> {
    let d = panel.n_vars();
    let z = panel.values();
    let t = z.nrows();
    let mut s = DMatrix::zeros(d, d);
    for j in 0..d {
        let others: Vec<usize> = (0..d).filter(|&i| i != j).collect();
        let x = DMatrix::from_fn(t, others.len(), |r, c| z[(r, others[c])]);
        let y = DMatrix::from_fn(t, 1, |r, _| z[(r, j)]);
        let b = stats::ols(&stats::with_intercept(&x), &y)?;
        for (c, &i) in others.iter().enumerate() {
            s[(i, j)] = b[(c + 1, 0)].abs();
        }
    }
    Ok(s)
}

/// Graph over the nonzero off-diagonal entries of `w`.
pub fn graph_from_weights(w: &DMatrix<f64>, threshold: f64) -> Result<CausalGraph> {
    let d = w.nrows();
    let mut g = CausalGraph::new(d);
    for i in 0..d {
        for j in 0..d {
            if i != j && w[(i, j)].abs() >= threshold && w[(i, j)] != 0.0 {
                g.add_edge(Edge::weighted(i, j, 0, w[(i, j)]))?;
            }
        }
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn h_examples() {
        assert_eq!(h_acyclicity(&DMatrix::zeros(3, 3)).unwrap(), 0.0);
        let dag = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        assert!(h_acyclicity(&dag).unwrap().abs() < 1e-15);
        let cyc = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let expect = 2.0 * 1f64.cosh() - 2.0;
        assert!((h_acyclicity(&cyc).unwrap() - expect).abs() < 1e-12);
        assert!(matches!(h_acyclicity(&DMatrix::zeros(2, 3)), Err(Error::NotSquare { .. })));
    }

    #[test]
    fn expm_matches_diagonal_case() {
        let m = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![0.5, 3.0, -1.0]));
        let e = expm(&m);
        for (k, v) in [0.5f64, 3.0, -1.0].iter().enumerate() {
            assert!((e[(k, k)] - v.exp()).abs() < 1e-10 * v.exp());
        }
    }

    #[test]
    fn feasible_start_is_kept() {
        let w = DMatrix::from_row_slice(3, 3, &[0.0, 0.7, 0.3, 0.0, 0.0, -0.4, 0.0, 0.0, 0.0]);
        let p = project_dag(&w, &DagProjectConfig::default()).unwrap();
        assert!((&p.w - &w).norm() < 1e-6);
        assert!(p.converged);
    }

    #[test]
    fn symmetric_two_cycle_keeps_one() {
        let w = DMatrix::from_row_slice(2, 2, &[0.0, 0.8, 0.8, 0.0]);
        let p = project_dag(&w, &DagProjectConfig::default()).unwrap();
        assert!(p.h <= 1e-8, "{}", p.h);
        assert_eq!(p.w[(0, 1)], 0.0);
        assert!(p.w[(1, 0)] != 0.0);
        let w = DMatrix::from_row_slice(2, 2, &[0.0, 0.8, 0.79, 0.0]);
        let p = project_dag(&w, &DagProjectConfig::default()).unwrap();
        assert!(p.w[(0, 1)] != 0.0 && p.w[(1, 0)] == 0.0);
    }

    #[test]
    fn three_cycle_drops_weakest() {
        let w = DMatrix::from_row_slice(3, 3, &[0.0, 0.9, 0.0, 0.0, 0.0, 0.5, 0.1, 0.0, 0.0]);
        let p = project_dag(&w, &DagProjectConfig::default()).unwrap();
        assert_eq!(p.w[(2, 0)], 0.0);
        assert!(p.w[(0, 1)] != 0.0 && p.w[(1, 2)] != 0.0);
        assert_eq!(h_acyclicity(&p.w).unwrap(), 0.0);
        // Brute force over acyclic sub-patterns gives the same survivor set.
        let edges = [(0, 1), (1, 2), (2, 0)];
        let best = (0..8u32)
            .filter(|mask| mask.count_ones() < 3)
            .min_by(|a, b| {
                let cost = |m: u32| edges.iter().enumerate().filter(|(k, _)| m >> k & 1 == 0).map(|(_, e)| w[*e].powi(2)).sum::<f64>();
                cost(*a).total_cmp(&cost(*b))
            })
            .unwrap();
        assert_eq!(best, 0b011);
    }

    #[test]
    fn graph_projection_keeps_lagged_edges() {
        let g = CausalGraph::from_triples(2, &[(0, 1, 0), (1, 0, 0), (1, 0, 1)]).unwrap();
        let (out, _) = project_graph(&g, &DagProjectConfig::default()).unwrap();
        assert!(out.is_lag0_acyclic());
        assert!(out.contains(1, 0, 1));
        assert_eq!(out.edges().iter().filter(|e| e.lag == 0).count(), 1);
    }

    fn random_scores(d: usize, seed: u64) -> DMatrix<f64> {
        let mut r = rng::rng(seed);
        let mut w = DMatrix::from_fn(d, d, |_, _| r.random::<f64>());
        w.fill_diagonal(0.0);
        w
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn h_is_nonnegative_and_sign_blind(seed in 0u64..10_000, flips in proptest::collection::vec(any::<bool>(), 16)) {
            let w = random_scores(4, seed);
            let signed = DMatrix::from_fn(4, 4, |i, j| if flips[4 * i + j] { -w[(i, j)] } else { w[(i, j)] });
            let (a, b) = (h_acyclicity(&w).unwrap(), h_acyclicity(&signed).unwrap());
            prop_assert!(a >= 0.0);
            prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        }

        #[test]
        fn h_zero_iff_acyclic(seed in 0u64..10_000) {
            let mut r = rng::rng(seed);
            let w = DMatrix::from_fn(5, 5, |i, j| if i != j && r.random::<f64>() < 0.3 { 1.0 } else { 0.0 });
            let acyclic = topological_order(&pattern(&w)).is_some();
            let h = h_acyclicity(&w).unwrap();
            prop_assert_eq!(acyclic, h < 1e-12);
        }

        #[test]
        fn projection_is_acyclic_and_idempotent(seed in 0u64..10_000) {
            let w = random_scores(5, seed);
            let cfg = DagProjectConfig::default();
            let p = project_dag(&w, &cfg).unwrap();
            prop_assert!(p.h <= cfg.h_tol);
            prop_assert!(topological_order(&pattern(&p.w)).is_some());
            let again = project_dag(&p.w, &cfg).unwrap();
            prop_assert!((&again.w - &p.w).norm() < 1e-6);
        }
    }
}

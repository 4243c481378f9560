//! Causal graphs, effect estimates and structure-recovery metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;

/// One directed, lag-annotated edge `source → target`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub source: usize,
    pub target: usize,
    pub lag: usize,
    #[serde(default)]
    pub weight: f64,
    #[serde(default)]
    pub se: f64,
    #[serde(default = "default_p")]
    pub p_value: f64,
}

fn default_p() -> f64 {
    1.0
}

impl Edge {
    pub fn new(source: usize, target: usize, lag: usize) -> Self {
        Self {
            source,
            target,
            lag,
            weight: 0.0,
            se: 0.0,
            p_value: 1.0,
        }
    }

    pub fn weighted(source: usize, target: usize, lag: usize, weight: f64) -> Self {
        Self {
            weight,
            ..Self::new(source, target, lag)
        }
    }

    pub fn key(&self) -> (usize, usize, usize) {
        (self.source, self.target, self.lag)
    }
}

/// Weighted, lag-annotated edge set over `d` variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalGraph {
    d: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    names: Option<Vec<String>>,
    edges: Vec<Edge>,
    #[serde(default)]
    dag_mode: bool,
}

impl CausalGraph {
    pub fn new(d: usize) -> Self {
        Self {
            d,
            names: None,
            edges: Vec::new(),
            dag_mode: false,
        }
    }

    /// A graph whose lag-0 part must stay acyclic.
    pub fn new_dag(d: usize) -> Self {
        Self {
            dag_mode: true,
            ..Self::new(d)
        }
    }

    pub fn with_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.d {
            return Err(Error::DimensionMismatch(format!(
                "{} names for {} variables",
                names.len(),
                self.d
            )));
        }
        self.names = Some(names);
        Ok(self)
    }

    /// Builds a graph from unweighted `(source, target, lag)` triples.
    pub fn from_triples(d: usize, triples: &[(usize, usize, usize)]) -> Result<Self> {
        let mut g = Self::new(d);
        for &(i, j, l) in triples {
            g.add_edge(Edge::new(i, j, l))?;
        }
        Ok(g)
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn names(&self) -> Option<&[String]> {
        self.names.as_deref()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn dag_mode(&self) -> bool {
        self.dag_mode
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    /// Inserts an edge, replacing any edge with the same `(source, target, lag)`.
    pub fn add_edge(&mut self, edge: Edge) -> Result<()> {
        if edge.source >= self.d || edge.target >= self.d {
            return Err(Error::DimensionMismatch(format!(
                "edge {}→{} in a graph over {} variables",
                edge.source, edge.target, self.d
            )));
        }
        if edge.source == edge.target && edge.lag == 0 {
            return Err(Error::Config(format!(
                "self-loop on variable {} at lag 0",
                edge.source
            )));
        }
        if !(0.0..=1.0).contains(&edge.p_value) || edge.se < 0.0 {
            return Err(Error::Config("edge p-value must lie in [0,1] and se be nonnegative".into()));
        }
        let key = edge.key();
        let previous = self.edges.iter().position(|e| e.key() == key);
        match previous {
            Some(k) => self.edges[k] = edge,
            None => self.edges.push(edge),
        }
        if self.dag_mode && !self.is_lag0_acyclic() {
            let (i, j, _) = key;
            self.edges.retain(|e| e.key() != key);
            return Err(Error::Config(format!("edge {i}→{j} would close a lag-0 cycle")));
        }
        Ok(())
    }

    pub fn contains(&self, source: usize, target: usize, lag: usize) -> bool {
        self.edges.iter().any(|e| e.key() == (source, target, lag))
    }

    pub fn max_lag(&self) -> usize {
        self.edges.iter().map(|e| e.lag).max().unwrap_or(0)
    }

    fn key_set(&self) -> BTreeSet<(usize, usize, usize)> {
        self.edges.iter().map(Edge::key).collect()
    }

    /// Topological order of the lag-0 subgraph, if one exists.
    pub fn lag0_topological_order(&self) -> Option<Vec<usize>> {
        let mut adj = vec![vec![false; self.d]; self.d];
        for e in self.edges.iter().filter(|e| e.lag == 0) {
            adj[e.source][e.target] = true;
        }
        topological_order(&adj)
    }

    pub fn is_lag0_acyclic(&self) -> bool {
        self.lag0_topological_order().is_some()
    }

    fn label(&self, i: usize) -> String {
        match &self.names {
            Some(n) => n[i].clone(),
            None => format!("x{i}"),
        }
    }

    /// Graphviz rendering: lag-0 edges solid, lagged edges dashed with a
    /// `lag=ℓ` label.
    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph causal {\n");
        for i in 0..self.d {
            let _ = writeln!(out, "  {i} [label=\"{}\"];", self.label(i));
        }
        for e in &self.edges {
            if e.lag == 0 {
                let _ = writeln!(out, "  {} -> {} [style=solid];", e.source, e.target);
            } else {
                let _ = writeln!(
                    out,
                    "  {} -> {} [style=dashed, label=\"lag={}\"];",
                    e.source, e.target, e.lag
                );
            }
        }
        out.push_str("}\n");
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: CausalGraph = serde_json::from_str(text)?;
        let mut g = CausalGraph {
            d: raw.d,
            names: raw.names,
            edges: Vec::new(),
            dag_mode: raw.dag_mode,
        };
        for e in raw.edges {
            g.add_edge(e)?;
        }
        Ok(g)
    }

    /// One CSV row per edge: `source,target,lag,weight,se,p_value`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("source,target,lag,weight,se,p_value\n");
        for e in &self.edges {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                self.label(e.source),
                self.label(e.target),
                e.lag,
                e.weight,
                e.se,
                e.p_value
            );
        }
        out
    }
}

/// Kahn's algorithm on a dense adjacency matrix (`adj[i][j]` means i → j).
pub fn topological_order(adj: &[Vec<bool>]) -> Option<Vec<usize>> {
    let d = adj.len();
    let mut indeg: Vec<usize> = (0..d)
        .map(|j| (0..d).filter(|&i| i != j && adj[i][j]).count())
        .collect();
    if (0..d).any(|i| adj[i][i]) {
        return None;
    }
    let mut ready: Vec<usize> = (0..d).filter(|&j| indeg[j] == 0).collect();
    let mut order = Vec::with_capacity(d);
    while let Some(i) = ready.pop() {
        order.push(i);
        for j in 0..d {
            if i != j && adj[i][j] {
                indeg[j] -= 1;
                if indeg[j] == 0 {
                    ready.push(j);
                }
            }
        }
    }
    (order.len() == d).then_some(order)
}

/// Point estimate of an interventional effect with its uncertainty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate {
    pub point: f64,
    pub se: f64,
    pub z: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub m: usize,
}

impl EffectEstimate {
    /// Builds an estimate with a symmetric normal interval at level `1 − alpha`.
    ///
    /// With `se = 0` the z statistic is 0 for a zero point estimate and
    /// signed infinity otherwise.
    pub fn new(point: f64, se: f64, m: usize, alpha: f64) -> Self {
        let se = se.max(0.0);
        let z = if se > 0.0 {
            point / se
        } else if point == 0.0 {
            0.0
        } else {
            point.signum() * f64::INFINITY
        };
        let half = stats::normal_upper_quantile(alpha / 2.0) * se;
        Self {
            point,
            se,
            z,
            ci_low: point - half,
            ci_high: point + half,
            m,
        }
    }

    pub fn p_value(&self) -> f64 {
        stats::two_sided_p(self.z)
    }

    /// Rescales the estimate, e.g. to express it per unit of clamp offset.
    pub fn scaled(&self, factor: f64) -> Self {
        let (lo, hi) = (self.ci_low * factor, self.ci_high * factor);
        Self {
            point: self.point * factor,
            se: self.se * factor.abs(),
            z: self.z * factor.signum(),
            ci_low: lo.min(hi),
            ci_high: lo.max(hi),
            m: self.m,
        }
    }
}

/// Structure-recovery scores of an estimated graph against the truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphMetrics {
    pub f1: f64,
    pub tpr: f64,
    pub fdr: f64,
    pub auroc: f64,
    pub shd: usize,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

/// Compares graphs as sets of unweighted `(source, target, lag)` triples.
///
/// The grid is every `(i, j, ℓ)` up to the largest lag present in either
/// graph, minus the lag-0 diagonal. A reversed lag-0 edge counts twice in
/// SHD (one missing plus one extra). AUROC ranks cells by `|weight|` of the
/// estimated edges and falls back to 0.5 when the estimate carries no weights.
pub fn graph_metrics(estimated: &CausalGraph, truth: &CausalGraph) -> Result<GraphMetrics> {
    if estimated.d != truth.d {
        return Err(Error::DimensionMismatch(format!(
            "estimated graph has {} variables, truth has {}",
            estimated.d, truth.d
        )));
    }
    let est = estimated.key_set();
    let tru = truth.key_set();
    let tp = est.intersection(&tru).count();
    let fp = est.difference(&tru).count();
    let fn_ = tru.difference(&est).count();

    let tpr = if tp + fn_ == 0 { 1.0 } else { tp as f64 / (tp + fn_) as f64 };
    let fdr = if tp + fp == 0 { 0.0 } else { fp as f64 / (tp + fp) as f64 };
    let precision = 1.0 - fdr;
    let f1 = if precision + tpr > 0.0 {
        2.0 * precision * tpr / (precision + tpr)
    } else {
        0.0
    };

    let weighted = estimated.edges.iter().any(|e| e.weight != 0.0);
    let auroc = if weighted {
        let scores: BTreeMap<(usize, usize, usize), f64> = estimated
            .edges
            .iter()
            .map(|e| (e.key(), e.weight.abs()))
            .collect();
        let max_lag = estimated.max_lag().max(truth.max_lag());
        let (mut pos, mut neg) = (Vec::new(), Vec::new());
        for lag in 0..=max_lag {
            for i in 0..truth.d {
                for j in 0..truth.d {
                    if i == j && lag == 0 {
                        continue;
                    }
                    let s = scores.get(&(i, j, lag)).copied().unwrap_or(0.0);
                    if tru.contains(&(i, j, lag)) {
                        pos.push(s);
                    } else {
                        neg.push(s);
                    }
                }
            }
        }
        stats::auroc(&pos, &neg)
    } else {
        0.5
    };

    Ok(GraphMetrics {
        f1,
        tpr,
        fdr,
        auroc,
        shd: fp + fn_,
        true_positives: tp,
        false_positives: fp,
        false_negatives: fn_,
    })
}

/// AUROC of a dense score matrix against a boolean adjacency truth,
/// excluding the diagonal.
pub fn score_auroc(scores: &nalgebra::DMatrix<f64>, truth: &[Vec<bool>]) -> f64 {
    let d = scores.nrows();
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for i in 0..d {
        for j in 0..d {
            if i == j {
                continue;
            }
            if truth[i][j] {
                pos.push(scores[(i, j)]);
            } else {
                neg.push(scores[(i, j)]);
            }
        }
    }
    stats::auroc(&pos, &neg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identical_graphs_score_perfectly() {
        let g = CausalGraph::from_triples(3, &[(0, 1, 0), (1, 2, 1)]).unwrap();
        let m = graph_metrics(&g, &g).unwrap();
        assert_eq!(m.f1, 1.0);
        assert_eq!(m.shd, 0);
    }

    #[test]
    fn empty_estimate() {
        let truth = CausalGraph::from_triples(3, &[(0, 1, 0), (1, 2, 0)]).unwrap();
        let m = graph_metrics(&CausalGraph::new(3), &truth).unwrap();
        assert_eq!(m.f1, 0.0);
        assert_eq!(m.tpr, 0.0);
        assert_eq!(m.shd, 2);
    }

    #[test]
    fn reversed_edge_counts_twice() {
        // Grid cells (0,1,0) and (1,0,0): truth marks the first, the estimate the
        // second, so TP = 0, FP = 1, FN = 1.
        let truth = CausalGraph::from_triples(2, &[(0, 1, 0)]).unwrap();
        let est = CausalGraph::from_triples(2, &[(1, 0, 0)]).unwrap();
        let m = graph_metrics(&est, &truth).unwrap();
        assert_eq!(m.shd, 2);
        assert_eq!(m.f1, 0.0);
        assert_eq!((m.true_positives, m.false_positives, m.false_negatives), (0, 1, 1));
    }

    #[test]
    fn dimension_mismatch() {
        assert!(matches!(
            graph_metrics(&CausalGraph::new(2), &CausalGraph::new(3)),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn auroc_uses_weights() {
        let truth = CausalGraph::from_triples(2, &[(0, 1, 0)]).unwrap();
        let mut est = CausalGraph::new(2);
        est.add_edge(Edge::weighted(0, 1, 0, 0.9)).unwrap();
        est.add_edge(Edge::weighted(1, 0, 0, -0.1)).unwrap();
        assert_eq!(graph_metrics(&est, &truth).unwrap().auroc, 1.0);
        let unweighted = CausalGraph::from_triples(2, &[(0, 1, 0)]).unwrap();
        assert_eq!(graph_metrics(&unweighted, &truth).unwrap().auroc, 0.5);
    }

    #[test]
    fn self_loop_at_lag_zero_is_rejected() {
        let mut g = CausalGraph::new(2);
        assert!(g.add_edge(Edge::new(1, 1, 0)).is_err());
        assert!(g.add_edge(Edge::new(1, 1, 1)).is_ok());
    }

    #[test]
    fn dag_mode_rejects_cycles() {
        let mut g = CausalGraph::new_dag(3);
        g.add_edge(Edge::new(0, 1, 0)).unwrap();
        g.add_edge(Edge::new(1, 2, 0)).unwrap();
        assert!(g.add_edge(Edge::new(2, 0, 0)).is_err());
        assert_eq!(g.len(), 2);
        // Lagged back-edges never violate lag-0 acyclicity.
        g.add_edge(Edge::new(2, 0, 1)).unwrap();
    }

    #[test]
    fn dot_marks_lagged_edges() {
        let g = CausalGraph::from_triples(2, &[(0, 1, 0), (1, 0, 2)])
            .unwrap()
            .with_names(vec!["i".into(), "pi".into()])
            .unwrap();
        let dot = g.to_dot();
        assert!(dot.contains("0 -> 1 [style=solid]"));
        assert!(dot.contains("1 -> 0 [style=dashed, label=\"lag=2\"]"));
        assert!(dot.contains("label=\"pi\""));
    }

    #[test]
    fn json_round_trip() {
        let mut g = CausalGraph::new(3);
        g.add_edge(Edge {
            source: 0,
            target: 2,
            lag: 1,
            weight: -0.5,
            se: 0.1,
            p_value: 0.01,
        })
        .unwrap();
        let back = CausalGraph::from_json(&g.to_json().unwrap()).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn effect_estimate_invariants() {
        let e = EffectEstimate::new(0.3, 0.1, 50, 0.05);
        assert!((e.z - 3.0).abs() < 1e-12);
        assert!(e.ci_low <= e.point && e.point <= e.ci_high);
        let zero = EffectEstimate::new(0.0, 0.0, 5, 0.05);
        assert_eq!(zero.z, 0.0);
        let s = e.scaled(-2.0);
        assert!(s.ci_low <= s.point && s.point <= s.ci_high);
        assert!((s.z + 3.0).abs() < 1e-12);
    }

    fn arb_graph(d: usize) -> impl Strategy<Value = CausalGraph> {
        proptest::collection::vec((0..d, 0..d, 0usize..3, -1.0f64..1.0), 0..12).prop_map(
            move |cells| {
                let mut g = CausalGraph::new(d);
                for (i, j, l, w) in cells {
                    if i == j && l == 0 {
                        continue;
                    }
                    g.add_edge(Edge::weighted(i, j, l, w)).unwrap();
                }
                g
            },
        )
    }

    proptest! {
        #[test]
        fn self_comparison_is_perfect(g in arb_graph(4)) {
            let m = graph_metrics(&g, &g).unwrap();
            prop_assert_eq!(m.f1, 1.0);
            prop_assert_eq!(m.shd, 0);
        }

        #[test]
        fn shd_is_symmetric_and_scores_bounded(a in arb_graph(4), b in arb_graph(4)) {
            let ab = graph_metrics(&a, &b).unwrap();
            let ba = graph_metrics(&b, &a).unwrap();
            prop_assert_eq!(ab.shd, ba.shd);
            for v in [ab.f1, ab.tpr, ab.fdr, ab.auroc] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            let p = 1.0 - ab.fdr;
            let expected = if p + ab.tpr > 0.0 { 2.0 * p * ab.tpr / (p + ab.tpr) } else { 0.0 };
            prop_assert!((ab.f1 - expected).abs() < 1e-12);
        }
    }
}

//! Simulator-assisted causal discovery for multivariate time series.
//!
//! The pipeline runs in phases:
//!
//! 1. [`var_engine`] fits a reduced-form VAR (BIC lag choice, Ridge fallback).
//! 2. [`simulators`] and [`intervention`] produce interventional samples by
//!    clamping variables inside a mechanistic simulator (or a surrogate).
//! 3. [`discovery`] turns interventional mean shifts into a tested causal graph.
//! 4. [`flow_match`] learns nonlinear interventional conditionals.
//! 5. [`sensitivity`] measures how the estimated effects move with the
//!    simulator's physical parameters.
//!
//! [`dag_project`] enforces acyclicity on lag-0 score matrices and
//! [`bench`] reproduces the built-in benchmark domains.

pub mod bench;
pub mod dag_project;
pub mod discovery;
pub mod error;
pub mod flow_match;
pub mod graph;
pub mod intervention;
pub mod panel;
pub mod rng;
pub mod sensitivity;
pub mod simulators;
pub mod stats;
pub mod var_engine;

pub use error::{Error, Result};
pub use graph::{graph_metrics, CausalGraph, Edge, EffectEstimate, GraphMetrics};
pub use panel::{validate_panel, TimeSeriesPanel};

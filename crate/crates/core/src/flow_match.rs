//! Conditional flow matching: an MLP vector field trained on straight-line
//! paths from a standard normal base, Euler sampling, and effect estimates
//! from sampled conditionals.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::discovery::estimate_ate;
use crate::error::{Error, Result};
use crate::graph::EffectEstimate;
use crate::rng;

pub const FORMAT: &str = "cfm-v1";

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;

fn sigmoid(a: f64) -> f64 {
    1.0 / (1.0 + (-a).exp())
}

fn silu(a: f64) -> f64 {
    a * sigmoid(a)
}

fn silu_grad(a: f64) -> f64 {
    let s = sigmoid(a);
    s * (1.0 + a * (1.0 - s))
}

/// Anything that can drive the sampler: `eval` maps a `dim × n` state block
/// at time `t` under conditioning `c` (original units) to velocities.
pub trait VectorField: Sync {
    fn x_dim(&self) -> usize;
    fn eval(&self, x: &DMatrix<f64>, t: f64, c: &[f64]) -> DMatrix<f64>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CfmModel {
    pub format: String,
    pub x_dim: usize,
    pub cond_dim: usize,
    pub layer_sizes: Vec<usize>,
    /// Row-major `out × in` weights per layer.
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
    /// Names of the conditioning slots, in order.
    pub cond_layout: Vec<String>,
    pub cond_mean: Vec<f64>,
    pub cond_scale: Vec<f64>,
}

struct Pass {
    pre: Vec<DMatrix<f64>>,
    post: Vec<DMatrix<f64>>,
}

struct Grads {
    w: Vec<DMatrix<f64>>,
    b: Vec<DVector<f64>>,
}

impl CfmModel {
    /// Fresh network with uniform `±1/√fan_in` initialization.
    pub fn new(x_dim: usize, cond_layout: Vec<String>, hidden: &[usize], seed: u64) -> Result<Self> {
        if x_dim == 0 {
            return Err(Error::Config("x_dim must be positive".into()));
        }
        let cond_dim = cond_layout.len();
        let mut layer_sizes = vec![x_dim + cond_dim + 1];
        layer_sizes.extend_from_slice(hidden);
        layer_sizes.push(x_dim);
        let mut r = rng::rng(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in layer_sizes.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            weights.push(DMatrix::from_fn(w[1], w[0], |_, _| r.random_range(-bound..bound)));
            biases.push(DVector::from_fn(w[1], |_, _| r.random_range(-bound..bound)));
        }
        Ok(Self {
            format: FORMAT.into(),
            x_dim,
            cond_dim,
            layer_sizes,
            weights,
            biases,
            cond_layout,
            cond_mean: vec![0.0; cond_dim],
            cond_scale: vec![1.0; cond_dim],
        })
    }

    /// A network whose output is identically zero.
    pub fn zero(x_dim: usize, cond_layout: Vec<String>) -> Result<Self> {
        let mut m = Self::new(x_dim, cond_layout, &[4], 0)?;
        let last = m.weights.len() - 1;
        m.weights[last].fill(0.0);
        m.biases[last].fill(0.0);
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != FORMAT {
            return Err(Error::Config(format!("unknown model format `{}`", self.format)));
        }
        if self.layer_sizes.first() != Some(&(self.x_dim + self.cond_dim + 1)) || self.layer_sizes.last() != Some(&self.x_dim) {
            return Err(Error::DimensionMismatch("layer sizes disagree with x_dim and cond_dim".into()));
        }
        if self.cond_layout.len() != self.cond_dim || self.cond_mean.len() != self.cond_dim || self.cond_scale.len() != self.cond_dim {
            return Err(Error::DimensionMismatch("conditioning layout length".into()));
        }
        for (k, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            if w.shape() != (self.layer_sizes[k + 1], self.layer_sizes[k]) || b.len() != self.layer_sizes[k + 1] {
                return Err(Error::DimensionMismatch(format!("layer {k} shape")));
            }
            if w.iter().chain(b.iter()).any(|v| !v.is_finite()) {
                return Err(Error::Config(format!("non-finite weight in layer {k}")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    fn encode_cond(&self, c: &[f64]) -> Vec<f64> {
        c.iter()
            .zip(self.cond_mean.iter().zip(&self.cond_scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    /// Input block: rows are `x`, standardized conditioning, `t`.
    fn input(&self, x: &DMatrix<f64>, t: &[f64], c: &DMatrix<f64>) -> DMatrix<f64> {
        let n = x.ncols();
        DMatrix::from_fn(self.x_dim + self.cond_dim + 1, n, |r, k| {
            if r < self.x_dim {
                x[(r, k)]
            } else if r < self.x_dim + self.cond_dim {
                c[(r - self.x_dim, k)]
            } else {
                t[k]
            }
        })
    }

    fn forward(&self, input: DMatrix<f64>) -> Pass {
        let last = self.weights.len() - 1;
        let mut pre = Vec::with_capacity(self.weights.len());
        let mut post = vec![input];
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut a = w * post.last().unwrap();
            for mut col in a.column_iter_mut() {
                col += b;
            }
            let h = if l == last { a.clone() } else { a.map(silu) };
            pre.push(a);
            post.push(h);
        }
        Pass { pre, post }
    }

    /// Velocities for a `x_dim × n` block with per-column times and
    /// already-standardized conditioning columns.
    fn predict(&self, x: &DMatrix<f64>, t: &[f64], c: &DMatrix<f64>) -> DMatrix<f64> {
        self.forward(self.input(x, t, c)).post.pop().unwrap()
    }

    fn backward(&self, pass: &Pass, mut delta: DMatrix<f64>) -> Grads {
        let n = self.weights.len();
        let mut gw = vec![DMatrix::zeros(0, 0); n];
        let mut gb = vec![DVector::zeros(0); n];
        for l in (0..n).rev() {
            gw[l] = &delta * pass.post[l].transpose();
            gb[l] = delta.column_sum();
            if l > 0 {
                let back = self.weights[l].transpose() * &delta;
                delta = back.zip_map(&pass.pre[l - 1], |g, a| g * silu_grad(a));
            }
        }
        Grads { w: gw, b: gb }
    }
}

impl VectorField for CfmModel {
    fn x_dim(&self) -> usize {
        self.x_dim
    }

    fn eval(&self, x: &DMatrix<f64>, t: f64, c: &[f64]) -> DMatrix<f64> {
        let enc = self.encode_cond(c);
        let n = x.ncols();
        let cm = DMatrix::from_fn(self.cond_dim, n, |r, _| enc[r]);
        self.predict(x, &vec![t; n], &cm)
    }
}

/// Training minibatch in column layout (`dim × batch`). Conditioning is in
/// model (standardized) units.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x0: DMatrix<f64>,
    pub x1: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub t: Vec<f64>,
}

impl Batch {
    fn check(&self, model: &CfmModel) -> Result<()> {
        let n = self.x0.ncols();
        if self.x0.shape() != self.x1.shape() || self.x0.nrows() != model.x_dim {
            return Err(Error::DimensionMismatch(format!(
                "x0 {:?}, x1 {:?}, model x_dim {}",
                self.x0.shape(),
                self.x1.shape(),
                model.x_dim
            )));
        }
        if self.c.shape() != (model.cond_dim, n) || self.t.len() != n {
            return Err(Error::DimensionMismatch("conditioning or time length".into()));
        }
        if self.t.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::Config("t must lie in [0, 1]".into()));
        }
        Ok(())
    }

    fn xt(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.x0.nrows(), self.x0.ncols(), |r, k| {
            (1.0 - self.t[k]) * self.x0[(r, k)] + self.t[k] * self.x1[(r, k)]
        })
    }
}

/// Mean over the batch of `‖v(x_t, t | c) − (x1 − x0)‖²`.
pub fn cfm_loss(model: &CfmModel, batch: &Batch) -> Result<f64> {
    batch.check(model)?;
    let v = model.predict(&batch.xt(), &batch.t, &batch.c);
    let target = &batch.x1 - &batch.x0;
    Ok((v - target).norm_squared() / batch.x0.ncols() as f64)
}

fn loss_and_grads(model: &CfmModel, batch: &Batch) -> (f64, Grads) {
    let n = batch.x0.ncols() as f64;
    let pass = model.forward(model.input(&batch.xt(), &batch.t, &batch.c));
    let resid = pass.post.last().unwrap() - (&batch.x1 - &batch.x0);
    let loss = resid.norm_squared() / n;
    let grads = model.backward(&pass, resid * (2.0 / n));
    (loss, grads)
}

/// Largest relative gap between analytic and central-difference gradients
/// over `probes` random weights and one bias per layer.
pub fn gradient_check(model: &mut CfmModel, batch: &Batch, probes: usize, seed: u64) -> Result<f64> {
    batch.check(model)?;
    let (_, g) = loss_and_grads(model, batch);
    let mut r = rng::rng(seed);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let rel = |fd: f64, an: f64| (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
    for l in 0..model.weights.len() {
        for _ in 0..probes {
            let k = r.random_range(0..model.weights[l].len());
            let orig = model.weights[l][k];
            model.weights[l][k] = orig + h;
            let up = cfm_loss(model, batch)?;
            model.weights[l][k] = orig - h;
            let down = cfm_loss(model, batch)?;
            model.weights[l][k] = orig;
            worst = worst.max(rel((up - down) / (2.0 * h), g.w[l][k]));
        }
        let k = r.random_range(0..model.biases[l].len());
        let orig = model.biases[l][k];
        model.biases[l][k] = orig + h;
        let up = cfm_loss(model, batch)?;
        model.biases[l][k] = orig - h;
        let down = cfm_loss(model, batch)?;
        model.biases[l][k] = orig;
        worst = worst.max(rel((up - down) / (2.0 * h), g.b[l][k]));
    }
    Ok(worst)
}

/// Training samples: targets `x1` (`n × x_dim`) with conditioning `c`
/// (`n × cond_dim`, original units).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CfmDataset {
    pub x1: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub cond_layout: Vec<String>,
}

impl CfmDataset {
    pub fn new(x1: DMatrix<f64>, c: DMatrix<f64>, cond_layout: Vec<String>) -> Result<Self> {
        if x1.nrows() == 0 || x1.ncols() == 0 {
            return Err(Error::EmptySample);
        }
        if c.nrows() != x1.nrows() || c.ncols() != cond_layout.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} targets, conditioning {:?}, layout of {}",
                x1.nrows(),
                c.shape(),
                cond_layout.len()
            )));
        }
        Ok(Self { x1, c, cond_layout })
    }

    /// Unconditional dataset.
    pub fn unconditional(x1: DMatrix<f64>) -> Result<Self> {
        let n = x1.nrows();
        Self::new(x1, DMatrix::zeros(n, 0), Vec::new())
    }

    pub fn len(&self) -> usize {
        self.x1.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x1.nrows() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub hidden: Vec<usize>,
    /// Pair base and target draws greedily by distance within each batch.
    pub ot_coupling: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch: 128,
            lr: 1e-3,
            seed: 0,
            hidden: vec![64, 64, 64],
            ot_coupling: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 || !(self.lr > 0.0) || self.hidden.is_empty() {
            return Err(Error::Config("need steps ≥ 1, batch ≥ 1, lr > 0 and at least one hidden layer".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Loss on a fixed evaluation batch before and after training.
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Minibatch losses every 50 steps.
    pub trace: Vec<f64>,
}

fn normal_block(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| r.sample(StandardNormal))
}

/// Reorders the columns of `x0` so that each target column is matched to a
/// nearby base column, closest pairs first.
fn greedy_couple(x0: &DMatrix<f64>, x1: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x0.ncols();
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(n * n);
    for a in 0..n {
        for b in 0..n {
            pairs.push(((x0.column(a) - x1.column(b)).norm_squared(), a, b));
        }
    }
    pairs.sort_by(|p, q| p.0.total_cmp(&q.0));
    let (mut used0, mut used1) = (vec![false; n], vec![false; n]);
    let mut out = x0.clone();
    for (_, a, b) in pairs {
        if !used0[a] && !used1[b] {
            used0[a] = true;
            used1[b] = true;
            out.set_column(b, &x0.column(a));
        }
    }
    out
}

struct Sampler<'a> {
    data: &'a CfmDataset,
    enc: DMatrix<f64>,
    ot: bool,
}

impl Sampler<'_> {
    fn draw(&self, r: &mut ChaCha8Rng, size: usize) -> Batch {
        let n = self.data.len();
        let idx: Vec<usize> = if size <= n {
            sample_indices(r, n, size).into_vec()
        } else {
            (0..size).map(|_| r.random_range(0..n)).collect()
        };
        let dim = self.data.x1.ncols();
        let x1 = DMatrix::from_fn(dim, size, |d, k| self.data.x1[(idx[k], d)]);
        let c = DMatrix::from_fn(self.enc.ncols(), size, |d, k| self.enc[(idx[k], d)]);
        let mut x0 = normal_block(r, dim, size);
        if self.ot {
            x0 = greedy_couple(&x0, &x1);
        }
        let t = (0..size).map(|_| r.random::<f64>()).collect();
        Batch { x0, x1, c, t }
    }
}

/// Adam on the squared flow-matching residual. Errors with the loss trace
/// if a minibatch loss becomes non-finite.
pub fn train_cfm(data: &CfmDataset, cfg: &TrainConfig) -> Result<(CfmModel, TrainReport)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptySample);
    }
    let mut model = CfmModel::new(data.x1.ncols(), data.cond_layout.clone(), &cfg.hidden, rng::derive(cfg.seed, 0))?;
    for j in 0..model.cond_dim {
        let col: Vec<f64> = data.c.column(j).iter().copied().collect();
        let sd = crate::stats::std_dev(&col);
        model.cond_mean[j] = crate::stats::mean(&col);
        model.cond_scale[j] = if sd > 0.0 && sd.is_finite() { sd } else { 1.0 };
    }
    let enc = DMatrix::from_fn(data.len(), model.cond_dim, |i, j| (data.c[(i, j)] - model.cond_mean[j]) / model.cond_scale[j]);
    let sampler = Sampler {
        data,
        enc,
        ot: cfg.ot_coupling,
    };
    let eval = sampler.draw(&mut rng::child_rng(cfg.seed, 1), 1024);
    let initial_loss = cfm_loss(&model, &eval)?;

    let mut mw: Vec<DMatrix<f64>> = model.weights.iter().map(|w| w * 0.0).collect();
    let mut vw = mw.clone();
    let mut mb: Vec<DVector<f64>> = model.biases.iter().map(|b| b * 0.0).collect();
    let mut vb = mb.clone();
    let mut r = rng::child_rng(cfg.seed, 2);
    let mut trace = Vec::new();
    for step in 1..=cfg.steps {
        let batch = sampler.draw(&mut r, cfg.batch);
        let (loss, g) = loss_and_grads(&model, &batch);
        if !loss.is_finite() {
            trace.push(loss);
            return Err(Error::Divergence { step, trace });
        }
        if step % 50 == 1 {
            trace.push(loss);
        }
        let c1 = 1.0 - BETA1.powi(step as i32);
        let c2 = 1.0 - BETA2.powi(step as i32);
        for l in 0..model.weights.len() {
            adam(&mut model.weights[l], &g.w[l], &mut mw[l], &mut vw[l], cfg.lr, c1, c2);
            adam(&mut model.biases[l], &g.b[l], &mut mb[l], &mut vb[l], cfg.lr, c1, c2);
        }
    }
    let final_loss = cfm_loss(&model, &eval)?;
    Ok((
        model,
        TrainReport {
            initial_loss,
            final_loss,
            trace,
        },
    ))
}

fn adam<R: nalgebra::Dim, C: nalgebra::Dim, S>(
    p: &mut nalgebra::Matrix<f64, R, C, S>,
    g: &nalgebra::Matrix<f64, R, C, S>,
    m: &mut nalgebra::Matrix<f64, R, C, S>,
    v: &mut nalgebra::Matrix<f64, R, C, S>,
    lr: f64,
    c1: f64,
    c2: f64,
) where
    S: nalgebra::StorageMut<f64, R, C>,
{
    for k in 0..p.len() {
        m[k] = BETA1 * m[k] + (1.0 - BETA1) * g[k];
        v[k] = BETA2 * v[k] + (1.0 - BETA2) * g[k] * g[k];
        p[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + 1e-8);
    }
}

/// Euler integration of the flow from standard-normal draws over `[0, 1]`.
/// Returns `n × x_dim`.
pub fn sample_flow<F: VectorField + ?Sized>(field: &F, c: &[f64], n: usize, ode_steps: usize, seed: u64) -> Result<DMatrix<f64>> {
    if ode_steps == 0 {
        return Err(Error::Config("ode_steps must be at least 1".into()));
    }
    let mut x = normal_block(&mut rng::rng(seed), field.x_dim(), n);
    let dt = 1.0 / ode_steps as f64;
    for k in 0..ode_steps {
        let v = field.eval(&x, k as f64 * dt, c);
        x += v * dt;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteTrajectory);
        }
    }
    Ok(x.transpose())
}

/// Difference of sampled means of coordinate `response` under `c_hi` and
/// `c_lo`. Both conditionals share base draws, and the se is a bootstrap
/// over the paired differences.
pub fn flow_ace<F: VectorField + ?Sized>(
    field: &F,
    c_hi: &[f64],
    c_lo: &[f64],
    n: usize,
    response: usize,
    ode_steps: usize,
    seed: u64,
) -> Result<EffectEstimate> {
    if response >= field.x_dim() {
        return Err(Error::DimensionMismatch(format!("response {response} of {}", field.x_dim())));
    }
    let (hi, lo) = rayon::join(
        || sample_flow(field, c_hi, n, ode_steps, seed),
        || sample_flow(field, c_lo, n, ode_steps, seed),
    );
    let (hi, lo) = (hi?, lo?);
    let diffs: Vec<f64> = (0..n).map(|k| hi[(k, response)] - lo[(k, response)]).collect();
    estimate_ate(&diffs, 0.0, 1000, rng::derive(seed, 1))
}

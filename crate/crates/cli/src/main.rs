use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use svarfm::bench::{self, BenchConfig, Domain};
use svarfm::dag_project::{self, DagProjectConfig};
use svarfm::discovery::{self, Correction, EffectMatrix, EffectOptions, PipelineVariant, TestConfig, TruthHint};
use svarfm::flow_match::{self, CfmDataset, CfmModel, TrainConfig};
use svarfm::intervention::{self, GridStrategy, InterventionDataset};
use svarfm::simulators::{self, DoMode, DoRequest, SimulatorSpec};
use svarfm::{sensitivity, var_engine, CausalGraph, TimeSeriesPanel};

const EXIT_VALIDATION: u8 = 2;
const EXIT_NONCONVERGENCE: u8 = 3;

/// Raised when an optimizer finishes without meeting its tolerance.
#[derive(Debug)]
struct NonConvergence(String);

impl std::fmt::Display for NonConvergence {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "did not converge: {}", self.0)
    }
}

impl std::error::Error for NonConvergence {}

#[derive(Parser)]
#[command(name = "svarfm", version, about = "Simulator-assisted causal discovery for time series")]
struct Cli {
    /// TOML file with [test], [var], [dag], [flow], [bench] and [discover] tables.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw an observational panel from a simulator spec.
    Simulate {
        spec: PathBuf,
        #[arg(long = "T", default_value_t = 500)]
        t: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV output; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate interventional samples and write a dataset manifest.
    Intervene(IntervenArgs),
    /// Identify causal edges from observational and interventional data.
    Discover(DiscoverArgs),
    /// Conditional flow matching.
    Flow {
        #[command(subcommand)]
        command: FlowCommand,
    },
    /// Sensitivity of each edge's effect to the simulator's parameters.
    Sensitivity {
        spec: PathBuf,
        /// Graph JSON (bare or as written by `discover`).
        #[arg(long)]
        graph: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        delta_rel: f64,
        #[arg(long = "M", default_value_t = 200)]
        m: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = TableFormat::Json)]
        format: TableFormat,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Multi-seed benchmark on a built-in domain.
    Bench {
        /// macro, battery, cosmic or feedback_toy.
        domain: String,
        #[arg(long, default_value_t = 50)]
        seeds: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long = "T")]
        t: Option<usize>,
        #[arg(long = "M")]
        m: Option<usize>,
        /// Add the flow-based estimator.
        #[arg(long)]
        nonlinear: bool,
        /// Re-fit macro parameters to each observational draw.
        #[arg(long)]
        calibrate: bool,
        #[arg(long, value_enum, default_value_t = TableFormat::Json)]
        format: TableFormat,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a graph as JSON, CSV or DOT.
    Report {
        graph: PathBuf,
        #[arg(long, value_enum, default_value_t = ReportFormat::Json)]
        format: ReportFormat,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct IntervenArgs {
    spec: PathBuf,
    #[arg(long)]
    target: String,
    /// Comma-separated clamp values.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true, conflicts_with = "grid")]
    values: Vec<f64>,
    /// `low,high,count` for an evenly spaced grid.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true, num_args = 1)]
    grid: Vec<f64>,
    /// Use Latin-hypercube draws instead of an even grid.
    #[arg(long)]
    lhs: bool,
    #[arg(long = "M", default_value_t = 500)]
    m: usize,
    #[arg(long, value_enum, default_value_t = Method::Do)]
    method: Method,
    /// Clamp at every step instead of once at `t0`.
    #[arg(long)]
    all_steps: bool,
    #[arg(long, default_value_t = 50)]
    t0: usize,
    /// Steps between the clamp and the recorded outcome.
    #[arg(long, default_value_t = 0)]
    horizon: usize,
    /// Observational panel for `--method var`.
    #[arg(long)]
    obs: Option<PathBuf>,
    /// Clamp level in panel standard deviations (`var`, `hard`).
    #[arg(long, default_value_t = 5.0)]
    level_sigma: f64,
    /// Restoring strength for `soft`.
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    /// Trajectory length for `var`, `hard` and `soft`.
    #[arg(long = "T", default_value_t = 200)]
    t: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for the CSV blocks and manifest.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DiscoverArgs {
    #[arg(long)]
    obs: PathBuf,
    /// Intervention manifests, one per intervened variable.
    #[arg(long)]
    intv: Vec<PathBuf>,
    /// Simulator spec queried for every observed variable when no manifests are given.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, value_enum)]
    correction: Option<CorrectionArg>,
    #[arg(long, value_enum, default_value_t = VariantArg::Auto)]
    variant: VariantArg,
    /// Prior knowledge used by `--variant auto`.
    #[arg(long, value_enum, default_value_t = HintArg::Unknown)]
    hint: HintArg,
    #[arg(long = "M")]
    m: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum FlowCommand {
    /// Fit a conditional flow to columns of a CSV table.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Modelled columns.
        #[arg(long, value_delimiter = ',', required = true)]
        x: Vec<String>,
        /// Conditioning columns.
        #[arg(long, value_delimiter = ',')]
        cond: Vec<String>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Pair base and data draws by distance within each batch.
        #[arg(long)]
        ot: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw from a trained flow at one conditioning value.
    Sample {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        cond: Vec<f64>,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 100)]
        ode_steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mean difference of one modelled column between two conditioning values.
    Ace {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true, required = true)]
        hi: Vec<f64>,
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true, required = true)]
        lo: Vec<f64>,
        /// Index of the response column among the modelled columns.
        #[arg(long, default_value_t = 0)]
        response: usize,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 100)]
        ode_steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    /// Clamp inside the simulator.
    Do,
    /// Forward simulation of a VAR fitted to `--obs`.
    Var,
    /// Hard clamp inside the data-generating process.
    Hard,
    /// Restoring-force intervention on an ODE system.
    Soft,
}

#[derive(Clone, Copy, ValueEnum)]
enum CorrectionArg {
    Bonferroni,
    Bh,
    None,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum VariantArg {
    Auto,
    SvarFm,
    SvarFmDag,
    Dyn1,
    Dyn2,
}

#[derive(Clone, Copy, ValueEnum)]
enum HintArg {
    Dag,
    Cycles,
    Unknown,
}

#[derive(Clone, Copy, ValueEnum)]
enum TableFormat {
    Json,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Json,
    Csv,
    Dot,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct Config {
    test: TestConfig,
    var: VarSection,
    dag: DagProjectConfig,
    flow: TrainConfig,
    bench: BenchConfig,
    discover: DiscoverSection,
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct VarSection {
    p_max: usize,
}

impl Default for VarSection {
    fn default() -> Self {
        Self { p_max: 10 }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct DiscoverSection {
    /// Lag horizons tested when a simulator spec is queried.
    max_lag: usize,
    /// Rank-score cut-off for the score-based variants.
    score_threshold: f64,
}

impl Default for DiscoverSection {
    fn default() -> Self {
        Self {
            max_lag: 0,
            score_threshold: 0.5,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct DiscoveryOutput {
    variant: PipelineVariant,
    nonlinearity_p: f64,
    graph: CausalGraph,
    #[serde(default)]
    pairs: Vec<discovery::PairReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scores: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    weights: Vec<(String, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dag_h: Option<f64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<NonConvergence>().is_some() {
        return EXIT_NONCONVERGENCE;
    }
    match e.downcast_ref::<svarfm::Error>() {
        Some(svarfm::Error::Divergence { .. } | svarfm::Error::NonFiniteTrajectory | svarfm::Error::IntegrationFailure(_)) => {
            EXIT_NONCONVERGENCE
        }
        _ => EXIT_VALIDATION,
    }
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        None => Ok(Config::default()),
        Some(p) => {
            let text = read(p)?;
            toml::from_str(&text).map_err(|e| svarfm::Error::Config(format!("{}: {e}", p.display())).into())
        }
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_spec(path: &Path) -> Result<SimulatorSpec> {
    let spec = SimulatorSpec::from_toml(&read(path)?)?;
    spec.validate()?;
    Ok(spec)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            println!("{}", text.trim_end());
            Ok(())
        }
    }
}

/// Accepts a bare graph or the document written by `discover`.
fn load_graph(path: &Path) -> Result<CausalGraph> {
    let text = read(path)?;
    if let Ok(doc) = serde_json::from_str::<DiscoveryOutput>(&text) {
        return Ok(doc.graph);
    }
    Ok(CausalGraph::from_json(&text)?)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Simulate { spec, t, seed, out } => {
            let spec = load_spec(&spec)?;
            let panel = simulators::simulate_observational(&spec, t, seed)?;
            match out {
                Some(p) => panel.write_csv(&p)?,
                None => panel.to_csv_writer(std::io::stdout())?,
            }
        }
        Command::Intervene(args) => intervene(args, &cfg)?,
        Command::Discover(args) => discover(args, &cfg)?,
        Command::Flow { command } => flow(command, &cfg)?,
        Command::Sensitivity {
            spec,
            graph,
            delta_rel,
            m,
            seed,
            format,
            out,
        } => {
            let spec = load_spec(&spec)?;
            let graph = load_graph(&graph)?;
            let report = sensitivity::sensitivities(&spec, &graph, delta_rel, m, seed)?;
            let text = match format {
                TableFormat::Json => report.to_json()?,
                TableFormat::Csv => report.to_csv(),
            };
            emit(out.as_deref(), &text)?;
        }
        Command::Bench {
            domain,
            seeds,
            seed,
            t,
            m,
            nonlinear,
            calibrate,
            format,
            out,
        } => {
            let domain: Domain = domain.parse()?;
            let mut bc = cfg.bench.clone();
            if let Some(s) = seed {
                bc.seed = s;
            }
            bc.t = t.or(bc.t);
            bc.m = m.or(bc.m);
            bc.nonlinear |= nonlinear;
            bc.calibrate |= calibrate;
            let report = bench::run_causalsim(domain, seeds, &bc)?;
            let text = match format {
                TableFormat::Json => report.to_json()?,
                TableFormat::Csv => report.to_csv(),
            };
            emit(out.as_deref(), &text)?;
        }
        Command::Report { graph, format, out } => {
            let g = load_graph(&graph)?;
            let text = match format {
                ReportFormat::Json => g.to_json()?,
                ReportFormat::Csv => g.to_csv(),
                ReportFormat::Dot => g.to_dot(),
            };
            emit(out.as_deref(), &text)?;
        }
    }
    Ok(())
}

fn clamp_values(args: &IntervenArgs) -> Result<Vec<f64>> {
    if !args.grid.is_empty() {
        let [low, high, count] = args.grid[..] else {
            bail!(svarfm::Error::Config("--grid takes low,high,count".into()));
        };
        if count.fract() != 0.0 || count < 0.0 {
            bail!(svarfm::Error::Config(format!("grid count must be a whole number, got {count}")));
        }
        let strategy = if args.lhs {
            GridStrategy::LatinHypercube { seed: args.seed }
        } else {
            GridStrategy::Uniform
        };
        return Ok(intervention::design_grid(low, high, count as usize, strategy)?);
    }
    Ok(args.values.clone())
}

fn intervene(args: IntervenArgs, cfg: &Config) -> Result<()> {
    let values = clamp_values(&args)?;
    let ds: InterventionDataset = match args.method {
        Method::Do => {
            if values.is_empty() {
                bail!(svarfm::Error::Config("--method do needs --values or --grid".into()));
            }
            let spec = load_spec(&args.spec)?;
            let mode = if args.all_steps {
                DoMode::AllSteps
            } else {
                DoMode::PointInTime { t0: args.t0 }
            };
            let req = DoRequest::new(args.target.clone(), values[0]).mode(mode).horizon(args.horizon);
            simulators::simulate_do_grid(&spec, &req, &values, args.m, args.seed)?
        }
        Method::Var => {
            let obs = args
                .obs
                .as_ref()
                .ok_or_else(|| svarfm::Error::Config("--method var needs --obs".into()))?;
            let panel = TimeSeriesPanel::read_csv(obs)?;
            let model = var_engine::fit_var(&panel, cfg.var.p_max)?;
            let level = match values[..] {
                [] => intervention::clamp_level(&panel, &args.target, args.level_sigma)?,
                [v] => v,
                _ => bail!(svarfm::Error::Config("--method var takes a single clamp value".into())),
            };
            intervention::var_forward_do_at(&model, &panel, &args.target, level, args.t, args.seed)?
        }
        Method::Hard => {
            let spec = load_spec(&args.spec)?;
            intervention::dgp_hard_do(&spec, &args.target, args.level_sigma, args.t, args.seed)?
        }
        Method::Soft => {
            let [x_star] = values[..] else {
                bail!(svarfm::Error::Config("--method soft takes exactly one target value".into()));
            };
            let spec = load_spec(&args.spec)?;
            intervention::ode_soft_do(&spec, &args.target, x_star, args.lambda, args.t, args.seed)?
        }
    };
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let manifest = ds.write(&args.out)?;
    println!("{}", manifest.display());
    Ok(())
}

fn discover(args: DiscoverArgs, cfg: &Config) -> Result<()> {
    let panel = TimeSeriesPanel::read_csv(&args.obs)?;
    let names = panel.names().to_vec();
    let d = names.len();
    let mut tc = cfg.test;
    if let Some(a) = args.alpha {
        tc.alpha = a;
    }
    if let Some(c) = args.correction {
        tc.correction = match c {
            CorrectionArg::Bonferroni => Correction::Bonferroni,
            CorrectionArg::Bh => Correction::BenjaminiHochberg,
            CorrectionArg::None => Correction::None,
        };
    }
    if let Some(m) = args.m {
        tc.m = m;
    }
    if let Some(s) = args.seed {
        tc.seed = s;
    }
    tc.validate()?;

    let decision = match args.variant {
        VariantArg::Auto => {
            let hint = match args.hint {
                HintArg::Dag => TruthHint::ExpectDag,
                HintArg::Cycles => TruthHint::ExpectCycles,
                HintArg::Unknown => TruthHint::Unknown,
            };
            discovery::route(&panel, hint)?
        }
        v => discovery::RouteDecision {
            variant: match v {
                VariantArg::SvarFm => PipelineVariant::SvarFm,
                VariantArg::SvarFmDag => PipelineVariant::SvarFmDag,
                VariantArg::Dyn1 => PipelineVariant::Dyn1,
                _ => PipelineVariant::Dyn2,
            },
            nonlinearity_p: 1.0,
            nonlinear: false,
        },
    };

    let needs_effects = !matches!(decision.variant, PipelineVariant::Dyn1);
    let effects: Option<Vec<EffectMatrix>> = if !needs_effects {
        None
    } else if !args.intv.is_empty() {
        let means: Vec<f64> = panel.column_means().iter().copied().collect();
        let mut lag0: EffectMatrix = vec![vec![None; d]; d];
        for (k, path) in args.intv.iter().enumerate() {
            let ds = InterventionDataset::read(path)?;
            if ds.names != names {
                bail!(svarfm::Error::DimensionMismatch(format!(
                    "{} has columns {:?}, panel has {:?}",
                    path.display(),
                    ds.names,
                    names
                )));
            }
            let i = panel.index_of(&ds.target)?;
            lag0[i] = discovery::dataset_effects(&ds, Some(&means), tc.b, svarfm::rng::derive(tc.seed, k as u64))?;
        }
        Some(vec![lag0])
    } else if let Some(spec) = &args.spec {
        let spec = load_spec(spec)?;
        if spec.var_names() != names {
            bail!(svarfm::Error::DimensionMismatch("simulator variables differ from panel columns".into()));
        }
        Some(discovery::interventional_effects(
            &spec,
            &names,
            cfg.discover.max_lag,
            &tc,
            &EffectOptions::default(),
        )?)
    } else if matches!(decision.variant, PipelineVariant::Dyn2) {
        None
    } else {
        // No simulator: use forward simulation of the fitted VAR as the do-operator.
        let means: Vec<f64> = panel.column_means().iter().copied().collect();
        let model = var_engine::fit_var(&panel, cfg.var.p_max)?;
        let mut lag0: EffectMatrix = vec![vec![None; d]; d];
        for (i, name) in names.iter().enumerate() {
            let seed = svarfm::rng::derive(tc.seed, i as u64);
            let mut ds = intervention::var_forward_do(&model, &panel, name, tc.m, seed)?;
            // Paired surrogate runs differ only through the fitted coefficients,
            // so test against the observational means instead.
            ds.reference = None;
            lag0[i] = discovery::dataset_effects(&ds, Some(&means), tc.b, seed)?;
        }
        Some(vec![lag0])
    };

    let mut out = DiscoveryOutput {
        variant: decision.variant,
        nonlinearity_p: decision.nonlinearity_p,
        graph: CausalGraph::new(d),
        pairs: Vec::new(),
        scores: None,
        weights: Vec::new(),
        dag_h: None,
    };
    match decision.variant {
        PipelineVariant::SvarFm | PipelineVariant::SvarFmDag => {
            let res = discovery::phase3(effects.as_deref().unwrap_or_default(), &tc)?;
            out.pairs = res.pairs;
            out.graph = res.graph.with_names(names.clone())?;
            if decision.variant == PipelineVariant::SvarFmDag {
                let (g, proj) = dag_project::project_graph(&out.graph, &cfg.dag)?;
                if !proj.converged {
                    return Err(NonConvergence(format!("acyclicity projection stopped at h = {:.3e}", proj.h)).into());
                }
                out.dag_h = Some(proj.h);
                out.graph = g;
            }
        }
        PipelineVariant::Dyn1 | PipelineVariant::Dyn2 => {
            let scores = if decision.variant == PipelineVariant::Dyn1 {
                discovery::dyn1(&panel)?
            } else {
                let ate = match &effects {
                    Some(e) => Some(discovery::effect_scores(&e[0])?),
                    None => None,
                };
                let res = discovery::dyn2(&panel, ate.as_ref(), None)?;
                out.weights = res.weights;
                res.scores
            };
            let m = scores.matrix();
            out.graph = dag_project::graph_from_weights(m, cfg.discover.score_threshold)?.with_names(names.clone())?;
            out.scores = Some((0..d).map(|i| (0..d).map(|j| m[(i, j)]).collect()).collect());
        }
    }
    emit(args.out.as_deref(), &serde_json::to_string_pretty(&out)?)
}

fn flow(cmd: FlowCommand, cfg: &Config) -> Result<()> {
    match cmd {
        FlowCommand::Train {
            data,
            x,
            cond,
            steps,
            seed,
            ot,
            out,
        } => {
            let table = TimeSeriesPanel::read_csv(&data)?;
            let pick = |cols: &[String]| -> Result<_> {
                let refs: Vec<&str> = cols.iter().map(String::as_str).collect();
                Ok(table.select(&refs)?.values().clone())
            };
            let dataset = if cond.is_empty() {
                CfmDataset::unconditional(pick(&x)?)?
            } else {
                CfmDataset::new(pick(&x)?, pick(&cond)?, cond.clone())?
            };
            let mut tc = cfg.flow.clone();
            if let Some(s) = steps {
                tc.steps = s;
            }
            if let Some(s) = seed {
                tc.seed = s;
            }
            tc.ot_coupling |= ot;
            let (model, report) = flow_match::train_cfm(&dataset, &tc)?;
            fs::write(&out, model.to_json()?).with_context(|| format!("writing {}", out.display()))?;
            println!("{}", serde_json::to_string(&report)?);
        }
        FlowCommand::Sample {
            model,
            cond,
            n,
            ode_steps,
            seed,
            out,
        } => {
            let model = CfmModel::from_json(&read(&model)?)?;
            let s = flow_match::sample_flow(&model, &cond, n, ode_steps, seed)?;
            let names: Vec<String> = (0..s.ncols()).map(|j| format!("x{j}")).collect();
            let panel = TimeSeriesPanel::new(s, names)?;
            match out {
                Some(p) => panel.write_csv(&p)?,
                None => panel.to_csv_writer(std::io::stdout())?,
            }
        }
        FlowCommand::Ace {
            model,
            hi,
            lo,
            response,
            n,
            ode_steps,
            seed,
        } => {
            let model = CfmModel::from_json(&read(&model)?)?;
            let est = flow_match::flow_ace(&model, &hi, &lo, n, response, ode_steps, seed)?;
            println!("{}", serde_json::to_string_pretty(&est)?);
        }
    }
    Ok(())
}

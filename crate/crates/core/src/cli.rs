//! Command-line front end: configuration, dispatch and artifact writing.
//!
//! Configuration is resolved from built-in defaults, then an optional TOML
//! file, then command-line flags. Every summary file embeds the resolved
//! configuration and its SHA-256 hash.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ensemble::{
    content_hash, forecast_experiment, run_ensemble, transition_experiment, EnsembleConfig, EnsembleDataset,
    EnsembleError, InitialCondition, Reduction, TransitionResult,
};
use crate::equilibria::{bifurcation_scan, find_equilibria, ScanOptions, SearchBox};
use crate::homogenization::{
    diffusion_correction, fast_stationary_covariance, mean_eddy_flux, oracle_estimate, OracleSettings,
};
use crate::integrator::{simulate_trajectory, IntegratorConfig, Solver, Trajectory, PRODUCTION_DT};
use crate::lyapunov::{beta_ceiling, lyapunov_certificate};
use crate::model::{State, Variant};
use crate::noise::StreamSeed;
use crate::params::{DimensionalScales, ModelParams};
use crate::statistics::{density_estimate, AcfResult, EventSpec, HistogramGeometry, StatsSummary};
use crate::verify::{self, acf_center, find_truth, VerifyScale, ACF_WINDOW, FORECAST_LEADS_YEARS};

pub const EXIT_OK: u8 = 0;
pub const EXIT_CONFIG: u8 = 1;
pub const EXIT_RUNTIME: u8 = 2;
pub const EXIT_ACCEPTANCE: u8 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
    #[error("{0} acceptance criteria failed")]
    Acceptance(usize),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Runtime(_) => EXIT_RUNTIME,
            CliError::Acceptance(_) => EXIT_ACCEPTANCE,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

impl From<EnsembleError> for CliError {
    fn from(e: EnsembleError) -> Self {
        match e {
            EnsembleError::Config(m) => CliError::Config(m),
            other => runtime(other),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        runtime(e)
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        runtime(e)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Units {
    /// Nondimensional time.
    #[default]
    Nd,
    /// Years, one time unit being 219 years.
    Years,
}

impl Units {
    pub fn convert(self, t: f64) -> f64 {
        match self {
            Units::Nd => t,
            Units::Years => DimensionalScales::default().to_years(t),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "eddy-stommel", version, about = "Two-box ocean model with stochastic eddy forcing")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default, Clone)]
pub struct GlobalArgs {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Ensemble size of the command being run.
    #[arg(long, global = true)]
    pub members: Option<usize>,
    #[arg(long, global = true)]
    pub variant: Option<Variant>,
    /// Drop the mean eddy diffusion terms.
    #[arg(long, global = true)]
    pub no_mean_diffusion: bool,
    /// Eddy Péclet number.
    #[arg(long, global = true)]
    pub p_e: Option<f64>,
    #[arg(long, global = true)]
    pub dt: Option<f64>,
    #[arg(long, global = true)]
    pub stride: Option<u64>,
    #[arg(long, global = true)]
    pub t_burn: Option<f64>,
    #[arg(long, global = true)]
    pub t_end: Option<f64>,
    /// Units for reported times.
    #[arg(long, global = true, value_enum)]
    pub units: Option<Units>,
}

#[derive(Debug, Subcommand, Clone)]
pub enum Command {
    /// Integrate one trajectory.
    Simulate,
    /// Run a climatology ensemble, store it and summarize it.
    Ensemble,
    /// Locate equilibria of the drift.
    Equilibria,
    /// Count equilibria over a range of P.
    Bifurcation {
        #[arg(long)]
        p_min: Option<f64>,
        #[arg(long)]
        p_max: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Closed-form homogenization quantities against the Monte Carlo oracle.
    Homogenize {
        #[arg(long, requires = "y")]
        x: Option<f64>,
        #[arg(long, requires = "x")]
        y: Option<f64>,
        #[arg(long)]
        trajectories: Option<usize>,
    },
    /// Rare-event forecast probabilities against lead time.
    Forecast {
        /// Directory of a stored full-model ensemble to take the truth from.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Event such as `x>=0.985`.
        #[arg(long)]
        event: Option<EventSpec>,
        #[arg(long)]
        verification_time: Option<f64>,
    },
    /// Regime-transition probabilities p01 and p10.
    Transitions,
    /// Recompute statistics of a stored ensemble.
    Stats {
        /// Dataset directory written by `ensemble`.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        allow_failures: bool,
    },
    /// Sampled check of the Lyapunov drift condition.
    Lyapunov {
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        radius: Option<f64>,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Run the acceptance criteria.
    Verify {
        /// Small sizes that only exercise the code paths.
        #[arg(long)]
        quick: bool,
        /// Comma-separated criterion ids.
        #[arg(long, value_delimiter = ',')]
        criteria: Vec<u8>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Ensemble => "ensemble",
            Command::Equilibria => "equilibria",
            Command::Bifurcation { .. } => "bifurcation",
            Command::Homogenize { .. } => "homogenize",
            Command::Forecast { .. } => "forecast",
            Command::Transitions => "transitions",
            Command::Stats { .. } => "stats",
            Command::Lyapunov { .. } => "lyapunov",
            Command::Verify { .. } => "verify",
        }
    }
}

/// Model parameters as written in a config file; missing keys take the
/// reference values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParamsSection {
    pub eps_t: f64,
    pub eps: f64,
    pub p_a: f64,
    pub p_e: f64,
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub sigma_eps: f64,
    pub mean_diffusion: bool,
}

impl Default for ParamsSection {
    fn default() -> Self {
        Self {
            eps_t: 1.0 / 400.0,
            eps: 1.0 / 5000.0,
            p_a: 6.0,
            p_e: 80.0,
            sigma_x: 0.005,
            sigma_y: 0.15,
            sigma_eps: 0.01,
            mean_diffusion: true,
        }
    }
}

impl ParamsSection {
    fn build(&self) -> Result<ModelParams, CliError> {
        ModelParams::builder()
            .eps_t(self.eps_t)
            .eps(self.eps)
            .p_a(self.p_a)
            .p_e(self.p_e)
            .sigma_x(self.sigma_x)
            .sigma_y(self.sigma_y)
            .sigma_eps(self.sigma_eps)
            .mean_diffusion(self.mean_diffusion)
            .build()
            .map_err(|e| CliError::Config(format!("[params] {e}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntegratorSection {
    pub dt: f64,
    pub save_stride: u64,
    pub residual_check_stride: u64,
    /// Defaults to Newton for the full model and 10 fixed-point iterations otherwise.
    pub solver: Option<Solver>,
}

impl Default for IntegratorSection {
    fn default() -> Self {
        Self {
            dt: PRODUCTION_DT,
            save_stride: 100,
            residual_check_stride: 10_000,
            solver: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub variant: Variant,
    pub members: usize,
    pub t_burn: f64,
    pub t_end: f64,
    /// `[x, y]`, or all five components for the full model; defaults to the origin.
    pub initial: Option<Vec<f64>>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            variant: Variant::Full,
            members: 200,
            t_burn: 4.0,
            t_end: 10.0,
            initial: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EquilibriaSection {
    pub x: (f64, f64),
    pub y: (f64, f64),
    pub grid: usize,
}

impl Default for EquilibriaSection {
    fn default() -> Self {
        let b = SearchBox::default();
        Self {
            x: b.x,
            y: b.y,
            grid: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BifurcationSection {
    pub p_min: f64,
    pub p_max: f64,
    pub steps: usize,
}

impl Default for BifurcationSection {
    fn default() -> Self {
        Self {
            p_min: 0.05,
            p_max: 0.6,
            steps: 55,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HomogenizeSection {
    pub points: Vec<(f64, f64)>,
    pub trajectories: usize,
    /// Lag horizon in units of eps.
    pub lag_horizon_eps: f64,
}

impl Default for HomogenizeSection {
    fn default() -> Self {
        Self {
            points: vec![(1.0, 0.093), (1.0, 1.0), (0.5, -0.2)],
            trajectories: 10_000,
            lag_horizon_eps: 30.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForecastSection {
    pub dataset: Option<PathBuf>,
    /// Truth member of the dataset; searched when absent.
    pub member: Option<usize>,
    pub event: EventSpec,
    /// Searched as the first event onset after a year without it when absent.
    pub verification_time: Option<f64>,
    pub leads_years: Vec<f64>,
    pub members: usize,
    pub variants: Vec<Variant>,
}

impl Default for ForecastSection {
    fn default() -> Self {
        Self {
            dataset: None,
            member: None,
            event: EventSpec::large_x(),
            verification_time: None,
            leads_years: FORECAST_LEADS_YEARS.to_vec(),
            members: 500,
            variants: Variant::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransitionsSection {
    pub low: f64,
    pub high: f64,
    pub taus: Vec<f64>,
}

impl Default for TransitionsSection {
    fn default() -> Self {
        Self {
            low: verify::TRANSITION_LOW,
            high: verify::TRANSITION_HIGH,
            taus: verify::TRANSITION_TAUS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct StatsSection {
    pub dataset: Option<PathBuf>,
    pub allow_failures: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LyapunovSection {
    pub alpha: Option<f64>,
    /// Defaults to 0.9 times `min(1/eps, eps_T/2)`.
    pub beta: Option<f64>,
    pub radius: f64,
    pub samples: usize,
}

impl Default for LyapunovSection {
    fn default() -> Self {
        Self {
            alpha: None,
            beta: None,
            radius: 100.0,
            samples: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySection {
    pub quick: bool,
    pub criteria: Vec<u8>,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self {
            quick: false,
            criteria: (1..=8).collect(),
        }
    }
}

/// Contents of a config file. Every section and key is optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub units: Option<Units>,
    pub params: ParamsSection,
    pub integrator: IntegratorSection,
    pub run: RunSection,
    pub equilibria: EquilibriaSection,
    pub bifurcation: BifurcationSection,
    pub homogenize: HomogenizeSection,
    pub forecast: ForecastSection,
    pub transitions: TransitionsSection,
    pub stats: StatsSection,
    pub lyapunov: LyapunovSection,
    pub verify: VerifySection,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text =
            fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

/// Fully resolved configuration; this is what artifacts embed and hash.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub command: String,
    pub seed: u64,
    pub units: Units,
    /// Validated parameters, echoing the derived `p`.
    pub params: ModelParams,
    pub integrator: IntegratorConfig,
    pub run: RunSection,
    pub equilibria: EquilibriaSection,
    pub bifurcation: BifurcationSection,
    pub homogenize: HomogenizeSection,
    pub forecast: ForecastSection,
    pub transitions: TransitionsSection,
    pub stats: StatsSection,
    pub lyapunov: LyapunovSection,
    pub verify: VerifySection,
    /// Not part of the hashed content.
    #[serde(skip)]
    pub out: PathBuf,
}

impl RunConfig {
    pub fn hash(&self) -> String {
        content_hash(self)
    }

    pub fn initial_state(&self) -> Result<State, CliError> {
        let v = self.run.variant;
        match &self.run.initial {
            None => Ok(State::at(v, 0.0, 0.0)),
            Some(vals) if vals.len() == 2 => Ok(State::at(v, vals[0], vals[1])),
            Some(vals) => State::from_slice(v, vals).map_err(|e| CliError::Config(format!("[run] initial: {e}"))),
        }
    }

    pub fn ensemble_config(&self) -> Result<EnsembleConfig, CliError> {
        let cfg = EnsembleConfig {
            variant: self.run.variant,
            params: self.params,
            integrator: self.integrator,
            n_members: self.run.members,
            t_burn: self.run.t_burn,
            t_end: self.run.t_end,
            initial: InitialCondition::Single(self.initial_state()?),
            base_seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Applies file contents and flags on top of the defaults.
pub fn resolve(file: ConfigFile, global: &GlobalArgs, command: &Command) -> Result<RunConfig, CliError> {
    let mut f = file;
    if global.no_mean_diffusion {
        f.params.mean_diffusion = false;
    }
    if let Some(pe) = global.p_e {
        f.params.p_e = pe;
    }
    if let Some(v) = global.variant {
        f.run.variant = v;
        f.forecast.variants = vec![v];
    }
    if let Some(dt) = global.dt {
        f.integrator.dt = dt;
    }
    if let Some(s) = global.stride {
        f.integrator.save_stride = s;
    }
    if let Some(t) = global.t_burn {
        f.run.t_burn = t;
    }
    if let Some(t) = global.t_end {
        f.run.t_end = t;
    }
    if let Some(m) = global.members {
        match command {
            Command::Forecast { .. } => f.forecast.members = m,
            _ => f.run.members = m,
        }
    }
    match command {
        Command::Bifurcation { p_min, p_max, steps } => {
            f.bifurcation.p_min = p_min.unwrap_or(f.bifurcation.p_min);
            f.bifurcation.p_max = p_max.unwrap_or(f.bifurcation.p_max);
            f.bifurcation.steps = steps.unwrap_or(f.bifurcation.steps);
        }
        Command::Homogenize { x, y, trajectories } => {
            if let (Some(x), Some(y)) = (x, y) {
                f.homogenize.points = vec![(*x, *y)];
            }
            f.homogenize.trajectories = trajectories.unwrap_or(f.homogenize.trajectories);
        }
        Command::Forecast {
            dataset,
            event,
            verification_time,
        } => {
            if dataset.is_some() {
                f.forecast.dataset = dataset.clone();
            }
            f.forecast.event = event.unwrap_or(f.forecast.event);
            if verification_time.is_some() {
                f.forecast.verification_time = *verification_time;
            }
        }
        Command::Stats { dataset, allow_failures } => {
            if dataset.is_some() {
                f.stats.dataset = dataset.clone();
            }
            f.stats.allow_failures |= allow_failures;
        }
        Command::Lyapunov {
            alpha,
            beta,
            radius,
            samples,
        } => {
            f.lyapunov.alpha = alpha.or(f.lyapunov.alpha);
            f.lyapunov.beta = beta.or(f.lyapunov.beta);
            f.lyapunov.radius = radius.unwrap_or(f.lyapunov.radius);
            f.lyapunov.samples = samples.unwrap_or(f.lyapunov.samples);
        }
        Command::Verify { quick, criteria } => {
            f.verify.quick |= quick;
            if !criteria.is_empty() {
                f.verify.criteria = criteria.clone();
            }
        }
        Command::Simulate | Command::Ensemble | Command::Equilibria | Command::Transitions => {}
    }

    let params = f.params.build()?;
    let mut integrator = IntegratorConfig::for_variant(f.run.variant);
    integrator.dt = f.integrator.dt;
    integrator.save_stride = f.integrator.save_stride;
    integrator.residual_check_stride = f.integrator.residual_check_stride;
    if let Some(s) = f.integrator.solver {
        integrator.solver = s;
    }
    integrator
        .validate()
        .map_err(|e| CliError::Config(format!("[integrator] {e}")))?;
    if !(f.run.t_end > 0.0 && f.run.t_burn >= 0.0 && f.run.t_burn < f.run.t_end) {
        return Err(CliError::Config(format!(
            "[run] need 0 <= t_burn < t_end, got t_burn = {} and t_end = {}",
            f.run.t_burn, f.run.t_end
        )));
    }
    if f.run.members == 0 || f.forecast.members == 0 {
        return Err(CliError::Config("member counts must be >= 1".into()));
    }
    Ok(RunConfig {
        command: command.name().to_string(),
        seed: f.seed.or(global.seed).map(|s| global.seed.unwrap_or(s)).unwrap_or(1),
        units: global.units.or(f.units).unwrap_or_default(),
        params,
        integrator,
        run: f.run,
        equilibria: f.equilibria,
        bifurcation: f.bifurcation,
        homogenize: f.homogenize,
        forecast: f.forecast,
        transitions: f.transitions,
        stats: f.stats,
        lyapunov: f.lyapunov,
        verify: f.verify,
        out: global
            .out
            .clone()
            .or(f.out)
            .unwrap_or_else(|| PathBuf::from("eddy-stommel-out").join(command.name())),
    })
}

/// Entry point used by the binary; returns the process exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let file = match &cli.global.config {
        Some(path) => ConfigFile::read(path)?,
        None => ConfigFile::default(),
    };
    let cfg = resolve(file, &cli.global, &cli.command)?;
    fs::create_dir_all(&cfg.out)?;
    match cli.command {
        Command::Simulate => cmd_simulate(&cfg),
        Command::Ensemble => cmd_ensemble(&cfg),
        Command::Equilibria => cmd_equilibria(&cfg),
        Command::Bifurcation { .. } => cmd_bifurcation(&cfg),
        Command::Homogenize { .. } => cmd_homogenize(&cfg),
        Command::Forecast { .. } => cmd_forecast(&cfg),
        Command::Transitions => cmd_transitions(&cfg),
        Command::Stats { .. } => cmd_stats(&cfg),
        Command::Lyapunov { .. } => cmd_lyapunov(&cfg),
        Command::Verify { .. } => cmd_verify(&cfg),
    }
}

#[derive(Serialize)]
struct Summary<'a, R: Serialize> {
    command: &'a str,
    config: &'a RunConfig,
    config_hash: String,
    time_units: Units,
    result: R,
}

/// Writes `summary.json` with the resolved config, its hash and `result`.
fn write_summary<R: Serialize>(cfg: &RunConfig, result: R) -> Result<PathBuf, CliError> {
    let path = cfg.out.join("summary.json");
    let s = Summary {
        command: &cfg.command,
        config: cfg,
        config_hash: cfg.hash(),
        time_units: cfg.units,
        result,
    };
    fs::write(&path, serde_json::to_string_pretty(&s)? + "\n")?;
    Ok(path)
}

fn create(cfg: &RunConfig, name: &str) -> Result<BufWriter<File>, CliError> {
    Ok(BufWriter::new(File::create(cfg.out.join(name))?))
}

/// CSV comment lines naming the config hash.
fn csv_preamble(w: &mut impl Write, cfg: &RunConfig) -> std::io::Result<()> {
    writeln!(w, "# eddy-stommel {} config_hash={}", cfg.command, cfg.hash())
}

fn cmd_simulate(cfg: &RunConfig) -> Result<(), CliError> {
    let v = cfg.run.variant;
    let s0 = cfg.initial_state()?;
    let traj = simulate_trajectory(
        v,
        &s0,
        (0.0, cfg.run.t_end),
        &cfg.integrator,
        &cfg.params,
        StreamSeed::new(cfg.seed),
    )
    .map_err(runtime)?;
    traj.write_binary(create(cfg, "trajectory.bin")?)?;
    let mut shown = traj.clone();
    shown.times.iter_mut().for_each(|t| *t = cfg.units.convert(*t));
    let mut w = create(cfg, "trajectory.csv")?;
    csv_preamble(&mut w, cfg)?;
    shown.write_csv(&mut w)?;
    w.flush()?;
    let last = traj.last_state();
    write_summary(
        cfg,
        serde_json::json!({
            "samples": traj.len(),
            "max_residual": traj.max_residual,
            "final_state": last,
            "files": ["trajectory.bin", "trajectory.csv"],
        }),
    )?;
    println!(
        "{v}: {} samples to t = {}, max residual {:.2e}, final {:?}",
        traj.len(),
        cfg.units.convert(cfg.run.t_end),
        traj.max_residual,
        last.map(|s| s.as_slice().to_vec()).unwrap_or_default()
    );
    Ok(())
}

fn geometry_for(p: &ModelParams) -> HistogramGeometry {
    if p.mean_diffusion() {
        HistogramGeometry::single_equilibrium()
    } else {
        HistogramGeometry::bistable()
    }
}

#[derive(Serialize)]
struct StatsArtifacts {
    summary: StatsSummary,
    acf_cutoff_x: f64,
    acf_cutoff_y: f64,
    burn_in: Vec<crate::ensemble::BurnInCheck>,
    members: usize,
    failed_members: usize,
}

/// Reduces every stored member and writes densities, autocorrelations and a summary.
fn write_statistics(cfg: &RunConfig, data: &EnsembleDataset) -> Result<StatsArtifacts, CliError> {
    let c = &data.config;
    let sample_dt = c.integrator.dt * c.integrator.save_stride as f64;
    let mut red = Reduction::new(
        geometry_for(&c.params),
        &[EventSpec::small_x(), EventSpec::large_x()],
        sample_dt,
        ACF_WINDOW.min(0.5 * (c.t_end - c.t_burn)),
        acf_center(&c.params).map_err(runtime)?,
    );
    for t in data.members() {
        red.add(t);
    }
    if red.stats.count == 0 {
        return Err(CliError::Runtime("dataset has no post-burn-in samples".into()));
    }
    let (ax, ay) = red.acfs().map_err(runtime)?;
    let dens = density_estimate(&red.stats).map_err(runtime)?;
    for (name, d) in [("density_x.csv", &dens.x), ("density_y.csv", &dens.y)] {
        let mut w = create(cfg, name)?;
        csv_preamble(&mut w, cfg)?;
        d.write_csv(&mut w)?;
        w.flush()?;
    }
    let mut w = create(cfg, "density_xy.csv")?;
    csv_preamble(&mut w, cfg)?;
    dens.xy.write_csv(&mut w)?;
    w.flush()?;
    for (name, a) in [("acf_x.csv", &ax), ("acf_y.csv", &ay)] {
        write_acf(cfg, name, a)?;
    }
    let summary = StatsSummary::new(&red.stats, Some(&ax), Some(&ay))
        .map_err(runtime)?
        .map_times(|t| cfg.units.convert(t));
    Ok(StatsArtifacts {
        summary,
        acf_cutoff_x: cfg.units.convert(ax.integration_cutoff),
        acf_cutoff_y: cfg.units.convert(ay.integration_cutoff),
        burn_in: red.burn_in(),
        members: data.members().count(),
        failed_members: data.failures(),
    })
}

fn write_acf(cfg: &RunConfig, name: &str, a: &AcfResult) -> Result<(), CliError> {
    let mut w = create(cfg, name)?;
    csv_preamble(&mut w, cfg)?;
    writeln!(w, "lag,acf")?;
    for (l, r) in a.lags.iter().zip(&a.acf) {
        writeln!(w, "{},{}", cfg.units.convert(*l), r)?;
    }
    w.flush()?;
    Ok(())
}

fn print_stats(s: &StatsArtifacts, units: Units) {
    let m = &s.summary;
    println!(
        "{} samples from {} members: mean ({:.4}, {:.4}), std ({:.4}, {:.4}), corr {:.3}, skew(x) {:.3}",
        m.count, s.members, m.mean_x, m.mean_y, m.std_x, m.std_y, m.corr_xy, m.skew_x
    );
    let unit = if units == Units::Years { "years" } else { "time units" };
    println!(
        "decorrelation times ({unit}): x {:.4}, y {:.4}",
        m.decorrelation_time_x.unwrap_or(f64::NAN),
        m.decorrelation_time_y.unwrap_or(f64::NAN)
    );
    for e in &m.events {
        println!("P({}) = {:.4} ± {:.4}", e.event, e.probability, e.standard_error);
    }
    for b in s.burn_in.iter().filter(|b| b.flagged) {
        println!(
            "warning: {:?} drifts between record halves ({:.5} vs {:.5}); burn-in may be too short",
            b.observable, b.first_half_mean, b.second_half_mean
        );
    }
}

fn cmd_ensemble(cfg: &RunConfig) -> Result<(), CliError> {
    let ec = cfg.ensemble_config()?;
    let mut data = run_ensemble(&ec)?;
    let dir = cfg.out.join("dataset");
    data.save(&dir)?;
    let failures = data.failures();
    let stats = if data.members().next().is_some() {
        Some(write_statistics(cfg, &data)?)
    } else {
        None
    };
    write_summary(
        cfg,
        serde_json::json!({
            "dataset": "dataset",
            "ensemble_config_hash": data.config_hash,
            "statistics": stats,
            "failed_members": failures,
        }),
    )?;
    if let Some(s) = &stats {
        print_stats(s, cfg.units);
    }
    println!("dataset written to {}", dir.display());
    if failures > 0 {
        return Err(CliError::Runtime(format!(
            "{failures} member(s) failed; see {}",
            dir.join(crate::ensemble::MANIFEST_FILE).display()
        )));
    }
    Ok(())
}

fn cmd_stats(cfg: &RunConfig) -> Result<(), CliError> {
    let dir = cfg
        .stats
        .dataset
        .clone()
        .ok_or_else(|| CliError::Config("stats needs --dataset or [stats] dataset".into()))?;
    let data = EnsembleDataset::load(&dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
    data.require_complete(cfg.stats.allow_failures)?;
    let s = write_statistics(cfg, &data)?;
    write_summary(
        cfg,
        serde_json::json!({
            "dataset": dir,
            "ensemble_config_hash": data.config_hash,
            "statistics": &s,
        }),
    )?;
    print_stats(&s, cfg.units);
    Ok(())
}

fn cmd_equilibria(cfg: &RunConfig) -> Result<(), CliError> {
    let e = &cfg.equilibria;
    let eq = find_equilibria(cfg.run.variant, &cfg.params, &SearchBox::new(e.x, e.y), e.grid)
        .map_err(|err| CliError::Config(err.to_string()))?;
    let mut w = create(cfg, "equilibria.csv")?;
    csv_preamble(&mut w, cfg)?;
    writeln!(w, "x,y,stability,max_real_eigenvalue,residual")?;
    println!("{:>9} {:>9}  {:<9} {:>12}", "x", "y", "stability", "max Re(λ)");
    for q in &eq {
        let top = q.eigenvalue_real_parts.last().copied().unwrap_or(f64::NAN);
        writeln!(w, "{},{},{},{},{}", q.x, q.y, format!("{:?}", q.stability).to_lowercase(), top, q.residual)?;
        println!("{:>9.5} {:>9.5}  {:<9} {:>12.4e}", q.x, q.y, format!("{:?}", q.stability).to_lowercase(), top);
    }
    w.flush()?;
    write_summary(cfg, &eq)?;
    Ok(())
}

fn cmd_bifurcation(cfg: &RunConfig) -> Result<(), CliError> {
    let b = &cfg.bifurcation;
    let e = &cfg.equilibria;
    let opts = ScanOptions {
        search_box: SearchBox::new(e.x, e.y),
        grid_n: e.grid,
        ..ScanOptions::default()
    };
    let scan = bifurcation_scan(cfg.run.variant, &cfg.params, (b.p_min, b.p_max), b.steps, &opts)
        .map_err(|err| CliError::Config(err.to_string()))?;
    let mut w = create(cfg, "bifurcation.csv")?;
    csv_preamble(&mut w, cfg)?;
    writeln!(w, "p,count")?;
    for (p, c) in &scan.samples {
        writeln!(w, "{p},{c}")?;
    }
    w.flush()?;
    for c in &scan.critical {
        println!("critical P = {:.5}: {} -> {} equilibria", c.p, c.count_below, c.count_above);
    }
    for u in &scan.unreliable {
        println!("unreliable interval [{:.5}, {:.5}]: counts {:?}", u.p_lo, u.p_hi, u.counts);
    }
    write_summary(cfg, &scan)?;
    Ok(())
}

#[derive(Serialize)]
struct HomogenizeRow {
    x: f64,
    y: f64,
    quantity: String,
    closed_form: f64,
    oracle: f64,
    standard_error: f64,
    z: f64,
}

fn cmd_homogenize(cfg: &RunConfig) -> Result<(), CliError> {
    let p = &cfg.params;
    let h = &cfg.homogenize;
    let mut settings = OracleSettings::for_params(p);
    settings.n_trajectories = h.trajectories;
    settings.lag_horizon = h.lag_horizon_eps * p.eps();
    let mut rows = Vec::new();
    let mut estimates = Vec::new();
    for (i, &(x, y)) in h.points.iter().enumerate() {
        let est = oracle_estimate(x, y, p, &settings, cfg.seed.wrapping_add(i as u64))
            .map_err(|e| CliError::Config(e.to_string()))?;
        let flux = mean_eddy_flux(x, y, p);
        let c = diffusion_correction(x, y, p).c;
        let sig = fast_stationary_covariance(x, y, p).matrix;
        let mut push = |quantity: String, closed: f64, hat: f64, se: f64| {
            rows.push(HomogenizeRow {
                x,
                y,
                quantity,
                closed_form: closed,
                oracle: hat,
                standard_error: se,
                z: if se > 0.0 { (hat - closed) / se } else { 0.0 },
            })
        };
        for k in 0..2 {
            push(format!("mean_flux[{k}]"), flux[k], est.mean_flux_hat[k], est.mean_flux_se[k]);
        }
        for (a, b) in [(0, 0), (0, 1), (1, 1)] {
            push(format!("C[{a}][{b}]"), c[a][b], est.c_hat[a][b], est.c_se[a][b]);
        }
        for a in 0..3 {
            for b in a..3 {
                push(
                    format!("Sigma[{a}][{b}]"),
                    sig[a][b],
                    est.initial_cov_hat[a][b],
                    est.initial_cov_se[a][b],
                );
            }
        }
        if est.nonstationary {
            println!("warning: oracle at ({x}, {y}) looks nonstationary (drift z {:?})", est.drift_z);
        }
        estimates.push(est);
    }
    let mut w = create(cfg, "homogenize.csv")?;
    csv_preamble(&mut w, cfg)?;
    writeln!(w, "x,y,quantity,closed_form,oracle,standard_error,z")?;
    println!(
        "{:>6} {:>7} {:<13} {:>13} {:>13} {:>11} {:>6}",
        "x", "y", "quantity", "closed form", "oracle", "std error", "z"
    );
    for r in &rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.x, r.y, r.quantity, r.closed_form, r.oracle, r.standard_error, r.z
        )?;
        println!(
            "{:>6} {:>7} {:<13} {:>13.6e} {:>13.6e} {:>11.3e} {:>6.2}",
            r.x, r.y, r.quantity, r.closed_form, r.oracle, r.standard_error, r.z
        );
    }
    w.flush()?;
    let worst = rows.iter().map(|r| r.z.abs()).fold(0.0, f64::max);
    println!("largest |z| = {worst:.2}");
    write_summary(cfg, serde_json::json!({ "rows": rows, "estimates": estimates, "max_abs_z": worst }))?;
    Ok(())
}

fn forecast_truth(cfg: &RunConfig) -> Result<(Trajectory, f64, String), CliError> {
    let f = &cfg.forecast;
    let sample_dt = cfg.integrator.dt * cfg.integrator.save_stride as f64;
    let years = DimensionalScales::default();
    let max_lead = f.leads_years.iter().copied().fold(0.0, f64::max);
    let history = (years.from_years(max_lead) / sample_dt).ceil() as usize + 1;
    let quiet = (years.from_years(1.0) / sample_dt).round() as usize;
    let candidates: Vec<Trajectory> = match &f.dataset {
        Some(dir) => {
            let data = EnsembleDataset::load(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
            match f.member {
                Some(m) => vec![data
                    .trajectories
                    .get(m)
                    .cloned()
                    .flatten()
                    .ok_or_else(|| CliError::Config(format!("dataset has no member {m}")))?],
                None => data.trajectories.into_iter().flatten().collect(),
            }
        }
        None => {
            let mut t = simulate_trajectory(
                Variant::Full,
                &State::full(0.0, 0.0, 0.0, 0.0, 0.0),
                (0.0, cfg.run.t_end),
                &IntegratorConfig::for_variant(Variant::Full).with_stride(cfg.integrator.save_stride),
                &cfg.params,
                StreamSeed::new(cfg.seed),
            )
            .map_err(runtime)?;
            t.drop_before(cfg.run.t_burn);
            vec![t]
        }
    };
    if let Some(tv) = f.verification_time {
        let t = candidates
            .into_iter()
            .next()
            .ok_or_else(|| CliError::Runtime("no truth trajectory".into()))?;
        return Ok((t, tv, "given".into()));
    }
    let pick = find_truth(&candidates, &f.event, quiet, 0, history).ok_or_else(|| {
        CliError::Runtime(format!(
            "no onset of {} after a year without it in {} truth candidate(s)",
            f.event,
            candidates.len()
        ))
    })?;
    let how = format!("searched: candidate {}, sample {}", pick.member, pick.index);
    let truth = candidates.into_iter().nth(pick.member).expect("picked from candidates");
    Ok((truth, pick.verification_time, how))
}

fn cmd_forecast(cfg: &RunConfig) -> Result<(), CliError> {
    let f = &cfg.forecast;
    let (truth, tv, how) = forecast_truth(cfg)?;
    if truth.meta.variant != Variant::Full {
        return Err(CliError::Config("forecast truth must come from a full-model dataset".into()));
    }
    let years = DimensionalScales::default();
    let leads: Vec<f64> = f.leads_years.iter().map(|y| years.from_years(*y)).collect();
    let mut results = Vec::new();
    for (k, &v) in f.variants.iter().enumerate() {
        let r = forecast_experiment(
            &truth,
            &f.event,
            tv,
            &leads,
            f.members,
            v,
            &cfg.params,
            &IntegratorConfig::for_variant(v),
            cfg.seed.wrapping_add(k as u64),
        )?;
        results.push(r);
    }
    let mut w = create(cfg, "forecast.csv")?;
    csv_preamble(&mut w, cfg)?;
    writeln!(w, "variant,lead,probability,standard_error,hits,failures")?;
    println!("event {} at t = {} ({how})", f.event, cfg.units.convert(tv));
    for r in &results {
        for i in 0..r.lead_times.len() {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.variant,
                cfg.units.convert(r.lead_times[i]),
                r.probabilities[i],
                r.standard_errors[i],
                r.hits[i],
                r.failures[i]
            )?;
        }
        let row: Vec<String> = r
            .lead_times
            .iter()
            .zip(&r.probabilities)
            .map(|(l, p)| format!("{:.3}:{:.3}", cfg.units.convert(*l), p))
            .collect();
        println!("{:<9} {}", r.variant.name(), row.join(" "));
    }
    w.flush()?;
    let failed: usize = results.iter().flat_map(|r| &r.failures).sum();
    write_summary(
        cfg,
        serde_json::json!({
            "verification_time": cfg.units.convert(tv),
            "truth": how,
            "truth_state": truth.nearest_index(tv).map(|i| truth.state(i)),
            "results": results,
        }),
    )?;
    if failed > 0 {
        return Err(CliError::Runtime(format!("{failed} forecast member(s) failed")));
    }
    Ok(())
}

fn cmd_transitions(cfg: &RunConfig) -> Result<(), CliError> {
    let ec = cfg.ensemble_config()?;
    let t = &cfg.transitions;
    let res: TransitionResult = transition_experiment(&ec, t.low, t.high, &t.taus, geometry_for(&cfg.params).y)?;
    let c = &res.counts;
    let mut w = create(cfg, "transitions.csv")?;
    csv_preamble(&mut w, cfg)?;
    writeln!(w, "tau,n0,n01,p01,n1,n10,p10")?;
    let show = |p: Option<f64>| p.map(|v| v.to_string()).unwrap_or_default();
    println!("{:>10} {:>10} {:>8} {:>10} {:>8}", "tau", "p01", "n01", "p10", "n10");
    for i in 0..c.taus.len() {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            cfg.units.convert(c.taus[i]),
            c.n0[i],
            c.n01[i],
            show(res.p01[i]),
            c.n1[i],
            c.n10[i],
            show(res.p10[i])
        )?;
        println!(
            "{:>10.4} {:>10} {:>8} {:>10} {:>8}",
            cfg.units.convert(c.taus[i]),
            res.p01[i].map(|v| format!("{v:.2e}")).unwrap_or("-".into()),
            c.n01[i],
            res.p10[i].map(|v| format!("{v:.2e}")).unwrap_or("-".into()),
            c.n10[i]
        );
    }
    w.flush()?;
    let mut w = create(cfg, "density_y.csv")?;
    csv_preamble(&mut w, cfg)?;
    writeln!(w, "y_lo,y_hi,density")?;
    let h = &res.y_hist;
    let total = h.total() as f64;
    for (i, n) in h.counts.iter().enumerate() {
        let lo = h.axis.lo + i as f64 * h.axis.width();
        writeln!(w, "{},{},{}", lo, lo + h.axis.width(), *n as f64 / (total * h.axis.width()))?;
    }
    w.flush()?;
    let failures = res.members.iter().filter(|m| m.failure.is_some()).count();
    write_summary(cfg, &res)?;
    if failures > 0 {
        return Err(CliError::Runtime(format!("{failures} member(s) failed; see summary.json")));
    }
    Ok(())
}

fn cmd_lyapunov(cfg: &RunConfig) -> Result<(), CliError> {
    let l = &cfg.lyapunov;
    let p = &cfg.params;
    let beta = l.beta.unwrap_or(0.9 * beta_ceiling(p));
    let v = cfg.run.variant;
    let alpha = match l.alpha {
        Some(a) => a,
        None => {
            let probe = lyapunov_certificate(p, v, 1.0, beta, l.radius.min(10.0), l.samples, StreamSeed::new(cfg.seed))
                .map_err(|e| CliError::Config(e.to_string()))?;
            2.0 * probe.sup_excess.max(0.0) + 1.0
        }
    };
    let rep = lyapunov_certificate(p, v, alpha, beta, l.radius, l.samples, StreamSeed::member(cfg.seed, 1))
        .map_err(|e| CliError::Config(e.to_string()))?;
    println!(
        "{v}: alpha {:.4}, beta {:.4e} (ceiling {:.4e}), radius {}: min margin {:.4} ({})",
        alpha,
        beta,
        beta_ceiling(p),
        l.radius,
        rep.min_margin,
        if rep.min_margin >= 0.0 { "holds on all samples" } else { "violated" }
    );
    write_summary(
        cfg,
        serde_json::json!({ "report": rep, "beta_ceiling": beta_ceiling(p), "holds": rep.min_margin >= 0.0 }),
    )?;
    Ok(())
}

fn cmd_verify(cfg: &RunConfig) -> Result<(), CliError> {
    let mut scale = if cfg.verify.quick { VerifyScale::quick() } else { VerifyScale::desk() };
    scale.seed = cfg.seed;
    let reports = verify::run_criteria(&cfg.verify.criteria, &scale, |r| print!("{r}"))
        .map_err(|e| CliError::Config(e.to_string()))?;
    let failed = reports.iter().filter(|r| !r.passed()).count();
    write_summary(cfg, serde_json::json!({ "scale": scale, "reports": reports }))?;
    if failed > 0 {
        return Err(CliError::Acceptance(failed));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("eddy-stommel").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn empty_config_gives_reference_defaults() {
        let cli = parse(&["simulate"]);
        let cfg = resolve(ConfigFile::parse("").unwrap(), &cli.global, &cli.command).unwrap();
        assert_eq!(cfg.params, ModelParams::single_equilibrium());
        assert_eq!(cfg.integrator.dt, 2e-6);
        assert_eq!(cfg.integrator.save_stride, 100);
        assert_eq!((cfg.run.t_burn, cfg.run.t_end), (4.0, 10.0));
        assert_eq!(cfg.units, Units::Nd);
    }

    #[test]
    fn no_mean_diffusion_echoes_derived_p() {
        let cli = parse(&["equilibria"]);
        let file = ConfigFile::parse("[params]\nmean_diffusion = false\np_e = 32\n").unwrap();
        let cfg = resolve(file, &cli.global, &cli.command).unwrap();
        let json = serde_json::to_value(&cfg).unwrap();
        let p = json["params"]["p"].as_f64().unwrap();
        assert!((p - 0.4525).abs() < 1e-4, "{p}");
        assert_eq!(json["params"]["mean_diffusion"], false);
    }

    #[test]
    fn rejects_bad_values_and_unknown_keys() {
        let cli = parse(&["simulate"]);
        let file = ConfigFile::parse("[integrator]\ndt = -1e-6\n").unwrap();
        assert!(matches!(resolve(file, &cli.global, &cli.command), Err(CliError::Config(_))));
        let err = ConfigFile::parse("[run]\nmembrs = 3\n").unwrap_err().to_string();
        assert!(err.contains("membrs") && err.contains("line 2"), "{err}");
        let err = ConfigFile::parse("sed = 3\n").unwrap_err().to_string();
        assert!(err.contains("sed"), "{err}");
        let err = ConfigFile::parse("[params]\neps = \"small\"\n").unwrap_err().to_string();
        assert!(err.contains("eps"), "{err}");
    }

    #[test]
    fn flags_override_file() {
        let cli = parse(&["--seed", "9", "--members", "7", "--variant", "gaussian", "--units", "years", "ensemble"]);
        let file = ConfigFile::parse("seed = 3\n[run]\nmembers = 5\n").unwrap();
        let cfg = resolve(file, &cli.global, &cli.command).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.run.members, 7);
        assert_eq!(cfg.run.variant, Variant::Gaussian);
        assert_eq!(cfg.units, Units::Years);
        assert_eq!(cfg.integrator.solver, Solver::FixedPoint { iters: 10 });
    }

    #[test]
    fn hash_ignores_output_directory() {
        let a = parse(&["--out", "a", "equilibria"]);
        let b = parse(&["--out", "b", "equilibria"]);
        let ca = resolve(ConfigFile::default(), &a.global, &a.command).unwrap();
        let cb = resolve(ConfigFile::default(), &b.global, &b.command).unwrap();
        assert_ne!(ca.out, cb.out);
        assert_eq!(ca.hash(), cb.hash());
    }

    #[test]
    fn years_conversion() {
        assert!((Units::Years.convert(0.10) - 21.9).abs() < 1e-12);
        assert_eq!(Units::Nd.convert(0.1), 0.1);
    }
}

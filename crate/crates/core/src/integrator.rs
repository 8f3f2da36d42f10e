//! Backward Euler time stepping and single-trajectory simulation.
//!
//! Each step solves `X' - dt b(X') = X + Σ(X) dW` (noise evaluated at the
//! left point, Ito). The full model uses an explicit predictor
//! `X* = rhs + dt b(rhs)` followed by one Newton step with the analytic
//! Jacobian; the reduced models use a fixed number of Picard iterations
//! started at `X`.

use std::io::{BufReader, BufWriter, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;
use crate::model::{AveragedSystem, FullSystem, GaussianSystem, ModelError, Sde, State, Variant};
use crate::noise::{GaussianStream, StreamSeed};
use crate::params::ModelParams;

/// Step size used for all production runs.
pub const PRODUCTION_DT: f64 = 2e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Solver {
    /// Predictor plus a single Newton step.
    AsymptoticNewton,
    /// Picard iteration `X(k+1) = rhs + dt b(X(k))`.
    FixedPoint { iters: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorConfig {
    pub dt: f64,
    pub solver: Solver,
    /// Save every `save_stride`-th step.
    pub save_stride: u64,
    /// Record the implicit-equation residual every this many steps (0 = never).
    pub residual_check_stride: u64,
}

impl IntegratorConfig {
    /// Production settings: dt = 2e-6, stride 100, residual spot-check every 10⁴ steps,
    /// Newton for the full model and 10 Picard iterations for the reduced ones.
    pub fn for_variant(variant: Variant) -> Self {
        Self {
            dt: PRODUCTION_DT,
            solver: match variant {
                Variant::Full => Solver::AsymptoticNewton,
                _ => Solver::FixedPoint { iters: 10 },
            },
            save_stride: 100,
            residual_check_stride: 10_000,
        }
    }

    pub fn with_dt(mut self, dt: f64) -> Self {
        self.dt = dt;
        self
    }

    pub fn with_stride(mut self, stride: u64) -> Self {
        self.save_stride = stride;
        self
    }

    pub fn validate(&self) -> Result<(), IntegratorError> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(IntegratorError::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if self.save_stride == 0 {
            return Err(IntegratorError::Config("save_stride must be >= 1".into()));
        }
        if let Solver::FixedPoint { iters: 0 } = self.solver {
            return Err(IntegratorError::Config("fixed-point iteration count must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StepFailure {
    #[error("Newton matrix I - dt J is singular at {state:?}")]
    SingularNewton { state: Vec<f64> },
    #[error("non-finite iterate {state:?} (from {previous:?})")]
    NonFinite { state: Vec<f64>, previous: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IntegratorError {
    #[error("invalid integrator configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("expected {expected} noise increments, got {got}")]
    NoiseLength { expected: usize, got: usize },
    #[error("time span must satisfy t1 > t0, got [{0}, {1}]")]
    EmptySpan(f64, f64),
    #[error("step {step} failed: {failure}")]
    Step { step: u64, failure: StepFailure },
}

/// One backward Euler step for a fixed-size system. Returns the new state and
/// the max-norm residual of the implicit equation when `want_residual` is set.
#[inline(always)]
pub fn be_step_kernel<const N: usize, const M: usize, S: Sde<N, M>>(
    sys: &S,
    u: &[f64; N],
    dw: &[f64; M],
    dt: f64,
    solver: Solver,
) -> Result<[f64; N], StepFailure> {
    let noise = sys.noise(u, dw);
    let mut rhs = *u;
    for i in 0..N {
        rhs[i] += noise[i];
    }
    let next = match solver {
        Solver::AsymptoticNewton => {
            let b = sys.drift(&rhs);
            let mut xs = rhs;
            for i in 0..N {
                xs[i] += dt * b[i];
            }
            let bs = sys.drift(&xs);
            let mut g = [0.0; N];
            for i in 0..N {
                g[i] = xs[i] - dt * bs[i] - rhs[i];
            }
            let delta = sys
                .newton_correction(&xs, dt, g)
                .ok_or_else(|| StepFailure::SingularNewton { state: xs.to_vec() })?;
            for i in 0..N {
                xs[i] -= delta[i];
            }
            xs
        }
        Solver::FixedPoint { iters } => {
            let mut xk = *u;
            for _ in 0..iters {
                let b = sys.drift(&xk);
                for i in 0..N {
                    xk[i] = rhs[i] + dt * b[i];
                }
            }
            xk
        }
    };
    finite_or_fail(next, u)
}

/// Advances `L` independent lanes by one step each, interleaving the lanes at
/// every stage so their dependency chains overlap. Per lane, the arithmetic is
/// exactly that of [`be_step_kernel`].
#[inline(always)]
pub(crate) fn be_step_lanes<const N: usize, const M: usize, const L: usize, S: Sde<N, M>>(
    sys: &S,
    u: &[[f64; N]; L],
    dw: &[[f64; M]; L],
    dt: f64,
    solver: Solver,
) -> [Result<[f64; N], StepFailure>; L] {
    let mut rhs = *u;
    for l in 0..L {
        let noise = sys.noise(&u[l], &dw[l]);
        for i in 0..N {
            rhs[l][i] += noise[i];
        }
    }
    let next: [[f64; N]; L] = match solver {
        Solver::AsymptoticNewton => {
            let mut xs = rhs;
            for l in 0..L {
                let b = sys.drift(&rhs[l]);
                for i in 0..N {
                    xs[l][i] += dt * b[i];
                }
            }
            let mut out = xs;
            let mut singular = [false; L];
            for l in 0..L {
                let bs = sys.drift(&xs[l]);
                let mut g = [0.0; N];
                for i in 0..N {
                    g[i] = xs[l][i] - dt * bs[i] - rhs[l][i];
                }
                match sys.newton_correction(&xs[l], dt, g) {
                    Some(delta) => {
                        for i in 0..N {
                            out[l][i] -= delta[i];
                        }
                    }
                    None => singular[l] = true,
                }
            }
            if singular.iter().any(|s| *s) {
                return std::array::from_fn(|l| {
                    if singular[l] {
                        Err(StepFailure::SingularNewton { state: xs[l].to_vec() })
                    } else {
                        finite_or_fail(out[l], &u[l])
                    }
                });
            }
            out
        }
        Solver::FixedPoint { iters } => {
            let mut xk = *u;
            for _ in 0..iters {
                for l in 0..L {
                    let b = sys.drift(&xk[l]);
                    for i in 0..N {
                        xk[l][i] = rhs[l][i] + dt * b[i];
                    }
                }
            }
            xk
        }
    };
    std::array::from_fn(|l| finite_or_fail(next[l], &u[l]))
}

#[inline(always)]
fn finite_or_fail<const N: usize>(next: [f64; N], prev: &[f64; N]) -> Result<[f64; N], StepFailure> {
    if next.iter().all(|v| v.is_finite()) {
        Ok(next)
    } else {
        Err(StepFailure::NonFinite {
            state: next.to_vec(),
            previous: prev.to_vec(),
        })
    }
}

/// Max-norm residual `|X' - dt b(X') - X - Σ(X) dW|`.
#[inline]
pub fn be_residual<const N: usize, const M: usize, S: Sde<N, M>>(
    sys: &S,
    u: &[f64; N],
    dw: &[f64; M],
    next: &[f64; N],
    dt: f64,
) -> f64 {
    let noise = sys.noise(u, dw);
    let b = sys.drift(next);
    let mut r = [0.0; N];
    for i in 0..N {
        r[i] = next[i] - dt * b[i] - u[i] - noise[i];
    }
    linalg::max_abs(&r)
}

/// One backward Euler step of `variant` with explicit increments `dw ~ N(0, dt)`.
pub fn be_step(
    variant: Variant,
    s: &State,
    dw: &[f64],
    cfg: &IntegratorConfig,
    p: &ModelParams,
) -> Result<State, IntegratorError> {
    cfg.validate()?;
    let s = State::from_slice(variant, s.as_slice())?;
    if dw.len() != variant.noise_channels() {
        return Err(IntegratorError::NoiseLength {
            expected: variant.noise_channels(),
            got: dw.len(),
        });
    }
    let fail = |failure| IntegratorError::Step { step: 0, failure };
    Ok(match (variant, s) {
        (Variant::Full, State::Full(u)) => State::Full(
            be_step_kernel(&FullSystem::new(p), &u, &dw.try_into().unwrap(), cfg.dt, cfg.solver).map_err(fail)?,
        ),
        (Variant::Averaged, State::Reduced(u)) => State::Reduced(
            be_step_kernel(&AveragedSystem::new(p), &u, &dw.try_into().unwrap(), cfg.dt, cfg.solver)
                .map_err(fail)?,
        ),
        (Variant::Gaussian, State::Reduced(u)) => State::Reduced(
            be_step_kernel(&GaussianSystem::new(p), &u, &dw.try_into().unwrap(), cfg.dt, cfg.solver)
                .map_err(fail)?,
        ),
        _ => unreachable!("checked by from_slice"),
    })
}

/// Number of steps covering `span` with step `dt`, tolerant to rounding in `span / dt`.
pub fn step_count(span: f64, dt: f64) -> u64 {
    let r = span / dt;
    let nearest = r.round();
    if (r - nearest).abs() <= 1e-9 * r.max(1.0) {
        nearest as u64
    } else {
        r.ceil() as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub variant: Variant,
    pub params: ModelParams,
    pub config: IntegratorConfig,
    pub seed: StreamSeed,
    pub t0: f64,
    pub initial_state: State,
}

/// Saved states of one run. `data` is row-major with `dim` values per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub meta: TrajectoryMeta,
    pub times: Vec<f64>,
    pub data: Vec<f64>,
    pub dim: usize,
    /// Largest recorded residual; 0 when residual checks are off.
    pub max_residual: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn state(&self, i: usize) -> State {
        State::from_slice(self.meta.variant, self.row(i)).expect("stored states are valid")
    }

    /// Values of component `k` (0 = x, 1 = y, ...).
    pub fn component(&self, k: usize) -> impl Iterator<Item = f64> + '_ {
        self.data.iter().skip(k).step_by(self.dim).copied()
    }

    pub fn last_state(&self) -> Option<State> {
        (!self.is_empty()).then(|| self.state(self.len() - 1))
    }

    /// Spacing between saved samples.
    pub fn sample_dt(&self) -> f64 {
        self.meta.config.dt * self.meta.config.save_stride as f64
    }

    /// Keeps only samples with `t > t_cut` (up to rounding).
    pub fn drop_before(&mut self, t_cut: f64) {
        let tol = 1e-9 * self.sample_dt();
        let first = self.times.partition_point(|t| *t <= t_cut + tol);
        self.times.drain(..first);
        self.data.drain(..first * self.dim);
    }

    /// Index of the saved sample closest to `t`.
    pub fn nearest_index(&self, t: f64) -> Option<usize> {
        if self.is_empty() {
            return None;
        }
        let i = self.times.partition_point(|s| *s < t);
        let candidates = [i.saturating_sub(1), i.min(self.len() - 1)];
        candidates
            .into_iter()
            .min_by(|a, b| (self.times[*a] - t).abs().total_cmp(&(self.times[*b] - t).abs()))
    }
}

/// Observer of saved states, one call per lane and save point.
pub(crate) trait StepSink<const N: usize> {
    fn save(&mut self, lane: usize, step: u64, u: &[f64; N]);
}

#[derive(Debug, Clone)]
pub(crate) struct LaneOutcome<const N: usize> {
    pub last: [f64; N],
    pub max_residual: f64,
    pub failure: Option<(u64, StepFailure)>,
}

/// Integrates `L` independent lanes for `n_steps` steps. Lane `l` draws from
/// `rngs[l]` and is reported to the sink only if `l < active`. A failed lane
/// is frozen and its failure returned; the other lanes continue. Per lane the
/// result is bit-identical to running that lane alone.
pub(crate) fn drive_lanes<const N: usize, const M: usize, const L: usize, S: Sde<N, M>, K: StepSink<N>>(
    sys: &S,
    u0: [[f64; N]; L],
    n_steps: u64,
    cfg: &IntegratorConfig,
    rngs: &mut [GaussianStream; L],
    active: usize,
    sink: &mut K,
) -> [LaneOutcome<N>; L] {
    let sqrt_dt = cfg.dt.sqrt();
    let mut u = u0;
    let mut max_residual = [0.0f64; L];
    let mut failure: [Option<(u64, StepFailure)>; L] = std::array::from_fn(|_| None);
    let mut alive = [true; L];
    let mut n_alive = L;
    let check = cfg.residual_check_stride;
    let mut until_check = check;
    let mut until_save = cfg.save_stride;
    for step in 1..=n_steps {
        let dw: [[f64; M]; L] = std::array::from_fn(|l| rngs[l].fill_scaled(sqrt_dt));
        let next = be_step_lanes(sys, &u, &dw, cfg.dt, cfg.solver);
        let checking = check > 0 && {
            until_check -= 1;
            until_check == 0
        };
        if checking {
            until_check = check;
        }
        for (l, r) in next.into_iter().enumerate() {
            if !alive[l] {
                continue;
            }
            match r {
                Ok(v) => {
                    if checking {
                        max_residual[l] = max_residual[l].max(be_residual(sys, &u[l], &dw[l], &v, cfg.dt));
                    }
                    u[l] = v;
                }
                Err(f) => {
                    failure[l] = Some((step, f));
                    alive[l] = false;
                    n_alive -= 1;
                }
            }
        }
        if n_alive == 0 {
            break;
        }
        until_save -= 1;
        if until_save == 0 {
            until_save = cfg.save_stride;
            for l in 0..active.min(L) {
                if alive[l] {
                    sink.save(l, step, &u[l]);
                }
            }
        }
    }
    let mut failure = failure.into_iter();
    std::array::from_fn(|l| LaneOutcome {
        last: u[l],
        max_residual: max_residual[l],
        failure: failure.next().flatten(),
    })
}

/// Single-lane convenience wrapper around [`drive_lanes`].
pub(crate) fn drive<const N: usize, const M: usize, S: Sde<N, M>, K: StepSink<N>>(
    sys: &S,
    u0: [f64; N],
    n_steps: u64,
    cfg: &IntegratorConfig,
    rng: &mut GaussianStream,
    sink: &mut K,
) -> Result<LaneOutcome<N>, IntegratorError> {
    let mut rngs = [rng.clone()];
    let [out] = drive_lanes(sys, [u0], n_steps, cfg, &mut rngs, 1, sink);
    let [r] = rngs;
    *rng = r;
    match out.failure {
        Some((step, failure)) => Err(IntegratorError::Step { step, failure }),
        None => Ok(out),
    }
}

struct Recorder<'a> {
    t0: f64,
    dt: f64,
    times: &'a mut Vec<f64>,
    data: &'a mut Vec<f64>,
}

impl<const N: usize> StepSink<N> for Recorder<'_> {
    #[inline]
    fn save(&mut self, _lane: usize, step: u64, u: &[f64; N]) {
        self.times.push(self.t0 + step as f64 * self.dt);
        self.data.extend_from_slice(u);
    }
}

pub(crate) struct Discard;

impl<const N: usize> StepSink<N> for Discard {
    #[inline(always)]
    fn save(&mut self, _lane: usize, _step: u64, _u: &[f64; N]) {}
}

/// Dispatches `f` to the monomorphized system for `variant`.
macro_rules! with_system {
    ($variant:expr, $p:expr, $state:expr, |$sys:ident, $u:ident| $body:expr) => {
        match ($variant, $state) {
            (Variant::Full, State::Full($u)) => {
                let $sys = FullSystem::new($p);
                $body
            }
            (Variant::Averaged, State::Reduced($u)) => {
                let $sys = AveragedSystem::new($p);
                $body
            }
            (Variant::Gaussian, State::Reduced($u)) => {
                let $sys = GaussianSystem::new($p);
                $body
            }
            _ => unreachable!("state dimension checked"),
        }
    };
}

/// Simulates one trajectory on `[t0, t1]`, saving every `save_stride`-th state
/// (the initial state is not saved).
pub fn simulate_trajectory(
    variant: Variant,
    s0: &State,
    t_span: (f64, f64),
    cfg: &IntegratorConfig,
    p: &ModelParams,
    seed: StreamSeed,
) -> Result<Trajectory, IntegratorError> {
    cfg.validate()?;
    let s0 = State::from_slice(variant, s0.as_slice())?;
    let (t0, t1) = t_span;
    if !(t1 > t0) {
        return Err(IntegratorError::EmptySpan(t0, t1));
    }
    let n_steps = step_count(t1 - t0, cfg.dt);
    let n_saved = (n_steps / cfg.save_stride) as usize;
    let mut times = Vec::with_capacity(n_saved);
    let mut data = Vec::with_capacity(n_saved * variant.dim());
    let mut rng = GaussianStream::new(seed);
    let mut rec = Recorder {
        t0,
        dt: cfg.dt,
        times: &mut times,
        data: &mut data,
    };
    let max_residual = with_system!(variant, p, s0, |sys, u| {
        drive(&sys, u, n_steps, cfg, &mut rng, &mut rec)?.max_residual
    });
    Ok(Trajectory {
        meta: TrajectoryMeta {
            variant,
            params: *p,
            config: *cfg,
            seed,
            t0,
            initial_state: s0,
        },
        times,
        data,
        dim: variant.dim(),
        max_residual,
    })
}

/// Final state after `n_steps` steps, without storing the path. Also returns
/// the number of Gaussian draws consumed.
pub fn integrate_final(
    variant: Variant,
    s0: &State,
    n_steps: u64,
    cfg: &IntegratorConfig,
    p: &ModelParams,
    seed: StreamSeed,
) -> Result<(State, u64), IntegratorError> {
    cfg.validate()?;
    let s0 = State::from_slice(variant, s0.as_slice())?;
    let mut rng = GaussianStream::new(seed);
    let last = with_system!(variant, p, s0, |sys, u| {
        let summary = drive(&sys, u, n_steps, cfg, &mut rng, &mut Discard)?;
        State::from_slice(variant, &summary.last)?
    });
    Ok((last, rng.draws()))
}

/// Largest implicit-equation residual over `n_steps` consecutive steps, checking every step.
pub fn residual_sweep(
    variant: Variant,
    s0: &State,
    n_steps: u64,
    cfg: &IntegratorConfig,
    p: &ModelParams,
    seed: StreamSeed,
) -> Result<f64, IntegratorError> {
    let mut every = *cfg;
    every.residual_check_stride = 1;
    every.save_stride = u64::MAX;
    every.validate()?;
    let s0 = State::from_slice(variant, s0.as_slice())?;
    let mut rng = GaussianStream::new(seed);
    Ok(with_system!(variant, p, s0, |sys, u| {
        drive(&sys, u, n_steps, &every, &mut rng, &mut Discard)?.max_residual
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub dt: f64,
    pub mean_x: f64,
    pub var_x: f64,
    pub mean_x_se: f64,
    pub var_x_se: f64,
    pub n_members: usize,
}

/// Ensemble mean and variance of `x` at `t_end` for each step size in `dt_list`.
///
/// Member `k` follows one Brownian path from stream `(seed, k)` at every
/// resolution: the increments for a step size that is an integer multiple of
/// the smallest one are sums of the fine increments. Other step sizes draw
/// their increments directly from the same stream.
pub fn weak_convergence_probe(
    variant: Variant,
    s0: &State,
    t_end: f64,
    dt_list: &[f64],
    n_members: usize,
    p: &ModelParams,
    seed: u64,
) -> Result<Vec<ConvergenceRow>, IntegratorError> {
    use rayon::prelude::*;
    if n_members < 2 {
        return Err(IntegratorError::Config("n_members must be >= 2".into()));
    }
    if dt_list.is_empty() || dt_list.windows(2).any(|w| w[1] >= w[0]) {
        return Err(IntegratorError::Config("dt_list must be non-empty and strictly decreasing".into()));
    }
    let s0 = State::from_slice(variant, s0.as_slice())?;
    let dt_min = dt_list[dt_list.len() - 1];
    dt_list
        .iter()
        .map(|&dt| {
            let cfg = IntegratorConfig::for_variant(variant).with_dt(dt);
            cfg.validate()?;
            let ratio = dt / dt_min;
            let k = if (ratio - ratio.round()).abs() < 1e-9 * ratio { ratio.round() as u64 } else { 1 };
            let sub_dt = dt / k as f64;
            let n_steps = step_count(t_end, dt);
            let xs: Vec<f64> = (0..n_members as u64)
                .into_par_iter()
                .map(|m| {
                    let mut rng = GaussianStream::new(StreamSeed::member(seed, m));
                    with_system!(variant, p, s0, |sys, u| {
                        coupled_final(&sys, u, n_steps, k, sub_dt, &cfg, &mut rng).map(|u| u[0])
                    })
                })
                .collect::<Result<_, _>>()?;
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let m2 = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>();
            let m4 = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;
            let var = m2 / (n - 1.0);
            Ok(ConvergenceRow {
                dt,
                mean_x: mean,
                var_x: var,
                mean_x_se: (var / n).sqrt(),
                var_x_se: ((m4 - var * var).max(0.0) / n).sqrt(),
                n_members,
            })
        })
        .collect()
}

/// Steps of size `cfg.dt` whose increments are sums of `k` draws of variance `sub_dt`.
fn coupled_final<const N: usize, const M: usize, S: Sde<N, M>>(
    sys: &S,
    u0: [f64; N],
    n_steps: u64,
    k: u64,
    sub_dt: f64,
    cfg: &IntegratorConfig,
    rng: &mut GaussianStream,
) -> Result<[f64; N], IntegratorError> {
    let scale = sub_dt.sqrt();
    let mut u = u0;
    for step in 1..=n_steps {
        let mut dw = [0.0; M];
        for _ in 0..k {
            let d: [f64; M] = rng.fill_scaled(scale);
            for c in 0..M {
                dw[c] += d[c];
            }
        }
        u = be_step_kernel(sys, &u, &dw, cfg.dt, cfg.solver).map_err(|failure| IntegratorError::Step { step, failure })?;
    }
    Ok(u)
}

/// Leading bytes of the binary trajectory format.
pub const TRAJECTORY_MAGIC: &[u8; 6] = b"SFSDE1";

#[derive(Debug, Error)]
pub enum StorageError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a trajectory file (bad magic bytes)")]
    BadMagic,
    #[error("corrupt trajectory file: {0}")]
    Corrupt(String),
    #[error("trajectory file does not match its metadata: {0}")]
    Mismatch(String),
}

/// Fixed header of the binary format. All integers and floats are little-endian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinaryHeader {
    pub variant: Variant,
    pub dim: usize,
    pub dt: f64,
    pub save_stride: u64,
    pub seed: StreamSeed,
    pub count: u64,
}

impl BinaryHeader {
    fn write<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(TRAJECTORY_MAGIC)?;
        w.write_all(&[self.variant.code(), self.dim as u8])?;
        w.write_all(&self.dt.to_le_bytes())?;
        for v in [self.save_stride, self.seed.key, self.seed.stream, self.count] {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    fn read<R: Read>(r: &mut R) -> Result<Self, StorageError> {
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic)?;
        if &magic != TRAJECTORY_MAGIC {
            return Err(StorageError::BadMagic);
        }
        let mut codes = [0u8; 2];
        r.read_exact(&mut codes)?;
        let variant =
            Variant::from_code(codes[0]).ok_or_else(|| StorageError::Corrupt(format!("variant code {}", codes[0])))?;
        let dim = codes[1] as usize;
        if dim != variant.dim() {
            return Err(StorageError::Corrupt(format!("dimension {dim} for {variant}")));
        }
        let mut word = [0u8; 8];
        let mut next = |r: &mut R| -> Result<[u8; 8], StorageError> {
            r.read_exact(&mut word)?;
            Ok(word)
        };
        let dt = f64::from_le_bytes(next(r)?);
        let save_stride = u64::from_le_bytes(next(r)?);
        let key = u64::from_le_bytes(next(r)?);
        let stream = u64::from_le_bytes(next(r)?);
        let count = u64::from_le_bytes(next(r)?);
        Ok(Self {
            variant,
            dim,
            dt,
            save_stride,
            seed: StreamSeed { key, stream },
            count,
        })
    }
}

impl Trajectory {
    pub fn binary_header(&self) -> BinaryHeader {
        BinaryHeader {
            variant: self.meta.variant,
            dim: self.dim,
            dt: self.meta.config.dt,
            save_stride: self.meta.config.save_stride,
            seed: self.meta.seed,
            count: self.len() as u64,
        }
    }

    /// Writes the header followed by rows `(t, state...)`.
    pub fn write_binary<W: Write>(&self, w: W) -> std::io::Result<()> {
        let mut w = BufWriter::new(w);
        self.binary_header().write(&mut w)?;
        for (i, t) in self.times.iter().enumerate() {
            w.write_all(&t.to_le_bytes())?;
            for v in self.row(i) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    }

    /// Reads a binary trajectory and attaches `meta`, which must agree with the
    /// header. `max_residual` is not part of the file and is set to 0.
    pub fn read_binary<R: Read>(r: R, meta: TrajectoryMeta) -> Result<Self, StorageError> {
        let (header, times, data) = read_binary_rows(r)?;
        let expected = (meta.variant, meta.config.dt, meta.config.save_stride, meta.seed);
        if (header.variant, header.dt, header.save_stride, header.seed) != expected {
            return Err(StorageError::Mismatch(format!("header {header:?} vs metadata {expected:?}")));
        }
        Ok(Self {
            meta,
            times,
            data,
            dim: header.dim,
            max_residual: 0.0,
        })
    }

    /// CSV with header `t,x,y` (reduced) or `t,x,y,v,T,S` (full).
    pub fn write_csv<W: Write>(&self, w: W) -> std::io::Result<()> {
        let mut w = BufWriter::new(w);
        let names = ["x", "y", "v", "T", "S"];
        writeln!(w, "t,{}", names[..self.dim].join(","))?;
        for (i, t) in self.times.iter().enumerate() {
            write!(w, "{t}")?;
            for v in self.row(i) {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        w.flush()
    }
}

/// Header, times and row-major states of a binary trajectory file.
pub fn read_binary_rows<R: Read>(r: R) -> Result<(BinaryHeader, Vec<f64>, Vec<f64>), StorageError> {
    let mut r = BufReader::new(r);
    let header = BinaryHeader::read(&mut r)?;
    let n = usize::try_from(header.count).map_err(|_| StorageError::Corrupt("sample count".into()))?;
    let mut times = Vec::with_capacity(n.min(1 << 24));
    let mut data = Vec::with_capacity(n.min(1 << 24) * header.dim);
    let mut word = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut word)
            .map_err(|e| StorageError::Corrupt(format!("truncated after {} rows: {e}", times.len())))?;
        times.push(f64::from_le_bytes(word));
        for _ in 0..header.dim {
            r.read_exact(&mut word)
                .map_err(|e| StorageError::Corrupt(format!("truncated after {} rows: {e}", times.len())))?;
            data.push(f64::from_le_bytes(word));
        }
    }
    if r.read(&mut word)? != 0 {
        return Err(StorageError::Corrupt("trailing bytes".into()));
    }
    Ok((header, times, data))
}

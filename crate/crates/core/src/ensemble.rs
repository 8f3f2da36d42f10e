//! Parallel ensembles: climatology runs, forecasts from a truth trajectory and
//! regime-transition counts.
//!
//! Member `m` always draws from stream `(base_seed, m)`, so results do not
//! depend on thread count or scheduling. Reduced models advance eight members
//! per batch in interleaved lanes; the per-member arithmetic is the same as a
//! single [`simulate_trajectory`](crate::integrator::simulate_trajectory) run.

use std::fs::{self, File};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::integrator::{
    drive_lanes, step_count, IntegratorConfig, IntegratorError, StepSink, StorageError, Trajectory, TrajectoryMeta,
};
use crate::model::{AveragedSystem, FullSystem, GaussianSystem, Sde, State, Variant};
use crate::noise::{GaussianStream, StreamSeed};
use crate::params::ModelParams;
pub use crate::statistics::EventSpec;
use crate::statistics::{AcfAccumulator, AcfResult, Axis, EnsembleStats, Histogram1D, HistogramGeometry, Observable, StatsError};

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("invalid ensemble configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Integrator(#[from] IntegratorError),
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("manifest: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("{0} member(s) failed; see the manifest")]
    Failures(usize),
    #[error("lead time {lead} reaches before the start of the truth record")]
    LeadOutOfRange { lead: f64 },
    #[error("forecast truth must be a full-model trajectory")]
    NotFullTruth,
    #[error("empty truth trajectory")]
    EmptyTruth,
}

/// Initial state shared by all members or given per member.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialCondition {
    Single(State),
    PerMember(Vec<State>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    pub variant: Variant,
    pub params: ModelParams,
    pub integrator: IntegratorConfig,
    pub n_members: usize,
    /// Samples with `t <= t_burn` are discarded.
    pub t_burn: f64,
    pub t_end: f64,
    pub initial: InitialCondition,
    pub base_seed: u64,
}

impl EnsembleConfig {
    /// Production climatology settings: all members start at the origin,
    /// integrate to `t = 10` and keep `t > 4`.
    pub fn climatology(variant: Variant, params: ModelParams, n_members: usize, base_seed: u64) -> Self {
        Self {
            variant,
            params,
            integrator: IntegratorConfig::for_variant(variant),
            n_members,
            t_burn: 4.0,
            t_end: 10.0,
            initial: InitialCondition::Single(State::at(variant, 0.0, 0.0)),
            base_seed,
        }
    }

    pub fn validate(&self) -> Result<(), EnsembleError> {
        self.integrator.validate()?;
        if self.n_members == 0 {
            return Err(EnsembleError::Config("n_members must be >= 1".into()));
        }
        if !(self.t_burn >= 0.0 && self.t_burn < self.t_end && self.t_end.is_finite()) {
            return Err(EnsembleError::Config(format!(
                "need 0 <= t_burn < t_end, got t_burn = {}, t_end = {}",
                self.t_burn, self.t_end
            )));
        }
        let check = |s: &State| State::from_slice(self.variant, s.as_slice()).map(|_| ());
        match &self.initial {
            InitialCondition::Single(s) => check(s).map_err(IntegratorError::from)?,
            InitialCondition::PerMember(v) => {
                if v.len() != self.n_members {
                    return Err(EnsembleError::Config(format!(
                        "{} initial states for {} members",
                        v.len(),
                        self.n_members
                    )));
                }
                for s in v {
                    check(s).map_err(IntegratorError::from)?;
                }
            }
        }
        Ok(())
    }

    pub fn member_seed(&self, m: usize) -> StreamSeed {
        StreamSeed::member(self.base_seed, m as u64)
    }

    pub fn initial_state(&self, m: usize) -> State {
        match &self.initial {
            InitialCondition::Single(s) => *s,
            InitialCondition::PerMember(v) => v[m],
        }
    }

    /// Metadata of member `m`'s trajectory.
    pub fn member_meta(&self, m: usize) -> TrajectoryMeta {
        TrajectoryMeta {
            variant: self.variant,
            params: self.params,
            config: self.integrator,
            seed: self.member_seed(m),
            t0: 0.0,
            initial_state: self.initial_state(m),
        }
    }

    pub fn hash(&self) -> String {
        content_hash(self)
    }
}

/// SHA-256 of the JSON encoding of `value`, hex encoded.
pub fn content_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("serializable value");
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberFailure {
    pub step: u64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberRecord {
    pub index: usize,
    pub seed: StreamSeed,
    /// Gaussian values drawn from the member's stream.
    pub draws: u64,
    pub n_samples: usize,
    pub max_residual: f64,
    pub failure: Option<MemberFailure>,
    /// Path relative to the dataset directory, once persisted.
    pub file: Option<String>,
}

/// Outcome of one member in [`run_ensemble_map`].
#[derive(Debug, Clone)]
pub struct MemberOutput<R> {
    pub record: MemberRecord,
    /// `None` when the member failed.
    pub value: Option<R>,
}

/// Runs every member and applies `f` to its post-burn-in trajectory as soon as
/// it finishes, so full trajectories need not be held for the whole ensemble.
/// Outputs are in member order.
pub fn run_ensemble_map<R, F>(cfg: &EnsembleConfig, f: F) -> Result<Vec<MemberOutput<R>>, EnsembleError>
where
    R: Send,
    F: Fn(&MemberRecord, Trajectory) -> R + Sync,
{
    cfg.validate()?;
    let p = &cfg.params;
    Ok(match cfg.variant {
        Variant::Full => run_batches::<5, 3, 1, _, _, _>(&FullSystem::new(p), cfg, &f),
        Variant::Averaged => run_batches::<2, 2, 8, _, _, _>(&AveragedSystem::new(p), cfg, &f),
        Variant::Gaussian => run_batches::<2, 3, 8, _, _, _>(&GaussianSystem::new(p), cfg, &f),
    })
}

struct BurnInRecorder {
    burn_step: u64,
    dt: f64,
    times: Vec<Vec<f64>>,
    data: Vec<Vec<f64>>,
}

impl<const N: usize> StepSink<N> for BurnInRecorder {
    #[inline]
    fn save(&mut self, lane: usize, step: u64, u: &[f64; N]) {
        if step > self.burn_step {
            self.times[lane].push(step as f64 * self.dt);
            self.data[lane].extend_from_slice(u);
        }
    }
}

/// Last step that is still inside the burn-in window `t <= t_burn`.
fn burn_step(t_burn: f64, dt: f64) -> u64 {
    if t_burn <= 0.0 {
        return 0;
    }
    let r = t_burn / dt;
    if (r - r.round()).abs() <= 1e-9 * r.max(1.0) {
        r.round() as u64
    } else {
        r.floor() as u64
    }
}

fn run_batches<const N: usize, const M: usize, const L: usize, S, R, F>(
    sys: &S,
    cfg: &EnsembleConfig,
    f: &F,
) -> Vec<MemberOutput<R>>
where
    S: Sde<N, M> + Sync,
    R: Send,
    F: Fn(&MemberRecord, Trajectory) -> R + Sync,
{
    let ic = &cfg.integrator;
    let n_steps = step_count(cfg.t_end, ic.dt);
    let burn = burn_step(cfg.t_burn, ic.dt);
    let n_keep = (n_steps / ic.save_stride).saturating_sub(burn / ic.save_stride) as usize;
    let n_batches = cfg.n_members.div_ceil(L);
    let batches: Vec<Vec<MemberOutput<R>>> = (0..n_batches)
        .into_par_iter()
        .map(|b| {
            let first = b * L;
            let active = L.min(cfg.n_members - first);
            let member = |l: usize| first + l.min(active - 1);
            let u0: [[f64; N]; L] =
                std::array::from_fn(|l| cfg.initial_state(member(l)).as_slice().try_into().expect("validated dimension"));
            // Padding lanes reuse the last real member's state on a stream no member uses.
            let mut rngs: [GaussianStream; L] = std::array::from_fn(|l| {
                if l < active {
                    GaussianStream::new(cfg.member_seed(first + l))
                } else {
                    GaussianStream::new(StreamSeed::member(cfg.base_seed, u64::MAX - l as u64))
                }
            });
            let mut rec = BurnInRecorder {
                burn_step: burn,
                dt: ic.dt,
                times: (0..active).map(|_| Vec::with_capacity(n_keep)).collect(),
                data: (0..active).map(|_| Vec::with_capacity(n_keep * N)).collect(),
            };
            let out = drive_lanes(sys, u0, n_steps, ic, &mut rngs, active, &mut rec);
            let BurnInRecorder { times, data, .. } = rec;
            times
                .into_iter()
                .zip(data)
                .enumerate()
                .map(|(l, (times, data))| {
                    let m = first + l;
                    let o = &out[l];
                    let mut record = MemberRecord {
                        index: m,
                        seed: cfg.member_seed(m),
                        draws: rngs[l].draws(),
                        n_samples: times.len(),
                        max_residual: o.max_residual,
                        failure: None,
                        file: None,
                    };
                    if let Some((step, failure)) = &o.failure {
                        record.failure = Some(MemberFailure {
                            step: *step,
                            message: failure.to_string(),
                        });
                        record.n_samples = 0;
                        return MemberOutput { record, value: None };
                    }
                    let traj = Trajectory {
                        meta: cfg.member_meta(m),
                        times,
                        data,
                        dim: N,
                        max_residual: o.max_residual,
                    };
                    let value = f(&record, traj);
                    MemberOutput {
                        record,
                        value: Some(value),
                    }
                })
                .collect()
        })
        .collect();
    batches.into_iter().flatten().collect()
}

/// Comparison of first-half and second-half post-burn-in means of one
/// variable, using the spread of the per-member differences as the error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BurnInCheck {
    pub observable: Observable,
    pub first_half_mean: f64,
    pub second_half_mean: f64,
    pub standard_error: f64,
    /// Set when the halves differ by more than three standard errors.
    pub flagged: bool,
}

/// Mergeable reduction of member trajectories to moments, histograms,
/// event counts and pooled autocorrelations of `x` and `y`.
#[derive(Debug, Clone, PartialEq)]
pub struct Reduction {
    pub stats: EnsembleStats,
    pub acf_x: AcfAccumulator,
    pub acf_y: AcfAccumulator,
    pub halves_x: Vec<(f64, f64)>,
    pub halves_y: Vec<(f64, f64)>,
}

impl Reduction {
    /// Autocorrelations cover lags up to `acf_window` (time units) on a
    /// `sample_dt` grid; sums are taken around `center`.
    pub fn new(
        geometry: HistogramGeometry,
        events: &[EventSpec],
        sample_dt: f64,
        acf_window: f64,
        center: (f64, f64),
    ) -> Self {
        let max_lag = (acf_window / sample_dt).round().max(1.0) as usize;
        Self {
            stats: EnsembleStats::new(geometry, events),
            acf_x: AcfAccumulator::new(sample_dt, max_lag, center.0),
            acf_y: AcfAccumulator::new(sample_dt, max_lag, center.1),
            halves_x: Vec::new(),
            halves_y: Vec::new(),
        }
    }

    /// An empty reduction with the same settings.
    pub fn empty_like(&self) -> Self {
        Self::new(
            self.stats.geometry(),
            &self.stats.events,
            self.acf_x.lag_dt,
            self.acf_x.lag_dt * self.acf_x.max_lag as f64,
            (self.acf_x.center, self.acf_y.center),
        )
    }

    pub fn add(&mut self, t: &Trajectory) {
        self.stats.accumulate_rows(&t.data, t.dim);
        self.acf_x.add_series(&t.component(0).collect::<Vec<_>>());
        self.acf_y.add_series(&t.component(1).collect::<Vec<_>>());
        self.halves_x.extend(half_means(t, Observable::X));
        self.halves_y.extend(half_means(t, Observable::Y));
    }

    pub fn merge(&mut self, other: &Self) -> Result<(), StatsError> {
        self.stats.merge(&other.stats)?;
        self.acf_x.merge(&other.acf_x)?;
        self.acf_y.merge(&other.acf_y)?;
        self.halves_x.extend_from_slice(&other.halves_x);
        self.halves_y.extend_from_slice(&other.halves_y);
        Ok(())
    }

    /// Finished autocorrelations of `x` and `y`.
    pub fn acfs(&self) -> Result<(AcfResult, AcfResult), StatsError> {
        Ok((self.acf_x.finish()?, self.acf_y.finish()?))
    }

    pub fn burn_in(&self) -> Vec<BurnInCheck> {
        [
            BurnInCheck::from_half_means(Observable::X, &self.halves_x),
            BurnInCheck::from_half_means(Observable::Y, &self.halves_y),
        ]
        .into_iter()
        .flatten()
        .collect()
    }
}

/// Means of `observable` over the first and second half of a record.
pub fn half_means(traj: &Trajectory, observable: Observable) -> Option<(f64, f64)> {
    let v: Vec<f64> = traj.component(observable.index()).collect();
    let h = v.len() / 2;
    if h == 0 {
        return None;
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Some((mean(&v[..h]), mean(&v[v.len() - h..])))
}

impl BurnInCheck {
    /// Needs at least two members.
    pub fn from_half_means(observable: Observable, halves: &[(f64, f64)]) -> Option<Self> {
        let n = halves.len();
        if n < 2 {
            return None;
        }
        let nf = n as f64;
        let first = halves.iter().map(|h| h.0).sum::<f64>() / nf;
        let second = halves.iter().map(|h| h.1).sum::<f64>() / nf;
        let d_mean = second - first;
        let var = halves.iter().map(|h| (h.1 - h.0 - d_mean).powi(2)).sum::<f64>() / (nf - 1.0);
        let se = (var / nf).sqrt();
        Some(Self {
            observable,
            first_half_mean: first,
            second_half_mean: second,
            standard_error: se,
            flagged: d_mean.abs() > 3.0 * se,
        })
    }
}

/// Post-burn-in trajectories of a whole ensemble with provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleDataset {
    pub config: EnsembleConfig,
    pub config_hash: String,
    pub records: Vec<MemberRecord>,
    /// `None` for failed members.
    pub trajectories: Vec<Option<Trajectory>>,
    pub burn_in: Vec<BurnInCheck>,
}

/// Runs the ensemble and keeps every member's post-burn-in samples.
pub fn run_ensemble(cfg: &EnsembleConfig) -> Result<EnsembleDataset, EnsembleError> {
    let outputs = run_ensemble_map(cfg, |_, t| t)?;
    let (records, trajectories): (Vec<_>, Vec<_>) = outputs.into_iter().map(|o| (o.record, o.value)).unzip();
    let burn_in = burn_in_checks(trajectories.iter().flatten());
    Ok(EnsembleDataset {
        config: cfg.clone(),
        config_hash: cfg.hash(),
        records,
        trajectories,
        burn_in,
    })
}

fn burn_in_checks<'a>(trajs: impl Iterator<Item = &'a Trajectory> + Clone) -> Vec<BurnInCheck> {
    [Observable::X, Observable::Y]
        .into_iter()
        .filter_map(|o| {
            let halves: Vec<_> = trajs.clone().filter_map(|t| half_means(t, o)).collect();
            BurnInCheck::from_half_means(o, &halves)
        })
        .collect()
}

/// Manifest written next to the member files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub config: EnsembleConfig,
    pub config_hash: String,
    /// Seconds since the Unix epoch; the only field that is not reproducible.
    pub created_unix: u64,
    pub members: Vec<MemberRecord>,
    pub burn_in: Vec<BurnInCheck>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_FORMAT: &str = "eddy-stommel-ensemble/1";

impl EnsembleDataset {
    pub fn failures(&self) -> usize {
        self.records.iter().filter(|r| r.failure.is_some()).count()
    }

    /// Errors if any member failed, unless `allow_failures` is set.
    pub fn require_complete(&self, allow_failures: bool) -> Result<(), EnsembleError> {
        match self.failures() {
            0 => Ok(()),
            n if !allow_failures => Err(EnsembleError::Failures(n)),
            _ => Ok(()),
        }
    }

    pub fn members(&self) -> impl Iterator<Item = &Trajectory> {
        self.trajectories.iter().flatten()
    }

    /// Writes `member_NNNNN.bin` per successful member and `manifest.json`.
    pub fn save(&mut self, dir: &Path) -> Result<Manifest, EnsembleError> {
        fs::create_dir_all(dir)?;
        for (rec, traj) in self.records.iter_mut().zip(&self.trajectories) {
            if let Some(t) = traj {
                let name = format!("member_{:05}.bin", rec.index);
                t.write_binary(File::create(dir.join(&name))?)?;
                rec.file = Some(name);
            }
        }
        let manifest = Manifest {
            format: MANIFEST_FORMAT.into(),
            config: self.config.clone(),
            config_hash: self.config_hash.clone(),
            created_unix: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            members: self.records.clone(),
            burn_in: self.burn_in.clone(),
        };
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<Self, EnsembleError> {
        let manifest = read_manifest(dir)?;
        let mut trajectories = Vec::with_capacity(manifest.members.len());
        for rec in &manifest.members {
            trajectories.push(match &rec.file {
                Some(name) => {
                    let mut t = Trajectory::read_binary(File::open(dir.join(name))?, manifest.config.member_meta(rec.index))?;
                    t.max_residual = rec.max_residual;
                    Some(t)
                }
                None => None,
            });
        }
        Ok(Self {
            config: manifest.config,
            config_hash: manifest.config_hash,
            records: manifest.members,
            trajectories,
            burn_in: manifest.burn_in,
        })
    }
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, EnsembleError> {
    let path: PathBuf = dir.join(MANIFEST_FILE);
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&path)?)?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(EnsembleError::Config(format!("unknown manifest format '{}'", manifest.format)));
    }
    if manifest.config.hash() != manifest.config_hash {
        return Err(EnsembleError::Config("manifest config hash does not match its config".into()));
    }
    Ok(manifest)
}

/// Final states of independent runs from `initial[k]` over `n_steps` steps,
/// member `k` on stream `seed(k)`.
pub fn final_states(
    variant: Variant,
    p: &ModelParams,
    cfg: &IntegratorConfig,
    initial: &[State],
    n_steps: u64,
    seed: impl Fn(usize) -> StreamSeed + Sync,
) -> Result<Vec<Result<State, MemberFailure>>, EnsembleError> {
    cfg.validate()?;
    for s in initial {
        State::from_slice(variant, s.as_slice()).map_err(IntegratorError::from)?;
    }
    Ok(match variant {
        Variant::Full => finals::<5, 3, 1, _>(&FullSystem::new(p), variant, cfg, initial, n_steps, &seed),
        Variant::Averaged => finals::<2, 2, 8, _>(&AveragedSystem::new(p), variant, cfg, initial, n_steps, &seed),
        Variant::Gaussian => finals::<2, 3, 8, _>(&GaussianSystem::new(p), variant, cfg, initial, n_steps, &seed),
    })
}

struct NoSave;

impl<const N: usize> StepSink<N> for NoSave {
    #[inline(always)]
    fn save(&mut self, _lane: usize, _step: u64, _u: &[f64; N]) {}
}

fn finals<const N: usize, const M: usize, const L: usize, S: Sde<N, M> + Sync>(
    sys: &S,
    variant: Variant,
    cfg: &IntegratorConfig,
    initial: &[State],
    n_steps: u64,
    seed: &(impl Fn(usize) -> StreamSeed + Sync),
) -> Vec<Result<State, MemberFailure>> {
    let n = initial.len();
    let mut cfg = *cfg;
    cfg.save_stride = u64::MAX;
    let batches: Vec<Vec<Result<State, MemberFailure>>> = (0..n.div_ceil(L))
        .into_par_iter()
        .map(|b| {
            let first = b * L;
            let active = L.min(n - first);
            let u0: [[f64; N]; L] =
                std::array::from_fn(|l| initial[first + l.min(active - 1)].as_slice().try_into().expect("checked"));
            let mut rngs: [GaussianStream; L] = std::array::from_fn(|l| {
                let s = seed(first + l.min(active - 1));
                if l < active {
                    GaussianStream::new(s)
                } else {
                    GaussianStream::new(StreamSeed::member(!s.key, u64::MAX - l as u64))
                }
            });
            let out = drive_lanes(sys, u0, n_steps, &cfg, &mut rngs, active, &mut NoSave);
            out[..active]
                .iter()
                .map(|o| match &o.failure {
                    Some((step, f)) => Err(MemberFailure {
                        step: *step,
                        message: f.to_string(),
                    }),
                    None => Ok(State::from_slice(variant, &o.last).expect("finite state")),
                })
                .collect()
        })
        .collect();
    batches.into_iter().flatten().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastResult {
    pub variant: Variant,
    pub event: EventSpec,
    /// Truth sample time used as the verification time.
    pub verification_time: f64,
    pub n_members: usize,
    /// Requested leads, sorted from longest to shortest.
    pub requested_leads: Vec<f64>,
    /// Leads actually used after snapping to the truth save grid.
    pub lead_times: Vec<f64>,
    pub snap_distance: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub standard_errors: Vec<f64>,
    pub hits: Vec<u64>,
    /// Failed members per lead; they are excluded from the probability.
    pub failures: Vec<usize>,
}

/// Forecast probability of `event` at `verification_time` for each lead.
///
/// Members of a lead start from the truth sample nearest to
/// `verification_time - lead`: reduced variants take its `(x, y)`, the full
/// variant all five components. Member `m` of the `i`-th requested lead
/// (in the caller's order) uses stream `(base_seed, i * 2^32 + m)`.
#[allow(clippy::too_many_arguments)]
pub fn forecast_experiment(
    truth: &Trajectory,
    event: &EventSpec,
    verification_time: f64,
    lead_times: &[f64],
    n_members: usize,
    variant: Variant,
    params: &ModelParams,
    cfg: &IntegratorConfig,
    base_seed: u64,
) -> Result<ForecastResult, EnsembleError> {
    if truth.meta.variant != Variant::Full {
        return Err(EnsembleError::NotFullTruth);
    }
    if n_members == 0 {
        return Err(EnsembleError::Config("n_members must be >= 1".into()));
    }
    let iv = truth.nearest_index(verification_time).ok_or(EnsembleError::EmptyTruth)?;
    let tv = truth.times[iv];
    let mut order: Vec<usize> = (0..lead_times.len()).collect();
    order.sort_by(|a, b| lead_times[*b].total_cmp(&lead_times[*a]));

    let mut res = ForecastResult {
        variant,
        event: *event,
        verification_time: tv,
        n_members,
        requested_leads: Vec::new(),
        lead_times: Vec::new(),
        snap_distance: Vec::new(),
        probabilities: Vec::new(),
        standard_errors: Vec::new(),
        hits: Vec::new(),
        failures: Vec::new(),
    };
    for i in order {
        let lead = lead_times[i];
        if !(lead >= 0.0) || tv - lead < truth.times[0] - 0.5 * truth.sample_dt() {
            return Err(EnsembleError::LeadOutOfRange { lead });
        }
        let i0 = truth.nearest_index(tv - lead).expect("non-empty").min(iv);
        let used = tv - truth.times[i0];
        let start = truth.state(i0).for_variant(variant);
        let n_steps = if i0 == iv { 0 } else { step_count(used, cfg.dt) };
        let initial = vec![start; n_members];
        let finals = final_states(variant, params, cfg, &initial, n_steps, |m| StreamSeed {
            key: base_seed,
            stream: ((i as u64) << 32) | m as u64,
        })?;
        let ok: Vec<&State> = finals.iter().filter_map(|r| r.as_ref().ok()).collect();
        let hits = ok.iter().filter(|s| event.holds(s.x(), s.y())).count() as u64;
        let n_ok = ok.len() as f64;
        let p = if ok.is_empty() { f64::NAN } else { hits as f64 / n_ok };
        res.requested_leads.push(lead);
        res.lead_times.push(used);
        res.snap_distance.push((used - lead).abs());
        res.probabilities.push(p);
        res.standard_errors.push((p * (1.0 - p) / n_ok).sqrt());
        res.hits.push(hits);
        res.failures.push(finals.len() - ok.len());
    }
    Ok(res)
}

/// Pooled counts behind `p01(tau) = P(y(t+tau) > high | y(t) < low)` and
/// `p10(tau) = P(y(t+tau) < low | y(t) > high)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionCounts {
    pub low: f64,
    pub high: f64,
    pub sample_dt: f64,
    /// Lags in samples, one per requested tau.
    pub lags: Vec<usize>,
    pub taus: Vec<f64>,
    /// Pairs with `y(t) < low`.
    pub n0: Vec<u64>,
    /// ... of which `y(t+tau) > high`.
    pub n01: Vec<u64>,
    /// Pairs with `y(t) > high`.
    pub n1: Vec<u64>,
    /// ... of which `y(t+tau) < low`.
    pub n10: Vec<u64>,
}

impl TransitionCounts {
    /// `tau_grid` values are snapped to the nearest multiple of `sample_dt`.
    pub fn new(low: f64, high: f64, tau_grid: &[f64], sample_dt: f64) -> Result<Self, EnsembleError> {
        if !(low < high) {
            return Err(EnsembleError::Config(format!("need low < high, got {low} and {high}")));
        }
        if tau_grid.iter().any(|t| !(*t >= 0.0 && t.is_finite())) {
            return Err(EnsembleError::Config("tau values must be finite and >= 0".into()));
        }
        let lags: Vec<usize> = tau_grid.iter().map(|t| (t / sample_dt).round() as usize).collect();
        let k = lags.len();
        Ok(Self {
            low,
            high,
            sample_dt,
            taus: lags.iter().map(|l| *l as f64 * sample_dt).collect(),
            lags,
            n0: vec![0; k],
            n01: vec![0; k],
            n1: vec![0; k],
            n10: vec![0; k],
        })
    }

    /// Counts all pairs `(t, t + lag)` inside one record of `y`.
    pub fn add_series(&mut self, y: &[f64]) {
        let n = y.len();
        for (i, &lag) in self.lags.iter().enumerate() {
            if lag >= n {
                continue;
            }
            let (mut n0, mut n01, mut n1, mut n10) = (0u64, 0u64, 0u64, 0u64);
            for (a, b) in y[..n - lag].iter().zip(&y[lag..]) {
                if *a < self.low {
                    n0 += 1;
                    n01 += (*b > self.high) as u64;
                } else if *a > self.high {
                    n1 += 1;
                    n10 += (*b < self.low) as u64;
                }
            }
            self.n0[i] += n0;
            self.n01[i] += n01;
            self.n1[i] += n1;
            self.n10[i] += n10;
        }
    }

    pub fn merge(&mut self, other: &Self) -> Result<(), EnsembleError> {
        if (self.low, self.high, &self.lags) != (other.low, other.high, &other.lags) {
            return Err(EnsembleError::Config("transition counts use different settings".into()));
        }
        for (a, b) in [
            (&mut self.n0, &other.n0),
            (&mut self.n01, &other.n01),
            (&mut self.n1, &other.n1),
            (&mut self.n10, &other.n10),
        ] {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    /// `None` where no pair satisfies the condition.
    pub fn p01(&self) -> Vec<Option<f64>> {
        ratio(&self.n01, &self.n0)
    }

    pub fn p10(&self) -> Vec<Option<f64>> {
        ratio(&self.n10, &self.n1)
    }
}

fn ratio(num: &[u64], den: &[u64]) -> Vec<Option<f64>> {
    num.iter()
        .zip(den)
        .map(|(a, b)| (*b > 0).then(|| *a as f64 / *b as f64))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionResult {
    pub counts: TransitionCounts,
    pub p01: Vec<Option<f64>>,
    pub p10: Vec<Option<f64>>,
    pub members: Vec<MemberRecord>,
    pub burn_in: Option<BurnInCheck>,
    /// Pooled post-burn-in histogram of `y`.
    pub y_hist: Histogram1D,
}

/// Runs the ensemble of `cfg` and pools transition counts and the `y`
/// histogram (on `y_axis`) over all members and all post-burn-in times.
pub fn transition_experiment(
    cfg: &EnsembleConfig,
    low: f64,
    high: f64,
    tau_grid: &[f64],
    y_axis: Axis,
) -> Result<TransitionResult, EnsembleError> {
    let sample_dt = cfg.integrator.dt * cfg.integrator.save_stride as f64;
    let template = TransitionCounts::new(low, high, tau_grid, sample_dt)?;
    let outputs = run_ensemble_map(cfg, |_, t| {
        let y: Vec<f64> = t.component(1).collect();
        let mut c = template.clone();
        c.add_series(&y);
        let mut h = Histogram1D::new(y_axis);
        y.iter().for_each(|v| h.push(*v));
        (c, h, half_means(&t, Observable::Y))
    })?;
    let mut counts = template.clone();
    let mut y_hist = Histogram1D::new(y_axis);
    let mut halves = Vec::new();
    let mut members = Vec::with_capacity(outputs.len());
    for o in outputs {
        if let Some((c, h, hm)) = o.value {
            counts.merge(&c)?;
            y_hist.merge(&h)?;
            halves.extend(hm);
        }
        members.push(o.record);
    }
    Ok(TransitionResult {
        p01: counts.p01(),
        p10: counts.p10(),
        counts,
        members,
        burn_in: BurnInCheck::from_half_means(Observable::Y, &halves),
        y_hist,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrator::simulate_trajectory;

    fn small(variant: Variant, n: usize) -> EnsembleConfig {
        let mut cfg = EnsembleConfig::climatology(variant, ModelParams::default(), n, 17);
        cfg.t_burn = 0.01;
        cfg.t_end = 0.03;
        cfg.initial = InitialCondition::Single(State::at(variant, 0.97, 0.09));
        cfg
    }

    #[test]
    fn single_member_equals_simulate_trajectory() {
        for variant in Variant::ALL {
            let cfg = small(variant, 1);
            let d = run_ensemble(&cfg).unwrap();
            let mut t = simulate_trajectory(
                variant,
                &cfg.initial_state(0),
                (0.0, cfg.t_end),
                &cfg.integrator,
                &cfg.params,
                cfg.member_seed(0),
            )
            .unwrap();
            t.drop_before(cfg.t_burn);
            assert_eq!(d.trajectories[0].as_ref().unwrap(), &t, "{variant}");
            assert_eq!(t.len(), 100);
        }
    }

    #[test]
    fn members_match_their_own_single_runs() {
        let cfg = small(Variant::Gaussian, 11);
        let d = run_ensemble(&cfg).unwrap();
        for m in [0, 7, 8, 10] {
            let mut t = simulate_trajectory(
                cfg.variant,
                &cfg.initial_state(m),
                (0.0, cfg.t_end),
                &cfg.integrator,
                &cfg.params,
                cfg.member_seed(m),
            )
            .unwrap();
            t.drop_before(cfg.t_burn);
            assert_eq!(d.trajectories[m].as_ref().unwrap(), &t);
        }
    }

    #[test]
    fn repeated_runs_are_identical() {
        let cfg = small(Variant::Averaged, 10);
        assert_eq!(run_ensemble(&cfg).unwrap(), run_ensemble(&cfg).unwrap());
    }

    #[test]
    fn stream_accounting() {
        let cfg = small(Variant::Full, 3);
        let d = run_ensemble(&cfg).unwrap();
        let steps = step_count(cfg.t_end, cfg.integrator.dt);
        let mut streams: Vec<_> = d.records.iter().map(|r| r.seed).collect();
        streams.dedup();
        assert_eq!(streams.len(), 3);
        for r in &d.records {
            assert_eq!(r.draws, steps * 3);
        }
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = small(Variant::Full, 2);
        cfg.t_burn = cfg.t_end;
        assert!(cfg.validate().is_err());
        let mut cfg = small(Variant::Full, 2);
        cfg.n_members = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = small(Variant::Full, 2);
        cfg.initial = InitialCondition::PerMember(vec![State::full(0.0, 0.0, 0.0, 0.0, 0.0)]);
        assert!(cfg.validate().is_err());
        let mut cfg = small(Variant::Averaged, 1);
        cfg.initial = InitialCondition::Single(State::full(0.0, 0.0, 0.0, 0.0, 0.0));
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn per_member_initial_states() {
        let mut cfg = small(Variant::Averaged, 2);
        cfg.initial = InitialCondition::PerMember(vec![State::reduced(1.0, 0.6), State::reduced(1.0, 0.7)]);
        let d = run_ensemble(&cfg).unwrap();
        assert_eq!(d.trajectories[1].as_ref().unwrap().meta.initial_state, State::reduced(1.0, 0.7));
    }

    #[test]
    fn failures_are_recorded() {
        let mut cfg = small(Variant::Averaged, 3);
        cfg.integrator.dt = 1e-3;
        cfg.integrator.save_stride = 1;
        cfg.initial = InitialCondition::PerMember(vec![
            State::reduced(0.97, 0.09),
            State::reduced(1e200, -1e200),
            State::reduced(0.97, 0.09),
        ]);
        let d = run_ensemble(&cfg).unwrap();
        assert_eq!(d.failures(), 1);
        assert!(d.records[1].failure.is_some());
        assert!(d.trajectories[1].is_none());
        assert!(d.trajectories[2].is_some());
        assert!(matches!(d.require_complete(false), Err(EnsembleError::Failures(1))));
        assert!(d.require_complete(true).is_ok());
    }

    #[test]
    fn save_and_load_round_trip() {
        let cfg = small(Variant::Full, 3);
        let mut d = run_ensemble(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = d.save(dir.path()).unwrap();
        assert_eq!(manifest.config_hash, cfg.hash());
        let back = EnsembleDataset::load(dir.path()).unwrap();
        assert_eq!(back, d);

        let text = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        let tampered = text.replace("\"n_members\": 3", "\"n_members\": 4");
        fs::write(dir.path().join(MANIFEST_FILE), tampered).unwrap();
        assert!(EnsembleDataset::load(dir.path()).is_err());
    }

    #[test]
    fn burn_in_check_flags_drift() {
        let steady: Vec<(f64, f64)> = (0..50).map(|i| (1.0 + 0.01 * (i % 5) as f64, 1.0 + 0.01 * (i % 7) as f64)).collect();
        assert!(!BurnInCheck::from_half_means(Observable::X, &steady).unwrap().flagged);
        let drifting: Vec<(f64, f64)> = steady.iter().map(|(a, b)| (*a, *b + 0.5)).collect();
        assert!(BurnInCheck::from_half_means(Observable::X, &drifting).unwrap().flagged);
        assert!(BurnInCheck::from_half_means(Observable::X, &steady[..1]).is_none());
    }

    #[test]
    fn transition_counts_by_hand() {
        let mut c = TransitionCounts::new(0.5, 0.8, &[0.0, 1.0, 2.0], 1.0).unwrap();
        c.add_series(&[0.1, 0.9, 0.2, 0.3, 1.0]);
        assert_eq!(c.n0, vec![3, 3, 2]);
        assert_eq!(c.n01, vec![0, 2, 1]);
        assert_eq!(c.n1, vec![2, 1, 1]);
        assert_eq!(c.n10, vec![0, 1, 1]);
        assert_eq!(c.p01()[0], Some(0.0));
        assert_eq!(c.p10()[0], Some(0.0));
        let empty = TransitionCounts::new(0.5, 0.8, &[1.0], 1.0).unwrap();
        assert_eq!(empty.p01(), vec![None]);
        assert!(TransitionCounts::new(0.8, 0.5, &[1.0], 1.0).is_err());
    }

    #[test]
    fn forecast_lead_zero_is_indicator() {
        let p = ModelParams::default();
        let cfg = IntegratorConfig::for_variant(Variant::Full);
        let truth = simulate_trajectory(Variant::Full, &State::full(0.97, 0.09, 0.0, 0.0, 0.0), (0.0, 0.02), &cfg, &p, StreamSeed::new(5))
            .unwrap();
        let tv = truth.times[80];
        let x = truth.row(80)[0];
        let event = EventSpec::new(Observable::X, Direction::AtMost, x).unwrap();
        let miss = EventSpec::new(Observable::X, Direction::AtLeast, x + 1e-9).unwrap();
        for variant in Variant::ALL {
            let vcfg = IntegratorConfig::for_variant(variant);
            let r = forecast_experiment(&truth, &event, tv, &[0.0, 0.002, 0.001], 20, variant, &p, &vcfg, 1).unwrap();
            assert_eq!(r.lead_times[2], 0.0);
            assert_eq!(r.probabilities[2], 1.0);
            assert_eq!(r.lead_times[0], r.lead_times[0].max(r.lead_times[1]));
            let r = forecast_experiment(&truth, &miss, tv, &[0.0], 20, variant, &p, &vcfg, 1).unwrap();
            assert_eq!(r.probabilities[0], 0.0);
        }
        let off = forecast_experiment(&truth, &event, tv, &[0.00103], 4, Variant::Full, &p, &cfg, 1).unwrap();
        assert!((off.snap_distance[0] - 0.00003).abs() < 1e-9);
        assert!(matches!(
            forecast_experiment(&truth, &event, tv, &[1.0], 4, Variant::Full, &p, &cfg, 1),
            Err(EnsembleError::LeadOutOfRange { .. })
        ));
    }

    #[test]
    fn forecast_seeds_agree_within_sampling_error() {
        let p = ModelParams::default();
        let full = IntegratorConfig::for_variant(Variant::Full);
        let truth = simulate_trajectory(Variant::Full, &State::full(0.97, 0.09, 0.0, 0.0, 0.0), (0.0, 0.01), &full, &p, StreamSeed::new(8))
            .unwrap();
        let cfg = IntegratorConfig::for_variant(Variant::Gaussian);
        let tv = truth.times[40];
        let event = EventSpec::new(Observable::X, Direction::AtMost, truth.row(40)[0]).unwrap();
        let n = 400;
        let run = |seed| forecast_experiment(&truth, &event, tv, &[0.001, 0.002], n, Variant::Gaussian, &p, &cfg, seed).unwrap();
        let (a, b) = (run(1), run(2));
        assert_eq!(a.probabilities, run(1).probabilities);
        for (pa, pb) in a.probabilities.iter().zip(&b.probabilities) {
            assert!(*pa > 0.05 && *pa < 0.95, "{pa}");
            let p = 0.5 * (pa + pb);
            assert!((pa - pb).abs() <= 4.0 * (p * (1.0 - p) / n as f64).sqrt(), "{pa} vs {pb}");
        }
    }

    use crate::statistics::Direction;
}

//! Streaming climatology statistics: moments, histograms, event counts and
//! time-lagged autocorrelation.
//!
//! Every accumulator is mergeable, so workers can reduce members
//! independently and combine the partial results in a fixed order.

use std::fmt;
use std::io::{BufWriter, Write};
use std::str::FromStr;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StatsError {
    #[error("histogram geometries differ")]
    GeometryMismatch,
    #[error("registered event lists differ")]
    EventMismatch,
    #[error("no samples accumulated")]
    Empty,
    #[error("event {0} was not registered before accumulation")]
    UnregisteredEvent(EventSpec),
    #[error("invalid event: {0}")]
    InvalidEvent(String),
    #[error("autocorrelation settings differ")]
    LagMismatch,
    #[error("invalid histogram axis [{lo}, {hi}) with {bins} bins")]
    InvalidAxis { lo: f64, hi: f64, bins: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Observable {
    X,
    Y,
}

impl Observable {
    pub fn pick(self, x: f64, y: f64) -> f64 {
        match self {
            Observable::X => x,
            Observable::Y => y,
        }
    }

    /// Component index in a state row.
    pub fn index(self) -> usize {
        match self {
            Observable::X => 0,
            Observable::Y => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "<=")]
    AtMost,
    #[serde(rename = ">=")]
    AtLeast,
}

/// Threshold event such as `x <= 0.96`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventSpec {
    pub observable: Observable,
    pub direction: Direction,
    pub threshold: f64,
}

impl EventSpec {
    pub fn new(observable: Observable, direction: Direction, threshold: f64) -> Result<Self, StatsError> {
        if !threshold.is_finite() {
            return Err(StatsError::InvalidEvent(format!("threshold {threshold} is not finite")));
        }
        Ok(Self {
            observable,
            direction,
            threshold,
        })
    }

    /// `x <= 0.96`.
    pub fn small_x() -> Self {
        Self::new(Observable::X, Direction::AtMost, 0.96).unwrap()
    }

    /// `x >= 0.985`.
    pub fn large_x() -> Self {
        Self::new(Observable::X, Direction::AtLeast, 0.985).unwrap()
    }

    #[inline]
    pub fn holds(&self, x: f64, y: f64) -> bool {
        let v = self.observable.pick(x, y);
        match self.direction {
            Direction::AtMost => v <= self.threshold,
            Direction::AtLeast => v >= self.threshold,
        }
    }
}

impl fmt::Display for EventSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self.observable {
            Observable::X => "x",
            Observable::Y => "y",
        };
        let op = match self.direction {
            Direction::AtMost => "<=",
            Direction::AtLeast => ">=",
        };
        write!(f, "{name}{op}{}", self.threshold)
    }
}

impl FromStr for EventSpec {
    type Err = StatsError;

    /// Parses `x<=0.96`, `y >= 0.8` and similar.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let compact: String = s.chars().filter(|c| !c.is_whitespace()).collect();
        let bad = || StatsError::InvalidEvent(format!("cannot parse '{s}', expected e.g. x<=0.96"));
        let (name, rest) = compact.split_at(compact.len().min(1));
        let observable = match name {
            "x" => Observable::X,
            "y" => Observable::Y,
            _ => return Err(bad()),
        };
        let (direction, value) = if let Some(v) = rest.strip_prefix("<=") {
            (Direction::AtMost, v)
        } else if let Some(v) = rest.strip_prefix(">=") {
            (Direction::AtLeast, v)
        } else {
            return Err(bad());
        };
        let threshold: f64 = value.parse().map_err(|_| bad())?;
        Self::new(observable, direction, threshold)
    }
}

/// Uniform bins over `[lo, hi)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub bins: usize,
}

impl Axis {
    pub fn new(lo: f64, hi: f64, bins: usize) -> Result<Self, StatsError> {
        if !(lo.is_finite() && hi.is_finite() && hi > lo && bins > 0) {
            return Err(StatsError::InvalidAxis { lo, hi, bins });
        }
        Ok(Self { lo, hi, bins })
    }

    pub fn width(&self) -> f64 {
        (self.hi - self.lo) / self.bins as f64
    }

    pub fn edges(&self) -> Vec<f64> {
        (0..=self.bins).map(|i| self.lo + i as f64 * self.width()).collect()
    }

    pub fn center(&self, i: usize) -> f64 {
        self.lo + (i as f64 + 0.5) * self.width()
    }

    /// Bin of `v`: `Err(false)` below the range, `Err(true)` above it (or NaN).
    #[inline]
    fn locate(&self, v: f64) -> Result<usize, bool> {
        if v < self.lo {
            return Err(false);
        }
        let i = ((v - self.lo) / (self.hi - self.lo) * self.bins as f64) as usize;
        if v >= self.hi || v.is_nan() {
            Err(true)
        } else {
            Ok(i.min(self.bins - 1))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram1D {
    pub axis: Axis,
    pub counts: Vec<u64>,
    pub underflow: u64,
    pub overflow: u64,
}

impl Histogram1D {
    pub fn new(axis: Axis) -> Self {
        Self {
            axis,
            counts: vec![0; axis.bins],
            underflow: 0,
            overflow: 0,
        }
    }

    #[inline]
    pub fn push(&mut self, v: f64) {
        match self.axis.locate(v) {
            Ok(i) => self.counts[i] += 1,
            Err(false) => self.underflow += 1,
            Err(true) => self.overflow += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.underflow + self.overflow
    }

    pub fn merge(&mut self, other: &Self) -> Result<(), StatsError> {
        if self.axis != other.axis {
            return Err(StatsError::GeometryMismatch);
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.underflow += other.underflow;
        self.overflow += other.overflow;
        Ok(())
    }
}

/// Total-variation distance `0.5 sum |p_i - q_i|` between two histograms
/// on the same axis, treating underflow and overflow as extra cells.
pub fn total_variation(a: &Histogram1D, b: &Histogram1D) -> Result<f64, StatsError> {
    if a.axis != b.axis {
        return Err(StatsError::GeometryMismatch);
    }
    let (na, nb) = (a.total() as f64, b.total() as f64);
    if na == 0.0 || nb == 0.0 {
        return Err(StatsError::Empty);
    }
    let cells = |h: &Histogram1D| {
        h.counts
            .iter()
            .copied()
            .chain([h.underflow, h.overflow])
            .collect::<Vec<_>>()
    };
    let d: f64 = cells(a)
        .iter()
        .zip(cells(b))
        .map(|(ca, cb)| (*ca as f64 / na - cb as f64 / nb).abs())
        .sum();
    Ok(0.5 * d)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram2D {
    pub x: Axis,
    pub y: Axis,
    /// Row-major, `counts[ix * y.bins + iy]`.
    pub counts: Vec<u64>,
    /// Samples outside the rectangle.
    pub outside: u64,
}

impl Histogram2D {
    pub fn new(x: Axis, y: Axis) -> Self {
        Self {
            x,
            y,
            counts: vec![0; x.bins * y.bins],
            outside: 0,
        }
    }

    #[inline]
    pub fn push(&mut self, x: f64, y: f64) {
        match (self.x.locate(x), self.y.locate(y)) {
            (Ok(i), Ok(j)) => self.counts[i * self.y.bins + j] += 1,
            _ => self.outside += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.outside
    }

    fn merge(&mut self, other: &Self) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.outside += other.outside;
    }
}

/// Histogram ranges for the `(x, y)` statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramGeometry {
    pub x: Axis,
    pub y: Axis,
}

impl HistogramGeometry {
    /// 200 x 200 bins over `[0.94, 1.01) x [-0.05, 0.35)`.
    pub fn single_equilibrium() -> Self {
        Self {
            x: Axis::new(0.94, 1.01, 200).unwrap(),
            y: Axis::new(-0.05, 0.35, 200).unwrap(),
        }
    }

    /// 200 x 200 bins over `[0.9, 1.1) x [-0.2, 1.6)`.
    pub fn bistable() -> Self {
        Self {
            x: Axis::new(0.9, 1.1, 200).unwrap(),
            y: Axis::new(-0.2, 1.6, 200).unwrap(),
        }
    }
}

impl Default for HistogramGeometry {
    fn default() -> Self {
        Self::single_equilibrium()
    }
}

/// Mergeable moments, histograms and event counters for `(x, y)` samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleStats {
    pub count: u64,
    mean_x: f64,
    mean_y: f64,
    m2x: f64,
    m2y: f64,
    cxy: f64,
    m3x: f64,
    pub hist_x: Histogram1D,
    pub hist_y: Histogram1D,
    pub hist_xy: Histogram2D,
    pub events: Vec<EventSpec>,
    pub event_counts: Vec<u64>,
}

impl EnsembleStats {
    pub fn new(geometry: HistogramGeometry, events: &[EventSpec]) -> Self {
        Self {
            count: 0,
            mean_x: 0.0,
            mean_y: 0.0,
            m2x: 0.0,
            m2y: 0.0,
            cxy: 0.0,
            m3x: 0.0,
            hist_x: Histogram1D::new(geometry.x),
            hist_y: Histogram1D::new(geometry.y),
            hist_xy: Histogram2D::new(geometry.x, geometry.y),
            events: events.to_vec(),
            event_counts: vec![0; events.len()],
        }
    }

    pub fn geometry(&self) -> HistogramGeometry {
        HistogramGeometry {
            x: self.hist_x.axis,
            y: self.hist_y.axis,
        }
    }

    #[inline]
    pub fn push(&mut self, x: f64, y: f64) {
        let n1 = self.count as f64;
        self.count += 1;
        let n = self.count as f64;
        let dx = x - self.mean_x;
        let dy = y - self.mean_y;
        let dxn = dx / n;
        let term = dx * dxn * n1;
        self.m3x += term * dxn * (n - 2.0) - 3.0 * dxn * self.m2x;
        self.m2x += term;
        self.mean_x += dxn;
        self.mean_y += dy / n;
        self.m2y += dy * (y - self.mean_y);
        self.cxy += dx * (y - self.mean_y);

        self.hist_x.push(x);
        self.hist_y.push(y);
        self.hist_xy.push(x, y);
        for (e, c) in self.events.iter().zip(self.event_counts.iter_mut()) {
            *c += e.holds(x, y) as u64;
        }
    }

    pub fn accumulate<I: IntoIterator<Item = (f64, f64)>>(&mut self, samples: I) {
        for (x, y) in samples {
            self.push(x, y);
        }
    }

    /// Adds all rows of a row-major buffer whose first two components are `(x, y)`.
    pub fn accumulate_rows(&mut self, data: &[f64], dim: usize) {
        for row in data.chunks_exact(dim) {
            self.push(row[0], row[1]);
        }
    }

    /// Combines `other` into `self` as if its samples had been pushed here.
    pub fn merge(&mut self, other: &Self) -> Result<(), StatsError> {
        if self.geometry() != other.geometry() {
            return Err(StatsError::GeometryMismatch);
        }
        if self.events != other.events {
            return Err(StatsError::EventMismatch);
        }
        if other.count == 0 {
            return Ok(());
        }
        if self.count == 0 {
            *self = other.clone();
            return Ok(());
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        let dx = other.mean_x - self.mean_x;
        let dy = other.mean_y - self.mean_y;
        self.m3x += other.m3x
            + dx * dx * dx * na * nb * (na - nb) / (n * n)
            + 3.0 * dx * (na * other.m2x - nb * self.m2x) / n;
        self.m2x += other.m2x + dx * dx * na * nb / n;
        self.m2y += other.m2y + dy * dy * na * nb / n;
        self.cxy += other.cxy + dx * dy * na * nb / n;
        self.mean_x += dx * nb / n;
        self.mean_y += dy * nb / n;
        self.count += other.count;
        self.hist_x.merge(&other.hist_x)?;
        self.hist_y.merge(&other.hist_y)?;
        self.hist_xy.merge(&other.hist_xy);
        for (a, b) in self.event_counts.iter_mut().zip(&other.event_counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn mean_x(&self) -> f64 {
        self.mean_x
    }

    pub fn mean_y(&self) -> f64 {
        self.mean_y
    }

    /// Sample variance (divisor `n - 1`).
    pub fn var_x(&self) -> f64 {
        self.m2x / (self.count as f64 - 1.0)
    }

    pub fn var_y(&self) -> f64 {
        self.m2y / (self.count as f64 - 1.0)
    }

    pub fn std_x(&self) -> f64 {
        self.var_x().sqrt()
    }

    pub fn std_y(&self) -> f64 {
        self.var_y().sqrt()
    }

    pub fn cov_xy(&self) -> f64 {
        self.cxy / (self.count as f64 - 1.0)
    }

    pub fn corr_xy(&self) -> f64 {
        self.cxy / (self.m2x * self.m2y).sqrt()
    }

    /// Standardized third central moment of `x`.
    pub fn skew_x(&self) -> f64 {
        (self.count as f64).sqrt() * self.m3x / self.m2x.powf(1.5)
    }

    pub fn event_count(&self, event: &EventSpec) -> Option<u64> {
        self.events.iter().position(|e| e == event).map(|i| self.event_counts[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventProbability {
    pub event: EventSpec,
    pub probability: f64,
    pub standard_error: f64,
    pub n: u64,
    /// Sample size used for the standard error.
    pub n_eff: f64,
}

/// Relative frequency of `event` with binomial standard error. With an
/// autocorrelation result for the event's variable, the sample size is
/// discounted to `n dt / (2 tau)`.
pub fn event_probability(
    stats: &EnsembleStats,
    event: &EventSpec,
    acf: Option<&AcfResult>,
) -> Result<EventProbability, StatsError> {
    let hits = stats.event_count(event).ok_or(StatsError::UnregisteredEvent(*event))?;
    if stats.count == 0 {
        return Err(StatsError::Empty);
    }
    let n = stats.count as f64;
    let p = hits as f64 / n;
    let n_eff = match acf {
        Some(a) if a.decorrelation_time > 0.0 => (n * a.lag_dt / (2.0 * a.decorrelation_time)).min(n),
        _ => n,
    };
    Ok(EventProbability {
        event: *event,
        probability: p,
        standard_error: (p * (1.0 - p) / n_eff).sqrt(),
        n: stats.count,
        n_eff,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Density1D {
    pub edges: Vec<f64>,
    pub density: Vec<f64>,
}

impl Density1D {
    /// `log10` of each bin, `None` for empty bins.
    pub fn log10(&self) -> Vec<Option<f64>> {
        self.density.iter().map(|d| (*d > 0.0).then(|| d.log10())).collect()
    }

    /// Center of the densest bin.
    pub fn mode(&self) -> f64 {
        let i = argmax(&self.density);
        0.5 * (self.edges[i] + self.edges[i + 1])
    }

    pub fn write_csv<W: Write>(&self, w: W) -> std::io::Result<()> {
        let mut w = BufWriter::new(w);
        writeln!(w, "lo,hi,density,log10_density")?;
        for (i, (d, l)) in self.density.iter().zip(self.log10()).enumerate() {
            writeln!(w, "{},{},{},{}", self.edges[i], self.edges[i + 1], d, opt(l))?;
        }
        w.flush()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Density2D {
    pub x_edges: Vec<f64>,
    pub y_edges: Vec<f64>,
    /// Row-major over `(ix, iy)`.
    pub density: Vec<f64>,
}

impl Density2D {
    pub fn log10(&self) -> Vec<Option<f64>> {
        self.density.iter().map(|d| (*d > 0.0).then(|| d.log10())).collect()
    }

    /// Bin center `(x, y)` of the maximum.
    pub fn mode(&self) -> (f64, f64) {
        let ny = self.y_edges.len() - 1;
        let k = argmax(&self.density);
        let (i, j) = (k / ny, k % ny);
        (
            0.5 * (self.x_edges[i] + self.x_edges[i + 1]),
            0.5 * (self.y_edges[j] + self.y_edges[j + 1]),
        )
    }

    pub fn write_csv<W: Write>(&self, w: W) -> std::io::Result<()> {
        let mut w = BufWriter::new(w);
        writeln!(w, "x_lo,x_hi,y_lo,y_hi,density,log10_density")?;
        let ny = self.y_edges.len() - 1;
        for (k, (d, l)) in self.density.iter().zip(self.log10()).enumerate() {
            let (i, j) = (k / ny, k % ny);
            writeln!(
                w,
                "{},{},{},{},{},{}",
                self.x_edges[i],
                self.x_edges[i + 1],
                self.y_edges[j],
                self.y_edges[j + 1],
                d,
                opt(l)
            )?;
        }
        w.flush()
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Densities {
    pub x: Density1D,
    pub y: Density1D,
    pub xy: Density2D,
}

/// Bin masses divided by `count * bin area`. Mass outside the histogram
/// ranges is left out, so the tables integrate to the in-range fraction.
pub fn density_estimate(stats: &EnsembleStats) -> Result<Densities, StatsError> {
    if stats.count == 0 {
        return Err(StatsError::Empty);
    }
    let n = stats.count as f64;
    let one = |h: &Histogram1D| Density1D {
        edges: h.axis.edges(),
        density: h.counts.iter().map(|c| *c as f64 / (n * h.axis.width())).collect(),
    };
    let area = stats.hist_xy.x.width() * stats.hist_xy.y.width();
    Ok(Densities {
        x: one(&stats.hist_x),
        y: one(&stats.hist_y),
        xy: Density2D {
            x_edges: stats.hist_xy.x.edges(),
            y_edges: stats.hist_xy.y.edges(),
            density: stats.hist_xy.counts.iter().map(|c| *c as f64 / (n * area)).collect(),
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcfResult {
    pub lag_dt: f64,
    pub lags: Vec<f64>,
    pub acf: Vec<f64>,
    pub decorrelation_time: f64,
    /// Lag where the integration stopped: the first zero crossing, or the last lag.
    pub integration_cutoff: f64,
    /// Set when some record was shorter than the requested maximum lag.
    pub truncated: bool,
    pub members: usize,
}

impl AcfResult {
    pub fn write_csv<W: Write>(&self, w: W) -> std::io::Result<()> {
        let mut w = BufWriter::new(w);
        writeln!(w, "lag,acf")?;
        for (l, a) in self.lags.iter().zip(&self.acf) {
            writeln!(w, "{l},{a}")?;
        }
        w.flush()
    }
}

/// Autocorrelation pooled over records.
///
/// Lagged products of every record are summed around a fixed `center` close
/// to the data (for numerical accuracy); the pooled mean over all records is
/// removed only in [`Self::finish`]. Lag-`k` sums are divided by the number
/// of available pairs and normalized by the lag-0 value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcfAccumulator {
    pub lag_dt: f64,
    pub max_lag: usize,
    pub center: f64,
    prod: Vec<f64>,
    head: Vec<f64>,
    tail: Vec<f64>,
    pairs: Vec<u64>,
    records: Vec<u64>,
    sum: f64,
    count: u64,
    members: usize,
    truncated: bool,
}

impl AcfAccumulator {
    /// Lags `0..=max_lag` in units of `lag_dt`.
    pub fn new(lag_dt: f64, max_lag: usize, center: f64) -> Self {
        let z = vec![0.0; max_lag + 1];
        Self {
            lag_dt,
            max_lag,
            center,
            prod: z.clone(),
            head: z.clone(),
            tail: z,
            pairs: vec![0; max_lag + 1],
            records: vec![0; max_lag + 1],
            sum: 0.0,
            count: 0,
            members: 0,
            truncated: false,
        }
    }

    /// Adds one record; records with fewer than two samples are skipped.
    pub fn add_series(&mut self, series: &[f64]) {
        let n = series.len();
        if n < 2 {
            self.truncated = true;
            return;
        }
        let top = self.max_lag.min(n - 1);
        self.truncated |= top < self.max_lag;
        let z: Vec<f64> = series.iter().map(|v| v - self.center).collect();
        let total: f64 = z.iter().sum();
        let prod = lagged_products(&z, top);
        let (mut head, mut tail) = (total, total);
        for k in 0..=top {
            if k > 0 {
                head -= z[n - k];
                tail -= z[k - 1];
            }
            self.prod[k] += prod[k];
            self.head[k] += head;
            self.tail[k] += tail;
            self.pairs[k] += (n - k) as u64;
            self.records[k] += 1;
        }
        self.sum += total;
        self.count += n as u64;
        self.members += 1;
    }

    pub fn merge(&mut self, other: &Self) -> Result<(), StatsError> {
        if self.max_lag != other.max_lag || self.lag_dt != other.lag_dt || self.center != other.center {
            return Err(StatsError::LagMismatch);
        }
        for (a, b) in [
            (&mut self.prod, &other.prod),
            (&mut self.head, &other.head),
            (&mut self.tail, &other.tail),
        ] {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (a, b) in [(&mut self.pairs, &other.pairs), (&mut self.records, &other.records)] {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        self.sum += other.sum;
        self.count += other.count;
        self.members += other.members;
        self.truncated |= other.truncated;
        Ok(())
    }

    /// Pooled autocorrelation integrated up to its first zero crossing.
    /// Lags not covered by every record are dropped.
    pub fn finish(&self) -> Result<AcfResult, StatsError> {
        if self.members == 0 {
            return Err(StatsError::Empty);
        }
        let mu = self.sum / self.count as f64;
        let full = self.members as u64;
        let cov: Vec<f64> = (0..=self.max_lag)
            .take_while(|k| self.records[*k] == full)
            .map(|k| {
                let m = self.pairs[k] as f64;
                (self.prod[k] - mu * (self.head[k] + self.tail[k]) + mu * mu * m) / m
            })
            .collect();
        if !(cov[0] > 0.0) {
            return Err(StatsError::Empty);
        }
        let acf: Vec<f64> = cov.iter().map(|c| c / cov[0]).collect();
        let lags: Vec<f64> = (0..acf.len()).map(|k| k as f64 * self.lag_dt).collect();
        let (decorrelation_time, integration_cutoff) = integrate_to_zero(&acf, self.lag_dt);
        Ok(AcfResult {
            lag_dt: self.lag_dt,
            lags,
            acf,
            decorrelation_time,
            integration_cutoff,
            truncated: self.truncated,
            members: self.members,
        })
    }
}

/// Trapezoid integral from 0 to the first zero crossing (linearly
/// interpolated), or over the whole table when the values stay positive.
fn integrate_to_zero(acf: &[f64], dt: f64) -> (f64, f64) {
    let mut area = 0.0;
    for k in 1..acf.len() {
        let (a, b) = (acf[k - 1], acf[k]);
        if b <= 0.0 {
            let frac = if a > b { a / (a - b) } else { 0.0 };
            area += 0.5 * a * frac * dt;
            return (area.max(0.0), (k as f64 - 1.0 + frac) * dt);
        }
        area += 0.5 * (a + b) * dt;
    }
    (area, (acf.len().saturating_sub(1)) as f64 * dt)
}

/// `sum_t z_t z_{t+k}` for `k = 0..=max_lag`, by zero-padded FFT.
fn lagged_products(z: &[f64], max_lag: usize) -> Vec<f64> {
    let n = z.len();
    let m = (2 * n).next_power_of_two();
    let mut buf: Vec<Complex<f64>> = z
        .iter()
        .map(|v| Complex::new(*v, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(m)
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(m).process(&mut buf);
    for c in buf.iter_mut() {
        *c = Complex::new(c.norm_sqr(), 0.0);
    }
    planner.plan_fft_inverse(m).process(&mut buf);
    (0..=max_lag.min(n.saturating_sub(1))).map(|k| buf[k].re / m as f64).collect()
}

/// Mean-removed autocovariance of one record, `c_k = sum_t x_t x_{t+k} / (n - k)`.
pub fn autocovariance(series: &[f64], max_lag: usize) -> Vec<f64> {
    let n = series.len();
    if n == 0 {
        return Vec::new();
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let z: Vec<f64> = series.iter().map(|v| v - mean).collect();
    lagged_products(&z, max_lag)
        .into_iter()
        .enumerate()
        .map(|(k, p)| p / (n - k) as f64)
        .collect()
}

/// Pooled autocorrelation of several records, centered at the first sample.
pub fn autocorrelation_of<'a, I: IntoIterator<Item = &'a [f64]>>(
    records: I,
    lag_dt: f64,
    max_lag: usize,
) -> Result<AcfResult, StatsError> {
    let mut records = records.into_iter().peekable();
    let center = records.peek().and_then(|r| r.first().copied()).unwrap_or(0.0);
    let mut acc = AcfAccumulator::new(lag_dt, max_lag, center);
    for r in records {
        acc.add_series(r);
    }
    acc.finish()
}

/// JSON-ready summary of a climatology.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsSummary {
    pub count: u64,
    pub mean_x: f64,
    pub mean_y: f64,
    pub std_x: f64,
    pub std_y: f64,
    pub corr_xy: f64,
    pub skew_x: f64,
    pub mode_x: f64,
    pub mode_y: f64,
    pub decorrelation_time_x: Option<f64>,
    pub decorrelation_time_y: Option<f64>,
    pub events: Vec<EventProbability>,
}

impl StatsSummary {
    /// Collects the summary; `acf_x` and `acf_y` are optional and discount
    /// event standard errors when present.
    pub fn new(stats: &EnsembleStats, acf_x: Option<&AcfResult>, acf_y: Option<&AcfResult>) -> Result<Self, StatsError> {
        let dens = density_estimate(stats)?;
        let (mode_x, mode_y) = dens.xy.mode();
        let events = stats
            .events
            .iter()
            .map(|e| {
                let acf = match e.observable {
                    Observable::X => acf_x,
                    Observable::Y => acf_y,
                };
                event_probability(stats, e, acf)
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            count: stats.count,
            mean_x: stats.mean_x(),
            mean_y: stats.mean_y(),
            std_x: stats.std_x(),
            std_y: stats.std_y(),
            corr_xy: stats.corr_xy(),
            skew_x: stats.skew_x(),
            mode_x,
            mode_y,
            decorrelation_time_x: acf_x.map(|a| a.decorrelation_time),
            decorrelation_time_y: acf_y.map(|a| a.decorrelation_time),
            events,
        })
    }

    /// Copy with times (decorrelation times) converted by `f`.
    pub fn map_times(&self, f: impl Fn(f64) -> f64) -> Self {
        let mut s = self.clone();
        s.decorrelation_time_x = s.decorrelation_time_x.map(&f);
        s.decorrelation_time_y = s.decorrelation_time_y.map(&f);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::{GaussianStream, StreamSeed};
    use proptest::prelude::*;

    fn normal_pairs(n: usize, seed: u64) -> Vec<(f64, f64)> {
        let mut g = GaussianStream::new(StreamSeed::new(seed));
        (0..n)
            .map(|_| {
                let a = g.standard_normal();
                let b = g.standard_normal();
                (0.975 + 0.006 * a, 0.09 + 0.03 * (0.5 * a + b))
            })
            .collect()
    }

    fn stats_of(samples: &[(f64, f64)]) -> EnsembleStats {
        let mut s = EnsembleStats::new(HistogramGeometry::default(), &[EventSpec::small_x(), EventSpec::large_x()]);
        s.accumulate(samples.iter().copied());
        s
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn moments_match_two_pass() {
        let data = normal_pairs(100_000, 1);
        let s = stats_of(&data);
        let n = data.len() as f64;
        let mx = data.iter().map(|p| p.0).sum::<f64>() / n;
        let my = data.iter().map(|p| p.1).sum::<f64>() / n;
        let vx = data.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>() / (n - 1.0);
        let vy = data.iter().map(|p| (p.1 - my).powi(2)).sum::<f64>() / (n - 1.0);
        let cxy = data.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / (n - 1.0);
        let m3 = data.iter().map(|p| (p.0 - mx).powi(3)).sum::<f64>() / n;
        let m2 = data.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>() / n;
        assert!(rel(s.mean_x(), mx) < 1e-10);
        assert!(rel(s.mean_y(), my) < 1e-10);
        assert!(rel(s.var_x(), vx) < 1e-10);
        assert!(rel(s.var_y(), vy) < 1e-10);
        assert!(rel(s.cov_xy(), cxy) < 1e-10);
        assert!((s.skew_x() - m3 / m2.powf(1.5)).abs() < 1e-10);
    }

    #[test]
    fn halves_merge_to_whole() {
        let data = normal_pairs(20_000, 2);
        let whole = stats_of(&data);
        let mut a = stats_of(&data[..7_000]);
        let b = stats_of(&data[7_000..]);
        a.merge(&b).unwrap();
        assert_eq!(a.count, whole.count);
        assert_eq!(a.hist_x, whole.hist_x);
        assert_eq!(a.hist_y, whole.hist_y);
        assert_eq!(a.hist_xy, whole.hist_xy);
        assert_eq!(a.event_counts, whole.event_counts);
        for (u, v) in [
            (a.mean_x(), whole.mean_x()),
            (a.mean_y(), whole.mean_y()),
            (a.var_x(), whole.var_x()),
            (a.var_y(), whole.var_y()),
            (a.cov_xy(), whole.cov_xy()),
        ] {
            assert!(rel(u, v) < 1e-12, "{u} vs {v}");
        }
        assert!((a.skew_x() - whole.skew_x()).abs() < 1e-10);
    }

    #[test]
    fn constant_input() {
        let s = stats_of(&vec![(0.97, 0.1); 500]);
        assert_eq!(s.var_x(), 0.0);
        assert_eq!(s.var_y(), 0.0);
        let i = s.hist_x.axis.locate(0.97).unwrap();
        assert_eq!(s.hist_x.counts[i], 500);
        assert_eq!(s.hist_x.total(), 500);
    }

    #[test]
    fn standard_normal_oracle() {
        let mut g = GaussianStream::new(StreamSeed::new(8));
        let mut s = EnsembleStats::new(
            HistogramGeometry {
                x: Axis::new(-5.0, 5.0, 100).unwrap(),
                y: Axis::new(-5.0, 5.0, 100).unwrap(),
            },
            &[],
        );
        let n = 1_000_000;
        for _ in 0..n {
            s.push(g.standard_normal(), 0.0);
        }
        assert!(s.mean_x().abs() < 4.0 / (n as f64).sqrt());
        assert!((s.var_x() - 1.0).abs() < 0.01);
        assert_eq!(s.hist_x.total(), n);
    }

    #[test]
    fn merge_rejects_other_geometry() {
        let mut a = EnsembleStats::new(HistogramGeometry::single_equilibrium(), &[]);
        let b = EnsembleStats::new(HistogramGeometry::bistable(), &[]);
        assert_eq!(a.merge(&b), Err(StatsError::GeometryMismatch));
        let c = EnsembleStats::new(HistogramGeometry::single_equilibrium(), &[EventSpec::small_x()]);
        assert_eq!(a.merge(&c), Err(StatsError::EventMismatch));
    }

    #[test]
    fn overflow_bins() {
        let mut h = Histogram1D::new(Axis::new(0.0, 1.0, 10).unwrap());
        for v in [-1.0, 0.0, 0.999, 1.0, 5.0, f64::NAN] {
            h.push(v);
        }
        assert_eq!((h.underflow, h.overflow), (1, 3));
        assert_eq!(h.counts[0], 1);
        assert_eq!(h.counts[9], 1);
        assert_eq!(h.total(), 6);
    }

    #[test]
    fn uniform_density_is_flat() {
        let mut g = GaussianStream::new(StreamSeed::new(3));
        let geom = HistogramGeometry::single_equilibrium();
        let mut s = EnsembleStats::new(geom, &[]);
        let n = 400_000u64;
        for _ in 0..n {
            let x = geom.x.lo + g.uniform() * (geom.x.hi - geom.x.lo);
            let y = geom.y.lo + g.uniform() * (geom.y.hi - geom.y.lo);
            s.push(x, y);
        }
        let d = density_estimate(&s).unwrap();
        let expected = 1.0 / (geom.x.hi - geom.x.lo);
        let p = 1.0 / geom.x.bins as f64;
        let se = expected * ((1.0 - p) / (n as f64 * p)).sqrt();
        for v in &d.x.density {
            assert!((v - expected).abs() < 5.0 * se, "{v} vs {expected}");
        }
        let integral: f64 = d.xy.density.iter().sum::<f64>() * geom.x.width() * geom.y.width();
        assert!((integral - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_sample_density() {
        let s = stats_of(&[(0.97, 0.1)]);
        let d = density_estimate(&s).unwrap();
        let area = s.hist_xy.x.width() * s.hist_xy.y.width();
        let nonzero: Vec<f64> = d.xy.density.iter().copied().filter(|v| *v > 0.0).collect();
        assert_eq!(nonzero.len(), 1);
        assert!(rel(nonzero[0], 1.0 / area) < 1e-12);
        let logs = d.xy.log10();
        assert_eq!(logs.iter().filter(|l| l.is_some()).count(), 1);
        assert!((d.x.mode() - 0.97).abs() <= s.hist_x.axis.width());
        assert!(density_estimate(&stats_of(&[])).is_err());
    }

    #[test]
    fn event_probability_cases() {
        let s = stats_of(&[(0.95, 0.0), (0.97, 0.0), (0.99, 0.0), (0.99, 0.0)]);
        let small = event_probability(&s, &EventSpec::small_x(), None).unwrap();
        assert_eq!(small.probability, 0.25);
        assert!(rel(small.standard_error, (0.25f64 * 0.75 / 4.0).sqrt()) < 1e-12);
        let never = EventSpec::new(Observable::X, Direction::AtMost, 0.5).unwrap();
        let mut t = EnsembleStats::new(HistogramGeometry::default(), &[never]);
        t.accumulate([(0.95, 0.0), (0.97, 0.0)]);
        let p = event_probability(&t, &never, None).unwrap();
        assert_eq!((p.probability, p.standard_error), (0.0, 0.0));
        let other = EventSpec::new(Observable::Y, Direction::AtLeast, 0.8).unwrap();
        assert_eq!(event_probability(&t, &other, None), Err(StatsError::UnregisteredEvent(other)));
    }

    #[test]
    fn effective_sample_size_discount() {
        let s = stats_of(&normal_pairs(1000, 4));
        let acf = AcfResult {
            lag_dt: 0.01,
            lags: vec![],
            acf: vec![],
            decorrelation_time: 0.05,
            integration_cutoff: 0.1,
            truncated: false,
            members: 1,
        };
        let p = event_probability(&s, &EventSpec::small_x(), Some(&acf)).unwrap();
        assert!(rel(p.n_eff, 100.0) < 1e-12);
    }

    #[test]
    fn event_parsing() {
        assert_eq!("x<=0.96".parse::<EventSpec>().unwrap(), EventSpec::small_x());
        assert_eq!(" x >= 0.985".parse::<EventSpec>().unwrap(), EventSpec::large_x());
        assert!("z<1".parse::<EventSpec>().is_err());
        assert!("x<=nan".parse::<EventSpec>().is_err());
        assert_eq!(EventSpec::large_x().to_string(), "x>=0.985");
    }

    #[test]
    fn fft_autocovariance_matches_direct_sum() {
        let data: Vec<f64> = normal_pairs(300, 5).iter().map(|p| p.0).collect();
        let fast = autocovariance(&data, 40);
        let n = data.len();
        let mean = data.iter().sum::<f64>() / n as f64;
        for (k, f) in fast.iter().enumerate() {
            let direct = (0..n - k).map(|t| (data[t] - mean) * (data[t + k] - mean)).sum::<f64>() / (n - k) as f64;
            assert!((f - direct).abs() < 1e-12 * fast[0], "lag {k}: {f} vs {direct}");
        }
    }

    #[test]
    fn acf_starts_at_one_and_flags_truncation() {
        let data: Vec<f64> = normal_pairs(50, 6).iter().map(|p| p.1).collect();
        let r = autocorrelation_of([data.as_slice()], 0.1, 100).unwrap();
        assert_eq!(r.acf[0], 1.0);
        assert!(r.truncated);
        assert_eq!(r.acf.len(), 50);
        assert!(r.decorrelation_time >= 0.0);
    }

    #[test]
    fn ou_decorrelation_time() {
        // Exact AR(1) sampling of an OU process with rate lambda.
        let lambda: f64 = 2.0;
        let dt = 0.01;
        let phi = (-lambda * dt).exp();
        let mut g = GaussianStream::new(StreamSeed::new(10));
        let mut acc = AcfAccumulator::new(dt, 300, 0.0);
        for _ in 0..2000 {
            let mut x = g.standard_normal();
            let series: Vec<f64> = (0..(100.0 / lambda / dt) as usize)
                .map(|_| {
                    x = phi * x + (1.0 - phi * phi).sqrt() * g.standard_normal();
                    x
                })
                .collect();
            acc.add_series(&series);
        }
        let r = acc.finish().unwrap();
        assert!(rel(r.decorrelation_time, 1.0 / lambda) < 0.05, "{}", r.decorrelation_time);
        assert!(!r.truncated);
    }

    #[test]
    fn integration_stops_at_zero_crossing() {
        let (area, cut) = integrate_to_zero(&[1.0, 0.5, -0.5, 0.8], 1.0);
        assert!((area - (0.75 + 0.125)).abs() < 1e-15);
        assert!((cut - 1.5).abs() < 1e-15);
        let (area, cut) = integrate_to_zero(&[1.0, 0.5], 2.0);
        assert_eq!((area, cut), (1.5, 2.0));
    }

    #[test]
    fn total_variation_bounds() {
        let axis = Axis::new(0.0, 1.0, 4).unwrap();
        let mut a = Histogram1D::new(axis);
        let mut b = Histogram1D::new(axis);
        a.push(0.1);
        b.push(0.9);
        assert_eq!(total_variation(&a, &b).unwrap(), 1.0);
        assert_eq!(total_variation(&a, &a).unwrap(), 0.0);
    }

    proptest! {
        #[test]
        fn merge_is_order_independent(
            data in proptest::collection::vec((0.93..1.02f64, -0.1..0.4f64), 1..200),
            cuts in proptest::collection::vec(0usize..200, 3),
        ) {
            let n = data.len();
            let mut c: Vec<usize> = cuts.iter().map(|c| c % (n + 1)).collect();
            c.push(0);
            c.push(n);
            c.sort();
            let parts: Vec<EnsembleStats> = c.windows(2).map(|w| stats_of(&data[w[0]..w[1]])).collect();
            let whole = stats_of(&data);
            let mut forward = parts[0].clone();
            for p in &parts[1..] {
                forward.merge(p).unwrap();
            }
            let mut backward = parts[parts.len() - 1].clone();
            for p in parts[..parts.len() - 1].iter().rev() {
                backward.merge(p).unwrap();
            }
            for s in [&forward, &backward] {
                prop_assert_eq!(s.count, whole.count);
                prop_assert_eq!(&s.hist_xy, &whole.hist_xy);
                prop_assert_eq!(&s.hist_x, &whole.hist_x);
                prop_assert_eq!(&s.event_counts, &whole.event_counts);
                prop_assert!((s.mean_x() - whole.mean_x()).abs() < 1e-12);
                prop_assert!((s.m2x - whole.m2x).abs() <= 1e-10 * whole.m2x.max(1e-12));
                prop_assert!(s.var_x() >= 0.0 || n < 2);
            }
        }
    }
}

//! Equilibria of the slow drift, their stability, and saddle-node scans in `P`.
//!
//! Equilibria of the full model lie on the slice `v = T = S = 0`, so every
//! variant reduces to a two-dimensional root-finding problem in `(x, y)`.
//! Roots are found by damped Newton iteration started from a uniform grid of
//! seeds and merged when closer than [`MERGE_TOLERANCE`].

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;
use crate::model::{self, State, Variant};
use crate::params::{ModelParams, ParamError};

/// Newton stops once the drift norm drops below this value.
pub const NEWTON_TOLERANCE: f64 = 1e-10;
/// Roots closer than this (Euclidean, in `(x, y)`) are one equilibrium.
pub const MERGE_TOLERANCE: f64 = 1e-6;
const MAX_NEWTON_ITERS: usize = 100;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EquilibriumError {
    #[error("grid_n must be at least 2, got {0}")]
    GridTooSmall(usize),
    #[error("search box is empty or not finite")]
    EmptyBox,
    #[error("invalid scan range [{0}, {1}]")]
    BadRange(f64, f64),
    #[error("n_steps must be at least 1")]
    NoSteps,
    #[error(transparent)]
    Params(#[from] ParamError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stability {
    Stable,
    Saddle,
    Unstable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Equilibrium {
    pub x: f64,
    pub y: f64,
    pub stability: Stability,
    /// Real parts of the Jacobian eigenvalues, sorted ascending.
    pub eigenvalue_real_parts: Vec<f64>,
    /// Euclidean norm of the drift at the root.
    pub residual: f64,
}

/// Axis-aligned rectangle in `(x, y)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchBox {
    pub x: (f64, f64),
    pub y: (f64, f64),
}

impl SearchBox {
    pub fn new(x: (f64, f64), y: (f64, f64)) -> Self {
        Self { x, y }
    }

    fn is_valid(&self) -> bool {
        [self.x.0, self.x.1, self.y.0, self.y.1]
            .iter()
            .all(|v| v.is_finite())
            && self.x.1 > self.x.0
            && self.y.1 > self.y.0
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let tx = 1e-9 * (self.x.1 - self.x.0);
        let ty = 1e-9 * (self.y.1 - self.y.0);
        x >= self.x.0 - tx && x <= self.x.1 + tx && y >= self.y.0 - ty && y <= self.y.1 + ty
    }
}

impl Default for SearchBox {
    /// Covers both the on-state and off-state branches for the reference regimes.
    fn default() -> Self {
        Self::new((0.8, 1.2), (-0.5, 2.5))
    }
}

/// Slow drift and its 2×2 Jacobian; for the full model evaluated at zero eddy state.
fn slow_system(variant: Variant, p: &ModelParams, x: f64, y: f64) -> ([f64; 2], [[f64; 2]; 2]) {
    let s = State::at(variant, x, y);
    let b = model::drift(variant, &s, p).expect("finite state of matching dimension");
    let j = model::jacobian(variant, &s, p).expect("finite state of matching dimension");
    ([b.x(), b.y()], [[j[(0, 0)], j[(0, 1)]], [j[(1, 0)], j[(1, 1)]]])
}

fn damped_newton(variant: Variant, p: &ModelParams, x0: f64, y0: f64) -> Option<(f64, f64, f64)> {
    let (mut x, mut y) = (x0, y0);
    let (mut g, mut j) = slow_system(variant, p, x, y);
    let mut r = linalg::norm2(&g);
    for _ in 0..MAX_NEWTON_ITERS {
        if r <= NEWTON_TOLERANCE {
            return Some((x, y, r));
        }
        let step = linalg::solve(j, [-g[0], -g[1]])?;
        let mut lambda = 1.0;
        loop {
            let (xn, yn) = (x + lambda * step[0], y + lambda * step[1]);
            let (gn, jn) = slow_system(variant, p, xn, yn);
            let rn = linalg::norm2(&gn);
            if rn.is_finite() && (rn < (1.0 - 1e-4 * lambda) * r || rn <= NEWTON_TOLERANCE) {
                x = xn;
                y = yn;
                g = gn;
                j = jn;
                r = rn;
                break;
            }
            lambda *= 0.5;
            if lambda < 1e-10 {
                return None;
            }
        }
    }
    (r <= NEWTON_TOLERANCE).then_some((x, y, r))
}

fn real_parts(j: &DMatrix<f64>) -> Vec<f64> {
    let mut re: Vec<f64> = j.clone().complex_eigenvalues().iter().map(|z| z.re).collect();
    re.sort_by(|a, b| a.total_cmp(b));
    re
}

pub(crate) fn classify(real_parts: &[f64]) -> Stability {
    let neg = real_parts.iter().filter(|r| **r < 0.0).count();
    if neg == real_parts.len() {
        Stability::Stable
    } else if neg == 0 {
        Stability::Unstable
    } else {
        Stability::Saddle
    }
}

/// Locates the equilibria of `variant` inside `search_box`, sorted by `y`.
///
/// Seeds from which Newton does not converge are dropped; an empty result is
/// a valid answer.
pub fn find_equilibria(
    variant: Variant,
    p: &ModelParams,
    search_box: &SearchBox,
    grid_n: usize,
) -> Result<Vec<Equilibrium>, EquilibriumError> {
    if grid_n < 2 {
        return Err(EquilibriumError::GridTooSmall(grid_n));
    }
    if !search_box.is_valid() {
        return Err(EquilibriumError::EmptyBox);
    }
    let mut roots: Vec<(f64, f64, f64)> = Vec::new();
    let step_x = (search_box.x.1 - search_box.x.0) / (grid_n - 1) as f64;
    let step_y = (search_box.y.1 - search_box.y.0) / (grid_n - 1) as f64;
    for i in 0..grid_n {
        for k in 0..grid_n {
            let x0 = search_box.x.0 + i as f64 * step_x;
            let y0 = search_box.y.0 + k as f64 * step_y;
            let Some((x, y, r)) = damped_newton(variant, p, x0, y0) else {
                continue;
            };
            if !search_box.contains(x, y) {
                continue;
            }
            let duplicate = roots
                .iter()
                .any(|(rx, ry, _)| ((rx - x).powi(2) + (ry - y).powi(2)).sqrt() < MERGE_TOLERANCE);
            if !duplicate {
                roots.push((x, y, r));
            }
        }
    }
    roots.sort_by(|a, b| a.1.total_cmp(&b.1));
    Ok(roots
        .into_iter()
        .map(|(x, y, residual)| {
            let s = State::at(variant, x, y);
            let j = model::jacobian(variant, &s, p).expect("finite root");
            let eigenvalue_real_parts = real_parts(&j);
            Equilibrium {
                x,
                y,
                stability: classify(&eigenvalue_real_parts),
                eigenvalue_real_parts,
                residual,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticalPoint {
    pub p: f64,
    /// Equilibrium count just below `p`.
    pub count_below: usize,
    /// Equilibrium count just above `p`.
    pub count_above: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnreliableInterval {
    pub p_lo: f64,
    pub p_hi: f64,
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BifurcationScan {
    /// `(P, equilibrium count)` on the uniform scan grid.
    pub samples: Vec<(f64, usize)>,
    pub critical: Vec<CriticalPoint>,
    /// Count changes that are not a clean saddle-node (odd jumps, or a
    /// bisection midpoint matching neither end).
    pub unreliable: Vec<UnreliableInterval>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanOptions {
    pub search_box: SearchBox,
    pub grid_n: usize,
    /// Bisection stops once the bracketing interval is narrower than this.
    pub p_tolerance: f64,
}

impl Default for ScanOptions {
    fn default() -> Self {
        Self {
            search_box: SearchBox::default(),
            grid_n: 24,
            p_tolerance: 1e-5,
        }
    }
}

/// Counts equilibria on a uniform grid of `P` values and bisects every count change.
///
/// `P` is varied through `P_e` at fixed `eps`; all other parameters stay as in `p`.
pub fn bifurcation_scan(
    variant: Variant,
    p: &ModelParams,
    p_range: (f64, f64),
    n_steps: usize,
    opts: &ScanOptions,
) -> Result<BifurcationScan, EquilibriumError> {
    let (lo, hi) = p_range;
    if !(lo > 0.0 && hi > lo && hi.is_finite()) {
        return Err(EquilibriumError::BadRange(lo, hi));
    }
    if n_steps == 0 {
        return Err(EquilibriumError::NoSteps);
    }
    let count = |pv: f64| -> Result<usize, EquilibriumError> {
        let q = p.with_p(pv)?;
        Ok(find_equilibria(variant, &q, &opts.search_box, opts.grid_n)?.len())
    };

    let mut samples = Vec::with_capacity(n_steps + 1);
    for i in 0..=n_steps {
        let pv = lo + (hi - lo) * i as f64 / n_steps as f64;
        samples.push((pv, count(pv)?));
    }

    let mut critical = Vec::new();
    let mut unreliable = Vec::new();
    for w in samples.windows(2) {
        let ((mut a, ca), (mut b, cb)) = (w[0], w[1]);
        if ca == cb {
            continue;
        }
        if ca.abs_diff(cb) % 2 == 1 {
            unreliable.push(UnreliableInterval {
                p_lo: a,
                p_hi: b,
                counts: vec![ca, cb],
            });
            continue;
        }
        let mut clean = true;
        while b - a > opts.p_tolerance {
            let m = 0.5 * (a + b);
            let cm = count(m)?;
            if cm == ca {
                a = m;
            } else if cm == cb {
                b = m;
            } else {
                unreliable.push(UnreliableInterval {
                    p_lo: a,
                    p_hi: b,
                    counts: vec![ca, cm, cb],
                });
                clean = false;
                break;
            }
        }
        if clean {
            critical.push(CriticalPoint {
                p: 0.5 * (a + b),
                count_below: ca,
                count_above: cb,
            });
        }
    }
    Ok(BifurcationScan {
        samples,
        critical,
        unreliable,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn near(e: &Equilibrium, x: f64, y: f64, tol: f64) -> bool {
        (e.x - x).abs() <= tol && (e.y - y).abs() <= tol
    }

    #[test]
    fn full_reference_regime_has_three() {
        let p = ModelParams::default();
        let eq = find_equilibria(Variant::Full, &p, &SearchBox::new((0.9, 1.1), (0.0, 1.3)), 20).unwrap();
        assert_eq!(eq.len(), 3, "{eq:?}");
        assert!(near(&eq[0], 0.989, 0.22, 5e-3), "{eq:?}");
        assert_eq!(eq[0].stability, Stability::Stable);
        assert_eq!(eq[1].stability, Stability::Saddle);
        assert!(near(&eq[2], 0.998, 1.00, 5e-3), "{eq:?}");
        assert_eq!(eq[2].stability, Stability::Stable);
        for e in &eq {
            assert!(e.residual <= NEWTON_TOLERANCE);
            assert_eq!(e.eigenvalue_real_parts.len(), 5);
        }
    }

    #[test]
    fn averaged_single_equilibrium() {
        let p = ModelParams::default();
        let eq = find_equilibria(Variant::Averaged, &p, &SearchBox::default(), 20).unwrap();
        assert_eq!(eq.len(), 1, "{eq:?}");
        assert!(near(&eq[0], 0.974, 0.093, 5e-3));
        assert_eq!(eq[0].stability, Stability::Stable);
    }

    #[test]
    fn bistable_averaged() {
        let p = ModelParams::bistable();
        let eq = find_equilibria(Variant::Averaged, &p, &SearchBox::default(), 20).unwrap();
        assert_eq!(eq.len(), 3, "{eq:?}");
        assert!(near(&eq[0], 0.99, 0.24, 5e-3), "{eq:?}");
        assert!(near(&eq[1], 1.00, 0.65, 5e-3), "{eq:?}");
        assert!(near(&eq[2], 1.00, 1.11, 5e-3), "{eq:?}");
        let tags: Vec<_> = eq.iter().map(|e| e.stability).collect();
        assert_eq!(tags, [Stability::Stable, Stability::Saddle, Stability::Stable]);
        let gauss = find_equilibria(Variant::Gaussian, &p, &SearchBox::default(), 20).unwrap();
        assert_eq!(gauss, eq);
    }

    #[test]
    fn bistable_full_slice_has_single_root() {
        // With v = T = S = 0 the eddy terms vanish, and without mean diffusion
        // only the advective exchange remains: one root with (x - y)^2 y = 1/P_a.
        let p = ModelParams::bistable();
        let eq = find_equilibria(Variant::Full, &p, &SearchBox::default(), 20).unwrap();
        assert_eq!(eq.len(), 1, "{eq:?}");
        let (x, y) = (eq[0].x, eq[0].y);
        assert!((p.p_a() * (x - y).powi(2) * y - 1.0).abs() < 1e-9);
        assert_eq!(eq[0].stability, Stability::Stable);
    }

    #[test]
    fn bad_inputs() {
        let p = ModelParams::default();
        assert_eq!(
            find_equilibria(Variant::Full, &p, &SearchBox::default(), 1),
            Err(EquilibriumError::GridTooSmall(1))
        );
        assert_eq!(
            find_equilibria(Variant::Full, &p, &SearchBox::new((1.0, 1.0), (0.0, 1.0)), 4),
            Err(EquilibriumError::EmptyBox)
        );
        // No roots in a box far from the equilibria is a valid, empty answer.
        let none = find_equilibria(Variant::Averaged, &p, &SearchBox::new((5.0, 6.0), (5.0, 6.0)), 3).unwrap();
        assert!(none.is_empty());
    }

    #[test]
    fn scan_inside_single_regime_has_no_critical_points() {
        let p = ModelParams::default();
        let scan = bifurcation_scan(Variant::Averaged, &p, (0.5, 1.5), 5, &ScanOptions::default()).unwrap();
        assert!(scan.samples.iter().all(|(_, c)| *c == 1), "{scan:?}");
        assert!(scan.critical.is_empty());
        assert!(scan.unreliable.is_empty());
    }

    #[test]
    fn classify_patterns() {
        assert_eq!(classify(&[-2.0, -1.0]), Stability::Stable);
        assert_eq!(classify(&[-2.0, 1.0]), Stability::Saddle);
        assert_eq!(classify(&[2.0, 1.0]), Stability::Unstable);
    }
}

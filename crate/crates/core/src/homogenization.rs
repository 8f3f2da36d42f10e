//! Closed-form averaging and homogenization quantities for the eddy variables
//! at frozen slow state `(x, y)`, plus a Monte Carlo oracle that checks them.
//!
//! The noise-augmented fast system is the linear OU process
//! `dY = M Y dt + G dW` with `Y = (v, T, S)`,
//! `M = -(1/eps) [[1, 0, 0], [2P²x, 1, 0], [2P²y, 0, 1]]` and
//! `G = sqrt(2/eps) diag(1, sigma_eps, sigma_eps)`.
//! The eddy-flux fluctuation is `f = (4vT + 4P²x, 4vS + 4P²y)`.

use nalgebra::{Matrix2, Matrix3, SymmetricEigen, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::noise::{GaussianStream, StreamSeed};
use crate::params::ModelParams;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HomogenizationError {
    #[error("at least 2 trajectories are required, got {0}")]
    TooFewTrajectories(usize),
    #[error("lag horizon {horizon} is shorter than 20 eps = {min}")]
    HorizonTooShort { horizon: f64, min: f64 },
    #[error("fast time step {dt} exceeds eps / 50 = {max}")]
    StepTooLarge { dt: f64, max: f64 },
    #[error("frozen slow state must be finite")]
    NonFinite,
}

/// Stationary covariance of `(v, T, S)` conditioned on frozen `(x, y)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FastStationaryCov {
    pub matrix: [[f64; 3]; 3],
    pub sigma_eps: f64,
}

impl FastStationaryCov {
    pub fn to_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|i, j| self.matrix[i][j])
    }
}

pub fn fast_stationary_covariance(x: f64, y: f64, p: &ModelParams) -> FastStationaryCov {
    let p2 = p.p2();
    let p4 = p2 * p2;
    let s2 = p.sigma_eps() * p.sigma_eps();
    FastStationaryCov {
        matrix: [
            [1.0, -p2 * x, -p2 * y],
            [-p2 * x, 2.0 * p4 * x * x + s2, 2.0 * p4 * x * y],
            [-p2 * y, 2.0 * p4 * x * y, 2.0 * p4 * y * y + s2],
        ],
        sigma_eps: p.sigma_eps(),
    }
}

/// Drift matrix `M` of the fast system.
pub fn fast_drift_matrix(x: f64, y: f64, p: &ModelParams) -> Matrix3<f64> {
    let a = 2.0 * p.p2();
    -Matrix3::new(1.0, 0.0, 0.0, a * x, 1.0, 0.0, a * y, 0.0, 1.0) / p.eps()
}

/// Noise matrix `G` of the fast system.
pub fn fast_noise_matrix(p: &ModelParams) -> Matrix3<f64> {
    let s = p.sigma_eps();
    Matrix3::from_diagonal(&Vector3::new(1.0, s, s)) * (2.0 / p.eps()).sqrt()
}

/// `exp(M h)`; `M = -(I + N)/eps` with `N² = 0`, so the series truncates.
pub fn fast_propagator(x: f64, y: f64, p: &ModelParams, h: f64) -> Matrix3<f64> {
    let r = h / p.eps();
    let a = 2.0 * p.p2();
    let n = Matrix3::new(0.0, 0.0, 0.0, a * x, 0.0, 0.0, a * y, 0.0, 0.0);
    (Matrix3::identity() - n * r) * (-r).exp()
}

/// Mean eddy contribution to the slow drift, `(-4P²x, -4P²y)`. Independent of `sigma_eps`.
pub fn mean_eddy_flux(x: f64, y: f64, p: &ModelParams) -> [f64; 2] {
    let k = 4.0 * p.p2();
    [-k * x, -k * y]
}

/// Integrated lagged autocovariance `C` of the flux fluctuation and its
/// rank-one square root in the `sigma_eps -> 0` limit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffusionCorrection {
    pub c: [[f64; 2]; 2],
    /// `4 sqrt(5) P² [[x, 0], [y, 0]]`; satisfies `A Aᵀ = C` only at `sigma_eps = 0`.
    pub a_limit: [[f64; 2]; 2],
    pub evaluated_at: (f64, f64),
    pub sigma_eps: f64,
}

impl DiffusionCorrection {
    pub fn c_matrix(&self) -> Matrix2<f64> {
        Matrix2::new(self.c[0][0], self.c[0][1], self.c[1][0], self.c[1][1])
    }

    pub fn a_limit_matrix(&self) -> Matrix2<f64> {
        Matrix2::new(
            self.a_limit[0][0],
            self.a_limit[0][1],
            self.a_limit[1][0],
            self.a_limit[1][1],
        )
    }

    /// Symmetric square root of `C` at the stored `sigma_eps`.
    pub fn sqrt_c(&self) -> Matrix2<f64> {
        symmetric_sqrt2(&self.c_matrix())
    }
}

pub fn diffusion_correction(x: f64, y: f64, p: &ModelParams) -> DiffusionCorrection {
    let p4 = p.p2() * p.p2();
    let s2 = p.sigma_eps() * p.sigma_eps();
    let k = 4.0 * 5f64.sqrt() * p.p2();
    DiffusionCorrection {
        c: [
            [16.0 * (5.0 * p4 * x * x + s2), 80.0 * p4 * x * y],
            [80.0 * p4 * x * y, 16.0 * (5.0 * p4 * y * y + s2)],
        ],
        a_limit: [[k * x, 0.0], [k * y, 0.0]],
        evaluated_at: (x, y),
        sigma_eps: p.sigma_eps(),
    }
}

fn symmetric_sqrt2(m: &Matrix2<f64>) -> Matrix2<f64> {
    let eig = SymmetricEigen::new(*m);
    let d = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    eig.eigenvectors * Matrix2::from_diagonal(&d) * eig.eigenvectors.transpose()
}

fn symmetric_sqrt3(m: &Matrix3<f64>) -> Matrix3<f64> {
    let eig = SymmetricEigen::new(*m);
    let d = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    eig.eigenvectors * Matrix3::from_diagonal(&d) * eig.eigenvectors.transpose()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleSettings {
    pub n_trajectories: usize,
    /// Upper limit of the lag integral, nondimensional.
    pub lag_horizon: f64,
    /// Upper bound on the fast step; the actual step divides `lag_horizon` evenly.
    pub dt_fast: f64,
}

impl OracleSettings {
    /// 10⁴ trajectories, lags up to 30 eps, step eps/50.
    pub fn for_params(p: &ModelParams) -> Self {
        Self {
            n_trajectories: 10_000,
            lag_horizon: 30.0 * p.eps(),
            dt_fast: p.eps() / 50.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleEstimate {
    /// Stationary mean of `(4vT, 4vS)`.
    pub mean_flux_hat: [f64; 2],
    pub mean_flux_se: [f64; 2],
    /// Lag integral in units of `eps`, comparable to [`DiffusionCorrection::c`].
    pub c_hat: [[f64; 2]; 2],
    pub c_se: [[f64; 2]; 2],
    /// Empirical covariance of the sampled initial `(v, T, S)`.
    pub initial_cov_hat: [[f64; 3]; 3],
    pub initial_cov_se: [[f64; 3]; 3],
    pub n_samples: usize,
    pub lag_horizon: f64,
    /// `lag_horizon / eps`.
    pub lag_horizon_eps: f64,
    pub dt_fast: f64,
    /// Standardized difference between the first- and second-half mean fluxes.
    pub drift_z: [f64; 2],
    /// Set when `|drift_z| > 5` in either component.
    pub nonstationary: bool,
}

/// Per-trajectory sufficient statistics; summed across trajectories afterwards.
#[derive(Clone, Copy, Default)]
struct TrajectoryRecord {
    flux: [f64; 2],
    c: [f64; 3],
    init: [f64; 6],
    half_diff: [f64; 2],
}

impl TrajectoryRecord {
    fn values(&self) -> [f64; 13] {
        let mut v = [0.0; 13];
        v[..2].copy_from_slice(&self.flux);
        v[2..5].copy_from_slice(&self.c);
        v[5..11].copy_from_slice(&self.init);
        v[11..].copy_from_slice(&self.half_diff);
        v
    }
}

/// Brute-force estimate of the mean eddy flux and of `C` by simulating the
/// fast system at frozen `(x, y)`.
///
/// Each trajectory starts from an exact draw of the stationary Gaussian law
/// and advances with the exact OU transition over steps of at most
/// `dt_fast`. `C` is estimated from each trajectory's single time origin as
/// the trapezoid integral of `f(τ) f(0)ᵀ + f(0) f(τ)ᵀ` up to `lag_horizon`,
/// divided by `eps` so that it is on the scale of the closed form (the
/// Gaussian model carries the `sqrt(eps)` in front of `A`).
/// Standard errors come from the scatter across trajectories.
pub fn oracle_estimate(
    x: f64,
    y: f64,
    p: &ModelParams,
    settings: &OracleSettings,
    seed: u64,
) -> Result<OracleEstimate, HomogenizationError> {
    let n = settings.n_trajectories;
    if n < 2 {
        return Err(HomogenizationError::TooFewTrajectories(n));
    }
    if !(x.is_finite() && y.is_finite()) {
        return Err(HomogenizationError::NonFinite);
    }
    let min_h = 20.0 * p.eps();
    if !(settings.lag_horizon >= min_h * (1.0 - 1e-12)) {
        return Err(HomogenizationError::HorizonTooShort {
            horizon: settings.lag_horizon,
            min: min_h,
        });
    }
    let max_dt = p.eps() / 50.0;
    if !(settings.dt_fast > 0.0 && settings.dt_fast <= max_dt * (1.0 + 1e-12)) {
        return Err(HomogenizationError::StepTooLarge {
            dt: settings.dt_fast,
            max: max_dt,
        });
    }

    let steps = (settings.lag_horizon / settings.dt_fast - 1e-9).ceil().max(1.0) as usize;
    let h = settings.lag_horizon / steps as f64;
    let sigma = fast_stationary_covariance(x, y, p).to_matrix();
    let init_root = symmetric_sqrt3(&sigma);
    let phi = fast_propagator(x, y, p, h);
    let q = sigma - phi * sigma * phi.transpose();
    let step_root = symmetric_sqrt3(&(0.5 * (q + q.transpose())));
    let shift = [4.0 * p.p2() * x, 4.0 * p.p2() * y];
    let half = steps / 2;

    let run = |i: usize| -> TrajectoryRecord {
        let mut g = GaussianStream::new(StreamSeed::member(seed, i as u64));
        let z = Vector3::new(g.standard_normal(), g.standard_normal(), g.standard_normal());
        let mut yv = init_root * z;
        let flux_of = |s: &Vector3<f64>| [4.0 * s[0] * s[1], 4.0 * s[0] * s[2]];
        let f0 = {
            let fl = flux_of(&yv);
            [fl[0] + shift[0], fl[1] + shift[1]]
        };
        let mut rec = TrajectoryRecord {
            init: [
                yv[0] * yv[0],
                yv[0] * yv[1],
                yv[0] * yv[2],
                yv[1] * yv[1],
                yv[1] * yv[2],
                yv[2] * yv[2],
            ],
            ..Default::default()
        };
        let mut first_half = [0.0; 2];
        let mut second_half = [0.0; 2];
        for k in 0..=steps {
            if k > 0 {
                let z = Vector3::new(g.standard_normal(), g.standard_normal(), g.standard_normal());
                yv = phi * yv + step_root * z;
            }
            let fl = flux_of(&yv);
            let f = [fl[0] + shift[0], fl[1] + shift[1]];
            let w = if k == 0 || k == steps { 0.5 * h } else { h };
            rec.flux[0] += w * fl[0];
            rec.flux[1] += w * fl[1];
            rec.c[0] += w * 2.0 * f[0] * f0[0];
            rec.c[1] += w * (f[0] * f0[1] + f0[0] * f[1]);
            rec.c[2] += w * 2.0 * f[1] * f0[1];
            let target = if k < half { &mut first_half } else { &mut second_half };
            target[0] += fl[0];
            target[1] += fl[1];
        }
        rec.flux[0] /= settings.lag_horizon;
        rec.flux[1] /= settings.lag_horizon;
        for c in rec.c.iter_mut() {
            *c /= p.eps();
        }
        let n1 = half as f64;
        let n2 = (steps + 1 - half) as f64;
        rec.half_diff = [
            first_half[0] / n1 - second_half[0] / n2,
            first_half[1] / n1 - second_half[1] / n2,
        ];
        rec
    };

    let records: Vec<TrajectoryRecord> = (0..n).into_par_iter().map(run).collect();

    let mut sum = [0.0; 13];
    for r in &records {
        for (s, v) in sum.iter_mut().zip(r.values()) {
            *s += v;
        }
    }
    let nf = n as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
    let mut ss = [0.0; 13];
    for r in &records {
        for (k, v) in r.values().iter().enumerate() {
            ss[k] += (v - mean[k]).powi(2);
        }
    }
    let se: Vec<f64> = ss.iter().map(|s| (s / (nf - 1.0) / nf).sqrt()).collect();

    let sym3 = |v: &[f64]| {
        [
            [v[0], v[1], v[2]],
            [v[1], v[3], v[4]],
            [v[2], v[4], v[5]],
        ]
    };
    let drift_z = [mean[11] / se[11], mean[12] / se[12]];
    Ok(OracleEstimate {
        mean_flux_hat: [mean[0], mean[1]],
        mean_flux_se: [se[0], se[1]],
        c_hat: [[mean[2], mean[3]], [mean[3], mean[4]]],
        c_se: [[se[2], se[3]], [se[3], se[4]]],
        initial_cov_hat: sym3(&mean[5..11]),
        initial_cov_se: sym3(&se[5..11]),
        n_samples: n,
        lag_horizon: settings.lag_horizon,
        lag_horizon_eps: settings.lag_horizon / p.eps(),
        dt_fast: h,
        drift_z,
        nonstationary: drift_z.iter().any(|z| z.abs() > 5.0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params_with_sigma(s: f64) -> ModelParams {
        ModelParams::default().to_builder().sigma_eps(s).build().unwrap()
    }

    #[test]
    fn covariance_at_origin_is_diagonal() {
        let p = params_with_sigma(0.3);
        let c = fast_stationary_covariance(0.0, 0.0, &p);
        assert_eq!(c.matrix, [[1.0, 0.0, 0.0], [0.0, 0.09, 0.0], [0.0, 0.0, 0.09]]);
    }

    #[test]
    fn covariance_by_substitution() {
        let p = params_with_sigma(0.0);
        let c = fast_stationary_covariance(1.0, 0.0, &p).matrix;
        let expect = [[1.0, -1.28, 0.0], [-1.28, 3.2768, 0.0], [0.0, 0.0, 0.0]];
        for i in 0..3 {
            for j in 0..3 {
                assert!((c[i][j] - expect[i][j]).abs() < 1e-12, "{c:?}");
            }
        }
    }

    #[test]
    fn singular_without_auxiliary_noise() {
        let p = params_with_sigma(0.0);
        for (x, y) in [(1.0, 0.093), (0.3, -2.0), (0.0, 0.0)] {
            let m = fast_stationary_covariance(x, y, &p).to_matrix();
            assert!(m.determinant().abs() < 1e-10);
            let rank = m.rank(1e-9);
            assert_eq!(rank, if x == 0.0 && y == 0.0 { 1 } else { 2 });
        }
    }

    #[test]
    fn mean_flux_values() {
        let p = ModelParams::default();
        let f = mean_eddy_flux(1.0, 0.0, &p);
        assert!((f[0] + 5.12).abs() < 1e-12);
        assert_eq!(f[1], 0.0);
        assert_eq!(mean_eddy_flux(0.0, 0.0, &p), [0.0, 0.0]);
        let base = mean_eddy_flux(0.7, 0.2, &params_with_sigma(0.0));
        for s in [0.1, 1.0] {
            assert_eq!(mean_eddy_flux(0.7, 0.2, &params_with_sigma(s)), base);
        }
    }

    #[test]
    fn a_limit_reproduces_gaussian_noise_amplitudes() {
        let p = params_with_sigma(0.0);
        let d = diffusion_correction(1.0, 0.093, &p);
        let k = 4.0 * 5f64.sqrt() * p.p2();
        assert_eq!(d.a_limit, [[k, 0.0], [k * 0.093, 0.0]]);
        let amp = p.eps().sqrt() * d.a_limit[0][0];
        assert!((amp - 0.16).abs() < 0.005);
        assert!((p.eps().sqrt() * d.a_limit[1][0] - 0.015).abs() < 0.0005);
        assert!((amp - p.eddy_noise_coefficient()).abs() < 1e-14);
    }

    #[test]
    fn diagonal_square_root() {
        let p = params_with_sigma(0.25);
        let d = diffusion_correction(0.0, 0.0, &p);
        assert!((d.c_matrix() - Matrix2::identity() * 16.0 * 0.0625).norm() < 1e-15);
        assert!((d.sqrt_c() - Matrix2::identity()).norm() < 1e-14);
    }

    #[test]
    fn propagator_matches_matrix_exponential() {
        let p = ModelParams::default();
        for h in [1e-6, 4e-6, 1e-4] {
            let exact = (fast_drift_matrix(0.9, 0.3, &p) * h).exp();
            let closed = fast_propagator(0.9, 0.3, &p, h);
            assert!((exact - closed).norm() < 1e-12 * (1.0 + exact.norm()));
        }
    }

    #[test]
    fn oracle_rejects_bad_settings() {
        let p = ModelParams::default();
        let mut s = OracleSettings::for_params(&p);
        s.n_trajectories = 1;
        assert!(matches!(oracle_estimate(1.0, 0.0, &p, &s, 0), Err(HomogenizationError::TooFewTrajectories(1))));
        let mut s = OracleSettings::for_params(&p);
        s.lag_horizon = 5.0 * p.eps();
        assert!(matches!(oracle_estimate(1.0, 0.0, &p, &s, 0), Err(HomogenizationError::HorizonTooShort { .. })));
        let mut s = OracleSettings::for_params(&p);
        s.dt_fast = p.eps() / 10.0;
        assert!(matches!(oracle_estimate(1.0, 0.0, &p, &s, 0), Err(HomogenizationError::StepTooLarge { .. })));
    }

    #[test]
    fn oracle_symmetric_point_has_zero_flux() {
        let p = ModelParams::default();
        let mut s = OracleSettings::for_params(&p);
        s.n_trajectories = 2000;
        let est = oracle_estimate(0.0, 0.0, &p, &s, 11).unwrap();
        for k in 0..2 {
            assert!(est.mean_flux_hat[k].abs() <= 3.0 * est.mean_flux_se[k], "{est:?}");
            assert!(est.mean_flux_se[k] > 0.0);
        }
        assert!(!est.nonstationary);
    }

    #[test]
    fn oracle_standard_errors_scale_with_sqrt_n() {
        let p = ModelParams::default();
        let mut s = OracleSettings::for_params(&p);
        s.n_trajectories = 2000;
        let a = oracle_estimate(1.0, 0.093, &p, &s, 5).unwrap();
        s.n_trajectories = 4000;
        let b = oracle_estimate(1.0, 0.093, &p, &s, 6).unwrap();
        let ratio = a.c_se[0][0] / b.c_se[0][0];
        assert!((1.3..=1.5).contains(&ratio), "ratio {ratio}");
        let ratio = a.mean_flux_se[0] / b.mean_flux_se[0];
        assert!((1.3..=1.5).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn oracle_c_matches_closed_form() {
        let p = ModelParams::default();
        let mut s = OracleSettings::for_params(&p);
        s.n_trajectories = 3000;
        let est = oracle_estimate(1.0, 0.5, &p, &s, 9).unwrap();
        let c = diffusion_correction(1.0, 0.5, &p).c;
        for (a, b) in [(0, 0), (0, 1), (1, 1)] {
            let z = (est.c_hat[a][b] - c[a][b]).abs() / est.c_se[a][b];
            assert!(z < 4.0, "C[{a}][{b}]: {} vs {} (z = {z})", est.c_hat[a][b], c[a][b]);
        }
    }

    proptest! {
        #[test]
        fn covariance_solves_lyapunov_equation(x in -3.0..3.0f64, y in -3.0..3.0f64, s in 0.0..2.0f64) {
            let p = params_with_sigma(s);
            let sig = fast_stationary_covariance(x, y, &p).to_matrix();
            let m = fast_drift_matrix(x, y, &p);
            let g = fast_noise_matrix(&p);
            let r = m * sig + sig * m.transpose() + g * g.transpose();
            // Entries of M Σ are O(P⁴ x² / eps); scale the machine-precision bound accordingly.
            let scale = (m.abs().max() * sig.abs().max()).max(1.0);
            prop_assert!(r.abs().max() <= 1e-12 * scale, "residual {}", r.abs().max());
            prop_assert!((sig - sig.transpose()).abs().max() == 0.0);
            prop_assert!(SymmetricEigen::new(sig).eigenvalues.min() >= -1e-9 * scale);
        }

        #[test]
        fn c_symmetries(x in -3.0..3.0f64, y in -3.0..3.0f64, lambda in -4.0..4.0f64) {
            let p = params_with_sigma(0.0);
            let c = diffusion_correction(x, y, &p).c_matrix();
            let c_neg = diffusion_correction(-x, -y, &p).c_matrix();
            prop_assert!((c - c_neg).abs().max() <= 1e-12 * c.abs().max().max(1.0));
            let c_scaled = diffusion_correction(lambda * x, lambda * y, &p).c_matrix();
            prop_assert!((c_scaled - c * lambda * lambda).abs().max() <= 1e-12 * c_scaled.abs().max().max(1.0));
            let a = diffusion_correction(x, y, &p).a_limit_matrix();
            prop_assert!((a * a.transpose() - c).abs().max() <= 1e-12 * c.abs().max().max(1.0));
        }

        #[test]
        fn spectral_root_squares_back(x in -3.0..3.0f64, y in -3.0..3.0f64, s in 1e-3..2.0f64) {
            let d = diffusion_correction(x, y, &params_with_sigma(s));
            let r = d.sqrt_c();
            prop_assert!((r * r - d.c_matrix()).abs().max() <= 1e-10 * d.c_matrix().abs().max());
        }

        #[test]
        fn mean_flux_linear(x in -10.0..10.0f64, y in -10.0..10.0f64, s in 0.0..3.0f64) {
            let p = params_with_sigma(s);
            prop_assert_eq!(mean_eddy_flux(x, y, &p), [-4.0 * p.p2() * x, -4.0 * p.p2() * y]);
        }
    }
}

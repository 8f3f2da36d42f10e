//! Drift, diffusion and Jacobians of the full slow-fast model and its two
//! reduced (averaged and Gaussian) approximations.
//!
//! The public functions take a [`State`] and a [`Variant`] and check their
//! consistency. The integrator uses the fixed-size [`Sde`] kernels directly so
//! that the time-stepping loop never allocates.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

use crate::params::ModelParams;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("{variant} model expects a {expected}-component state, got {got}")]
    DimensionMismatch {
        variant: Variant,
        expected: usize,
        got: usize,
    },
    #[error("state contains a non-finite component: {0:?}")]
    NonFinite(Vec<f64>),
}

/// Which of the three models is simulated.
///
/// The mean-diffusion regime flag lives in [`ModelParams`], so a
/// `(Variant, ModelParams)` pair fully identifies the dynamics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Five-dimensional model with explicit eddy variables (v, T, S).
    Full,
    /// Slow model with the eddy fluxes replaced by their conditional means.
    Averaged,
    /// Averaged drift plus the multiplicative Gaussian eddy noise.
    Gaussian,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::Averaged, Variant::Gaussian];

    pub fn dim(self) -> usize {
        match self {
            Variant::Full => 5,
            Variant::Averaged | Variant::Gaussian => 2,
        }
    }

    /// Number of independent Wiener processes driving the variant.
    pub fn noise_channels(self) -> usize {
        match self {
            Variant::Full | Variant::Gaussian => 3,
            Variant::Averaged => 2,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Variant::Full => 0,
            Variant::Averaged => 1,
            Variant::Gaussian => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Variant::Full),
            1 => Some(Variant::Averaged),
            2 => Some(Variant::Gaussian),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Averaged => "averaged",
            Variant::Gaussian => "gaussian",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(Variant::Full),
            "averaged" | "deterministic" => Ok(Variant::Averaged),
            "gaussian" => Ok(Variant::Gaussian),
            other => Err(format!("unknown variant `{other}`")),
        }
    }
}

/// Model state: `(x, y, v, T, S)` for the full model, `(x, y)` for reduced ones.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum State {
    Full([f64; 5]),
    Reduced([f64; 2]),
}

impl State {
    pub fn full(x: f64, y: f64, v: f64, t: f64, s: f64) -> Self {
        State::Full([x, y, v, t, s])
    }

    pub fn reduced(x: f64, y: f64) -> Self {
        State::Reduced([x, y])
    }

    /// The state at `(x, y)` with zero eddy variables, in the variant's dimension.
    pub fn at(variant: Variant, x: f64, y: f64) -> Self {
        match variant {
            Variant::Full => State::full(x, y, 0.0, 0.0, 0.0),
            _ => State::reduced(x, y),
        }
    }

    pub fn from_slice(variant: Variant, values: &[f64]) -> Result<Self, ModelError> {
        let state = match (variant, values.len()) {
            (Variant::Full, 5) => State::Full(values.try_into().unwrap()),
            (Variant::Averaged | Variant::Gaussian, 2) => State::Reduced(values.try_into().unwrap()),
            (_, got) => {
                return Err(ModelError::DimensionMismatch {
                    variant,
                    expected: variant.dim(),
                    got,
                })
            }
        };
        state.check_finite()?;
        Ok(state)
    }

    pub fn as_slice(&self) -> &[f64] {
        match self {
            State::Full(u) => u,
            State::Reduced(u) => u,
        }
    }

    pub fn dim(&self) -> usize {
        self.as_slice().len()
    }

    pub fn x(&self) -> f64 {
        self.as_slice()[0]
    }

    pub fn y(&self) -> f64 {
        self.as_slice()[1]
    }

    /// Projection onto the slow variables.
    pub fn slow(&self) -> State {
        State::reduced(self.x(), self.y())
    }

    /// Converts to the state layout of `variant`: reduced targets keep only
    /// `(x, y)`, a full target keeps all components of a full state and pads
    /// a reduced one with zero eddy variables.
    pub fn for_variant(&self, variant: Variant) -> State {
        match (variant, self) {
            (Variant::Full, State::Full(_)) => *self,
            (Variant::Full, State::Reduced([x, y])) => State::full(*x, *y, 0.0, 0.0, 0.0),
            (_, _) => self.slow(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.as_slice().iter().all(|v| v.is_finite())
    }

    fn check_finite(&self) -> Result<(), ModelError> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(ModelError::NonFinite(self.as_slice().to_vec()))
        }
    }

    fn check(&self, variant: Variant) -> Result<(), ModelError> {
        if self.dim() != variant.dim() {
            return Err(ModelError::DimensionMismatch {
                variant,
                expected: variant.dim(),
                got: self.dim(),
            });
        }
        self.check_finite()
    }
}

/// A system `dX = b(X) dt + Σ(X) dW` with `N` state components and `M` Wiener channels.
pub trait Sde<const N: usize, const M: usize> {
    fn drift(&self, u: &[f64; N]) -> [f64; N];

    fn jacobian(&self, u: &[f64; N]) -> [[f64; N]; N];

    /// `Σ(u) · dw`.
    fn noise(&self, u: &[f64; N], dw: &[f64; M]) -> [f64; N];

    /// Dense `N × M` diffusion matrix, row-major.
    fn diffusion_matrix(&self, u: &[f64; N]) -> [[f64; M]; N];

    /// Solves `(I - dt J(u)) delta = g`, `None` if the matrix is singular.
    #[inline(always)]
    fn newton_correction(&self, u: &[f64; N], dt: f64, g: [f64; N]) -> Option<[f64; N]> {
        let j = self.jacobian(u);
        let mut a = [[0.0; N]; N];
        for i in 0..N {
            for k in 0..N {
                a[i][k] = -dt * j[i][k];
            }
            a[i][i] += 1.0;
        }
        crate::linalg::solve(a, g)
    }
}

/// Coefficients shared by all variants, precomputed once per parameter set.
#[derive(Debug, Clone, Copy)]
struct Coefficients {
    inv_eps_t: f64,
    inv_eps: f64,
    delta: f64,
    p_a: f64,
    p2: f64,
    thermal: f64,
    sigma_y: f64,
    eddy_velocity: f64,
    eddy_gauss: f64,
}

impl Coefficients {
    fn new(p: &ModelParams) -> Self {
        Self {
            inv_eps_t: 1.0 / p.eps_t(),
            inv_eps: 1.0 / p.eps(),
            delta: p.delta(),
            p_a: p.p_a(),
            p2: p.p2(),
            thermal: p.thermal_noise(),
            sigma_y: p.sigma_y(),
            eddy_velocity: (2.0 / p.eps()).sqrt(),
            eddy_gauss: p.eddy_noise_coefficient(),
        }
    }

    /// Eddy-free slow drift `(-(x-1)/eps_T - k x, 1 - k y)` with `k = delta + P_a (x-y)^2`.
    #[inline(always)]
    fn slow(&self, x: f64, y: f64) -> [f64; 2] {
        let d = x - y;
        let k = self.delta + self.p_a * d * d;
        [-(x - 1.0) * self.inv_eps_t - k * x, 1.0 - k * y]
    }

    /// Jacobian of [`Self::slow`].
    #[inline(always)]
    fn slow_jacobian(&self, x: f64, y: f64) -> [[f64; 2]; 2] {
        let d = x - y;
        let k = self.delta + self.p_a * d * d;
        let dk = 2.0 * self.p_a * d;
        [
            [-self.inv_eps_t - k - dk * x, dk * x],
            [-dk * y, -k + dk * y],
        ]
    }
}

/// Full five-dimensional eddy model.
#[derive(Debug, Clone, Copy)]
pub struct FullSystem {
    c: Coefficients,
}

impl FullSystem {
    pub fn new(p: &ModelParams) -> Self {
        Self {
            c: Coefficients::new(p),
        }
    }
}

impl Sde<5, 3> for FullSystem {
    #[inline(always)]
    fn drift(&self, u: &[f64; 5]) -> [f64; 5] {
        let [x, y, v, t, s] = *u;
        let c = &self.c;
        let [sx, sy] = c.slow(x, y);
        let two_p2_v = 2.0 * c.p2 * v;
        [
            sx + 4.0 * v * t,
            sy + 4.0 * v * s,
            -v * c.inv_eps,
            -(t + two_p2_v * x) * c.inv_eps,
            -(s + two_p2_v * y) * c.inv_eps,
        ]
    }

    #[inline(always)]
    fn jacobian(&self, u: &[f64; 5]) -> [[f64; 5]; 5] {
        let [x, y, v, t, s] = *u;
        let c = &self.c;
        let js = c.slow_jacobian(x, y);
        let a = 2.0 * c.p2 * c.inv_eps;
        [
            [js[0][0], js[0][1], 4.0 * t, 4.0 * v, 0.0],
            [js[1][0], js[1][1], 4.0 * s, 0.0, 4.0 * v],
            [0.0, 0.0, -c.inv_eps, 0.0, 0.0],
            [-a * v, 0.0, -a * x, -c.inv_eps, 0.0],
            [0.0, -a * v, -a * y, 0.0, -c.inv_eps],
        ]
    }

    /// Block elimination: the `v` row is diagonal and `T`, `S` couple only to
    /// `x`, `y`, `v`, which leaves a 2x2 system for `(dx, dy)`.
    #[inline(always)]
    fn newton_correction(&self, u: &[f64; 5], dt: f64, g: [f64; 5]) -> Option<[f64; 5]> {
        let [x, y, v, t, s] = *u;
        let c = &self.c;
        let js = c.slow_jacobian(x, y);
        let inv_d = 1.0 / (1.0 + dt * c.inv_eps);
        let dta = dt * 2.0 * c.p2 * c.inv_eps;
        let dv = g[2] * inv_d;
        let rt = (g[3] - dta * x * dv) * inv_d;
        let rs = (g[4] - dta * y * dv) * inv_d;
        let cross = dta * v * inv_d;
        let w = 4.0 * dt * v;
        let m00 = 1.0 - dt * js[0][0] + w * cross;
        let m01 = -dt * js[0][1];
        let m10 = -dt * js[1][0];
        let m11 = 1.0 - dt * js[1][1] + w * cross;
        let b0 = g[0] + 4.0 * dt * t * dv + w * rt;
        let b1 = g[1] + 4.0 * dt * s * dv + w * rs;
        let det = m00 * m11 - m01 * m10;
        if det == 0.0 || !det.is_finite() {
            return None;
        }
        let inv_det = 1.0 / det;
        let dx = (b0 * m11 - m01 * b1) * inv_det;
        let dy = (m00 * b1 - m10 * b0) * inv_det;
        Some([dx, dy, dv, rt - cross * dx, rs - cross * dy])
    }

    #[inline(always)]
    fn noise(&self, _u: &[f64; 5], dw: &[f64; 3]) -> [f64; 5] {
        let c = &self.c;
        [
            c.thermal * dw[0],
            c.sigma_y * dw[1],
            c.eddy_velocity * dw[2],
            0.0,
            0.0,
        ]
    }

    fn diffusion_matrix(&self, _u: &[f64; 5]) -> [[f64; 3]; 5] {
        let c = &self.c;
        [
            [c.thermal, 0.0, 0.0],
            [0.0, c.sigma_y, 0.0],
            [0.0, 0.0, c.eddy_velocity],
            [0.0; 3],
            [0.0; 3],
        ]
    }
}

/// Reduced drift shared by the averaged and Gaussian models.
#[inline(always)]
fn reduced_drift(c: &Coefficients, u: &[f64; 2]) -> [f64; 2] {
    let [x, y] = *u;
    let [sx, sy] = c.slow(x, y);
    let four_p2 = 4.0 * c.p2;
    [sx - four_p2 * x, sy - four_p2 * y]
}

#[inline(always)]
fn reduced_jacobian(c: &Coefficients, u: &[f64; 2]) -> [[f64; 2]; 2] {
    let mut j = c.slow_jacobian(u[0], u[1]);
    j[0][0] -= 4.0 * c.p2;
    j[1][1] -= 4.0 * c.p2;
    j
}

/// Averaged (deterministic-eddy) model with additive atmospheric noise only.
#[derive(Debug, Clone, Copy)]
pub struct AveragedSystem {
    c: Coefficients,
}

impl AveragedSystem {
    pub fn new(p: &ModelParams) -> Self {
        Self {
            c: Coefficients::new(p),
        }
    }
}

impl Sde<2, 2> for AveragedSystem {
    #[inline(always)]
    fn drift(&self, u: &[f64; 2]) -> [f64; 2] {
        reduced_drift(&self.c, u)
    }

    #[inline(always)]
    fn jacobian(&self, u: &[f64; 2]) -> [[f64; 2]; 2] {
        reduced_jacobian(&self.c, u)
    }

    #[inline(always)]
    fn noise(&self, _u: &[f64; 2], dw: &[f64; 2]) -> [f64; 2] {
        [self.c.thermal * dw[0], self.c.sigma_y * dw[1]]
    }

    fn diffusion_matrix(&self, _u: &[f64; 2]) -> [[f64; 2]; 2] {
        [[self.c.thermal, 0.0], [0.0, self.c.sigma_y]]
    }
}

/// Gaussian stochastic model: averaged drift plus one multiplicative eddy
/// channel shared by both equations (Ito interpretation).
#[derive(Debug, Clone, Copy)]
pub struct GaussianSystem {
    c: Coefficients,
}

impl GaussianSystem {
    pub fn new(p: &ModelParams) -> Self {
        Self {
            c: Coefficients::new(p),
        }
    }
}

impl Sde<2, 3> for GaussianSystem {
    #[inline(always)]
    fn drift(&self, u: &[f64; 2]) -> [f64; 2] {
        reduced_drift(&self.c, u)
    }

    #[inline(always)]
    fn jacobian(&self, u: &[f64; 2]) -> [[f64; 2]; 2] {
        reduced_jacobian(&self.c, u)
    }

    #[inline(always)]
    fn noise(&self, u: &[f64; 2], dw: &[f64; 3]) -> [f64; 2] {
        let c = &self.c;
        let g = c.eddy_gauss * dw[2];
        [c.thermal * dw[0] + g * u[0], c.sigma_y * dw[1] + g * u[1]]
    }

    fn diffusion_matrix(&self, u: &[f64; 2]) -> [[f64; 3]; 2] {
        let c = &self.c;
        [
            [c.thermal, 0.0, c.eddy_gauss * u[0]],
            [0.0, c.sigma_y, c.eddy_gauss * u[1]],
        ]
    }
}

fn to_dmatrix<const R: usize, const C: usize>(m: [[f64; C]; R]) -> DMatrix<f64> {
    DMatrix::from_fn(R, C, |i, j| m[i][j])
}

/// Deterministic drift `b(s)` of the chosen variant.
pub fn drift(variant: Variant, s: &State, p: &ModelParams) -> Result<State, ModelError> {
    s.check(variant)?;
    Ok(match (variant, s) {
        (Variant::Full, State::Full(u)) => State::Full(FullSystem::new(p).drift(u)),
        (Variant::Averaged, State::Reduced(u)) => State::Reduced(AveragedSystem::new(p).drift(u)),
        (Variant::Gaussian, State::Reduced(u)) => State::Reduced(GaussianSystem::new(p).drift(u)),
        _ => unreachable!("dimension checked"),
    })
}

/// Diffusion matrix `Σ(s)`: rows are state components, columns noise channels.
pub fn diffusion(variant: Variant, s: &State, p: &ModelParams) -> Result<DMatrix<f64>, ModelError> {
    s.check(variant)?;
    Ok(match (variant, s) {
        (Variant::Full, State::Full(u)) => to_dmatrix(FullSystem::new(p).diffusion_matrix(u)),
        (Variant::Averaged, State::Reduced(u)) => {
            to_dmatrix(AveragedSystem::new(p).diffusion_matrix(u))
        }
        (Variant::Gaussian, State::Reduced(u)) => {
            to_dmatrix(GaussianSystem::new(p).diffusion_matrix(u))
        }
        _ => unreachable!("dimension checked"),
    })
}

/// Analytic Jacobian of the drift.
pub fn jacobian(variant: Variant, s: &State, p: &ModelParams) -> Result<DMatrix<f64>, ModelError> {
    s.check(variant)?;
    Ok(match (variant, s) {
        (Variant::Full, State::Full(u)) => to_dmatrix(FullSystem::new(p).jacobian(u)),
        (Variant::Averaged, State::Reduced(u)) => to_dmatrix(AveragedSystem::new(p).jacobian(u)),
        (Variant::Gaussian, State::Reduced(u)) => to_dmatrix(GaussianSystem::new(p).jacobian(u)),
        _ => unreachable!("dimension checked"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn norm(s: &State) -> f64 {
        s.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    #[test]
    fn full_drift_at_origin() {
        let p = ModelParams::default();
        let b = drift(Variant::Full, &State::full(0.0, 0.0, 0.0, 0.0, 0.0), &p).unwrap();
        assert_eq!(b.as_slice(), &[400.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn averaged_near_equilibrium() {
        let p = ModelParams::default();
        let b = drift(Variant::Averaged, &State::reduced(0.974, 0.093), &p).unwrap();
        // Rounding of the quoted coordinates to three digits, amplified by 1/eps_T.
        assert!(b.x().abs() < 0.5 * 1e-3 * (1.0 / p.eps_t() + 12.0), "{b:?}");
        assert!(b.y().abs() < 0.5 * 1e-3 * 12.0, "{b:?}");
    }

    #[test]
    fn full_near_quoted_equilibrium() {
        let p = ModelParams::default();
        let b = drift(Variant::Full, &State::full(0.989, 0.22, 0.0, 0.0, 0.0), &p).unwrap();
        for v in b.as_slice() {
            assert!(v.abs() < 0.1 / p.eps_t(), "{b:?}");
        }
    }

    #[test]
    fn dimension_and_finiteness_checked() {
        let p = ModelParams::default();
        assert!(matches!(
            drift(Variant::Full, &State::reduced(1.0, 0.0), &p),
            Err(ModelError::DimensionMismatch { expected: 5, got: 2, .. })
        ));
        assert!(matches!(
            drift(Variant::Gaussian, &State::reduced(f64::NAN, 0.0), &p),
            Err(ModelError::NonFinite(_))
        ));
        assert!(State::from_slice(Variant::Averaged, &[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn gaussian_multiplicative_column() {
        let p = ModelParams::default();
        let m = diffusion(Variant::Gaussian, &State::reduced(1.0, 0.093), &p).unwrap();
        assert_eq!(m.shape(), (2, 3));
        assert!((m[(0, 2)] - 0.16).abs() < 0.005, "{}", m[(0, 2)]);
        assert!((m[(1, 2)] - 0.015).abs() < 0.0005, "{}", m[(1, 2)]);
        assert!((m[(0, 0)] - 0.1).abs() < 1e-12);
        assert_eq!(m[(0, 1)], 0.0);

        let q = ModelParams::bistable();
        let m = diffusion(Variant::Gaussian, &State::reduced(1.0, 0.5), &q).unwrap();
        assert!((m[(0, 2)] - 0.026).abs() < 0.0005, "{}", m[(0, 2)]);
    }

    #[test]
    fn full_noise_only_on_xyv() {
        let p = ModelParams::default();
        let m = diffusion(Variant::Full, &State::full(0.3, -1.0, 2.0, 0.5, 0.1), &p).unwrap();
        assert_eq!(m.shape(), (5, 3));
        for j in 0..3 {
            assert_eq!(m[(3, j)], 0.0);
            assert_eq!(m[(4, j)], 0.0);
            for i in 0..3 {
                assert_eq!(m[(i, j)] != 0.0, i == j);
            }
        }
        assert!((m[(2, 2)] - (2.0 / p.eps()).sqrt()).abs() < 1e-9);
    }

    #[test]
    fn averaged_diffusion_diagonal() {
        let p = ModelParams::default();
        let m = diffusion(Variant::Averaged, &State::reduced(0.9, 0.1), &p).unwrap();
        assert_eq!(m.shape(), (2, 2));
        assert_eq!(m[(0, 1)], 0.0);
        assert_eq!(m[(1, 0)], 0.0);
    }

    fn arb_params() -> impl Strategy<Value = ModelParams> {
        (1e-4..0.1f64, 1e-5..0.01f64, 0.0..10.0f64, 0.0..100.0f64, any::<bool>()).prop_map(
            |(eps_t, eps, p_a, p_e, md)| {
                ModelParams::builder()
                    .eps_t(eps_t)
                    .eps(eps)
                    .p_a(p_a)
                    .p_e(p_e)
                    .mean_diffusion(md)
                    .build()
                    .unwrap()
            },
        )
    }

    proptest! {
        #[test]
        fn averaged_equals_full_slice_plus_mean_flux(x in -3.0..3.0f64, y in -3.0..3.0f64, p in arb_params()) {
            let full = drift(Variant::Full, &State::full(x, y, 0.0, 0.0, 0.0), &p).unwrap();
            let avg = drift(Variant::Averaged, &State::reduced(x, y), &p).unwrap();
            let gau = drift(Variant::Gaussian, &State::reduced(x, y), &p).unwrap();
            let flux = crate::homogenization::mean_eddy_flux(x, y, &p);
            prop_assert_eq!(avg, gau);
            prop_assert!((full.x() + flux[0] - avg.x()).abs() <= 1e-12 * (1.0 + avg.x().abs() + full.x().abs()));
            prop_assert!((full.y() + flux[1] - avg.y()).abs() <= 1e-12 * (1.0 + avg.y().abs() + full.y().abs()));
        }

        #[test]
        fn jacobian_matches_central_differences(
            u in prop::array::uniform5(-2.0..2.0f64),
            variant in prop::sample::select(Variant::ALL.to_vec()),
            md in any::<bool>(),
        ) {
            let p = ModelParams::default().to_builder().mean_diffusion(md).build().unwrap();
            let s = State::from_slice(variant, &u[..variant.dim()]).unwrap();
            let j = jacobian(variant, &s, &p).unwrap();
            let n = variant.dim();
            for k in 0..n {
                let h = 1e-6 * (1.0 + u[k].abs());
                let mut plus = u;
                let mut minus = u;
                plus[k] += h;
                minus[k] -= h;
                let bp = drift(variant, &State::from_slice(variant, &plus[..n]).unwrap(), &p).unwrap();
                let bm = drift(variant, &State::from_slice(variant, &minus[..n]).unwrap(), &p).unwrap();
                for i in 0..n {
                    let fd = (bp.as_slice()[i] - bm.as_slice()[i]) / (2.0 * h);
                    let scale = j[(i, k)].abs().max(1.0);
                    prop_assert!((fd - j[(i, k)]).abs() <= 1e-6 * scale, "J[{},{}] = {} vs fd {}", i, k, j[(i, k)], fd);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn full_newton_correction_matches_dense_solve(
            u in proptest::array::uniform5(-3.0..3.0f64),
            g in proptest::array::uniform5(-1.0..1.0f64),
            dt in 1e-7..1e-4f64,
            p in arb_params(),
        ) {
            let sys = FullSystem::new(&p);
            let fast = sys.newton_correction(&u, dt, g).unwrap();
            let j = sys.jacobian(&u);
            let mut a = [[0.0; 5]; 5];
            for i in 0..5 {
                for k in 0..5 {
                    a[i][k] = -dt * j[i][k];
                }
                a[i][i] += 1.0;
            }
            let dense = crate::linalg::solve(a, g).unwrap();
            for i in 0..5 {
                prop_assert!((fast[i] - dense[i]).abs() <= 1e-12 * (1.0 + dense[i].abs()), "{:?} vs {:?}", fast, dense);
            }
        }
    }

    #[test]
    fn state_conversions() {
        let s = State::full(1.0, 2.0, 3.0, 4.0, 5.0);
        assert_eq!(s.for_variant(Variant::Averaged), State::reduced(1.0, 2.0));
        assert_eq!(s.for_variant(Variant::Full), s);
        assert_eq!(
            State::reduced(1.0, 2.0).for_variant(Variant::Full),
            State::full(1.0, 2.0, 0.0, 0.0, 0.0)
        );
        assert!(norm(&s) > 0.0);
    }
}

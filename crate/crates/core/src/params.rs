//! Nondimensional model parameters and the time-unit conversion used in reports.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParamError {
    #[error("parameter `{name}` must be {requirement}, got {value}")]
    OutOfRange {
        name: &'static str,
        requirement: &'static str,
        value: f64,
    },
}

/// All nondimensional parameters of the two-box model.
///
/// `p` is derived as `sqrt(eps) * p_e` and is recomputed whenever the
/// parameters are built or deserialized, so it can never drift out of sync.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawParams", into = "RawParams")]
pub struct ModelParams {
    eps_t: f64,
    eps: f64,
    p_a: f64,
    p_e: f64,
    p: f64,
    sigma_x: f64,
    sigma_y: f64,
    sigma_eps: f64,
    mean_diffusion: bool,
}

/// Serialized form of [`ModelParams`]; the derived `p` is echoed but ignored on input.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawParams {
    pub eps_t: f64,
    pub eps: f64,
    pub p_a: f64,
    pub p_e: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub sigma_eps: f64,
    pub mean_diffusion: bool,
}

impl TryFrom<RawParams> for ModelParams {
    type Error = ParamError;

    fn try_from(raw: RawParams) -> Result<Self, Self::Error> {
        ModelParams::builder()
            .eps_t(raw.eps_t)
            .eps(raw.eps)
            .p_a(raw.p_a)
            .p_e(raw.p_e)
            .sigma_x(raw.sigma_x)
            .sigma_y(raw.sigma_y)
            .sigma_eps(raw.sigma_eps)
            .mean_diffusion(raw.mean_diffusion)
            .build()
    }
}

impl From<ModelParams> for RawParams {
    fn from(p: ModelParams) -> Self {
        RawParams {
            eps_t: p.eps_t,
            eps: p.eps,
            p_a: p.p_a,
            p_e: p.p_e,
            p: Some(p.p),
            sigma_x: p.sigma_x,
            sigma_y: p.sigma_y,
            sigma_eps: p.sigma_eps,
            mean_diffusion: p.mean_diffusion,
        }
    }
}

impl Default for ModelParams {
    fn default() -> Self {
        Self::single_equilibrium()
    }
}

impl ModelParams {
    /// Eddy Péclet number of the bistable regime without mean diffusion.
    pub const BISTABLE_P_E: f64 = 32.0;

    /// The reference regime: eps_T = 1/400, eps = 1/5000, P_a = 6, P_e = 80,
    /// sigma_x = 0.005, sigma_y = 0.15, with mean diffusion.
    pub fn single_equilibrium() -> Self {
        ModelParamsBuilder::default()
            .build()
            .expect("reference parameters are valid")
    }

    /// Mean diffusion removed and P_e = 32 (P ≈ 0.45): three equilibria, two stable.
    pub fn bistable() -> Self {
        Self::builder()
            .p_e(Self::BISTABLE_P_E)
            .mean_diffusion(false)
            .build()
            .expect("bistable parameters are valid")
    }

    pub fn builder() -> ModelParamsBuilder {
        ModelParamsBuilder::default()
    }

    /// Starts a builder pre-filled with these parameters.
    pub fn to_builder(&self) -> ModelParamsBuilder {
        ModelParamsBuilder {
            eps_t: self.eps_t,
            eps: self.eps,
            p_a: self.p_a,
            p_e: self.p_e,
            sigma_x: self.sigma_x,
            sigma_y: self.sigma_y,
            sigma_eps: self.sigma_eps,
            mean_diffusion: self.mean_diffusion,
        }
    }

    /// Same parameters with `p_e` chosen so that `P` takes the given value.
    pub fn with_p(&self, p: f64) -> Result<Self, ParamError> {
        self.to_builder().p_e(p / self.eps.sqrt()).build()
    }

    pub fn eps_t(&self) -> f64 {
        self.eps_t
    }
    pub fn eps(&self) -> f64 {
        self.eps
    }
    pub fn p_a(&self) -> f64 {
        self.p_a
    }
    pub fn p_e(&self) -> f64 {
        self.p_e
    }
    /// Derived eddy coupling `sqrt(eps) * P_e`.
    pub fn p(&self) -> f64 {
        self.p
    }
    pub fn p2(&self) -> f64 {
        self.p * self.p
    }
    pub fn sigma_x(&self) -> f64 {
        self.sigma_x
    }
    pub fn sigma_y(&self) -> f64 {
        self.sigma_y
    }
    pub fn sigma_eps(&self) -> f64 {
        self.sigma_eps
    }
    pub fn mean_diffusion(&self) -> bool {
        self.mean_diffusion
    }

    /// Coefficient of the linear diffusive exchange: 1 with mean diffusion, 0 without.
    pub(crate) fn delta(&self) -> f64 {
        if self.mean_diffusion {
            1.0
        } else {
            0.0
        }
    }

    /// Amplitude `4 sqrt(5 eps) P^2` of the Gaussian model's multiplicative eddy noise per unit state.
    pub fn eddy_noise_coefficient(&self) -> f64 {
        4.0 * (5.0 * self.eps).sqrt() * self.p2()
    }

    /// Thermal noise amplitude `sigma_x / sqrt(eps_T)` as it enters the x equation.
    pub fn thermal_noise(&self) -> f64 {
        self.sigma_x / self.eps_t.sqrt()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ModelParamsBuilder {
    eps_t: f64,
    eps: f64,
    p_a: f64,
    p_e: f64,
    sigma_x: f64,
    sigma_y: f64,
    sigma_eps: f64,
    mean_diffusion: bool,
}

impl Default for ModelParamsBuilder {
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

macro_rules! setter {
    ($($name:ident),*) => {
        $(
            pub fn $name(mut self, value: f64) -> Self {
                self.$name = value;
                self
            }
        )*
    };
}

impl ModelParamsBuilder {
    setter!(eps_t, eps, p_a, p_e, sigma_x, sigma_y, sigma_eps);

    pub fn mean_diffusion(mut self, on: bool) -> Self {
        self.mean_diffusion = on;
        self
    }

    pub fn build(self) -> Result<ModelParams, ParamError> {
        positive("eps_t", self.eps_t)?;
        positive("eps", self.eps)?;
        non_negative("p_a", self.p_a)?;
        non_negative("p_e", self.p_e)?;
        non_negative("sigma_x", self.sigma_x)?;
        non_negative("sigma_y", self.sigma_y)?;
        non_negative("sigma_eps", self.sigma_eps)?;
        Ok(ModelParams {
            eps_t: self.eps_t,
            eps: self.eps,
            p_a: self.p_a,
            p_e: self.p_e,
            p: self.eps.sqrt() * self.p_e,
            sigma_x: self.sigma_x,
            sigma_y: self.sigma_y,
            sigma_eps: self.sigma_eps,
            mean_diffusion: self.mean_diffusion,
        })
    }
}

fn positive(name: &'static str, value: f64) -> Result<(), ParamError> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(ParamError::OutOfRange {
            name,
            requirement: "finite and > 0",
            value,
        })
    }
}

fn non_negative(name: &'static str, value: f64) -> Result<(), ParamError> {
    if value.is_finite() && value >= 0.0 {
        Ok(())
    } else {
        Err(ParamError::OutOfRange {
            name,
            requirement: "finite and >= 0",
            value,
        })
    }
}

/// Conversion between nondimensional time and years.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DimensionalScales {
    /// Diffusive time unit in years.
    pub tau_d_years: f64,
}

impl Default for DimensionalScales {
    fn default() -> Self {
        Self { tau_d_years: 219.0 }
    }
}

impl DimensionalScales {
    pub fn to_years(&self, t: f64) -> f64 {
        t * self.tau_d_years
    }

    pub fn from_years(&self, years: f64) -> f64 {
        years / self.tau_d_years
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_values() {
        let p = ModelParams::default();
        assert_eq!(p.eps_t(), 0.0025);
        assert_eq!(p.eps(), 0.0002);
        assert!((p.p2() - 1.28).abs() < 1e-12);
        assert_eq!(p.p(), p.eps().sqrt() * p.p_e());
        assert!((p.thermal_noise() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn bistable_p() {
        let p = ModelParams::bistable();
        assert!((p.p() - 0.4525).abs() < 1e-4);
        assert!(!p.mean_diffusion());
    }

    #[test]
    fn rejects_bad_values() {
        assert!(ModelParams::builder().eps(0.0).build().is_err());
        assert!(ModelParams::builder().sigma_y(-1.0).build().is_err());
        assert!(ModelParams::builder().p_a(f64::NAN).build().is_err());
    }

    #[test]
    fn serde_recomputes_p() {
        let p = ModelParams::bistable();
        let mut v = serde_json::to_value(p).unwrap();
        v["p"] = serde_json::json!(123.0);
        let back: ModelParams = serde_json::from_value(v).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn with_p_round_trip() {
        let p = ModelParams::default().with_p(0.117).unwrap();
        assert!((p.p() - 0.117).abs() < 1e-14);
    }

    #[test]
    fn years() {
        let s = DimensionalScales::default();
        assert!((s.to_years(0.10) - 21.9).abs() < 1e-12);
    }
}

//! Sampled check of the dissipativity inequality `<u, F(u)> <= alpha - beta ||u||^2`.
//!
//! The inner product weights the eddy variables so that the eddy exchange
//! terms cancel: `||u||^2 = x^2 + y^2 + eps v^2 + (2 eps / P^2)(T^2 + S^2)`.
//! Reduced variants use the plain `x^2 + y^2`. This is a falsification tool:
//! a nonnegative margin certifies the inequality only on the sampled points.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{self, State, Variant};
use crate::noise::{GaussianStream, StreamSeed};
use crate::params::ModelParams;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LyapunovError {
    #[error("alpha, beta and radius must be positive (alpha={alpha}, beta={beta}, radius={radius})")]
    NonPositive { alpha: f64, beta: f64, radius: f64 },
    #[error("the full-model norm needs P > 0")]
    ZeroCoupling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovReport {
    pub alpha: f64,
    pub beta: f64,
    pub radius: f64,
    pub n_samples: usize,
    /// Minimum of `alpha - beta ||u||^2 - <u, F(u)>` over the samples.
    pub min_margin: f64,
    pub argmin: State,
    /// Maximum of `<u, F(u)> + beta ||u||^2`; the smallest alpha that passes is this value.
    pub sup_excess: f64,
}

fn weights(variant: Variant, p: &ModelParams) -> Result<Vec<f64>, LyapunovError> {
    match variant {
        Variant::Full => {
            if p.p() <= 0.0 {
                return Err(LyapunovError::ZeroCoupling);
            }
            let w = 2.0 * p.eps() / p.p2();
            Ok(vec![1.0, 1.0, p.eps(), w, w])
        }
        _ => Ok(vec![1.0, 1.0]),
    }
}

/// `<u, F(u)> + beta ||u||^2` in the weighted inner product.
pub fn excess(variant: Variant, p: &ModelParams, beta: f64, u: &State) -> f64 {
    let w = weights(variant, p).expect("valid weights");
    let f = model::drift(variant, u, p).expect("valid state");
    u.as_slice()
        .iter()
        .zip(f.as_slice())
        .zip(&w)
        .map(|((ui, fi), wi)| wi * ui * (fi + beta * ui))
        .sum()
}

/// Samples `n_samples` points with radius uniform in `[0, radius]` and
/// direction uniform on the unit sphere of the weighted norm. The origin is
/// always included as the first sample.
pub fn lyapunov_certificate(
    p: &ModelParams,
    variant: Variant,
    alpha: f64,
    beta: f64,
    radius: f64,
    n_samples: usize,
    seed: StreamSeed,
) -> Result<LyapunovReport, LyapunovError> {
    if !(alpha > 0.0 && beta > 0.0 && radius > 0.0) {
        return Err(LyapunovError::NonPositive { alpha, beta, radius });
    }
    let w = weights(variant, p)?;
    let dim = variant.dim();
    let mut rng = GaussianStream::new(seed);

    let origin = State::at(variant, 0.0, 0.0);
    let mut sup_excess = excess(variant, p, beta, &origin);
    let mut argmin = origin;
    let mut u = vec![0.0; dim];
    for _ in 1..n_samples.max(1) {
        let mut norm2 = 0.0;
        for v in u.iter_mut() {
            *v = rng.standard_normal();
            norm2 += *v * *v;
        }
        let r = radius * rng.uniform() / norm2.sqrt();
        for (v, wi) in u.iter_mut().zip(&w) {
            *v *= r / wi.sqrt();
        }
        let s = State::from_slice(variant, &u).expect("finite sample");
        let e = excess(variant, p, beta, &s);
        if e > sup_excess {
            sup_excess = e;
            argmin = s;
        }
    }
    Ok(LyapunovReport {
        alpha,
        beta,
        radius,
        n_samples: n_samples.max(1),
        min_margin: alpha - sup_excess,
        argmin,
        sup_excess,
    })
}

/// The largest `beta` the eddy and along-diagonal terms allow, `min(1/eps, eps_T/2)`.
pub fn beta_ceiling(p: &ModelParams) -> f64 {
    (1.0 / p.eps()).min(p.eps_t() / 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origin_margin_is_alpha() {
        let p = ModelParams::default();
        let r = lyapunov_certificate(&p, Variant::Full, 3.0, 1e-4, 1.0, 1, StreamSeed::new(0)).unwrap();
        // F(0) is finite but <0, F(0)> = 0.
        assert_eq!(r.min_margin, 3.0);
        assert_eq!(r.argmin, State::full(0.0, 0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn eddy_cross_terms_cancel() {
        let p = ModelParams::default();
        // Pure eddy direction: <u, F> = -v^2 - (2/P^2)(T^2 + S^2).
        let u = State::full(0.0, 0.0, 2.0, 1.0, -3.0);
        let e = excess(Variant::Full, &p, 0.0, &u);
        let expected = -4.0 - 2.0 / p.p2() * 10.0;
        assert!((e - expected).abs() < 1e-9 * expected.abs());
    }

    #[test]
    fn rejects_nonpositive() {
        let p = ModelParams::default();
        assert!(lyapunov_certificate(&p, Variant::Full, 0.0, 1.0, 1.0, 10, StreamSeed::new(0)).is_err());
        let q = p.to_builder().p_e(0.0).build().unwrap();
        assert_eq!(
            lyapunov_certificate(&q, Variant::Full, 1.0, 1.0, 1.0, 10, StreamSeed::new(0)),
            Err(LyapunovError::ZeroCoupling)
        );
    }
}

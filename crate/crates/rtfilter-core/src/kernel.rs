//! Closed-form propagated variances and the directional precision kernel.
//!
//! Everything here is a scalar function of the SDE parameters and a time
//! lag: the accumulated variance factor `phi`, the propagated radial and
//! tangential variances, the residual variances with query-side noise, the
//! magnitude-scaled directional precision, the whitened angular distance,
//! and the robust reweighting applied on top of it.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::RtSdeParams;
use crate::spectral::{re_dot, ComplexVec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("{name} must be nonnegative, got {value}")]
    NegativeInput { name: &'static str, value: f64 },
    #[error("hyperparameter {name} out of range: {value}")]
    BadHyperParam { name: &'static str, value: f64 },
}

/// Estimator constants shared by the filter and attention layers.
///
/// `gamma_r` on the SDE side is stored and exposed but never enters the
/// directional precision; only tangential query noise perturbs directions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterHyperParams {
    /// Angular variance floor (rad^2), keeps precision bounded.
    pub tau_theta2: f64,
    /// Magnitude stabilizer (state^2) guarding the zero-magnitude path.
    pub eps: f64,
    /// Robustness degrees of freedom of the reweighting kernel.
    pub nu: f64,
    /// Robust exponent; `(nu + D) / D` with `D = 2d` mirrors the isotropic
    /// choice and is the default.
    pub kappa_exp: f64,
    /// Softmax inverse temperature. Multiplies the full logit, so values
    /// other than 1 also temper the precision prior.
    pub beta_s: f64,
    /// Update scale of the residual step.
    pub step_r: f64,
}

impl FilterHyperParams {
    pub fn new(
        tau_theta2: f64,
        eps: f64,
        nu: f64,
        kappa_exp: f64,
        beta_s: f64,
        step_r: f64,
    ) -> Result<Self, KernelError> {
        let check = |name: &'static str, value: f64, ok: bool| {
            if ok {
                Ok(())
            } else {
                Err(KernelError::BadHyperParam { name, value })
            }
        };
        check("tau_theta2", tau_theta2, tau_theta2 > 0.0)?;
        check("eps", eps, eps >= 0.0 && eps.is_finite())?;
        check("nu", nu, nu > 0.0)?;
        check("kappa_exp", kappa_exp, kappa_exp > 0.0)?;
        check("beta_s", beta_s, beta_s > 0.0)?;
        check("step_r", step_r, step_r >= 0.0)?;
        Ok(Self {
            tau_theta2,
            eps,
            nu,
            kappa_exp,
            beta_s,
            step_r,
        })
    }

    /// Defaults for a `dim_complex`-dimensional eigenbasis:
    /// `tau_theta2 = 1e-2`, `eps = 1e-6`, `nu = 2`,
    /// `kappa_exp = (nu + D)/D` with `D = 2d`, `beta_s = 1`,
    /// `step_r = 0.1 sqrt(D)`.
    pub fn defaults(dim_complex: usize) -> Self {
        let d_real = (2 * dim_complex) as f64;
        let nu = 2.0;
        Self {
            tau_theta2: 1e-2,
            eps: 1e-6,
            nu,
            kappa_exp: (nu + d_real) / d_real,
            beta_s: 1.0,
            step_r: 0.1 * d_real.sqrt(),
        }
    }
}

/// Series switch-over: below this value of `2 mu dt` the closed form
/// `(1 - e^{-2 mu dt}) / (2 mu)` cancels catastrophically.
const PHI_SERIES_THRESHOLD: f64 = 1e-6;

/// Accumulated variance factor `(1 - e^{-2 mu dt}) / (2 mu)`, continued as
/// `dt` at `mu = 0`.
pub fn phi(mu: f64, dt: f64) -> Result<f64, KernelError> {
    if mu < 0.0 {
        return Err(KernelError::NegativeInput {
            name: "mu",
            value: mu,
        });
    }
    if dt < 0.0 {
        return Err(KernelError::NegativeInput {
            name: "dt",
            value: dt,
        });
    }
    let x = 2.0 * mu * dt;
    if x < PHI_SERIES_THRESHOLD {
        // dt (1 - mu dt + (2/3)(mu dt)^2), keeps the branch continuous.
        let m = mu * dt;
        Ok(dt * (1.0 - m + 2.0 / 3.0 * m * m))
    } else {
        Ok((1.0 - (-x).exp()) / (2.0 * mu))
    }
}

/// Propagated radial and tangential variances of a measurement transported
/// across a lag `dt`:
/// `sigma_v{r,t}^2 = phi(mu_{r,t}, dt) sigma_{r,t}^2 + e^{-2 mu_{r,t} dt} eta_{r,t}^2`.
pub fn sigma_v2(params: &RtSdeParams, dt: f64) -> Result<(f64, f64), KernelError> {
    if dt < 0.0 {
        return Err(KernelError::NegativeInput {
            name: "dt",
            value: dt,
        });
    }
    let vr = phi(params.mu_r, dt)? * params.sigma_r * params.sigma_r
        + (-2.0 * params.mu_r * dt).exp() * params.eta_r * params.eta_r;
    let vt = phi(params.mu_t, dt)? * params.sigma_t * params.sigma_t
        + (-2.0 * params.mu_t * dt).exp() * params.eta_t * params.eta_t;
    Ok((vr, vt))
}

/// Residual variances including query-side noise:
/// `sigma_S{r,t}^2 = sigma_V{r,t}^2 + gamma_{r,t}^2`.
pub fn residual_sigma2(params: &RtSdeParams, dt: f64) -> Result<(f64, f64), KernelError> {
    let (vr, vt) = sigma_v2(params, dt)?;
    Ok((
        vr + params.gamma_r * params.gamma_r,
        vt + params.gamma_t * params.gamma_t,
    ))
}

/// Deterministic magnitude transport `m_j e^{-mu_r dt}`.
pub fn transported_magnitude(m_j: f64, mu_r: f64, dt: f64) -> Result<f64, KernelError> {
    if m_j < 0.0 {
        return Err(KernelError::NegativeInput {
            name: "m_j",
            value: m_j,
        });
    }
    if mu_r < 0.0 {
        return Err(KernelError::NegativeInput {
            name: "mu_r",
            value: mu_r,
        });
    }
    if dt < 0.0 {
        return Err(KernelError::NegativeInput {
            name: "dt",
            value: dt,
        });
    }
    Ok(m_j * (-mu_r * dt).exp())
}

/// Directional precision of a transported key against a query:
///
/// `kappa = [ sigma_St^2(0)/(m_i^2 + eps) + sigma_St^2(dt)/(m_hat^2 + eps) + tau_theta^2 ]^-1`
///
/// with `m_hat = m_j e^{-mu_r dt}`. Strictly positive and bounded above by
/// `1/tau_theta^2`; the floor and `eps` keep it finite on degenerate tokens.
pub fn directional_precision(
    hp: &FilterHyperParams,
    params: &RtSdeParams,
    m_i: f64,
    m_j: f64,
    dt: f64,
) -> Result<f64, KernelError> {
    if m_i < 0.0 {
        return Err(KernelError::NegativeInput {
            name: "m_i",
            value: m_i,
        });
    }
    let (_, st0) = residual_sigma2(params, 0.0)?;
    let (_, st) = residual_sigma2(params, dt)?;
    let m_hat = transported_magnitude(m_j, params.mu_r, dt)?;
    let total = st0 / (m_i * m_i + hp.eps) + st / (m_hat * m_hat + hp.eps) + hp.tau_theta2;
    Ok(1.0 / total)
}

/// Whitened squared angular distance `2 kappa (1 - Re(u_i† u_hat))`.
pub fn angular_distance2(
    kappa: f64,
    u_i: &ComplexVec,
    u_hat: &ComplexVec,
) -> Result<f64, KernelError> {
    for (name, u) in [("u_i", u_i), ("u_hat", u_hat)] {
        let norm = u.norm();
        if (norm - 1.0).abs() > crate::spectral::UNIT_TOL {
            return Err(KernelError::BadHyperParam { name, value: norm });
        }
    }
    Ok((2.0 * kappa * (1.0 - re_dot(u_i, u_hat))).max(0.0))
}

/// Student-t style robust weight `(1 + d^2/nu)^{-kappa_exp}`, in `(0, 1]`.
pub fn robust_weight(hp: &FilterHyperParams, d2: f64) -> Result<f64, KernelError> {
    if d2 < 0.0 {
        return Err(KernelError::NegativeInput {
            name: "d2",
            value: d2,
        });
    }
    Ok((-hp.kappa_exp * (d2 / hp.nu).ln_1p()).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{normalize, RotationFreqs};
    use proptest::prelude::*;

    fn params(
        mu_r: f64,
        mu_t: f64,
        sigma_r: f64,
        sigma_t: f64,
        eta_r: f64,
        eta_t: f64,
        gamma_r: f64,
        gamma_t: f64,
    ) -> RtSdeParams {
        RtSdeParams::new(
            mu_r,
            mu_t,
            sigma_r,
            sigma_t,
            eta_r,
            eta_t,
            gamma_r,
            gamma_t,
            RotationFreqs::zero(2),
        )
        .unwrap()
    }

    fn hp() -> FilterHyperParams {
        FilterHyperParams::new(1e-2, 1e-6, 2.0, 1.5, 1.0, 0.1).unwrap()
    }

    #[test]
    fn phi_zero_decay_equals_lag() {
        assert_eq!(phi(0.0, 2.0).unwrap(), 2.0);
        assert_eq!(phi(0.7, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn phi_matches_quadrature_oracle() {
        // Simpson quadrature of the defining integral of e^{-2 mu tau}.
        let (mu, dt) = (0.5, 1.0);
        let n = 2000;
        let h = dt / n as f64;
        let f = |tau: f64| (-2.0 * mu * tau).exp();
        let mut acc = f(0.0) + f(dt);
        for k in 1..n {
            let w = if k % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * f(k as f64 * h);
        }
        let oracle = acc * h / 3.0;
        let got = phi(mu, dt).unwrap();
        assert!((got - oracle).abs() < 1e-12);
        assert!((got - 0.632_120_558_828_557_7).abs() < 1e-12);
    }

    #[test]
    fn phi_rejects_negative_inputs() {
        assert!(phi(-1.0, 1.0).is_err());
        assert!(phi(1.0, -1.0).is_err());
    }

    #[test]
    fn phi_series_branch_is_continuous() {
        for k in 0..=100 {
            let dt = k as f64;
            let got = phi(1e-10, dt).unwrap();
            assert!((got - dt).abs() <= 1e-8 * dt + f64::EPSILON);
        }
        // Straddle the threshold and require smoothness across it.
        let mu = 1.0;
        let below = phi(mu, 4.9e-7).unwrap();
        let above = phi(mu, 5.1e-7).unwrap();
        assert!((above - below - 0.2e-7).abs() < 1e-13);
    }

    #[test]
    fn sigma_v2_lag_zero_is_measurement_noise() {
        let p = params(0.3, 0.8, 0.1, 0.2, 0.05, 0.07, 0.0, 0.0);
        let (vr, vt) = sigma_v2(&p, 0.0).unwrap();
        assert_eq!(vr, 0.05 * 0.05);
        assert_eq!(vt, 0.07 * 0.07);
    }

    #[test]
    fn sigma_v2_stationary_limit() {
        let p = params(0.0, 0.4, 0.0, 0.3, 0.0, 0.1, 0.0, 0.0);
        let (_, vt) = sigma_v2(&p, 50.0 / 0.4).unwrap();
        assert!((vt - 0.3 * 0.3 / (2.0 * 0.4)).abs() < 1e-9);
    }

    #[test]
    fn residual_adds_query_noise_exactly() {
        let p = params(0.2, 0.1, 0.1, 0.2, 0.03, 0.04, 0.05, 0.06);
        for dt in [0.0, 0.5, 3.0] {
            let (vr, vt) = sigma_v2(&p, dt).unwrap();
            let (sr, st) = residual_sigma2(&p, dt).unwrap();
            // Additive to the last bit of the sum's rounding.
            assert!((sr - vr - 0.05 * 0.05).abs() <= f64::EPSILON * sr);
            assert!((st - vt - 0.06 * 0.06).abs() <= f64::EPSILON * st);
        }
        // At zero lag the tangential residual variance is eta_t^2 + gamma_t^2.
        let (_, st0) = residual_sigma2(&p, 0.0).unwrap();
        assert!((st0 - (0.04 * 0.04 + 0.06 * 0.06)).abs() < 1e-15);
    }

    #[test]
    fn transported_magnitude_cases() {
        assert_eq!(transported_magnitude(1.3, 0.7, 0.0).unwrap(), 1.3);
        assert_eq!(transported_magnitude(1.3, 0.0, 9.0).unwrap(), 1.3);
        let m = transported_magnitude(2.0, 1.0, std::f64::consts::LN_2).unwrap();
        assert!((m - 1.0).abs() < 1e-15);
    }

    #[test]
    fn precision_flat_prior_when_noise_free() {
        let p = params(0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        let h = hp();
        for (mi, mj, dt) in [(1.0, 1.0, 0.0), (0.2, 3.0, 2.0), (0.0, 0.0, 1.0)] {
            let k = directional_precision(&h, &p, mi, mj, dt).unwrap();
            assert!((k - 1.0 / h.tau_theta2).abs() < 1e-12);
        }
    }

    #[test]
    fn precision_degenerate_magnitude_uses_eps() {
        let p = params(0.0, 0.0, 0.0, 0.0, 0.1, 0.2, 0.0, 0.05);
        let h = hp();
        let dt = 1.5;
        let (_, st0) = residual_sigma2(&p, 0.0).unwrap();
        let (_, st) = residual_sigma2(&p, dt).unwrap();
        let expect = 1.0 / (st0 / h.eps + st / h.eps + h.tau_theta2);
        let got = directional_precision(&h, &p, 0.0, 0.0, dt).unwrap();
        assert!((got - expect).abs() <= 1e-15 * expect.abs().max(1.0));
    }

    #[test]
    fn precision_grows_with_magnitude() {
        let p = params(0.1, 0.2, 0.1, 0.3, 0.05, 0.1, 0.0, 0.02);
        let h = hp();
        for dt in [0.0, 0.5, 2.0] {
            for m in [0.25, 0.5, 1.0, 2.0, 4.0] {
                let low = directional_precision(&h, &p, m, m, dt).unwrap();
                let high = directional_precision(&h, &p, 2.0 * m, 2.0 * m, dt).unwrap();
                assert!(high > low, "kappa not increasing at m={m}, dt={dt}");
            }
        }
    }

    #[test]
    fn angular_distance_cases() {
        let e0 = ComplexVec::basis(2, 0);
        let e2 = ComplexVec::basis(2, 2);
        assert_eq!(angular_distance2(3.0, &e0, &e0).unwrap(), 0.0);
        assert_eq!(angular_distance2(1.0, &e0, &e2).unwrap(), 2.0);

        // Small-angle identity: d^2 ~ kappa theta^2 within 1%.
        let theta: f64 = 0.01;
        let pair = ComplexVec::from_interleaved(vec![theta.cos(), 0.0, theta.sin(), 0.0]).unwrap();
        let d2 = angular_distance2(4.0, &e0, &pair).unwrap();
        let expect = 4.0 * theta * theta;
        assert!((d2 - expect).abs() < 0.01 * expect);
    }

    #[test]
    fn robust_weight_cases() {
        let h = hp();
        assert_eq!(robust_weight(&h, 0.0).unwrap(), 1.0);
        let half = FilterHyperParams::new(1e-2, 1e-6, 2.0, 1.0, 1.0, 0.1).unwrap();
        assert!((robust_weight(&half, 2.0).unwrap() - 0.5).abs() < 1e-15);

        // nu = 2, kappa_exp = 1.5, d2 = 4 -> 3^{-1.5}; cross-checked against
        // a direct power-domain evaluation.
        let w = robust_weight(&h, 4.0).unwrap();
        assert!((w - 0.192_450_089_729_875_3).abs() < 1e-15);
        let direct = (1.0f64 + 4.0 / 2.0).powf(-1.5);
        assert!((w - direct).abs() < 1e-15);
    }

    #[test]
    fn hyper_params_validation() {
        assert!(FilterHyperParams::new(0.0, 1e-6, 2.0, 1.0, 1.0, 0.1).is_err());
        assert!(FilterHyperParams::new(1e-2, -1.0, 2.0, 1.0, 1.0, 0.1).is_err());
        assert!(FilterHyperParams::new(1e-2, 0.0, 0.0, 1.0, 1.0, 0.1).is_err());
        assert!(FilterHyperParams::new(1e-2, 0.0, 2.0, 1.0, 0.0, 0.1).is_err());
        assert!(FilterHyperParams::new(1e-2, 0.0, 2.0, 1.0, 1.0, -0.1).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(500))]

        #[test]
        fn precision_bounded_by_floor(
            mi in 0.0f64..10.0,
            mj in 0.0f64..10.0,
            dt in 0.0f64..20.0,
            s in 0.0f64..1.0,
        ) {
            let p = params(0.3, 0.1, s, 2.0 * s, 0.1, 0.05, 0.0, 0.02);
            let h = hp();
            let k = directional_precision(&h, &p, mi, mj, dt).unwrap();
            prop_assert!(k > 0.0);
            prop_assert!(k <= 1.0 / h.tau_theta2 + 1e-12);
        }

        #[test]
        fn precision_nonincreasing_in_lag_with_radial_decay(
            m in 0.1f64..5.0,
            steps in 1usize..40,
        ) {
            // mu_r > 0, mu_t = 0: transported magnitude shrinks and the
            // tangential variance grows, so kappa cannot increase.
            let p = params(0.8, 0.0, 0.0, 0.2, 0.0, 0.1, 0.0, 0.0);
            let h = hp();
            let mut prev = f64::INFINITY;
            for k in 0..=steps {
                let dt = k as f64 * 0.25;
                let kappa = directional_precision(&h, &p, m, m, dt).unwrap();
                prop_assert!(kappa <= prev + 1e-15);
                prev = kappa;
            }
        }

        #[test]
        fn distance_symmetry(seed in 0u64..u64::MAX) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let a = normalize(&crate::sim::test_support::random_vec(&mut rng, 3), 1e-300);
            let b = normalize(&crate::sim::test_support::random_vec(&mut rng, 3), 1e-300);
            let d_ab = angular_distance2(2.5, &a, &b).unwrap();
            let d_ba = angular_distance2(2.5, &b, &a).unwrap();
            prop_assert!((d_ab - d_ba).abs() < 1e-12);
        }

        #[test]
        fn robust_weight_monotone(d2a in 0.0f64..50.0, d2b in 0.0f64..50.0) {
            let h = hp();
            let (lo, hi) = if d2a <= d2b { (d2a, d2b) } else { (d2b, d2a) };
            let w_lo = robust_weight(&h, lo).unwrap();
            let w_hi = robust_weight(&h, hi).unwrap();
            prop_assert!(w_hi <= w_lo + 1e-15);
            prop_assert!(w_lo <= 1.0 && w_hi > 0.0);
        }
    }
}

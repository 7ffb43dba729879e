//! Single-query directional filtering on the unit sphere of the eigenbasis.
//!
//! Evidence directions are transported to the query frame, combined by a
//! precision-weighted convex combination whose norm measures how
//! concentrated the evidence is, and applied to the state either through a
//! tangent-space residual step followed by retraction or through the plain
//! additive baseline. Slerp along the great circle is kept as the exact
//! geodesic reference the first-order updates approximate.

use thiserror::Error;

use crate::kernel::{
    angular_distance2, directional_precision, robust_weight, FilterHyperParams, KernelError,
};
use crate::sim::RtSdeParams;
use crate::spectral::{normalize, re_dot, rotate, ComplexVec, RotationFreqs, UNIT_TOL};

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("evidence must contain at least one direction")]
    EmptyEvidence,
    #[error("evidence lists have mismatched lengths")]
    MismatchedLengths,
    #[error("precision at index {index} must be positive, got {value}")]
    NonPositivePrecision { index: usize, value: f64 },
    #[error("direction at index {index} is not unit norm (got {norm})")]
    NonUnitDirection { index: usize, norm: f64 },
    #[error("degenerate consensus: resultant norm {norm} below {eps}")]
    DegenerateConsensus { norm: f64, eps: f64 },
    #[error("slerp endpoints are antipodal")]
    AntipodalSlerp,
    #[error("state must have positive norm")]
    ZeroState,
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

/// Resultant norms below this are treated as an antipodal deadlock.
pub const CONSENSUS_EPS: f64 = 1e-12;

/// Transported unit directions with their precisions and optional robust
/// weights.
#[derive(Debug, Clone)]
pub struct DirectionalEvidence {
    directions: Vec<ComplexVec>,
    precisions: Vec<f64>,
    weights: Option<Vec<f64>>,
}

impl DirectionalEvidence {
    pub fn new(
        directions: Vec<ComplexVec>,
        precisions: Vec<f64>,
        weights: Option<Vec<f64>>,
    ) -> Result<Self, FilterError> {
        if directions.is_empty() {
            return Err(FilterError::EmptyEvidence);
        }
        if directions.len() != precisions.len()
            || weights.as_ref().is_some_and(|w| w.len() != directions.len())
        {
            return Err(FilterError::MismatchedLengths);
        }
        for (index, u) in directions.iter().enumerate() {
            let norm = u.norm();
            if (norm - 1.0).abs() > UNIT_TOL {
                return Err(FilterError::NonUnitDirection { index, norm });
            }
        }
        for (index, &k) in precisions.iter().enumerate() {
            if !(k > 0.0) {
                return Err(FilterError::NonPositivePrecision { index, value: k });
            }
        }
        Ok(Self {
            directions,
            precisions,
            weights,
        })
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    pub fn directions(&self) -> &[ComplexVec] {
        &self.directions
    }

    /// Effective precisions `w * kappa` (or `kappa` when unweighted).
    pub fn effective_precisions(&self) -> Vec<f64> {
        match &self.weights {
            Some(w) => self
                .precisions
                .iter()
                .zip(w)
                .map(|(k, w)| k * w)
                .collect(),
            None => self.precisions.clone(),
        }
    }
}

/// Transports a direction across a lag under the rotational dynamics.
pub fn transport_direction(u_j: &ComplexVec, freqs: &RotationFreqs, dt: f64) -> ComplexVec {
    rotate(u_j, freqs, dt)
}

/// Precision-weighted convex combination of the evidence directions. Its
/// norm is the resultant length: 1 when all evidence agrees, 0 under exact
/// antipodal cancellation.
pub fn consensus(ev: &DirectionalEvidence) -> Result<ComplexVec, FilterError> {
    if ev.is_empty() {
        return Err(FilterError::EmptyEvidence);
    }
    let kappa = ev.effective_precisions();
    let total: f64 = kappa.iter().sum();
    let mut out = ComplexVec::zeros(ev.directions[0].dim_complex());
    for (u, k) in ev.directions.iter().zip(&kappa) {
        out.axpy(k / total, u);
    }
    Ok(out)
}

/// Exact maximizer of the precision-weighted cosine objective: the
/// normalized consensus. Errors on an antipodal deadlock rather than
/// breaking the tie.
pub fn directional_mle(ev: &DirectionalEvidence) -> Result<ComplexVec, FilterError> {
    let resultant = consensus(ev)?;
    let norm = resultant.norm();
    if norm <= CONSENSUS_EPS {
        return Err(FilterError::DegenerateConsensus {
            norm,
            eps: CONSENSUS_EPS,
        });
    }
    Ok(normalize(&resultant, 0.0))
}

/// Removes the component of `v` parallel to `z` in the real inner product.
fn tangent_component(z: &ComplexVec, v: &ComplexVec) -> ComplexVec {
    let scale = re_dot(z, v) / z.norm_sq();
    let mut out = v.clone();
    out.axpy(-scale, z);
    out
}

/// Tangent-space residual update `z + step_r * (u_bar - <z,u_bar> z / |z|^2)`.
/// The increment is orthogonal to the state, so it changes direction without
/// reinforcing magnitude.
pub fn tangent_project_update(
    z_s: &ComplexVec,
    u_bar: &ComplexVec,
    step_r: f64,
) -> Result<ComplexVec, FilterError> {
    if z_s.norm() == 0.0 {
        return Err(FilterError::ZeroState);
    }
    let mut out = z_s.clone();
    out.axpy(step_r, &tangent_component(z_s, u_bar));
    Ok(out)
}

/// Unprojected baseline `z + step_r * u_bar`.
pub fn additive_update(z_s: &ComplexVec, u_bar: &ComplexVec, step_r: f64) -> ComplexVec {
    let mut out = z_s.clone();
    out.axpy(step_r, u_bar);
    out
}

/// Great-circle interpolation by the fraction `alpha` of the angle between
/// `u` and `u_star` on the real sphere. Errors on antipodal endpoints where
/// the great circle is not unique.
pub fn slerp_update(
    u: &ComplexVec,
    u_star: &ComplexVec,
    alpha: f64,
) -> Result<ComplexVec, FilterError> {
    let cos = re_dot(u, u_star).clamp(-1.0, 1.0);
    if cos < -1.0 + 1e-10 {
        return Err(FilterError::AntipodalSlerp);
    }
    let theta = cos.acos();
    if theta < 1e-9 {
        // Endpoints coincide to working precision; nlerp is exact here.
        let mut out = u.scaled(1.0 - alpha);
        out.axpy(alpha, u_star);
        return Ok(normalize(&out, 0.0));
    }
    let sin = theta.sin();
    let mut out = u.scaled(((1.0 - alpha) * theta).sin() / sin);
    out.axpy((alpha * theta).sin() / sin, u_star);
    Ok(out)
}

/// Magnitude after an additive step: `|m u + step_r u_bar|`.
pub fn magnitude_update(m: f64, u: &ComplexVec, u_bar: &ComplexVec, step_r: f64) -> f64 {
    let mut v = u.scaled(m);
    v.axpy(step_r, u_bar);
    v.norm()
}

/// Directional negative log-likelihood `sum_j k_j (1 - Re<u, u_hat_j>)`,
/// using effective precisions when robust weights are present.
pub fn directional_nll(u: &ComplexVec, ev: &DirectionalEvidence) -> f64 {
    ev.directions
        .iter()
        .zip(ev.effective_precisions())
        .map(|(u_hat, k)| k * (1.0 - re_dot(u, u_hat)))
        .sum()
}

/// One full filter iteration for a single query: transport the keys,
/// rebuild precisions and robust weights from the current state, form the
/// consensus, and take the tangent residual step. Robust weights are
/// computed once against the current direction, not iterated to
/// convergence; stacking calls of this function is the iterative view.
pub fn irls_step(
    z_s: &ComplexVec,
    keys: &[(ComplexVec, f64)],
    t_i: f64,
    params: &RtSdeParams,
    hp: &FilterHyperParams,
) -> Result<ComplexVec, FilterError> {
    if keys.is_empty() {
        return Err(FilterError::EmptyEvidence);
    }
    let m_i = z_s.norm();
    if m_i == 0.0 {
        return Err(FilterError::ZeroState);
    }
    let u_i = normalize(z_s, 0.0);

    let mut directions = Vec::with_capacity(keys.len());
    let mut precisions = Vec::with_capacity(keys.len());
    let mut weights = Vec::with_capacity(keys.len());
    for (key, t_j) in keys {
        let dt = t_i - t_j;
        let m_j = key.norm();
        let u_hat = transport_direction(&normalize(key, 0.0), &params.freqs, dt);
        let kappa = directional_precision(hp, params, m_i, m_j, dt)?;
        let d2 = angular_distance2(kappa, &u_i, &u_hat)?;
        weights.push(robust_weight(hp, d2)?);
        directions.push(u_hat);
        precisions.push(kappa);
    }
    let ev = DirectionalEvidence::new(directions, precisions, Some(weights))?;
    let u_bar = consensus(&ev)?;
    tangent_project_update(z_s, &u_bar, hp.step_r)
}

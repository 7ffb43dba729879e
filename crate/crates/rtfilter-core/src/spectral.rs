//! Complex-paired vector algebra in the eigenbasis.
//!
//! Vectors hold `d` complex coordinates as `2d` interleaved reals
//! `(re_0, im_0, re_1, im_1, ...)`, so a rotation by `e^{i w t}` is a
//! contiguous 2x2 sine–cosine operation per coordinate. The Hermitian inner
//! product conjugates its first argument.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance for accepting a projector axis as unit norm.
pub const UNIT_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectralError {
    #[error("dimension mismatch: expected {expected} complex coordinates, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("interleaved data length must be even, got {len}")]
    OddLength { len: usize },
    #[error("direction must be unit norm within {tol:e}, got norm {norm}")]
    NonUnitDirection { norm: f64, tol: f64 },
    #[error("variance must be strictly positive, got {value}")]
    NonPositiveVariance { value: f64 },
    #[error("rotation frequency at index {index} is not finite")]
    NonFiniteFrequency { index: usize },
}

/// A vector of `d` complex coordinates stored as `2d` interleaved reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexVec {
    data: Vec<f64>,
}

impl ComplexVec {
    /// Wraps interleaved `(re, im)` data; the length must be even.
    pub fn from_interleaved(data: Vec<f64>) -> Result<Self, SpectralError> {
        if data.len() % 2 != 0 {
            return Err(SpectralError::OddLength { len: data.len() });
        }
        Ok(Self { data })
    }

    pub fn zeros(dim_complex: usize) -> Self {
        Self {
            data: vec![0.0; 2 * dim_complex],
        }
    }

    /// Real basis vector `e_k` in the interleaved layout (`k < 2d`).
    pub fn basis(dim_complex: usize, k: usize) -> Self {
        let mut v = Self::zeros(dim_complex);
        v.data[k] = 1.0;
        v
    }

    pub fn from_complex(entries: &[Complex64]) -> Self {
        let mut data = Vec::with_capacity(2 * entries.len());
        for c in entries {
            data.push(c.re);
            data.push(c.im);
        }
        Self { data }
    }

    pub fn dim_complex(&self) -> usize {
        self.data.len() / 2
    }

    pub fn dim_real(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn entry(&self, k: usize) -> Complex64 {
        Complex64::new(self.data[2 * k], self.data[2 * k + 1])
    }

    /// Norm over all `2d` reals; equals the complex 2-norm of the `d` entries.
    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            data: self.data.iter().map(|x| c * x).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        debug_assert_eq!(self.data.len(), other.data.len());
        Self {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        debug_assert_eq!(self.data.len(), other.data.len());
        Self {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    /// In-place `self += c * other`.
    pub fn axpy(&mut self, c: f64, other: &Self) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
    }
}

/// Real part of the Hermitian product, i.e. the Euclidean inner product of
/// the `2d`-real realizations. This is the single cosine convention used for
/// all angles and tangent projections on the real sphere.
pub fn re_dot(a: &ComplexVec, b: &ComplexVec) -> f64 {
    debug_assert_eq!(a.dim_real(), b.dim_real());
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| x * y)
        .sum()
}

/// Hermitian inner product `a† b` (conjugate on the first argument).
pub fn complex_dot(a: &ComplexVec, b: &ComplexVec) -> Result<Complex64, SpectralError> {
    if a.dim_complex() != b.dim_complex() {
        return Err(SpectralError::DimensionMismatch {
            expected: a.dim_complex(),
            got: b.dim_complex(),
        });
    }
    let (mut re, mut im) = (0.0, 0.0);
    let (x, y) = (a.as_slice(), b.as_slice());
    for k in 0..a.dim_complex() {
        let (ar, ai) = (x[2 * k], x[2 * k + 1]);
        let (br, bi) = (y[2 * k], y[2 * k + 1]);
        re += ar * br + ai * bi;
        im += ar * bi - ai * br;
    }
    Ok(Complex64::new(re, im))
}

/// Diagonal angular frequencies generating rotational transport.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotationFreqs {
    omega: Vec<f64>,
}

impl RotationFreqs {
    pub fn new(omega: Vec<f64>) -> Result<Self, SpectralError> {
        if let Some(index) = omega.iter().position(|w| !w.is_finite()) {
            return Err(SpectralError::NonFiniteFrequency { index });
        }
        Ok(Self { omega })
    }

    pub fn zero(dim_complex: usize) -> Self {
        Self {
            omega: vec![0.0; dim_complex],
        }
    }

    /// Geometric schedule `w_k = base^{-2k/d}`. The model itself fixes no
    /// schedule; this is the conventional rotary default used as plumbing.
    pub fn rope(dim_complex: usize, base: f64) -> Self {
        let d = dim_complex as f64;
        Self {
            omega: (0..dim_complex)
                .map(|k| base.powf(-2.0 * k as f64 / d))
                .collect(),
        }
    }

    pub fn dim_complex(&self) -> usize {
        self.omega.len()
    }

    pub fn omega(&self) -> &[f64] {
        &self.omega
    }

    /// Contiguous sub-schedule for a block of complex coordinates.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            omega: self.omega[range].to_vec(),
        }
    }
}

/// Applies `e^{i w_k t}` to each complex coordinate. Unitary for any `t`.
pub fn rotate(v: &ComplexVec, freqs: &RotationFreqs, t: f64) -> ComplexVec {
    let mut out = v.clone();
    rotate_in_place(out.as_mut_slice(), freqs.omega(), t);
    out
}

pub(crate) fn rotate_in_place(data: &mut [f64], omega: &[f64], t: f64) {
    debug_assert_eq!(data.len(), 2 * omega.len());
    for (k, w) in omega.iter().enumerate() {
        let (s, c) = (w * t).sin_cos();
        let re = data[2 * k];
        let im = data[2 * k + 1];
        data[2 * k] = re * c - im * s;
        data[2 * k + 1] = re * s + im * c;
    }
}

fn check_unit(u: &ComplexVec) -> Result<(), SpectralError> {
    let norm = u.norm();
    if (norm - 1.0).abs() > UNIT_TOL {
        return Err(SpectralError::NonUnitDirection {
            norm,
            tol: UNIT_TOL,
        });
    }
    Ok(())
}

/// Rank-one Hermitian projection onto the axis: `u (u† v)`.
pub fn project_radial(u: &ComplexVec, v: &ComplexVec) -> Result<ComplexVec, SpectralError> {
    check_unit(u)?;
    let c = complex_dot(u, v)?;
    let mut out = ComplexVec::zeros(u.dim_complex());
    let data = out.as_mut_slice();
    let us = u.as_slice();
    for k in 0..u.dim_complex() {
        let (ur, ui) = (us[2 * k], us[2 * k + 1]);
        data[2 * k] = ur * c.re - ui * c.im;
        data[2 * k + 1] = ur * c.im + ui * c.re;
    }
    Ok(out)
}

/// Complement of the radial projection: `v - u (u† v)`.
pub fn project_tangent(u: &ComplexVec, v: &ComplexVec) -> Result<ComplexVec, SpectralError> {
    Ok(v.sub(&project_radial(u, v)?))
}

/// Structured covariance `sigma_r^2 P_R(u) + sigma_t^2 P_T(u)`: a rank-one
/// Hermitian correction of a scaled identity, invertible in closed form.
#[derive(Debug, Clone, PartialEq)]
pub struct RtCovariance {
    sigma_r2: f64,
    sigma_t2: f64,
    direction: ComplexVec,
}

impl RtCovariance {
    /// Direction must be unit within 1e-9; variances strictly positive.
    pub fn new(sigma_r2: f64, sigma_t2: f64, direction: ComplexVec) -> Result<Self, SpectralError> {
        if !(sigma_r2 > 0.0) {
            return Err(SpectralError::NonPositiveVariance { value: sigma_r2 });
        }
        if !(sigma_t2 > 0.0) {
            return Err(SpectralError::NonPositiveVariance { value: sigma_t2 });
        }
        let norm = direction.norm();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(SpectralError::NonUnitDirection { norm, tol: 1e-9 });
        }
        Ok(Self {
            sigma_r2,
            sigma_t2,
            direction,
        })
    }

    pub fn sigma_r2(&self) -> f64 {
        self.sigma_r2
    }

    pub fn sigma_t2(&self) -> f64 {
        self.sigma_t2
    }

    pub fn direction(&self) -> &ComplexVec {
        &self.direction
    }

    /// `sigma_r^2 P_R v + sigma_t^2 P_T v`, computed on the split components
    /// to avoid mixing the two variance scales.
    pub fn apply_cov(&self, v: &ComplexVec) -> Result<ComplexVec, SpectralError> {
        let radial = project_radial(&self.direction, v)?;
        let tangential = v.sub(&radial);
        let mut out = radial.scaled(self.sigma_r2);
        out.axpy(self.sigma_t2, &tangential);
        Ok(out)
    }

    /// Exact inverse of [`Self::apply_cov`] via the rank-one update formula:
    /// `(1/sigma_r^2) P_R v + (1/sigma_t^2) P_T v`. Note the f64 roundtrip
    /// accuracy degrades with the variance ratio: once the covariance image
    /// is stored as a single vector, the smaller subspace carries a relative
    /// error of order `eps * max(s_r2, s_t2) / min(s_r2, s_t2)`.
    pub fn apply_precision(&self, v: &ComplexVec) -> Result<ComplexVec, SpectralError> {
        let radial = project_radial(&self.direction, v)?;
        let tangential = v.sub(&radial);
        let mut out = radial.scaled(1.0 / self.sigma_r2);
        out.axpy(1.0 / self.sigma_t2, &tangential);
        Ok(out)
    }
}

/// `v / max(||v||, eps)`. The zero vector maps to itself rather than NaN, so
/// degenerate tokens stay representable downstream.
pub fn normalize(v: &ComplexVec, eps: f64) -> ComplexVec {
    let norm = v.norm();
    let denom = norm.max(eps);
    if denom == 0.0 {
        return ComplexVec::zeros(v.dim_complex());
    }
    v.scaled(1.0 / denom)
}

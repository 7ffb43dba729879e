//! Seeded Monte Carlo simulation of the radial–tangential SDE.
//!
//! The Cartesian integrator applies the rotational transport exactly per
//! step (multiplication by the per-coordinate rotation) while decay and
//! noise use Euler–Maruyama. Noise draws a full `2d`-dimensional standard
//! Gaussian and splits it into a radial component (along the projector
//! direction, real rank one) and its tangential complement, matching the
//! projected-Wiener definition of the model.
//!
//! Two projector frames are provided:
//! - [`DirectionFrame::Transported`]: projectors follow the deterministically
//!   rotated initial direction. This is the linear time-varying system whose
//!   transition matrix factorizes into rotation and per-subspace decay — the
//!   regime in which the closed-form covariance is derived — and is the frame
//!   the covariance oracle uses. Tangential deviations decay at `mu_t`.
//! - [`DirectionFrame::Instantaneous`]: projectors follow `normalize(x)`
//!   itself. This is the self-consistent nonlinear reading; note that the
//!   tangential decay term then acts orthogonally to the state and drops out
//!   of the drift entirely, so `mu_t` influences nothing. Used to expose how
//!   the closed form degrades outside the small-angular-diffusion regime.
//!
//! Every run is deterministic given its seed. Paths own independent
//! counter-based RNG streams derived from `(seed, path index)`, and
//! reductions over paths are sequential compensated sums, so results are
//! identical regardless of execution order or thread count.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spectral::{normalize, rotate, rotate_in_place, ComplexVec, RotationFreqs};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("{name} must be positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("{name} must be nonnegative, got {value}")]
    Negative { name: &'static str, value: f64 },
    #[error("initial state must have positive norm")]
    ZeroInitialState,
    #[error("initial direction must be unit norm, got {norm}")]
    NonUnitInitialDirection { norm: f64 },
    #[error("at least {min} Monte Carlo paths required, got {got}")]
    TooFewPaths { min: usize, got: usize },
    #[error("substeps must be at least 1")]
    ZeroSubsteps,
    #[error("polar magnitude collapsed to {value} at step {step}; reduce dt or noise")]
    MagnitudeCollapse { value: f64, step: usize },
    #[error("trajectory file I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("trajectory parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

/// Dynamical and noise parameters of the SDE. Decay rates and noise
/// amplitudes split into radial (along the state direction) and tangential
/// (orthogonal) components; `freqs` generates the rotational transport.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RtSdeParams {
    pub mu_r: f64,
    pub mu_t: f64,
    pub sigma_r: f64,
    pub sigma_t: f64,
    pub eta_r: f64,
    pub eta_t: f64,
    pub gamma_r: f64,
    pub gamma_t: f64,
    pub freqs: RotationFreqs,
}

impl RtSdeParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        mu_r: f64,
        mu_t: f64,
        sigma_r: f64,
        sigma_t: f64,
        eta_r: f64,
        eta_t: f64,
        gamma_r: f64,
        gamma_t: f64,
        freqs: RotationFreqs,
    ) -> Result<Self, SimError> {
        for (name, value) in [
            ("mu_r", mu_r),
            ("mu_t", mu_t),
            ("sigma_r", sigma_r),
            ("sigma_t", sigma_t),
            ("eta_r", eta_r),
            ("eta_t", eta_t),
            ("gamma_r", gamma_r),
            ("gamma_t", gamma_t),
        ] {
            if !(value >= 0.0) || !value.is_finite() {
                return Err(SimError::Negative { name, value });
            }
        }
        Ok(Self {
            mu_r,
            mu_t,
            sigma_r,
            sigma_t,
            eta_r,
            eta_t,
            gamma_r,
            gamma_t,
            freqs,
        })
    }

    /// Noise-free copy with the same decay and rotation.
    pub fn without_noise(&self) -> Self {
        Self {
            sigma_r: 0.0,
            sigma_t: 0.0,
            eta_r: 0.0,
            eta_t: 0.0,
            gamma_r: 0.0,
            gamma_t: 0.0,
            ..self.clone()
        }
    }

    pub fn dim_complex(&self) -> usize {
        self.freqs.dim_complex()
    }
}

/// Which direction the radial/tangential projectors track during
/// integration. See the module docs for the trade-off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DirectionFrame {
    Transported,
    Instantaneous,
}

/// Simulated latent states over a time grid, with magnitudes, directions,
/// and optional per-step measurements.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    dim_complex: usize,
    times: Vec<f64>,
    states: Vec<ComplexVec>,
    magnitudes: Vec<f64>,
    directions: Vec<ComplexVec>,
    measurements: Vec<Option<ComplexVec>>,
}

impl Trajectory {
    pub fn empty(dim_complex: usize) -> Self {
        Self {
            dim_complex,
            times: Vec::new(),
            states: Vec::new(),
            magnitudes: Vec::new(),
            directions: Vec::new(),
            measurements: Vec::new(),
        }
    }

    fn from_states(dim_complex: usize, times: Vec<f64>, states: Vec<ComplexVec>) -> Self {
        let magnitudes: Vec<f64> = states.iter().map(|s| s.norm()).collect();
        let directions: Vec<ComplexVec> = states.iter().map(|s| normalize(s, 0.0)).collect();
        let measurements = vec![None; states.len()];
        Self {
            dim_complex,
            times,
            states,
            magnitudes,
            directions,
            measurements,
        }
    }

    pub fn dim_complex(&self) -> usize {
        self.dim_complex
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn states(&self) -> &[ComplexVec] {
        &self.states
    }

    pub fn magnitudes(&self) -> &[f64] {
        &self.magnitudes
    }

    pub fn directions(&self) -> &[ComplexVec] {
        &self.directions
    }

    pub fn measurements(&self) -> &[Option<ComplexVec>] {
        &self.measurements
    }

    pub fn set_measurement(&mut self, index: usize, z: ComplexVec) {
        self.measurements[index] = Some(z);
    }
}

const STREAM_CARTESIAN: u64 = 1;
const STREAM_POLAR: u64 = 2;
const STREAM_MEASUREMENT: u64 = 3;
const STREAM_PATH: u64 = 4;

/// One independent ChaCha stream per `(seed, stream, index)` triple.
fn stream_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut bytes = [0u8; 32];
    bytes[0..8].copy_from_slice(&seed.to_le_bytes());
    bytes[8..16].copy_from_slice(&stream.to_le_bytes());
    bytes[16..24].copy_from_slice(&index.to_le_bytes());
    ChaCha8Rng::from_seed(bytes)
}

fn fill_standard_normal(rng: &mut ChaCha8Rng, buf: &mut [f64]) {
    for x in buf.iter_mut() {
        *x = StandardNormal.sample(rng);
    }
}

fn real_dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Neumaier compensated accumulator; keeps path reductions both accurate
/// and independent of summation chunking.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

struct Stepper<'a> {
    params: &'a RtSdeParams,
    dt: f64,
    sqrt_dt: f64,
    frame: DirectionFrame,
    /// Nominal direction for the transported frame, rotated alongside the
    /// state each step.
    u_nominal: Vec<f64>,
    noise: Vec<f64>,
    has_noise: bool,
}

impl<'a> Stepper<'a> {
    fn new(params: &'a RtSdeParams, x0: &[f64], dt: f64, frame: DirectionFrame) -> Self {
        let norm = real_dot(x0, x0).sqrt();
        let u_nominal: Vec<f64> = x0.iter().map(|v| v / norm).collect();
        let dim = x0.len();
        Self {
            params,
            dt,
            sqrt_dt: dt.sqrt(),
            frame,
            u_nominal,
            noise: vec![0.0; dim],
            has_noise: params.sigma_r > 0.0 || params.sigma_t > 0.0,
        }
    }

    /// Euler decay + noise against the frame direction, then exact rotation.
    fn step(&mut self, x: &mut [f64], rng: Option<&mut ChaCha8Rng>) {
        let p = self.params;
        let inst: Vec<f64>;
        let u: &[f64] = match self.frame {
            DirectionFrame::Transported => &self.u_nominal,
            DirectionFrame::Instantaneous => {
                let norm = real_dot(x, x).sqrt();
                if norm == 0.0 {
                    &self.u_nominal
                } else {
                    inst = x.iter().map(|v| v / norm).collect();
                    &inst
                }
            }
        };

        // drift = -mu_r (u.x) u - mu_t (x - (u.x) u)
        let rc = real_dot(u, x);
        for i in 0..x.len() {
            x[i] += self.dt * (-p.mu_t * x[i] - (p.mu_r - p.mu_t) * rc * u[i]);
        }

        if self.has_noise {
            let rng = rng.expect("noise requires an RNG");
            fill_standard_normal(rng, &mut self.noise);
            let s = real_dot(u, &self.noise);
            for i in 0..x.len() {
                let radial = s * u[i];
                let tangential = self.noise[i] - radial;
                x[i] += self.sqrt_dt * (p.sigma_r * radial + p.sigma_t * tangential);
            }
        }

        rotate_in_place(x, p.freqs.omega(), self.dt);
        rotate_in_place(&mut self.u_nominal, p.freqs.omega(), self.dt);
    }
}

/// Euler–Maruyama integration of the Cartesian SDE. Deterministic given
/// `(seed, params, x0, dt, steps, frame)`.
pub fn simulate_cartesian(
    params: &RtSdeParams,
    x0: &ComplexVec,
    dt: f64,
    steps: usize,
    seed: u64,
    frame: DirectionFrame,
) -> Result<Trajectory, SimError> {
    if !(dt > 0.0) {
        return Err(SimError::NonPositive {
            name: "dt",
            value: dt,
        });
    }
    if x0.norm() == 0.0 {
        return Err(SimError::ZeroInitialState);
    }
    let mut rng = stream_rng(seed, STREAM_CARTESIAN, 0);
    let mut x = x0.as_slice().to_vec();
    let mut stepper = Stepper::new(params, &x, dt, frame);

    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    times.push(0.0);
    states.push(x0.clone());
    for k in 1..=steps {
        stepper.step(&mut x, Some(&mut rng));
        times.push(k as f64 * dt);
        states.push(ComplexVec::from_interleaved(x.clone()).expect("even length"));
    }
    Ok(Trajectory::from_states(x0.dim_complex(), times, states))
}

/// Integration of the coupled magnitude/direction system. The magnitude
/// drift carries the quadratic-variation correction
/// `sigma_t^2 (D - 1) / (2 m^2)` with `D = 2d` the real embedding dimension,
/// and the direction is renormalized every step.
pub fn simulate_polar(
    params: &RtSdeParams,
    m0: f64,
    u0: &ComplexVec,
    dt: f64,
    steps: usize,
    seed: u64,
) -> Result<Trajectory, SimError> {
    if !(dt > 0.0) {
        return Err(SimError::NonPositive {
            name: "dt",
            value: dt,
        });
    }
    if !(m0 > 0.0) {
        return Err(SimError::NonPositive {
            name: "m0",
            value: m0,
        });
    }
    let norm = u0.norm();
    if (norm - 1.0).abs() > 1e-9 {
        return Err(SimError::NonUnitInitialDirection { norm });
    }

    let mut rng = stream_rng(seed, STREAM_POLAR, 0);
    let d_real = u0.dim_real() as f64;
    let sqrt_dt = dt.sqrt();
    let mut m = m0;
    let mut u = u0.as_slice().to_vec();
    let mut noise = vec![0.0; u.len()];

    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    times.push(0.0);
    states.push(u0.scaled(m0));
    for k in 1..=steps {
        let mu_tilde_t = params.sigma_t * params.sigma_t * (d_real - 1.0) / (2.0 * m * m);
        let mu_tilde_r = params.mu_r - mu_tilde_t;
        let m_old = m;

        m += -mu_tilde_r * m * dt;
        if params.sigma_r > 0.0 {
            let xi_r: f64 = StandardNormal.sample(&mut rng);
            m += params.sigma_r * sqrt_dt * xi_r;
        }
        if !(m > 0.0) {
            return Err(SimError::MagnitudeCollapse { value: m, step: k });
        }

        // Direction: Ito shrinkage, projected noise, exact rotation, retract.
        for v in u.iter_mut() {
            *v -= mu_tilde_t * *v * dt;
        }
        if params.sigma_t > 0.0 {
            fill_standard_normal(&mut rng, &mut noise);
            let s = real_dot(&u, &noise) / real_dot(&u, &u);
            let amp = params.sigma_t / m_old * sqrt_dt;
            for i in 0..u.len() {
                u[i] += amp * (noise[i] - s * u[i]);
            }
        }
        rotate_in_place(&mut u, params.freqs.omega(), dt);
        let n = real_dot(&u, &u).sqrt();
        for v in u.iter_mut() {
            *v /= n;
        }

        times.push(k as f64 * dt);
        let state: Vec<f64> = u.iter().map(|v| v * m).collect();
        states.push(ComplexVec::from_interleaved(state).expect("even length"));
    }
    Ok(Trajectory::from_states(u0.dim_complex(), times, states))
}

/// Measurement model: `z = x + eta_r (u.xi_1) u + eta_t P_T(u) xi_2` with
/// `u = normalize(x)` and two independent standard Gaussians. Radial noise
/// moves only the magnitude, so it leaves the observed direction unchanged.
pub fn sample_measurement(
    x: &ComplexVec,
    params: &RtSdeParams,
    seed: u64,
) -> Result<ComplexVec, SimError> {
    let norm = x.norm();
    if norm == 0.0 {
        return Err(SimError::ZeroInitialState);
    }
    let mut rng = stream_rng(seed, STREAM_MEASUREMENT, 0);
    let dim = x.dim_real();
    let u: Vec<f64> = x.as_slice().iter().map(|v| v / norm).collect();
    let mut xi1 = vec![0.0; dim];
    let mut xi2 = vec![0.0; dim];
    fill_standard_normal(&mut rng, &mut xi1);
    fill_standard_normal(&mut rng, &mut xi2);
    let s1 = real_dot(&u, &xi1);
    let s2 = real_dot(&u, &xi2);
    let mut z = x.as_slice().to_vec();
    for i in 0..dim {
        z[i] += params.eta_r * s1 * u[i] + params.eta_t * (xi2[i] - s2 * u[i]);
    }
    Ok(ComplexVec::from_interleaved(z).expect("even length"))
}

/// Terminal Monte Carlo ensemble for one set of process parameters.
///
/// Paths start at `x0` exactly and carry only process noise; the initial
/// measurement perturbation is stored separately as a unit radial
/// coefficient and a unit tangential draw transported by the numerically
/// integrated fundamental matrix of the drift. Scaling those by
/// `(eta_r, eta_t)` afterwards reproduces, path for path, the ensemble that
/// starts from measured initial states — so one simulation serves every
/// measurement-noise setting.
#[derive(Debug, Clone)]
pub struct TerminalEnsemble {
    dim_complex: usize,
    /// Per path: terminal state of the process-noise-only path from `x0`.
    terminals: Vec<Vec<f64>>,
    /// Per path: standard-normal radial coefficient of the initial
    /// measurement draw.
    meas_radial: Vec<f64>,
    /// Per path: transported unit tangential measurement draw.
    meas_tangential: Vec<Vec<f64>>,
    /// Fundamental matrix applied to the initial direction.
    transported_radial: Vec<f64>,
    /// `rotate(normalize(x0), dt_total)`.
    mean_direction: ComplexVec,
}

impl TerminalEnsemble {
    pub fn n_paths(&self) -> usize {
        self.terminals.len()
    }

    pub fn dim_complex(&self) -> usize {
        self.dim_complex
    }

    pub fn mean_direction(&self) -> &ComplexVec {
        &self.mean_direction
    }

    pub fn terminal_magnitudes(&self) -> Vec<f64> {
        self.terminals
            .iter()
            .map(|t| real_dot(t, t).sqrt())
            .collect()
    }
}

struct PathOutput {
    terminal: Vec<f64>,
    meas_radial: f64,
    meas_tangential_raw: Vec<f64>,
}

fn run_path(
    params: &RtSdeParams,
    x0: &[f64],
    u0: &[f64],
    dt: f64,
    substeps: usize,
    frame: DirectionFrame,
    seed: u64,
    path: u64,
) -> PathOutput {
    let mut rng = stream_rng(seed, STREAM_PATH, path);
    let dim = x0.len();

    // Measurement draws first, in a fixed order, so the path stream is
    // reproducible whether or not the caller uses them.
    let meas_radial: f64 = StandardNormal.sample(&mut rng);
    let mut xi2 = vec![0.0; dim];
    fill_standard_normal(&mut rng, &mut xi2);
    let s = real_dot(u0, &xi2);
    let meas_tangential_raw: Vec<f64> = (0..dim).map(|i| xi2[i] - s * u0[i]).collect();

    let mut x = x0.to_vec();
    let mut stepper = Stepper::new(params, x0, dt, frame);
    for _ in 0..substeps {
        stepper.step(&mut x, Some(&mut rng));
    }
    PathOutput {
        terminal: x,
        meas_radial,
        meas_tangential_raw,
    }
}

/// Numerically integrated fundamental matrix of the transported-frame drift
/// over `[0, dt_total]`, columns = flows of the real basis vectors. Uses the
/// same stepper as the paths (Euler decay + exact rotation), so measurement
/// transport carries the same discretization as the process noise.
fn fundamental_matrix(params: &RtSdeParams, x0: &[f64], dt: f64, substeps: usize) -> Vec<Vec<f64>> {
    let dim = x0.len();
    let noise_free = params.without_noise();
    let mut columns: Vec<Vec<f64>> = (0..dim)
        .map(|i| {
            let mut e = vec![0.0; dim];
            e[i] = 1.0;
            e
        })
        .collect();
    let mut steppers: Vec<Stepper> = (0..dim)
        .map(|_| Stepper::new(&noise_free, x0, dt, DirectionFrame::Transported))
        .collect();
    for _ in 0..substeps {
        for (col, st) in columns.iter_mut().zip(steppers.iter_mut()) {
            st.step(col, None);
        }
    }
    columns
}

fn mat_vec_columns(columns: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    let dim = v.len();
    let mut out = vec![0.0; dim];
    for (j, col) in columns.iter().enumerate() {
        let c = v[j];
        if c != 0.0 {
            for i in 0..dim {
                out[i] += c * col[i];
            }
        }
    }
    out
}

fn map_paths<T: Send>(n: usize, parallel: bool, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    #[cfg(feature = "parallel")]
    if parallel {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = parallel;
    (0..n).map(f).collect()
}

fn terminal_ensemble_impl(
    params: &RtSdeParams,
    x0: &ComplexVec,
    dt_total: f64,
    substeps: usize,
    n_paths: usize,
    seed: u64,
    frame: DirectionFrame,
    parallel: bool,
) -> Result<TerminalEnsemble, SimError> {
    if !(dt_total > 0.0) {
        return Err(SimError::NonPositive {
            name: "dt_total",
            value: dt_total,
        });
    }
    if substeps == 0 {
        return Err(SimError::ZeroSubsteps);
    }
    if x0.norm() == 0.0 {
        return Err(SimError::ZeroInitialState);
    }

    let dt = dt_total / substeps as f64;
    let x0s = x0.as_slice().to_vec();
    let norm = x0.norm();
    let u0: Vec<f64> = x0s.iter().map(|v| v / norm).collect();

    let phi = fundamental_matrix(params, &x0s, dt, substeps);
    let transported_radial = mat_vec_columns(&phi, &u0);

    let outputs = map_paths(n_paths, parallel, |p| {
        run_path(params, &x0s, &u0, dt, substeps, frame, seed, p as u64)
    });

    let mut terminals = Vec::with_capacity(n_paths);
    let mut meas_radial = Vec::with_capacity(n_paths);
    let mut meas_tangential = Vec::with_capacity(n_paths);
    for out in outputs {
        terminals.push(out.terminal);
        meas_radial.push(out.meas_radial);
        meas_tangential.push(mat_vec_columns(&phi, &out.meas_tangential_raw));
    }

    let mean_direction = rotate(&normalize(x0, 0.0), &params.freqs, dt_total);
    Ok(TerminalEnsemble {
        dim_complex: x0.dim_complex(),
        terminals,
        meas_radial,
        meas_tangential,
        transported_radial,
        mean_direction,
    })
}

/// Simulates the terminal ensemble, in parallel when the `parallel` feature
/// is enabled. Identical output to [`simulate_terminal_ensemble_serial`].
#[allow(clippy::too_many_arguments)]
pub fn simulate_terminal_ensemble(
    params: &RtSdeParams,
    x0: &ComplexVec,
    dt_total: f64,
    substeps: usize,
    n_paths: usize,
    seed: u64,
    frame: DirectionFrame,
) -> Result<TerminalEnsemble, SimError> {
    terminal_ensemble_impl(params, x0, dt_total, substeps, n_paths, seed, frame, true)
}

/// Sequential fallback used as the baseline in the benchmark suite.
#[allow(clippy::too_many_arguments)]
pub fn simulate_terminal_ensemble_serial(
    params: &RtSdeParams,
    x0: &ComplexVec,
    dt_total: f64,
    substeps: usize,
    n_paths: usize,
    seed: u64,
    frame: DirectionFrame,
) -> Result<TerminalEnsemble, SimError> {
    terminal_ensemble_impl(params, x0, dt_total, substeps, n_paths, seed, frame, false)
}

/// Empirical covariance of the terminal measurements for one
/// `(eta_r, eta_t)` setting, reusing the stored ensemble. Sequential
/// compensated two-pass accumulation in path order.
pub fn empirical_measurement_cov(ens: &TerminalEnsemble, eta_r: f64, eta_t: f64) -> Vec<Vec<f64>> {
    let dim = 2 * ens.dim_complex;
    let n = ens.terminals.len();
    let y = |p: usize, i: usize| {
        ens.terminals[p][i]
            + eta_r * ens.meas_radial[p] * ens.transported_radial[i]
            + eta_t * ens.meas_tangential[p][i]
    };

    let mut mean_acc = vec![CompensatedSum::default(); dim];
    for p in 0..n {
        for (i, acc) in mean_acc.iter_mut().enumerate() {
            acc.add(y(p, i));
        }
    }
    let mean: Vec<f64> = mean_acc.iter().map(|a| a.value() / n as f64).collect();

    let mut cov_acc = vec![CompensatedSum::default(); dim * dim];
    let mut centered = vec![0.0; dim];
    for p in 0..n {
        for i in 0..dim {
            centered[i] = y(p, i) - mean[i];
        }
        for i in 0..dim {
            for j in i..dim {
                cov_acc[i * dim + j].add(centered[i] * centered[j]);
            }
        }
    }
    let denom = (n - 1) as f64;
    let mut cov = vec![vec![0.0; dim]; dim];
    for i in 0..dim {
        for j in i..dim {
            let v = cov_acc[i * dim + j].value() / denom;
            cov[i][j] = v;
            cov[j][i] = v;
        }
    }
    cov
}

/// Radial and tangential projections of a dense real covariance:
/// `(u' C u, (tr C - u' C u) / (D - 1))`.
pub fn project_rt(cov: &[Vec<f64>], u: &ComplexVec) -> (f64, f64) {
    let dim = u.dim_real();
    let us = u.as_slice();
    let mut radial = 0.0;
    let mut trace = 0.0;
    for i in 0..dim {
        trace += cov[i][i];
        for j in 0..dim {
            radial += us[i] * cov[i][j] * us[j];
        }
    }
    let tangential = (trace - radial) / (dim as f64 - 1.0);
    (radial, tangential)
}

/// Empirical covariance of terminal measurements plus the rotated mean
/// direction for projecting it into radial/tangential scalars.
#[derive(Debug, Clone)]
pub struct PropagatedCov {
    pub cov: Vec<Vec<f64>>,
    pub mean_direction: ComplexVec,
}

/// Monte Carlo oracle for the closed-form propagated covariance: simulates
/// `n_paths` trajectories over `[0, dt_total]` in the transported frame,
/// applies the initial measurement noise transported by the numerically
/// integrated drift, and returns the empirical covariance of the terminal
/// measurements.
pub fn monte_carlo_propagated_cov(
    params: &RtSdeParams,
    x0: &ComplexVec,
    dt_total: f64,
    n_paths: usize,
    substeps: usize,
    seed: u64,
) -> Result<PropagatedCov, SimError> {
    if n_paths < 1000 {
        return Err(SimError::TooFewPaths {
            min: 1000,
            got: n_paths,
        });
    }
    let ens = simulate_terminal_ensemble(
        params,
        x0,
        dt_total,
        substeps,
        n_paths,
        seed,
        DirectionFrame::Transported,
    )?;
    let cov = empirical_measurement_cov(&ens, params.eta_r, params.eta_t);
    Ok(PropagatedCov {
        cov,
        mean_direction: ens.mean_direction.clone(),
    })
}

/// Substep ceilings: `mu dt <= 5e-3` keeps the squared-decay Euler bias on
/// variances under ~2% at `mu dt_total = 4`, and `sigma sqrt(dt) <= 1e-2`
/// keeps the per-step noise displacement small.
const MAX_MU_DT: f64 = 5e-3;
const MAX_SIGMA_SQRT_DT: f64 = 1e-2;

/// Default Euler substep count keeping discretization bias below the Monte
/// Carlo noise at 1e5 paths.
pub fn default_substeps(params: &RtSdeParams, dt_total: f64) -> usize {
    let mu_max = params.mu_r.max(params.mu_t);
    let sigma_max = params.sigma_r.max(params.sigma_t);
    let mut dt_cap = dt_total;
    if mu_max > 0.0 {
        dt_cap = dt_cap.min(MAX_MU_DT / mu_max);
    }
    if sigma_max > 0.0 {
        let cap = MAX_SIGMA_SQRT_DT / sigma_max;
        dt_cap = dt_cap.min(cap * cap);
    }
    (dt_total / dt_cap).ceil().max(1.0) as usize
}

fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

/// Writes the trajectory as CSV with header
/// `t,m,re_0,im_0,...,re_{d-1},im_{d-1},zre_0,zim_0,...`; measurement cells
/// are empty when absent. Floats carry 17 significant digits so the file
/// round-trips exactly.
pub fn export_trajectory(traj: &Trajectory, path: &Path) -> Result<(), SimError> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_trajectory(traj, &mut w)
}

pub fn write_trajectory<W: Write>(traj: &Trajectory, w: &mut W) -> Result<(), SimError> {
    let d = traj.dim_complex;
    let mut header = String::from("t,m");
    for k in 0..d {
        header.push_str(&format!(",re_{k},im_{k}"));
    }
    for k in 0..d {
        header.push_str(&format!(",zre_{k},zim_{k}"));
    }
    writeln!(w, "{header}")?;

    for row in 0..traj.len() {
        let mut line = String::new();
        line.push_str(&fmt_float(traj.times[row]));
        line.push(',');
        line.push_str(&fmt_float(traj.magnitudes[row]));
        for v in traj.states[row].as_slice() {
            line.push(',');
            line.push_str(&fmt_float(*v));
        }
        match &traj.measurements[row] {
            Some(z) => {
                for v in z.as_slice() {
                    line.push(',');
                    line.push_str(&fmt_float(*v));
                }
            }
            None => {
                for _ in 0..2 * d {
                    line.push(',');
                }
            }
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn parse_trajectory<R: BufRead>(r: R) -> Result<Trajectory, SimError> {
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or(SimError::Parse {
            line: 1,
            reason: "missing header".into(),
        })??;
    let cols = header.split(',').count();
    if cols < 2 || (cols - 2) % 4 != 0 {
        return Err(SimError::Parse {
            line: 1,
            reason: format!("unexpected column count {cols}"),
        });
    }
    let d = (cols - 2) / 4;

    let mut traj = Trajectory::empty(d);
    for (idx, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let lineno = idx + 2;
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != cols {
            return Err(SimError::Parse {
                line: lineno,
                reason: format!("expected {cols} cells, got {}", cells.len()),
            });
        }
        let parse = |s: &str| -> Result<f64, SimError> {
            s.parse::<f64>().map_err(|e| SimError::Parse {
                line: lineno,
                reason: format!("bad float {s:?}: {e}"),
            })
        };
        let t = parse(cells[0])?;
        let m = parse(cells[1])?;
        let mut state = Vec::with_capacity(2 * d);
        for cell in &cells[2..2 + 2 * d] {
            state.push(parse(cell)?);
        }
        let zcells = &cells[2 + 2 * d..];
        let measurement = if zcells.iter().all(|c| c.is_empty()) {
            None
        } else {
            let mut z = Vec::with_capacity(2 * d);
            for cell in zcells {
                z.push(parse(cell)?);
            }
            Some(ComplexVec::from_interleaved(z).expect("even length"))
        };
        let state = ComplexVec::from_interleaved(state).expect("even length");
        traj.directions.push(normalize(&state, 0.0));
        traj.times.push(t);
        traj.magnitudes.push(m);
        traj.states.push(state);
        traj.measurements.push(measurement);
    }
    Ok(traj)
}


#[cfg(test)]
mod tests {
    use super::*;

    fn params_with(
        mu_r: f64,
        mu_t: f64,
        sigma_r: f64,
        sigma_t: f64,
        eta_r: f64,
        eta_t: f64,
        freqs: RotationFreqs,
    ) -> RtSdeParams {
        RtSdeParams::new(mu_r, mu_t, sigma_r, sigma_t, eta_r, eta_t, 0.0, 0.0, freqs).unwrap()
    }

    fn x0(d: usize) -> ComplexVec {
        let mut v = ComplexVec::zeros(d);
        v.as_mut_slice()[0] = 1.0;
        v.as_mut_slice()[3] = 0.5;
        normalize(&v, 0.0).scaled(1.0)
    }

    #[test]
    fn zero_noise_zero_decay_is_constant() {
        let p = params_with(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, RotationFreqs::zero(3));
        let start = x0(3);
        for frame in [DirectionFrame::Transported, DirectionFrame::Instantaneous] {
            let traj = simulate_cartesian(&p, &start, 0.01, 200, 9, frame).unwrap();
            for s in traj.states() {
                assert!(s.sub(&start).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn noise_free_magnitude_decays_exponentially() {
        // mu small enough that the Euler decay bias mu^2 T dt / 2 stays
        // below the 1e-6 relative tolerance at dt = 1e-3.
        let mu = 0.04;
        let p = params_with(mu, mu, 0.0, 0.0, 0.0, 0.0, RotationFreqs::rope(3, 100.0));
        let start = x0(3).scaled(2.0);
        for frame in [DirectionFrame::Transported, DirectionFrame::Instantaneous] {
            let traj = simulate_cartesian(&p, &start, 1e-3, 1000, 5, frame).unwrap();
            let m_final = traj.magnitudes()[1000];
            let expect = start.norm() * (-mu * 1.0).exp();
            assert!(
                (m_final - expect).abs() < 1e-6 * expect,
                "{frame:?}: {m_final} vs {expect}"
            );
        }
    }

    #[test]
    fn unitarity_of_transport_over_long_runs() {
        let p = params_with(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, RotationFreqs::rope(3, 50.0));
        let start = x0(3);
        let traj =
            simulate_cartesian(&p, &start, 0.01, 10_000, 2, DirectionFrame::Transported).unwrap();
        for m in traj.magnitudes() {
            assert!((m - start.norm()).abs() < 1e-9);
        }
    }

    #[test]
    fn determinism_same_seed_bit_identical() {
        let p = params_with(0.3, 0.1, 0.2, 0.4, 0.0, 0.0, RotationFreqs::rope(2, 30.0));
        let start = x0(2);
        let a = simulate_cartesian(&p, &start, 0.01, 100, 77, DirectionFrame::Transported).unwrap();
        let b = simulate_cartesian(&p, &start, 0.01, 100, 77, DirectionFrame::Transported).unwrap();
        assert_eq!(a, b);
        let c = simulate_polar(&p, 1.0, &normalize(&start, 0.0), 0.01, 100, 77).unwrap();
        let d = simulate_polar(&p, 1.0, &normalize(&start, 0.0), 0.01, 100, 77).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn polar_noise_free_flow() {
        // Euler decay bias is mu^2 T dt / 2; these parameters keep it below
        // the 1e-6 relative tolerance.
        let freqs = RotationFreqs::rope(3, 25.0);
        let p = params_with(0.1, 0.0, 0.0, 0.0, 0.0, 0.0, freqs.clone());
        let u0 = normalize(&x0(3), 0.0);
        let steps = 10_000;
        let dt = 1e-4;
        let traj = simulate_polar(&p, 1.5, &u0, dt, steps, 3).unwrap();
        let t_final = steps as f64 * dt;
        let m_expect = 1.5 * (-0.1 * t_final).exp();
        let m_got = traj.magnitudes()[steps];
        assert!((m_got - m_expect).abs() < 1e-6 * m_expect);
        let u_expect = rotate(&u0, &freqs, t_final);
        assert!(traj.directions()[steps].sub(&u_expect).norm() < 1e-9);
    }

    #[test]
    fn polar_radial_noise_leaves_direction_on_nominal_path() {
        let freqs = RotationFreqs::rope(3, 25.0);
        let p = params_with(0.2, 0.0, 0.3, 0.0, 0.0, 0.0, freqs.clone());
        let u0 = normalize(&x0(3), 0.0);
        let traj = simulate_polar(&p, 1.0, &u0, 1e-3, 500, 11).unwrap();
        let u_expect = rotate(&u0, &freqs, 0.5);
        assert!(traj.directions()[500].sub(&u_expect).norm() < 1e-9);
    }

    #[test]
    fn measurement_noise_free_and_radial_only() {
        let freqs = RotationFreqs::zero(3);
        let x = x0(3).scaled(1.3);
        let p0 = params_with(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, freqs.clone());
        assert_eq!(sample_measurement(&x, &p0, 1).unwrap(), x);

        let pr = params_with(0.0, 0.0, 0.0, 0.0, 0.05, 0.0, freqs);
        let z = sample_measurement(&x, &pr, 1).unwrap();
        let dir_x = normalize(&x, 0.0);
        let dir_z = normalize(&z, 0.0);
        assert!(dir_z.sub(&dir_x).norm() < 1e-9);
        assert!(z.sub(&x).norm() > 0.0);
    }

    #[test]
    fn measurement_rejects_zero_state() {
        let p = params_with(0.0, 0.0, 0.0, 0.0, 0.1, 0.1, RotationFreqs::zero(2));
        assert!(sample_measurement(&ComplexVec::zeros(2), &p, 0).is_err());
    }

    #[test]
    fn invalid_inputs_error() {
        let p = params_with(0.1, 0.1, 0.1, 0.1, 0.0, 0.0, RotationFreqs::zero(2));
        let start = x0(2);
        assert!(simulate_cartesian(&p, &start, 0.0, 10, 0, DirectionFrame::Transported).is_err());
        assert!(simulate_cartesian(&p, &ComplexVec::zeros(2), 0.1, 10, 0, DirectionFrame::Transported).is_err());
        assert!(simulate_polar(&p, 0.0, &normalize(&start, 0.0), 0.1, 10, 0).is_err());
        assert!(simulate_polar(&p, 1.0, &start.scaled(2.0), 0.1, 10, 0).is_err());
        assert!(monte_carlo_propagated_cov(&p, &start, 1.0, 10, 10, 0).is_err());
        assert!(RtSdeParams::new(
            -0.1,
            0.0,
            0.0,
            0.0,
            0.0,
            0.0,
            0.0,
            0.0,
            RotationFreqs::zero(2)
        )
        .is_err());
    }

    #[test]
    fn zero_noise_ensemble_gives_zero_covariance() {
        let p = params_with(0.2, 0.1, 0.0, 0.0, 0.0, 0.0, RotationFreqs::rope(3, 40.0));
        let start = x0(3);
        let cov = monte_carlo_propagated_cov(&p, &start, 1.0, 1000, 50, 4).unwrap();
        for row in &cov.cov {
            for v in row {
                assert!(v.abs() < 1e-24);
            }
        }
    }

    #[test]
    fn isotropic_brownian_limit() {
        // mu = 0, omega = 0, eta = 0, sigma_r = sigma_t: the projectors sum
        // to the identity and the covariance is sigma^2 T I.
        let sigma = 0.1;
        let p = params_with(0.0, 0.0, sigma, sigma, 0.0, 0.0, RotationFreqs::zero(3));
        let start = x0(3);
        let t_total = 0.5;
        let cov = monte_carlo_propagated_cov(&p, &start, t_total, 20_000, 20, 12).unwrap();
        let expect = sigma * sigma * t_total;
        for i in 0..6 {
            for j in 0..6 {
                let target = if i == j { expect } else { 0.0 };
                assert!(
                    (cov.cov[i][j] - target).abs() < 0.05 * expect,
                    "cov[{i}][{j}] = {}",
                    cov.cov[i][j]
                );
            }
        }
    }

    #[test]
    fn default_substeps_respects_caps() {
        let p = params_with(1.0, 0.1, 0.2, 0.05, 0.0, 0.0, RotationFreqs::zero(2));
        let n = default_substeps(&p, 4.0);
        let dt = 4.0 / n as f64;
        assert!(1.0 * dt <= 5e-3 + 1e-12);
        assert!(0.2 * dt.sqrt() <= 1e-2 + 1e-12);
        let free = params_with(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, RotationFreqs::zero(2));
        assert_eq!(default_substeps(&free, 4.0), 1);
    }

    #[test]
    fn csv_roundtrip_and_schema() {
        let d = 2;
        let p = params_with(0.1, 0.0, 0.2, 0.1, 0.0, 0.0, RotationFreqs::rope(d, 10.0));
        let mut traj =
            simulate_cartesian(&p, &x0(d), 0.05, 3, 21, DirectionFrame::Transported).unwrap();
        traj.set_measurement(1, x0(d).scaled(1.01));

        let mut buf = Vec::new();
        write_trajectory(&traj, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        let mut lines = text.lines();
        let header = lines.next().unwrap();
        assert_eq!(header.split(',').count(), 2 + 4 * d);
        assert_eq!(lines.count(), 4); // 3 steps + initial state

        let parsed = parse_trajectory(std::io::BufReader::new(&buf[..])).unwrap();
        assert_eq!(parsed.len(), traj.len());
        for k in 0..traj.len() {
            assert!((parsed.times()[k] - traj.times()[k]).abs() < 1e-9);
            assert!(parsed.states()[k].sub(&traj.states()[k]).norm() < 1e-9);
            match (&parsed.measurements()[k], &traj.measurements()[k]) {
                (None, None) => {}
                (Some(a), Some(b)) => assert!(a.sub(b).norm() < 1e-9),
                other => panic!("measurement mismatch at {k}: {other:?}"),
            }
        }
    }

    #[test]
    fn empty_trajectory_exports_header_only() {
        let traj = Trajectory::empty(3);
        let mut buf = Vec::new();
        write_trajectory(&traj, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(text.starts_with("t,m,re_0"));
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_and_serial_ensembles_are_bit_identical() {
        let p = params_with(0.3, 0.1, 0.15, 0.1, 0.05, 0.02, RotationFreqs::rope(2, 20.0));
        let start = x0(2);
        let a = simulate_terminal_ensemble(&p, &start, 0.5, 25, 500, 99, DirectionFrame::Transported)
            .unwrap();
        let b = simulate_terminal_ensemble_serial(
            &p,
            &start,
            0.5,
            25,
            500,
            99,
            DirectionFrame::Transported,
        )
        .unwrap();
        assert_eq!(a.terminals, b.terminals);
        let ca = empirical_measurement_cov(&a, p.eta_r, p.eta_t);
        let cb = empirical_measurement_cov(&b, p.eta_r, p.eta_t);
        assert_eq!(ca, cb);
    }
}

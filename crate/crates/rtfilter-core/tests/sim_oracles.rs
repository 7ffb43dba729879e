//! Monte Carlo oracles for the simulator: magnitude drift from tangential
//! quadratic variation, the linearized-normalization variance law, polar vs
//! Cartesian consistency, closed-form covariance agreement in the
//! small-diffusion regime, and weak-order consistency under step halving.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use rtfilter_core::kernel::sigma_v2;
use rtfilter_core::sim::{
    monte_carlo_propagated_cov, project_rt, sample_measurement, simulate_cartesian,
    simulate_polar, simulate_terminal_ensemble, DirectionFrame, RtSdeParams,
};
use rtfilter_core::spectral::{normalize, re_dot, ComplexVec, RotationFreqs};

fn unit_x0(d: usize) -> ComplexVec {
    let mut v = ComplexVec::zeros(d);
    v.as_mut_slice()[0] = 0.8;
    v.as_mut_slice()[2] = 0.6;
    normalize(&v, 0.0)
}

#[test]
fn ito_magnitude_drift_matches_quadratic_variation() {
    // Pure tangential noise, no decay: E[m(T)^2] - m(0)^2 = sigma_t^2 (D-1) T
    // with D = 2d the real embedding dimension.
    let d = 3;
    let sigma_t = 0.2;
    let t_total = 1.0;
    let params = RtSdeParams::new(
        0.0,
        0.0,
        0.0,
        sigma_t,
        0.0,
        0.0,
        0.0,
        0.0,
        RotationFreqs::zero(d),
    )
    .unwrap();
    let x0 = unit_x0(d);
    let substeps = 400;
    let n_paths = 100_000;
    let ens = simulate_terminal_ensemble(
        &params,
        &x0,
        t_total,
        substeps,
        n_paths,
        2024,
        DirectionFrame::Instantaneous,
    )
    .unwrap();
    let mean_m2: f64 = ens
        .terminal_magnitudes()
        .iter()
        .map(|m| m * m)
        .sum::<f64>()
        / n_paths as f64;
    let growth = mean_m2 - 1.0;
    let expect = sigma_t * sigma_t * (2 * d - 1) as f64 * t_total;
    let rel = (growth - expect).abs() / expect;
    assert!(rel < 0.05, "growth {growth} vs {expect} (rel {rel})");
}

#[test]
fn normalized_measurement_tangential_variance() {
    // Per-tangent-dimension variance of the normalized measurement is
    // eta_t^2 / m^2; radial-only noise leaves the direction unchanged.
    let d = 3;
    let m = 1.0;
    let x0 = unit_x0(d).scaled(m);
    let u = normalize(&x0, 0.0);
    let n_draws = 100_000usize;

    for eta_t in [0.01, 0.05] {
        let params = RtSdeParams::new(
            0.0,
            0.0,
            0.0,
            0.0,
            0.02,
            eta_t,
            0.0,
            0.0,
            RotationFreqs::zero(d),
        )
        .unwrap();
        let mut acc = 0.0;
        for k in 0..n_draws {
            let z = sample_measurement(&x0, &params, k as u64).unwrap();
            let uz = normalize(&z, 0.0);
            let radial = re_dot(&u, &uz);
            let mut tangential = uz.clone();
            tangential.axpy(-radial, &u);
            acc += tangential.norm_sq();
        }
        let per_dim = acc / (n_draws as f64 * (2 * d - 1) as f64);
        let expect = eta_t * eta_t / (m * m);
        let rel = (per_dim - expect).abs() / expect;
        assert!(rel < 0.05, "eta_t {eta_t}: {per_dim} vs {expect} (rel {rel})");
    }

    // Radial-only noise: direction perturbation below 1e-9.
    let radial_only = RtSdeParams::new(
        0.0,
        0.0,
        0.0,
        0.0,
        0.05,
        0.0,
        0.0,
        0.0,
        RotationFreqs::zero(d),
    )
    .unwrap();
    for k in 0..1000 {
        let z = sample_measurement(&x0, &radial_only, k).unwrap();
        if z.norm() > 0.0 {
            let uz = normalize(&z, 0.0);
            assert!(uz.sub(&u).norm() < 1e-9);
        }
    }
}

#[test]
fn cartesian_and_polar_magnitudes_agree_in_mean() {
    let d = 3;
    let params = RtSdeParams::new(
        0.2,
        0.0,
        0.1,
        0.05,
        0.0,
        0.0,
        0.0,
        0.0,
        RotationFreqs::rope(d, 30.0),
    )
    .unwrap();
    let x0 = unit_x0(d);
    let n_paths = 10_000;
    let steps = 200;
    let dt = 5e-3;

    let mut cart = Vec::with_capacity(n_paths);
    let mut polar = Vec::with_capacity(n_paths);
    for p in 0..n_paths {
        let traj = simulate_cartesian(
            &params,
            &x0,
            dt,
            steps,
            7_000 + p as u64,
            DirectionFrame::Instantaneous,
        )
        .unwrap();
        cart.push(traj.magnitudes()[steps]);
        let traj = simulate_polar(&params, 1.0, &x0, dt, steps, 90_000 + p as u64).unwrap();
        polar.push(traj.magnitudes()[steps]);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let var = |v: &[f64], m: f64| v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64;
    let (mc, mp) = (mean(&cart), mean(&polar));
    let se = ((var(&cart, mc) + var(&polar, mp)) / n_paths as f64).sqrt();
    assert!(
        (mc - mp).abs() < 2.0 * se,
        "cartesian {mc} vs polar {mp}, 2se {}",
        2.0 * se
    );
}

#[test]
fn propagated_covariance_matches_closed_form_small_diffusion() {
    // sigma_t sqrt(dt) = 0.05: radial and tangential projections of the
    // empirical covariance agree with the closed form within 5%.
    let d = 3;
    let params = RtSdeParams::new(
        0.3,
        0.1,
        0.05,
        0.05,
        0.02,
        0.03,
        0.0,
        0.0,
        RotationFreqs::rope(d, 40.0),
    )
    .unwrap();
    let x0 = unit_x0(d);
    let dt_total = 1.0;
    let substeps = rtfilter_core::sim::default_substeps(&params, dt_total);
    let out = monte_carlo_propagated_cov(&params, &x0, dt_total, 100_000, substeps, 31).unwrap();
    let (sr_emp, st_emp) = project_rt(&out.cov, &out.mean_direction);
    let (sr_cf, st_cf) = sigma_v2(&params, dt_total).unwrap();
    let rel_r = (sr_emp - sr_cf).abs() / sr_cf;
    let rel_t = (st_emp - st_cf).abs() / st_cf;
    assert!(rel_r < 0.05, "radial {sr_emp} vs {sr_cf} (rel {rel_r})");
    assert!(rel_t < 0.05, "tangential {st_emp} vs {st_cf} (rel {rel_t})");
}

/// Coupled-increment integrator reimplementing the transported-frame step:
/// the fine path consumes Gaussian increments pairwise summed for the
/// coarse path, so the comparison isolates the discretization bias.
struct CoupledStats {
    radial: f64,
    tangential: f64,
    se_radial: f64,
    se_tangential: f64,
}

fn coupled_halving(params: &RtSdeParams, x0: &ComplexVec, t_total: f64, coarse_steps: usize, n_paths: usize) -> (CoupledStats, CoupledStats) {
    let dim = x0.dim_real();
    let omega = params.freqs.omega().to_vec();
    let u0: Vec<f64> = normalize(x0, 0.0).as_slice().to_vec();

    let step = |x: &mut [f64], u: &mut [f64], xi: &[f64], dt: f64| {
        let rc: f64 = u.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
        for i in 0..x.len() {
            x[i] += dt * (-params.mu_t * x[i] - (params.mu_r - params.mu_t) * rc * u[i]);
        }
        let s: f64 = u.iter().zip(xi).map(|(a, b)| a * b).sum();
        for i in 0..x.len() {
            let radial = s * u[i];
            x[i] += dt.sqrt() * (params.sigma_r * radial + params.sigma_t * (xi[i] - radial));
        }
        for (k, w) in omega.iter().enumerate() {
            let (sn, cs) = (w * dt).sin_cos();
            let (re, im) = (x[2 * k], x[2 * k + 1]);
            x[2 * k] = re * cs - im * sn;
            x[2 * k + 1] = re * sn + im * cs;
            let (re, im) = (u[2 * k], u[2 * k + 1]);
            u[2 * k] = re * cs - im * sn;
            u[2 * k + 1] = re * sn + im * cs;
        }
    };

    let fine_steps = 2 * coarse_steps;
    let dt_c = t_total / coarse_steps as f64;
    let dt_f = t_total / fine_steps as f64;
    let mut coarse_terminals = Vec::with_capacity(n_paths);
    let mut fine_terminals = Vec::with_capacity(n_paths);
    for p in 0..n_paths {
        let mut rng = ChaCha8Rng::seed_from_u64(500_000 + p as u64);
        let mut xc = x0.as_slice().to_vec();
        let mut uc = u0.clone();
        let mut xf = x0.as_slice().to_vec();
        let mut uf = u0.clone();
        for _ in 0..coarse_steps {
            let xi1: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let xi2: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            step(&mut xf, &mut uf, &xi1, dt_f);
            step(&mut xf, &mut uf, &xi2, dt_f);
            let coarse_xi: Vec<f64> = xi1
                .iter()
                .zip(&xi2)
                .map(|(a, b)| (a + b) / 2.0f64.sqrt())
                .collect();
            step(&mut xc, &mut uc, &coarse_xi, dt_c);
        }
        coarse_terminals.push(xc);
        fine_terminals.push(xf);
    }

    let stats = |terminals: &[Vec<f64>], u_rot: &[f64]| {
        let n = terminals.len();
        let mut mean = vec![0.0; dim];
        for t in terminals {
            for i in 0..dim {
                mean[i] += t[i];
            }
        }
        for m in mean.iter_mut() {
            *m /= n as f64;
        }
        let mut radial_acc = 0.0;
        let mut trace_acc = 0.0;
        for t in terminals {
            let r: f64 = (0..dim).map(|i| (t[i] - mean[i]) * u_rot[i]).sum();
            radial_acc += r * r;
            trace_acc += (0..dim).map(|i| (t[i] - mean[i]) * (t[i] - mean[i])).sum::<f64>();
        }
        let radial = radial_acc / (n - 1) as f64;
        let tangential = (trace_acc / (n - 1) as f64 - radial) / (dim - 1) as f64;
        CoupledStats {
            radial,
            tangential,
            se_radial: radial * (2.0 / (n as f64 - 1.0)).sqrt(),
            se_tangential: tangential * (2.0 / (n as f64 * (dim - 1) as f64)).sqrt(),
        }
    };

    // Rotated initial direction at the terminal time.
    let mut u_rot = u0.clone();
    for (k, w) in omega.iter().enumerate() {
        let (sn, cs) = (w * t_total).sin_cos();
        let (re, im) = (u_rot[2 * k], u_rot[2 * k + 1]);
        u_rot[2 * k] = re * cs - im * sn;
        u_rot[2 * k + 1] = re * sn + im * cs;
    }
    (
        stats(&coarse_terminals, &u_rot),
        stats(&fine_terminals, &u_rot),
    )
}

#[test]
fn halving_dt_changes_estimate_by_less_than_its_standard_error() {
    let d = 3;
    let params = RtSdeParams::new(
        0.3,
        0.2,
        0.1,
        0.1,
        0.0,
        0.0,
        0.0,
        0.0,
        RotationFreqs::rope(d, 25.0),
    )
    .unwrap();
    let x0 = unit_x0(d);
    let (coarse, fine) = coupled_halving(&params, &x0, 1.0, 200, 100_000);
    assert!(
        (coarse.radial - fine.radial).abs() < fine.se_radial,
        "radial {} vs {} (se {})",
        coarse.radial,
        fine.radial,
        fine.se_radial
    );
    assert!(
        (coarse.tangential - fine.tangential).abs() < fine.se_tangential,
        "tangential {} vs {} (se {})",
        coarse.tangential,
        fine.tangential,
        fine.se_tangential
    );

    // Cross-check the in-test integrator against the library estimator
    // (independent seeds, so allow a generous multiple of the noise).
    let out = monte_carlo_propagated_cov(&params, &x0, 1.0, 100_000, 200, 808).unwrap();
    let (sr, st) = project_rt(&out.cov, &out.mean_direction);
    assert!((sr - coarse.radial).abs() < 5.0 * coarse.se_radial);
    assert!((st - coarse.tangential).abs() < 5.0 * coarse.se_tangential);
}

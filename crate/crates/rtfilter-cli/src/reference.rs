//! Scalar-loop reference implementations, kept deliberately naive: explicit
//! per-coordinate rotations, explicit projections, explicit O(N^2 d)
//! pairwise loops, and their own softmax. These are the oracles the
//! vectorized forward passes are checked against, so they must not share
//! code paths with the library implementations.

use rtfilter_core::attention::{IsoParams, ProjectionSet, RealSeq};
use rtfilter_core::kernel::FilterHyperParams;
use rtfilter_core::sim::RtSdeParams;

pub struct NaiveOutput {
    pub logits: Vec<Vec<Vec<f64>>>,
    /// Per head: row-stochastic attention weights.
    pub weights: Vec<Vec<Vec<f64>>>,
    pub z_plus: Vec<Vec<f64>>,
}

fn mat_row_apply(m: &rtfilter_core::attention::Mat, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; m.rows()];
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (j, xv) in x.iter().enumerate() {
            acc += m.get(i, j) * xv;
        }
        *o = acc;
    }
    out
}

fn rotate_coords(x: &mut [f64], omega: &[f64], offset: usize, t: f64) {
    for (k, w) in omega.iter().enumerate() {
        let angle = w * t;
        let (s, c) = (angle.sin(), angle.cos());
        let re = x[2 * (offset + k)];
        let im = x[2 * (offset + k) + 1];
        x[2 * (offset + k)] = re * c - im * s;
        x[2 * (offset + k) + 1] = re * s + im * c;
    }
}

fn phi_naive(mu: f64, dt: f64) -> f64 {
    if mu > 0.0 {
        (1.0 - (-2.0 * mu * dt).exp()) / (2.0 * mu)
    } else {
        dt
    }
}

fn tangential_residual_var(p: &RtSdeParams, dt: f64) -> f64 {
    phi_naive(p.mu_t, dt) * p.sigma_t * p.sigma_t
        + (-2.0 * p.mu_t * dt).exp() * p.eta_t * p.eta_t
        + p.gamma_t * p.gamma_t
}

/// Naive forward pass over the head partition of `proj`, with per-head
/// dynamics and the global (full value norm) magnitudes.
pub fn naive_forward(
    z: &RealSeq,
    proj: &ProjectionSet,
    head_params: &[&RtSdeParams],
    hp: &FilterHyperParams,
    tangent: bool,
) -> NaiveOutput {
    let n = z.len();
    let d = proj.dim_complex();
    let n_heads = proj.n_heads();
    assert_eq!(head_params.len(), n_heads);
    let times = z.times();

    // Project and normalize, recording value norms first.
    let mut qs = Vec::with_capacity(n);
    let mut ks = Vec::with_capacity(n);
    let mut vs = Vec::with_capacity(n);
    let mut mags = Vec::with_capacity(n);
    for tok in z.tokens() {
        let q = mat_row_apply(&proj.w_q, tok);
        let k = mat_row_apply(&proj.w_k, tok);
        let v = mat_row_apply(&proj.w_v, tok);
        let m = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        mags.push(m);
        let norm_to = |mut vec: Vec<f64>| {
            let norm = vec.iter().map(|x| x * x).sum::<f64>().sqrt();
            let denom = norm.max(1e-12);
            for x in vec.iter_mut() {
                *x /= denom;
            }
            vec
        };
        qs.push(norm_to(q));
        ks.push(norm_to(k));
        vs.push(norm_to(v));
    }

    let mut logits_all = Vec::with_capacity(n_heads);
    let mut weights_all = Vec::with_capacity(n_heads);
    let mut increments = vec![vec![0.0; 2 * d]; n];

    for (h, params) in head_params.iter().enumerate() {
        let range = proj.head_range(h);
        let omega = params.freqs.omega();
        let dh = range.len();

        // Backward-rotated slices.
        let slice_rot = |src: &[Vec<f64>]| -> Vec<Vec<f64>> {
            src.iter()
                .zip(times)
                .map(|(tok, t)| {
                    let mut s = tok[2 * range.start..2 * range.end].to_vec();
                    rotate_coords(&mut s, omega, 0, -t);
                    s
                })
                .collect()
        };
        let qr = slice_rot(&qs);
        let kr = slice_rot(&ks);
        let vr = slice_rot(&vs);

        let st0 = tangential_residual_var(params, 0.0);
        let mut logits = vec![vec![f64::NEG_INFINITY; n]; n];
        for i in 0..n {
            for j in 0..=i {
                let dt = times[i] - times[j];
                let m_hat = mags[j] * (-params.mu_r * dt).exp();
                let st = tangential_residual_var(params, dt);
                let kappa = 1.0
                    / (st0 / (mags[i] * mags[i] + hp.eps)
                        + st / (m_hat * m_hat + hp.eps)
                        + hp.tau_theta2);
                let mut cos = 0.0;
                let mut qn = 0.0;
                let mut kn = 0.0;
                for c in 0..2 * dh {
                    cos += qr[i][c] * kr[j][c];
                    qn += qr[i][c] * qr[i][c];
                    kn += kr[j][c] * kr[j][c];
                }
                let r2 = (qn + kn - 2.0 * cos).max(0.0);
                logits[i][j] = kappa.ln() - hp.kappa_exp * (1.0 + kappa * r2 / hp.nu).ln();
            }
        }

        let mut weights = vec![vec![0.0; n]; n];
        for i in 0..n {
            let mut max = f64::NEG_INFINITY;
            for j in 0..=i {
                max = max.max(hp.beta_s * logits[i][j]);
            }
            let mut sum = 0.0;
            for j in 0..=i {
                weights[i][j] = (hp.beta_s * logits[i][j] - max).exp();
                sum += weights[i][j];
            }
            for j in 0..=i {
                weights[i][j] /= sum;
            }
        }

        for i in 0..n {
            let mut acc = vec![0.0; 2 * dh];
            for j in 0..=i {
                for c in 0..2 * dh {
                    acc[c] += weights[i][j] * vr[j][c];
                }
            }
            rotate_coords(&mut acc, omega, 0, times[i]);
            if tangent {
                let vslice = &vs[i][2 * range.start..2 * range.end];
                let vv: f64 = vslice.iter().map(|x| x * x).sum();
                if vv > 0.0 {
                    let dot: f64 = vslice.iter().zip(&acc).map(|(a, b)| a * b).sum();
                    for (a, vc) in acc.iter_mut().zip(vslice) {
                        *a -= dot / vv * vc;
                    }
                }
            }
            increments[i][2 * range.start..2 * range.end].copy_from_slice(&acc);
        }

        logits_all.push(logits);
        weights_all.push(weights);
    }

    let mut z_plus = Vec::with_capacity(n);
    for i in 0..n {
        let scaled: Vec<f64> = increments[i].iter().map(|x| hp.step_r * x).collect();
        let mapped = mat_row_apply(&proj.w_o, &scaled);
        z_plus.push(
            z.tokens()[i]
                .iter()
                .zip(&mapped)
                .map(|(a, b)| a + b)
                .collect(),
        );
    }

    NaiveOutput {
        logits: logits_all,
        weights: weights_all,
        z_plus,
    }
}

/// Single full-width head.
pub fn naive_rt_rfa(
    z: &RealSeq,
    proj: &ProjectionSet,
    params: &RtSdeParams,
    hp: &FilterHyperParams,
    tangent: bool,
) -> NaiveOutput {
    let full = proj
        .clone()
        .with_head_bounds(vec![0, proj.dim_complex()])
        .expect("full head");
    naive_forward(z, &full, &[params], hp, tangent)
}

pub struct NaiveIsoOutput {
    pub logits: Vec<Vec<f64>>,
    pub weights: Vec<Vec<f64>>,
    pub decayed_weights: Vec<Vec<f64>>,
    pub z_bar: Vec<Vec<f64>>,
}

/// Naive isotropic baseline: unnormalized tokens, scalar lag kernel,
/// explicit decay matrix.
pub fn naive_isotropic(
    z: &RealSeq,
    proj: &ProjectionSet,
    iso: &IsoParams,
    hp: &FilterHyperParams,
) -> NaiveIsoOutput {
    let n = z.len();
    let d = proj.dim_complex();
    let times = z.times();
    let omega = iso.freqs.omega();

    let qs: Vec<Vec<f64>> = z.tokens().iter().map(|t| mat_row_apply(&proj.w_q, t)).collect();
    let ks: Vec<Vec<f64>> = z.tokens().iter().map(|t| mat_row_apply(&proj.w_k, t)).collect();
    let vs: Vec<Vec<f64>> = z.tokens().iter().map(|t| mat_row_apply(&proj.w_v, t)).collect();

    let rot = |src: &[Vec<f64>]| -> Vec<Vec<f64>> {
        src.iter()
            .zip(times)
            .map(|(tok, t)| {
                let mut s = tok.clone();
                rotate_coords(&mut s, omega, 0, -t);
                s
            })
            .collect()
    };
    let qr = rot(&qs);
    let kr = rot(&ks);
    let vr = rot(&vs);

    let mut logits = vec![vec![f64::NEG_INFINITY; n]; n];
    let mut decay = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let tau = (times[i] - times[j]).abs();
            let e = (-iso.mu * tau).exp();
            decay[i][j] = e;
            let e2 = e * e;
            let var = iso.sigma2 * (1.0 - e2) + iso.eta2 * e2 + iso.gamma2;
            let p = 1.0 / var;
            let mut cos = 0.0;
            let mut qn = 0.0;
            let mut kn = 0.0;
            for c in 0..2 * d {
                cos += qr[i][c] * kr[j][c];
                qn += qs[i][c] * qs[i][c];
                kn += ks[j][c] * ks[j][c];
            }
            let r2 = (qn + e2 * kn - 2.0 * e * cos).max(0.0);
            logits[i][j] = p.ln() - hp.kappa_exp * (1.0 + p * r2 / hp.nu).ln();
        }
    }

    let mut weights = vec![vec![0.0; n]; n];
    for i in 0..n {
        let mut max = f64::NEG_INFINITY;
        for j in 0..=i {
            max = max.max(hp.beta_s * logits[i][j]);
        }
        let mut sum = 0.0;
        for j in 0..=i {
            weights[i][j] = (hp.beta_s * logits[i][j] - max).exp();
            sum += weights[i][j];
        }
        for j in 0..=i {
            weights[i][j] /= sum;
        }
    }
    let mut decayed = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            decayed[i][j] = weights[i][j] * decay[i][j];
        }
    }

    let mut z_bar = Vec::with_capacity(n);
    for i in 0..n {
        let mut acc = vec![0.0; 2 * d];
        for j in 0..=i {
            for c in 0..2 * d {
                acc[c] += decayed[i][j] * vr[j][c];
            }
        }
        rotate_coords(&mut acc, omega, 0, times[i]);
        z_bar.push(mat_row_apply(&proj.w_o, &acc));
    }

    NaiveIsoOutput {
        logits,
        weights,
        decayed_weights: decayed,
        z_bar,
    }
}

/// Plain softmax attention over rotated cosine similarities of the
/// normalized queries and keys, at the given inverse temperature. The
/// flat-prior limit of the filtering attention reduces to this up to a
/// row-constant logit shift.
pub fn cosine_softmax_weights(
    z: &RealSeq,
    proj: &ProjectionSet,
    params: &RtSdeParams,
    beta_eff: f64,
) -> Vec<Vec<f64>> {
    let n = z.len();
    let d = proj.dim_complex();
    let times = z.times();
    let omega = params.freqs.omega();

    let norm_to = |mut vec: Vec<f64>| {
        let norm = vec.iter().map(|x| x * x).sum::<f64>().sqrt();
        let denom = norm.max(1e-12);
        for x in vec.iter_mut() {
            *x /= denom;
        }
        vec
    };
    let qs: Vec<Vec<f64>> = z
        .tokens()
        .iter()
        .zip(times)
        .map(|(t, ti)| {
            let mut q = norm_to(mat_row_apply(&proj.w_q, t));
            rotate_coords(&mut q, omega, 0, -ti);
            q
        })
        .collect();
    let ks: Vec<Vec<f64>> = z
        .tokens()
        .iter()
        .zip(times)
        .map(|(t, ti)| {
            let mut k = norm_to(mat_row_apply(&proj.w_k, t));
            rotate_coords(&mut k, omega, 0, -ti);
            k
        })
        .collect();

    let mut weights = vec![vec![0.0; n]; n];
    for i in 0..n {
        let mut scores = vec![0.0; i + 1];
        let mut max = f64::NEG_INFINITY;
        for (j, score) in scores.iter_mut().enumerate() {
            let mut cos = 0.0;
            for c in 0..2 * d {
                cos += qs[i][c] * ks[j][c];
            }
            *score = beta_eff * cos;
            max = max.max(*score);
        }
        let mut sum = 0.0;
        for j in 0..=i {
            weights[i][j] = (scores[j] - max).exp();
            sum += weights[i][j];
        }
        for j in 0..=i {
            weights[i][j] /= sum;
        }
    }
    weights
}

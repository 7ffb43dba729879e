//! Stacked attention blocks with a plumbing feed-forward leg.
//!
//! The filtering derivation covers attention, the residual step, and the
//! retraction; the feed-forward network is not derived by it and ships here
//! only as configurable plumbing with a disable switch. Three stream
//! wirings are provided: the hybrid form (FFN reads the retracted stream
//! while the residual accumulates unnormalized), and the classical pre-norm
//! and post-norm arrangements.
//!
//! Stacking layers with shared weights re-transports the evidence, refreshes
//! the robust weights, and refines the directional estimate — an iteratively
//! reweighted estimation loop whose per-layer loss is exposed in the traces.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::attention::{
    normalize_tokens, project_and_normalize, rt_rfa_forward, AttentionError, AttentionTrace,
    Mat, ProjectionSet, RealSeq, ResidualKind, RtRfaOutput,
};
use crate::kernel::FilterHyperParams;
use crate::sim::RtSdeParams;
use crate::spectral::{re_dot, rotate};

#[derive(Debug, Error)]
pub enum TransformerError {
    #[error("stack requires at least one layer")]
    NoLayers,
    #[error("layer count mismatch: config says {expected}, got {got} layer parameter sets")]
    LayerCount { expected: usize, got: usize },
    #[error("FFN width multiplier must be at least 1")]
    BadWidthMult,
    #[error("step_r must be nonnegative, got {0}")]
    NegativeStep(f64),
    #[error(transparent)]
    Attention(#[from] AttentionError),
}

/// Residual-stream wiring of a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockVariant {
    /// Attention and FFN branches read per-token normalized copies; the
    /// stream itself accumulates without renormalization.
    PreNorm,
    /// The stream is retracted onto the sphere after every branch.
    PostNorm,
    /// The FFN reads the retracted output while the residual stays
    /// unnormalized — the wiring written in the block recipe.
    Hybrid,
}

/// Feed-forward configuration. `Zero` disables the leg entirely; `Identity`
/// adds the (normalized) branch input straight through; `TwoLayer` is two
/// affine maps around a tanh with optional zero-initialized output weights.
#[derive(Debug, Clone, PartialEq)]
pub enum FfnSpec {
    Zero,
    Identity,
    TwoLayer {
        width_mult: usize,
        seed: u64,
        zero_init_output: bool,
    },
}

/// Block configuration: wiring, residual style, FFN, update scale, depth.
/// The default `step_r` scaling is `0.1 sqrt(D)` for a `D`-real stream.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockConfig {
    pub variant: BlockVariant,
    pub residual: ResidualKind,
    pub ffn: FfnSpec,
    pub step_r: f64,
    pub n_layers: usize,
}

impl BlockConfig {
    pub fn new(
        variant: BlockVariant,
        residual: ResidualKind,
        ffn: FfnSpec,
        step_r: f64,
        n_layers: usize,
    ) -> Result<Self, TransformerError> {
        if n_layers == 0 {
            return Err(TransformerError::NoLayers);
        }
        if let FfnSpec::TwoLayer { width_mult, .. } = &ffn {
            if *width_mult == 0 {
                return Err(TransformerError::BadWidthMult);
            }
        }
        if !(step_r >= 0.0) {
            return Err(TransformerError::NegativeStep(step_r));
        }
        Ok(Self {
            variant,
            residual,
            ffn,
            step_r,
            n_layers,
        })
    }
}

struct FfnWeights {
    w1: Mat,
    w2: Mat,
}

fn build_ffn(dim: usize, width_mult: usize, seed: u64, zero_out: bool, layer: u64) -> FfnWeights {
    let mut bytes = [0u8; 32];
    bytes[0..8].copy_from_slice(&seed.to_le_bytes());
    bytes[8..16].copy_from_slice(&layer.to_le_bytes());
    bytes[16..24].copy_from_slice(&5u64.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(bytes);
    let hidden = dim * width_mult;
    let scale_in = 1.0 / (dim as f64).sqrt();
    let scale_out = 1.0 / (hidden as f64).sqrt();
    let mut w1 = Mat::zeros(hidden, dim);
    for i in 0..hidden {
        for j in 0..dim {
            let x: f64 = StandardNormal.sample(&mut rng);
            w1.set(i, j, x * scale_in);
        }
    }
    let mut w2 = Mat::zeros(dim, hidden);
    if !zero_out {
        for i in 0..dim {
            for j in 0..hidden {
                let x: f64 = StandardNormal.sample(&mut rng);
                w2.set(i, j, x * scale_out);
            }
        }
    }
    FfnWeights { w1, w2 }
}

fn apply_ffn(cfg: &BlockConfig, dim: usize, layer: u64, input: &RealSeq) -> Option<Vec<Vec<f64>>> {
    match &cfg.ffn {
        FfnSpec::Zero => None,
        FfnSpec::Identity => Some(input.tokens().to_vec()),
        FfnSpec::TwoLayer {
            width_mult,
            seed,
            zero_init_output,
        } => {
            let weights = build_ffn(dim, *width_mult, *seed, *zero_init_output, layer);
            Some(
                input
                    .tokens()
                    .iter()
                    .map(|tok| {
                        let hidden: Vec<f64> =
                            weights.w1.mul_vec(tok).iter().map(|x| x.tanh()).collect();
                        weights.w2.mul_vec(&hidden)
                    })
                    .collect(),
            )
        }
    }
}

fn add_tokens(base: &RealSeq, delta: &[Vec<f64>]) -> RealSeq {
    let tokens = base
        .tokens()
        .iter()
        .zip(delta)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
        .collect();
    RealSeq::new(tokens, base.times().to_vec()).expect("shape preserved")
}

fn token_norms(z: &RealSeq) -> Vec<f64> {
    z.tokens()
        .iter()
        .map(|t| t.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect()
}

/// Per-layer record: the attention trace, the entry-state directional loss
/// per query, and the stream norms around the block.
#[derive(Debug, Clone)]
pub struct BlockTrace {
    pub attention: AttentionTrace,
    /// Directional NLL of each query's value direction against its own
    /// transported evidence, with the layer's effective precisions.
    pub nll: Vec<f64>,
    pub input_norms: Vec<f64>,
    /// Norms of what the attention branch actually consumed.
    pub branch_input_norms: Vec<f64>,
    pub output_norms: Vec<f64>,
}

/// Entry-state directional loss: evidence directions are the transported
/// key directions, weighted by the robust effective precisions the layer
/// itself computed.
fn entry_nll(
    branch_input: &RealSeq,
    proj: &ProjectionSet,
    params: &RtSdeParams,
    out: &RtRfaOutput,
) -> Result<Vec<f64>, AttentionError> {
    let (_, k, v, _) = project_and_normalize(branch_input, proj)?;
    let times = branch_input.times();
    let n = branch_input.len();
    let kappa = &out.trace.head().effective_precisions;
    let mut nll = vec![0.0; n];
    for i in 0..n {
        let mut acc = 0.0;
        for j in 0..=i {
            let u_hat = rotate(&k.tokens[j], &params.freqs, times[i] - times[j]);
            acc += kappa[i][j] * (1.0 - re_dot(&v.tokens[i], &u_hat));
        }
        nll[i] = acc;
    }
    Ok(nll)
}

/// One block: attention with the configured wiring, then the FFN leg.
pub fn block_forward(
    z: &RealSeq,
    cfg: &BlockConfig,
    proj: &ProjectionSet,
    params: &RtSdeParams,
    hp: &FilterHyperParams,
    layer_index: u64,
) -> Result<(RealSeq, BlockTrace), TransformerError> {
    let hp_block = FilterHyperParams {
        step_r: cfg.step_r,
        ..hp.clone()
    };
    let branch_input = match cfg.variant {
        BlockVariant::PreNorm => normalize_tokens(z),
        BlockVariant::PostNorm | BlockVariant::Hybrid => z.clone(),
    };
    let out = rt_rfa_forward(&branch_input, proj, params, &hp_block, cfg.residual)?;
    let nll = entry_nll(&branch_input, proj, params, &out)?;

    let after_attention = match cfg.variant {
        BlockVariant::PreNorm => add_tokens(z, &out.ambient_increments),
        BlockVariant::PostNorm => normalize_tokens(&out.z_plus),
        BlockVariant::Hybrid => out.z_plus.clone(),
    };

    let ffn_input = match cfg.variant {
        BlockVariant::PreNorm => normalize_tokens(&after_attention),
        BlockVariant::PostNorm => after_attention.clone(),
        // The recipe feeds the retracted attention output to the FFN.
        BlockVariant::Hybrid => out.u_plus.clone(),
    };
    let z_out = match apply_ffn(cfg, z.dim(), layer_index, &ffn_input) {
        None => after_attention.clone(),
        Some(delta) => {
            let summed = add_tokens(&after_attention, &delta);
            if cfg.variant == BlockVariant::PostNorm {
                normalize_tokens(&summed)
            } else {
                summed
            }
        }
    };

    let trace = BlockTrace {
        nll,
        input_norms: token_norms(z),
        branch_input_norms: token_norms(&branch_input),
        output_norms: token_norms(&z_out),
        attention: out.trace,
    };
    Ok((z_out, trace))
}

/// Sequential composition of blocks. `layers` supplies one
/// `(projections, dynamics)` pair per block and must match the configured
/// depth; repeat one pair for a shared-weight stack.
pub fn stack_forward(
    z: &RealSeq,
    cfg: &BlockConfig,
    layers: &[(ProjectionSet, RtSdeParams)],
    hp: &FilterHyperParams,
) -> Result<(RealSeq, Vec<BlockTrace>), TransformerError> {
    if layers.is_empty() {
        return Err(TransformerError::NoLayers);
    }
    if layers.len() != cfg.n_layers {
        return Err(TransformerError::LayerCount {
            expected: cfg.n_layers,
            got: layers.len(),
        });
    }
    let mut stream = z.clone();
    let mut traces = Vec::with_capacity(layers.len());
    for (index, (proj, params)) in layers.iter().enumerate() {
        let (next, trace) = block_forward(&stream, cfg, proj, params, hp, index as u64)?;
        stream = next;
        traces.push(trace);
    }
    Ok((stream, traces))
}

/// Per-layer, per-query directional losses extracted from the traces.
pub fn irls_trace(traces: &[BlockTrace]) -> Vec<Vec<f64>> {
    traces.iter().map(|t| t.nll.clone()).collect()
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Median over queries of each layer's directional loss.
pub fn median_losses(traces: &[BlockTrace]) -> Vec<f64> {
    traces
        .iter()
        .map(|t| {
            let mut v = t.nll.clone();
            median(&mut v)
        })
        .collect()
}

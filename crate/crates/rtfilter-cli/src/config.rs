//! Experiment configuration: versioned JSON with unknown fields rejected,
//! so parameter-name typos fail fast instead of silently using defaults.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use rtfilter_core::kernel::FilterHyperParams;
use rtfilter_core::sim::RtSdeParams;
use rtfilter_core::spectral::RotationFreqs;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub experiment: String,
    pub sde: SdeConfig,
    pub hyper: HyperConfig,
    pub sim: SimConfig,
    pub sequence: SequenceConfig,
    #[serde(default)]
    pub tolerances: Tolerances,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdeConfig {
    pub mu_r: f64,
    pub mu_t: f64,
    pub sigma_r: f64,
    pub sigma_t: f64,
    pub eta_r: f64,
    pub eta_t: f64,
    pub gamma_r: f64,
    pub gamma_t: f64,
    pub omega: OmegaSpec,
}

/// Rotation schedule: the geometric default, explicit per-coordinate
/// frequencies, or none.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum OmegaSpec {
    Rope { base: f64 },
    Explicit { values: Vec<f64> },
    Zero,
}

impl OmegaSpec {
    pub fn build(&self, dim_complex: usize) -> Result<RotationFreqs> {
        Ok(match self {
            OmegaSpec::Rope { base } => RotationFreqs::rope(dim_complex, *base),
            OmegaSpec::Zero => RotationFreqs::zero(dim_complex),
            OmegaSpec::Explicit { values } => {
                if values.len() != dim_complex {
                    bail!(
                        "explicit omega has {} entries, expected {dim_complex}",
                        values.len()
                    );
                }
                RotationFreqs::new(values.clone())?
            }
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperConfig {
    pub tau_theta2: f64,
    pub eps: f64,
    pub nu: f64,
    /// Defaults to `(nu + D) / D` for the relevant real dimension `D = 2d`.
    #[serde(default)]
    pub kappa_exp: Option<f64>,
    pub beta_s: f64,
    pub step_r: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub d_complex: usize,
    pub dt: f64,
    pub steps: usize,
    pub n_paths: usize,
    /// Euler substeps for covariance ensembles; defaults to the
    /// discretization rule when absent.
    #[serde(default)]
    pub substeps: Option<usize>,
    /// Initial state as interleaved reals; defaults to the first basis
    /// vector.
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
    /// Where `simulate` writes the trajectory CSV; defaults to the report
    /// path with a `.csv` extension.
    #[serde(default)]
    pub csv_out: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceConfig {
    pub n_tokens: usize,
    pub d_complex: usize,
    pub n_heads: usize,
    pub ambient_dim: usize,
    pub seed: u64,
    #[serde(default = "default_n_sequences")]
    pub n_sequences: usize,
}

fn default_n_sequences() -> usize {
    20
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    /// Relative tolerance for covariance projections.
    pub cov_rel: f64,
    /// Absolute floor under the relative covariance tolerance.
    pub cov_abs_floor: f64,
    /// Elementwise tolerance for attention-weight agreement.
    pub weights_match: f64,
    /// Tolerance for scalar-loop oracle equivalence.
    pub oracle_match: f64,
    /// Relative tolerance for the measured direction-deviation statistic.
    pub direction_dev: f64,
    /// Allowed violation when asserting nonincreasing losses.
    pub descent_slack: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            cov_rel: 0.05,
            cov_abs_floor: 1e-6,
            weights_match: 1e-10,
            oracle_match: 1e-10,
            direction_dev: 0.15,
            descent_slack: 1e-12,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        if cfg.version != CONFIG_VERSION {
            bail!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                cfg.version
            );
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        // Instantiating the core types runs their invariant checks.
        self.sde_params(self.sim.d_complex)?;
        self.hyper_params(self.sequence.d_complex)?;
        if self.sequence.n_tokens == 0 {
            bail!("sequence.n_tokens must be positive");
        }
        if self.sequence.n_heads == 0 || self.sequence.d_complex % self.sequence.n_heads != 0 {
            bail!(
                "{} heads do not evenly partition {} coordinates",
                self.sequence.n_heads,
                self.sequence.d_complex
            );
        }
        if self.sequence.ambient_dim < 2 * self.sequence.d_complex {
            bail!("sequence.ambient_dim must be at least 2 * d_complex");
        }
        if !(self.sim.dt > 0.0) {
            bail!("sim.dt must be positive");
        }
        Ok(())
    }

    pub fn sde_params(&self, dim_complex: usize) -> Result<RtSdeParams> {
        let s = &self.sde;
        Ok(RtSdeParams::new(
            s.mu_r,
            s.mu_t,
            s.sigma_r,
            s.sigma_t,
            s.eta_r,
            s.eta_t,
            s.gamma_r,
            s.gamma_t,
            s.omega.build(dim_complex)?,
        )?)
    }

    pub fn hyper_params(&self, dim_complex: usize) -> Result<FilterHyperParams> {
        let h = &self.hyper;
        let d_real = (2 * dim_complex) as f64;
        let kappa_exp = h.kappa_exp.unwrap_or((h.nu + d_real) / d_real);
        Ok(FilterHyperParams::new(
            h.tau_theta2,
            h.eps,
            h.nu,
            kappa_exp,
            h.beta_s,
            h.step_r,
        )?)
    }
}

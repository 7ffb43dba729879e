//! Radial–tangential stochastic filtering on the hypersphere.
//!
//! The library is organized around a latent linear SDE whose drift and noise
//! decompose into components along the state direction (radial) and orthogonal
//! to it (tangential), co-rotating with the state. Because the rotation
//! cancels inside the covariance integral, the propagated covariance of a
//! transported measurement stays a two-scalar structured matrix for all lags,
//! which makes precision-weighted directional estimation — and the attention
//! mechanism built from it — computable in closed form.
//!
//! Modules:
//! - [`spectral`]: complex-paired vector algebra, rotations, projectors,
//!   structured covariance application and inversion.
//! - [`sim`]: seeded Euler–Maruyama simulation of the SDE (Cartesian and
//!   polar forms), the measurement model, and Monte Carlo covariance
//!   ensembles used as ground-truth oracles.
//! - [`kernel`]: the closed-form propagated variances, directional precision,
//!   whitened angular distance, and robust weights.
//! - [`filter`]: single-query directional filtering — transport, consensus,
//!   directional MLE, tangent-space updates, slerp, and the IRLS step.
//! - [`attention`]: sequence-level attention in matrix form, the isotropic
//!   baseline, and multi-head block-diagonal composition.
//! - [`transformer`]: stacked blocks with pre-norm / post-norm wiring
//!   variants and per-layer loss traces.

pub mod attention;
pub mod filter;
pub mod kernel;
pub mod sim;
pub mod spectral;
pub mod transformer;

pub use attention::{
    AttentionTrace, ComplexSeq, HeadTrace, Mask, ProjectionSet, RealSeq, ResidualKind,
    RtRfaOutput,
};
pub use filter::DirectionalEvidence;
pub use kernel::FilterHyperParams;
pub use sim::{DirectionFrame, PropagatedCov, RtSdeParams, Trajectory};
pub use spectral::{ComplexVec, RotationFreqs, RtCovariance};
pub use transformer::{BlockConfig, BlockTrace, BlockVariant, FfnSpec};

//! Exact Gaussian process regression and classification with learned neural
//! feature-map kernels `k(x, x') = σ_f² ψ(x)ᵀψ(x') + σ_ξ² δ(x, x')`.
//!
//! Because the kernel is an inner product of `p`-dimensional features, the
//! `n × n` Gram matrix has rank at most `p` and every inference quantity can
//! be computed from an eigendecomposition of the `p × p` matrix `ΨᵀΨ`.
//!
//! * [`nn`]: the MLP feature map, its reverse-mode gradient and Adam.
//! * [`kernel`]: single, product and additive feature-map kernels.
//! * [`lowrank`]: Gram accumulation, Woodbury solves, log-determinants,
//!   product and additive feature compositions.
//! * [`regression`]: marginal likelihood training, prediction and
//!   recalibration, plus the dense exact-GP oracle.
//! * [`classification`]: Dirichlet-based classification with temperature
//!   scaling and expected calibration error.
//! * [`spectral`]: Gram spectra for the kernel zoo and majorization checks.
//! * [`data`]: CSV ingestion, splitting/whitening and synthetic generators.
//! * [`training`]: subset-cycled Adam on the negative marginal likelihood.
//! * [`oracle`]: randomized equivalence batteries against dense algebra.

pub mod classification;
pub mod data;
pub mod error;
pub mod kernel;
pub mod lowrank;
pub mod nn;
pub mod oracle;
pub mod parallel;
pub mod regression;
mod serde_mat;
pub mod spectral;
pub mod training;

pub use classification::{DirichletClassifier, LatentPosterior};
pub use data::{Dataset, NormalizationStats, RawTable, Task};
pub use error::{FmgpError, Result};
pub use kernel::FeatureKernel;
pub use lowrank::{FeatureDecomposition, GramAccumulator, ProductFeaturePlan};
pub use nalgebra;
pub use nn::{Adam, FeatureMap, FeatureMapConfig, Normalization};
pub use oracle::{OracleConfig, OracleReport};
pub use regression::{GpModel, PredictiveDistribution};
pub use spectral::KernelSpec;
pub use training::{TrainConfig, TrainingTrace};

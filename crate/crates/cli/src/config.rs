use std::path::{Path, PathBuf};

use fmgp_core::classification::{DEFAULT_ALPHA_EPS, DEFAULT_ECE_BINS, DEFAULT_NUM_SAMPLES};
use fmgp_core::data::LatentKind;
use fmgp_core::spectral::DecayConfig;
use fmgp_core::{
    FeatureKernel, FeatureMap, FeatureMapConfig, KernelSpec, Normalization, OracleConfig, Task, TrainConfig,
};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    pub data: Option<DataSource>,
    pub split: SplitConfig,
    pub architecture: Architecture,
    pub kernel: Composition,
    pub training: TrainConfig,
    pub recalibrate: bool,
    pub classification: ClassificationConfig,
    pub spectral: DecayConfig,
    pub oracle: OracleConfig,
    /// Model file read by `eval`; defaults to `model.json` in the output
    /// directory.
    pub model_path: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: Task::Regression,
            data: None,
            split: SplitConfig::default(),
            architecture: Architecture::default(),
            kernel: Composition::Single,
            training: TrainConfig::default(),
            recalibrate: true,
            classification: ClassificationConfig::default(),
            spectral: DecayConfig::default(),
            oracle: OracleConfig::default(),
            model_path: None,
            output_dir: PathBuf::from("fmgp-out"),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Csv {
        path: PathBuf,
    },
    /// Sample path of a GP with the given kernel on uniform inputs.
    SyntheticGp {
        kernel: KernelSpec,
        n: usize,
        d: usize,
        noise_sd: f64,
        #[serde(default)]
        seed: u64,
    },
    Manifold {
        latent: LatentKind,
        n: usize,
        d_ambient: usize,
        eps: f64,
        noise_sd: f64,
        #[serde(default)]
        seed: u64,
    },
    Blobs {
        n: usize,
        d: usize,
        separation: f64,
        #[serde(default)]
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub test_n: usize,
    pub recal_n: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { test_n: 1000, recal_n: 1000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    pub hidden_width: usize,
    pub depth: usize,
    pub output_dim: usize,
    pub layer_norm: bool,
    pub rescale_to_unit: bool,
}

impl Default for Architecture {
    fn default() -> Self {
        Self { hidden_width: 512, depth: 2, output_dim: 64, layer_norm: true, rescale_to_unit: false }
    }
}

impl Architecture {
    fn map_config(&self, d: usize, p: usize) -> FeatureMapConfig {
        let mut widths = vec![d];
        widths.extend(std::iter::repeat_n(self.hidden_width, self.depth));
        widths.push(p);
        let norm = if self.layer_norm { Normalization::LayerNorm } else { Normalization::None };
        FeatureMapConfig::new(widths).with_normalization(norm).with_rescale(self.rescale_to_unit)
    }
}

/// How feature maps combine into the kernel. Component output dimensions
/// for `product` and `additive` replace `architecture.output_dim`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Composition {
    Single,
    Product { p1: usize, p2: usize },
    Additive { p1: usize, p2: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassificationConfig {
    pub alpha_eps: f64,
    pub num_samples: usize,
    pub ece_bins: usize,
    pub temperature: bool,
}

impl Default for ClassificationConfig {
    fn default() -> Self {
        Self {
            alpha_eps: DEFAULT_ALPHA_EPS,
            num_samples: DEFAULT_NUM_SAMPLES,
            ece_bins: DEFAULT_ECE_BINS,
            temperature: true,
        }
    }
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::config(msg)
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| invalid(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| invalid(format!("invalid config {}: {e}", path.display())))?;
        Ok(cfg)
    }

    /// Applies command-line overrides. The run seed drives splitting,
    /// initialization and training.
    pub fn with_overrides(mut self, seed: Option<u64>, out: Option<PathBuf>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
            self.spectral.seeds = vec![s];
            self.oracle.seed = s;
        }
        if let Some(o) = out {
            self.output_dir = o;
        }
        self.training.seed = self.seed;
        self
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let a = &self.architecture;
        if a.hidden_width == 0 {
            return Err(invalid("architecture.hidden_width must be positive"));
        }
        match self.kernel {
            Composition::Single if a.output_dim == 0 => {
                return Err(invalid("architecture.output_dim must be positive"));
            }
            Composition::Product { p1, p2 } | Composition::Additive { p1, p2 } if p1 == 0 || p2 == 0 => {
                return Err(invalid("kernel.p1 and kernel.p2 must be positive"));
            }
            _ => {}
        }
        self.training.validate().map_err(CliError::from)?;
        let c = &self.classification;
        if !(c.alpha_eps > 0.0 && c.alpha_eps.is_finite()) {
            return Err(invalid("classification.alpha_eps must be positive"));
        }
        if c.num_samples == 0 || c.ece_bins == 0 {
            return Err(invalid("classification.num_samples and ece_bins must be positive"));
        }
        if let Some(data) = &self.data {
            data.validate(self.task)?;
        }
        Ok(())
    }

    pub fn data(&self) -> Result<&DataSource, CliError> {
        self.data.as_ref().ok_or_else(|| invalid("config has no data section"))
    }

    pub fn model_path(&self) -> PathBuf {
        self.model_path.clone().unwrap_or_else(|| self.output_dir.join("model.json"))
    }

    /// Freshly initialized kernel for inputs of dimension `d`.
    pub fn build_kernel(&self, d: usize) -> Result<FeatureKernel, CliError> {
        let a = &self.architecture;
        let init = |p: usize, offset: u64| FeatureMap::init(&a.map_config(d, p), self.seed.wrapping_add(offset));
        let kernel = match self.kernel {
            Composition::Single => FeatureKernel::single(init(a.output_dim, 0)?),
            Composition::Product { p1, p2 } => FeatureKernel::product(init(p1, 0)?, init(p2, 1)?)?,
            Composition::Additive { p1, p2 } => FeatureKernel::additive(init(p1, 0)?, init(p2, 1)?)?,
        };
        Ok(kernel)
    }
}

impl DataSource {
    fn validate(&self, task: Task) -> Result<(), CliError> {
        let regression_only = matches!(self, DataSource::SyntheticGp { .. } | DataSource::Manifold { .. });
        if regression_only && task != Task::Regression {
            return Err(invalid("synthetic_gp and manifold data are regression-only"));
        }
        if matches!(self, DataSource::Blobs { .. }) && task != Task::Classification {
            return Err(invalid("blobs data is classification-only"));
        }
        match self {
            DataSource::SyntheticGp { kernel, n, d, noise_sd, .. } => {
                kernel.validate().map_err(CliError::from)?;
                if *n == 0 || *d == 0 || noise_sd.is_nan() || *noise_sd < 0.0 {
                    return Err(invalid("synthetic_gp needs n, d > 0 and noise_sd >= 0"));
                }
            }
            DataSource::Manifold { n, noise_sd, eps, .. } => {
                if *n == 0 || noise_sd.is_nan() || *noise_sd < 0.0 || !eps.is_finite() {
                    return Err(invalid("manifold needs n > 0, noise_sd >= 0 and finite eps"));
                }
            }
            DataSource::Blobs { n, d, separation, .. } => {
                if *n == 0 || *d == 0 || !separation.is_finite() {
                    return Err(invalid("blobs needs n, d > 0 and finite separation"));
                }
            }
            DataSource::Csv { .. } => {}
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_reference_setup() {
        let cfg: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg.architecture.hidden_width, 512);
        assert_eq!(cfg.architecture.depth, 2);
        assert_eq!(cfg.architecture.output_dim, 64);
        assert_eq!(cfg.training.iterations, 200);
        assert_eq!(cfg.training.num_subsets, 4);
        assert_eq!(cfg.training.subset_size, 20000);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"tasks": "regression"}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"architecture": {"width": 3}}"#).is_err());
    }

    #[test]
    fn zero_output_dim_is_config_error() {
        let cfg: RunConfig = serde_json::from_str(r#"{"architecture": {"output_dim": 0}}"#).unwrap();
        assert_eq!(cfg.validate().unwrap_err().exit_code(), 2);
    }

    #[test]
    fn task_and_source_must_agree() {
        let cfg: RunConfig = serde_json::from_str(
            r#"{"task": "classification", "data": {"source": "manifold", "latent": {"kind": "circle"},
                "n": 10, "d_ambient": 3, "eps": 0.1, "noise_sd": 0.0}}"#,
        )
        .unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn seed_override_reaches_training() {
        let cfg = RunConfig::default().with_overrides(Some(9), None);
        assert_eq!(cfg.training.seed, 9);
        assert_eq!(cfg.oracle.seed, 9);
    }

    #[test]
    fn product_kernel_has_product_width() {
        let cfg: RunConfig = serde_json::from_str(
            r#"{"architecture": {"hidden_width": 4}, "kernel": {"kind": "product", "p1": 3, "p2": 5}}"#,
        )
        .unwrap();
        assert_eq!(cfg.build_kernel(2).unwrap().output_dim(), 15);
    }
}

//! Shared fixtures for the inference benchmarks.

use fmgp_core::data::{synth_manifold, LatentKind};
use fmgp_core::nalgebra::{DMatrix, DVector};
use fmgp_core::{FeatureKernel, FeatureMap, FeatureMapConfig, GpModel, Result};

/// An untrained model with the reference architecture (`d → 512 → 512 → p`)
/// built on `n` points of a warped-circle synthetic, plus query inputs.
pub struct Fixture {
    pub model: GpModel,
    pub x_train: DMatrix<f64>,
    pub y_train: DVector<f64>,
    pub x_query: DMatrix<f64>,
}

pub fn fixture(n: usize, p: usize, queries: usize, seed: u64) -> Result<Fixture> {
    let d = 3;
    let train = synth_manifold(n, LatentKind::Circle, d, 0.5, 0.1, seed)?;
    let query = synth_manifold(queries, LatentKind::Circle, d, 0.5, 0.1, seed + 1)?;
    let map = FeatureMap::init(&FeatureMapConfig::new(vec![d, 512, 512, p]), seed)?;
    let model = GpModel::build(FeatureKernel::single(map), 1.0, 0.1, &train.x, &train.y)?;
    Ok(Fixture { model, x_train: train.x, y_train: train.y, x_query: query.x })
}

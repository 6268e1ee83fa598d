//! Multi-output MLP feature maps `x ↦ φ(x) ∈ ℝ^p`.
//!
//! A [`FeatureMap`] is a stack of dense layers with ReLU activations on the
//! hidden layers and an affine output layer. Hidden layers may carry a
//! layer normalisation (applied to the affine output, before the
//! activation) with a learnable gain and offset. When `rescale_to_unit` is
//! set, every output row is divided by its Euclidean norm, so the induced
//! kernel `j(x, x) = φ(x)ᵀφ(x)` equals one wherever the raw output is
//! nonzero.
//!
//! Inputs are batches stored as `n × d` matrices with one sample per row.

mod adam;
mod doc;

pub use adam::Adam;
pub use doc::FeatureMapDoc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{FmgpError, Result};

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    None,
    #[default]
    LayerNorm,
}

/// Learnable gain/offset of a layer normalisation.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: DVector<f64>,
    pub offset: DVector<f64>,
}

/// One affine layer; `weight` is `fan_in × fan_out` so that `Z = H·W + 1bᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub norm: Option<LayerNorm>,
}

impl DenseLayer {
    pub fn fan_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.ncols()
    }

    fn num_params(&self) -> usize {
        let norm = self.norm.as_ref().map_or(0, |n| n.gain.len() + n.offset.len());
        self.weight.len() + self.bias.len() + norm
    }
}

/// Architecture of a feature map, independent of its parameter values.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureMapConfig {
    /// `[d, h_1, …, h_L, p]`.
    pub layer_widths: Vec<usize>,
    #[serde(default)]
    pub normalization: Normalization,
    #[serde(default)]
    pub rescale_to_unit: bool,
}

impl FeatureMapConfig {
    pub fn new(layer_widths: Vec<usize>) -> Self {
        Self { layer_widths, normalization: Normalization::LayerNorm, rescale_to_unit: false }
    }

    pub fn with_normalization(mut self, normalization: Normalization) -> Self {
        self.normalization = normalization;
        self
    }

    pub fn with_rescale(mut self, rescale_to_unit: bool) -> Self {
        self.rescale_to_unit = rescale_to_unit;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(FmgpError::config(format!(
                "layer_widths needs at least input and output widths, got {:?}",
                self.layer_widths
            )));
        }
        if self.layer_widths.contains(&0) {
            return Err(FmgpError::config(format!("layer widths must be positive, got {:?}", self.layer_widths)));
        }
        Ok(())
    }
}

/// Multi-output MLP `φ_θ : ℝ^d → ℝ^p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FeatureMapDoc", into = "FeatureMapDoc")]
pub struct FeatureMap {
    layers: Vec<DenseLayer>,
    activation: Activation,
    normalization: Normalization,
    rescale_to_unit: bool,
}

/// Gradient of a scalar with respect to one [`DenseLayer`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub gain: Option<DVector<f64>>,
    pub offset: Option<DVector<f64>>,
}

/// Parameter-shaped gradients of a [`FeatureMap`].
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMapGrad {
    pub layers: Vec<LayerGrad>,
}

impl FeatureMapGrad {
    /// Flattens in the same order as [`FeatureMap::params_flat`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.flatten_into(&mut out);
        out
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for g in &self.layers {
            out.extend_from_slice(g.weight.as_slice());
            out.extend_from_slice(g.bias.as_slice());
            if let Some(gain) = &g.gain {
                out.extend_from_slice(gain.as_slice());
            }
            if let Some(offset) = &g.offset {
                out.extend_from_slice(offset.as_slice());
            }
        }
    }
}

struct HiddenCache {
    input: DMatrix<f64>,
    normalized: Option<DMatrix<f64>>,
    inv_std: Option<DVector<f64>>,
    activated_mask: DMatrix<f64>,
}

/// Intermediate values recorded by [`FeatureMap::forward_with_cache`].
pub struct ForwardCache {
    hidden: Vec<HiddenCache>,
    last_input: DMatrix<f64>,
    row_norms: Option<DVector<f64>>,
    output: DMatrix<f64>,
}

impl ForwardCache {
    /// Per hidden layer, 1 where the ReLU was active and 0 elsewhere.
    pub fn activation_masks(&self) -> impl Iterator<Item = &DMatrix<f64>> {
        self.hidden.iter().map(|h| &h.activated_mask)
    }

    pub fn output(&self) -> &DMatrix<f64> {
        &self.output
    }
}

impl FeatureMap {
    /// He-initialised map: weights `N(0, 2/fan_in)`, zero biases, unit
    /// layer-norm gains and zero offsets. Reproducible from `seed`.
    pub fn init(config: &FeatureMapConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = &config.layer_widths;
        let num_layers = widths.len() - 1;
        let mut layers = Vec::with_capacity(num_layers);
        for (l, pair) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let normal =
                Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).map_err(|e| FmgpError::config(e.to_string()))?;
            let weight = DMatrix::from_fn(fan_in, fan_out, |_, _| normal.sample(&mut rng));
            let hidden = l + 1 < num_layers;
            let norm = (hidden && config.normalization == Normalization::LayerNorm)
                .then(|| LayerNorm { gain: DVector::from_element(fan_out, 1.0), offset: DVector::zeros(fan_out) });
            layers.push(DenseLayer { weight, bias: DVector::zeros(fan_out), norm });
        }
        Ok(Self {
            layers,
            activation: Activation::Relu,
            normalization: config.normalization,
            rescale_to_unit: config.rescale_to_unit,
        })
    }

    /// Builds a map from explicit layers. Hidden layers must all carry a
    /// layer norm iff `normalization` is `LayerNorm`; the output layer never
    /// does.
    pub fn from_layers(layers: Vec<DenseLayer>, normalization: Normalization, rescale_to_unit: bool) -> Result<Self> {
        if layers.is_empty() {
            return Err(FmgpError::config("a feature map needs at least one layer"));
        }
        let n = layers.len();
        for (l, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.fan_out() {
                return Err(FmgpError::shape(format!(
                    "layer {l}: bias length {} != fan_out {}",
                    layer.bias.len(),
                    layer.fan_out()
                )));
            }
            if l + 1 < n && layers[l + 1].fan_in() != layer.fan_out() {
                return Err(FmgpError::shape(format!(
                    "layer {l} maps to {} but layer {} expects {}",
                    layer.fan_out(),
                    l + 1,
                    layers[l + 1].fan_in()
                )));
            }
            let expects_norm = l + 1 < n && normalization == Normalization::LayerNorm;
            match (&layer.norm, expects_norm) {
                (Some(norm), true) => {
                    if norm.gain.len() != layer.fan_out() || norm.offset.len() != layer.fan_out() {
                        return Err(FmgpError::shape(format!(
                            "layer {l}: layer-norm parameters do not match fan_out {}",
                            layer.fan_out()
                        )));
                    }
                }
                (None, false) => {}
                (Some(_), false) => {
                    return Err(FmgpError::config(format!(
                        "layer {l} carries a layer norm but the map is not layer-normalised"
                    )))
                }
                (None, true) => return Err(FmgpError::config(format!("hidden layer {l} is missing its layer norm"))),
            }
        }
        Ok(Self { layers, activation: Activation::Relu, normalization, rescale_to_unit })
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn normalization(&self) -> Normalization {
        self.normalization
    }

    pub fn rescale_to_unit(&self) -> bool {
        self.rescale_to_unit
    }

    pub fn set_rescale_to_unit(&mut self, rescale: bool) {
        self.rescale_to_unit = rescale;
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out()
    }

    pub fn layer_widths(&self) -> Vec<usize> {
        let mut widths = vec![self.input_dim()];
        widths.extend(self.layers.iter().map(DenseLayer::fan_out));
        widths
    }

    pub fn config(&self) -> FeatureMapConfig {
        FeatureMapConfig {
            layer_widths: self.layer_widths(),
            normalization: self.normalization,
            rescale_to_unit: self.rescale_to_unit,
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(DenseLayer::num_params).sum()
    }

    /// All parameters, layer by layer: weight (column-major), bias, then
    /// layer-norm gain and offset when present.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for layer in &self.layers {
            out.extend_from_slice(layer.weight.as_slice());
            out.extend_from_slice(layer.bias.as_slice());
            if let Some(norm) = &layer.norm {
                out.extend_from_slice(norm.gain.as_slice());
                out.extend_from_slice(norm.offset.as_slice());
            }
        }
        out
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(FmgpError::shape(format!("expected {} parameters, got {}", self.num_params(), params.len())));
        }
        let mut offset = 0;
        let mut take = |dst: &mut [f64]| {
            dst.copy_from_slice(&params[offset..offset + dst.len()]);
            offset += dst.len();
        };
        for layer in &mut self.layers {
            take(layer.weight.as_mut_slice());
            take(layer.bias.as_mut_slice());
            if let Some(norm) = &mut layer.norm {
                take(norm.gain.as_mut_slice());
                take(norm.offset.as_mut_slice());
            }
        }
        Ok(())
    }

    fn check_finite(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(FmgpError::shape(format!(
                "input has {} columns, feature map expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(FmgpError::numeric("non-finite value in feature-map input"));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            let finite = layer.weight.iter().all(|v| v.is_finite())
                && layer.bias.iter().all(|v| v.is_finite())
                && layer.norm.as_ref().is_none_or(|n| n.gain.iter().chain(n.offset.iter()).all(|v| v.is_finite()));
            if !finite {
                return Err(FmgpError::numeric(format!("non-finite parameter in layer {l}")));
            }
        }
        Ok(())
    }

    /// `Φ` with row `i` equal to `φ(x_i)ᵀ`.
    pub fn forward(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_finite(x)?;
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for layer in &self.layers[..last] {
            let mut z = affine(&h, layer);
            if let Some(norm) = &layer.norm {
                layer_norm_forward(&mut z, norm);
            }
            z.apply(|v| *v = v.max(0.0));
            h = z;
        }
        let mut out = affine(&h, &self.layers[last]);
        if self.rescale_to_unit {
            rescale_rows(&mut out);
        }
        Ok(out)
    }

    /// Forward pass over contiguous row blocks of `batch_rows`. Rows are
    /// processed independently, so the result is identical to [`forward`].
    ///
    /// [`forward`]: FeatureMap::forward
    pub fn forward_batched(&self, x: &DMatrix<f64>, batch_rows: usize) -> Result<DMatrix<f64>> {
        let batch_rows = batch_rows.max(1);
        if x.nrows() <= batch_rows {
            return self.forward(x);
        }
        let mut out = DMatrix::zeros(x.nrows(), self.output_dim());
        let mut start = 0;
        while start < x.nrows() {
            let len = batch_rows.min(x.nrows() - start);
            let block = self.forward(&x.rows(start, len).into_owned())?;
            out.rows_mut(start, len).copy_from(&block);
            start += len;
        }
        Ok(out)
    }

    /// Forward pass that also records what [`backward_from_cache`] needs.
    ///
    /// [`backward_from_cache`]: FeatureMap::backward_from_cache
    pub fn forward_with_cache(&self, x: &DMatrix<f64>) -> Result<ForwardCache> {
        self.check_finite(x)?;
        let last = self.layers.len() - 1;
        let mut hidden = Vec::with_capacity(last);
        let mut h = x.clone();
        for layer in &self.layers[..last] {
            let mut z = affine(&h, layer);
            let (normalized, inv_std) = match &layer.norm {
                Some(norm) => {
                    let (zhat, inv_std) = standardize_rows(&z);
                    z = zhat.clone();
                    apply_gain_offset(&mut z, norm);
                    (Some(zhat), Some(inv_std))
                }
                None => (None, None),
            };
            let mask = z.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
            z.apply(|v| *v = v.max(0.0));
            hidden.push(HiddenCache { input: h, normalized, inv_std, activated_mask: mask });
            h = z;
        }
        let mut out = affine(&h, &self.layers[last]);
        let row_norms = if self.rescale_to_unit { Some(rescale_rows(&mut out)) } else { None };
        Ok(ForwardCache { hidden, last_input: h, row_norms, output: out })
    }

    /// Reverse-mode gradient of `⟨upstream, forward(x)⟩` with respect to all
    /// parameters. The ReLU derivative at zero is taken to be zero.
    pub fn backward(&self, x: &DMatrix<f64>, upstream: &DMatrix<f64>) -> Result<FeatureMapGrad> {
        let cache = self.forward_with_cache(x)?;
        self.backward_from_cache(&cache, upstream)
    }

    pub fn backward_from_cache(&self, cache: &ForwardCache, upstream: &DMatrix<f64>) -> Result<FeatureMapGrad> {
        if upstream.shape() != cache.output.shape() {
            return Err(FmgpError::shape(format!(
                "upstream is {:?}, forward output is {:?}",
                upstream.shape(),
                cache.output.shape()
            )));
        }
        let mut d_out = upstream.clone();
        if let Some(norms) = &cache.row_norms {
            // y = r/|r|  ⇒  dr = (dy − y(yᵀdy))/|r|
            let y = &cache.output;
            for i in 0..d_out.nrows() {
                let rho = norms[i];
                if rho == 0.0 {
                    continue;
                }
                let proj = y.row(i).dot(&d_out.row(i));
                for j in 0..d_out.ncols() {
                    d_out[(i, j)] = (d_out[(i, j)] - y[(i, j)] * proj) / rho;
                }
            }
        }

        let last = self.layers.len() - 1;
        let mut grads = Vec::with_capacity(self.layers.len());
        let out_layer = &self.layers[last];
        grads.push(LayerGrad {
            weight: cache.last_input.tr_mul(&d_out),
            bias: column_sums(&d_out),
            gain: None,
            offset: None,
        });
        let mut d_h = if last > 0 { Some(&d_out * out_layer.weight.transpose()) } else { None };

        for l in (0..last).rev() {
            let layer = &self.layers[l];
            let hc = &cache.hidden[l];
            let mut d_a = d_h.take().expect("hidden gradient present");
            d_a.component_mul_assign(&hc.activated_mask);
            let (d_z, gain, offset) = match (&layer.norm, &hc.normalized, &hc.inv_std) {
                (Some(norm), Some(zhat), Some(inv_std)) => {
                    let d_gain = column_sums(&d_a.component_mul(zhat));
                    let d_offset = column_sums(&d_a);
                    let mut d_zhat = d_a;
                    for j in 0..d_zhat.ncols() {
                        d_zhat.column_mut(j).scale_mut(norm.gain[j]);
                    }
                    let d_z = layer_norm_backward(&d_zhat, zhat, inv_std);
                    (d_z, Some(d_gain), Some(d_offset))
                }
                _ => (d_a, None, None),
            };
            if l > 0 {
                d_h = Some(&d_z * layer.weight.transpose());
            }
            grads.push(LayerGrad { weight: hc.input.tr_mul(&d_z), bias: column_sums(&d_z), gain, offset });
        }
        grads.reverse();
        Ok(FeatureMapGrad { layers: grads })
    }
}

fn affine(h: &DMatrix<f64>, layer: &DenseLayer) -> DMatrix<f64> {
    let mut z = h * &layer.weight;
    for (j, b) in layer.bias.iter().enumerate() {
        z.column_mut(j).add_scalar_mut(*b);
    }
    z
}

fn column_sums(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum()))
}

fn standardize_rows(z: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let (n, w) = z.shape();
    let wf = w as f64;
    let mut mean = DVector::zeros(n);
    for col in z.column_iter() {
        mean += col;
    }
    mean /= wf;
    let mut var = DVector::<f64>::zeros(n);
    for col in z.column_iter() {
        for i in 0..n {
            let d = col[i] - mean[i];
            var[i] += d * d;
        }
    }
    let inv_std = var.map(|v| 1.0 / (v / wf + LAYER_NORM_EPS).sqrt());
    let mut zhat = z.clone();
    for mut col in zhat.column_iter_mut() {
        for i in 0..n {
            col[i] = (col[i] - mean[i]) * inv_std[i];
        }
    }
    (zhat, inv_std)
}

fn apply_gain_offset(z: &mut DMatrix<f64>, norm: &LayerNorm) {
    for (j, mut col) in z.column_iter_mut().enumerate() {
        col.scale_mut(norm.gain[j]);
        col.add_scalar_mut(norm.offset[j]);
    }
}

fn layer_norm_forward(z: &mut DMatrix<f64>, norm: &LayerNorm) {
    let (zhat, _) = standardize_rows(z);
    *z = zhat;
    apply_gain_offset(z, norm);
}

fn layer_norm_backward(d_zhat: &DMatrix<f64>, zhat: &DMatrix<f64>, inv_std: &DVector<f64>) -> DMatrix<f64> {
    let (n, w) = d_zhat.shape();
    let wf = w as f64;
    let mut mean_d = DVector::zeros(n);
    let mut mean_dz = DVector::zeros(n);
    for j in 0..w {
        for i in 0..n {
            mean_d[i] += d_zhat[(i, j)];
            mean_dz[i] += d_zhat[(i, j)] * zhat[(i, j)];
        }
    }
    mean_d /= wf;
    mean_dz /= wf;
    DMatrix::from_fn(n, w, |i, j| inv_std[i] * (d_zhat[(i, j)] - mean_d[i] - zhat[(i, j)] * mean_dz[i]))
}

/// Divides each nonzero row by its norm; returns the original norms.
fn rescale_rows(m: &mut DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows();
    let mut norms = DVector::zeros(n);
    for i in 0..n {
        let norm = m.row(i).norm();
        norms[i] = norm;
        if norm > 0.0 {
            m.row_mut(i).unscale_mut(norm);
        }
    }
    norms
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_map(seed: u64, normalization: Normalization, rescale: bool) -> FeatureMap {
        let cfg = FeatureMapConfig::new(vec![3, 5, 4, 2]).with_normalization(normalization).with_rescale(rescale);
        let mut map = FeatureMap::init(&cfg, seed).unwrap();
        // perturb biases and norm params away from their trivial init
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let normal = Normal::new(0.0, 0.3).unwrap();
        let mut params = map.params_flat();
        for p in params.iter_mut() {
            *p += normal.sample(&mut rng);
        }
        map.set_params_flat(&params).unwrap();
        map
    }

    fn random_matrix(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        DMatrix::from_fn(n, d, |_, _| normal.sample(&mut rng))
    }

    #[test]
    fn zero_map_gives_zero_features() {
        let cfg = FeatureMapConfig::new(vec![2, 3, 4]).with_normalization(Normalization::None);
        let mut map = FeatureMap::init(&cfg, 1).unwrap();
        map.set_params_flat(&vec![0.0; map.num_params()]).unwrap();
        let phi = map.forward(&random_matrix(5, 2, 3)).unwrap();
        assert_eq!(phi, DMatrix::zeros(5, 4));
    }

    #[test]
    fn identity_layer_is_identity() {
        let layer = DenseLayer { weight: DMatrix::identity(2, 2), bias: DVector::zeros(2), norm: None };
        let map = FeatureMap::from_layers(vec![layer], Normalization::None, false).unwrap();
        let x = DMatrix::<f64>::identity(2, 2);
        assert_eq!(map.forward(&x).unwrap(), x);
    }

    #[test]
    fn hand_evaluated_two_hidden_layers() {
        // x = [1, -1]
        // h1 = relu(W1ᵀx + b1), W1 = [[1, 2], [0, 1]] (fan_in × fan_out), b1 = [0, -2]
        //    = relu([1, 2 - 1 - 2]) = relu([1, -1]) = [1, 0]
        // h2 = relu(W2ᵀh1 + b2), W2 = [[2, -1], [3, 1]], b2 = [1, 1]
        //    = relu([2 + 1, -1 + 1]) = [3, 0]
        // out = W3ᵀh2 + b3, W3 = [[1], [-4]], b3 = [0.5] → 3.5
        let layers = vec![
            DenseLayer {
                weight: DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]),
                bias: DVector::from_vec(vec![0.0, -2.0]),
                norm: None,
            },
            DenseLayer {
                weight: DMatrix::from_row_slice(2, 2, &[2.0, -1.0, 3.0, 1.0]),
                bias: DVector::from_vec(vec![1.0, 1.0]),
                norm: None,
            },
            DenseLayer {
                weight: DMatrix::from_row_slice(2, 1, &[1.0, -4.0]),
                bias: DVector::from_vec(vec![0.5]),
                norm: None,
            },
        ];
        let map = FeatureMap::from_layers(layers, Normalization::None, false).unwrap();
        let out = map.forward(&DMatrix::from_row_slice(1, 2, &[1.0, -1.0])).unwrap();
        assert_eq!(out[(0, 0)], 3.5);
    }

    #[test]
    fn forward_rejects_bad_input() {
        let map = small_map(0, Normalization::None, false);
        assert!(matches!(map.forward(&DMatrix::zeros(2, 4)), Err(FmgpError::Shape(_))));
        let mut x = DMatrix::zeros(2, 3);
        x[(1, 1)] = f64::NAN;
        assert!(matches!(map.forward(&x), Err(FmgpError::Numeric(_))));
    }

    #[test]
    fn non_finite_parameter_names_layer() {
        let mut map = small_map(0, Normalization::None, false);
        map.layers[1].bias[0] = f64::INFINITY;
        let err = map.forward(&DMatrix::zeros(1, 3)).unwrap_err();
        assert!(err.to_string().contains("layer 1"), "{err}");
    }

    #[test]
    fn empty_widths_is_config_error() {
        let cfg = FeatureMapConfig::new(vec![]);
        assert!(matches!(FeatureMap::init(&cfg, 0), Err(FmgpError::Config(_))));
        let cfg = FeatureMapConfig::new(vec![3, 0, 2]);
        assert!(matches!(FeatureMap::init(&cfg, 0), Err(FmgpError::Config(_))));
    }

    #[test]
    fn init_is_seed_deterministic() {
        let cfg = FeatureMapConfig::new(vec![4, 16, 3]);
        let a = FeatureMap::init(&cfg, 7).unwrap();
        let b = FeatureMap::init(&cfg, 7).unwrap();
        let c = FeatureMap::init(&cfg, 8).unwrap();
        assert_eq!(a.params_flat(), b.params_flat());
        assert_ne!(a.params_flat(), c.params_flat());
    }

    #[test]
    fn he_init_variance() {
        let fan_in = 512;
        let cfg = FeatureMapConfig::new(vec![fan_in, 512, 1]).with_normalization(Normalization::None);
        let target = 2.0 / fan_in as f64;
        for seed in 0..10 {
            let map = FeatureMap::init(&cfg, seed).unwrap();
            let w = &map.layers()[0].weight;
            let mean = w.mean();
            let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (w.len() - 1) as f64;
            assert!((var / target - 1.0).abs() < 0.2, "seed {seed}: var {var} vs {target}");
            assert!(map.layers()[0].bias.iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn rescaled_rows_have_unit_norm() {
        let map = small_map(4, Normalization::LayerNorm, true);
        let phi = map.forward(&random_matrix(20, 3, 9)).unwrap();
        for row in phi.row_iter() {
            let norm = row.norm();
            assert!(norm == 0.0 || (norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_output_is_left_unrescaled() {
        let cfg = FeatureMapConfig::new(vec![2, 2]).with_normalization(Normalization::None).with_rescale(true);
        let mut map = FeatureMap::init(&cfg, 0).unwrap();
        map.set_params_flat(&vec![0.0; map.num_params()]).unwrap();
        let phi = map.forward(&DMatrix::from_element(1, 2, 1.0)).unwrap();
        assert_eq!(phi, DMatrix::zeros(1, 2));
    }

    #[test]
    fn forward_is_bit_deterministic_and_batch_independent() {
        let map = small_map(2, Normalization::LayerNorm, true);
        let x = random_matrix(37, 3, 5);
        let a = map.forward(&x).unwrap();
        assert_eq!(a, map.forward(&x).unwrap());
        assert_eq!(a, map.forward_batched(&x, 8).unwrap());
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let map = small_map(3, Normalization::LayerNorm, true);
        let x = random_matrix(6, 3, 1);
        let g = map.backward(&x, &DMatrix::zeros(6, 2)).unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_linear_layer_gradient() {
        let cfg = FeatureMapConfig::new(vec![3, 2]).with_normalization(Normalization::None);
        let map = FeatureMap::init(&cfg, 5).unwrap();
        let x = random_matrix(4, 3, 2);
        let up = random_matrix(4, 2, 3);
        let g = map.backward(&x, &up).unwrap();
        let expected = x.transpose() * &up;
        assert!((&g.layers[0].weight - expected).amax() < 1e-14);
    }

    #[test]
    fn backward_rejects_wrong_upstream_shape() {
        let map = small_map(3, Normalization::None, false);
        let x = random_matrix(6, 3, 1);
        assert!(matches!(map.backward(&x, &DMatrix::zeros(5, 2)), Err(FmgpError::Shape(_))));
    }

    fn finite_difference_check(map: &FeatureMap, x: &DMatrix<f64>, up: &DMatrix<f64>) -> f64 {
        let objective = |m: &FeatureMap| m.forward(x).unwrap().dot(up);
        let analytic = map.backward(x, up).unwrap().flatten();
        let params = map.params_flat();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        let mut probe = map.clone();
        for k in 0..params.len() {
            let mut p = params.clone();
            p[k] += h;
            probe.set_params_flat(&p).unwrap();
            let fp = objective(&probe);
            p[k] -= 2.0 * h;
            probe.set_params_flat(&p).unwrap();
            let fm = objective(&probe);
            let fd = (fp - fm) / (2.0 * h);
            let denom = analytic[k].abs().max(fd.abs()).max(1e-6);
            worst = worst.max((analytic[k] - fd).abs() / denom);
        }
        worst
    }

    #[test]
    fn backward_matches_finite_differences() {
        for seed in 0..5 {
            for (norm, rescale) in
                [(Normalization::None, false), (Normalization::LayerNorm, false), (Normalization::LayerNorm, true)]
            {
                let map = small_map(seed, norm, rescale);
                let x = random_matrix(8, 3, seed + 100);
                let up = random_matrix(8, 2, seed + 200);
                let err = finite_difference_check(&map, &x, &up);
                assert!(err <= 1e-4, "seed {seed} {norm:?} rescale={rescale}: {err}");
            }
        }
    }

    #[test]
    fn gram_rank_is_at_most_p() {
        let map = small_map(1, Normalization::LayerNorm, false);
        let phi = map.forward(&random_matrix(12, 3, 4)).unwrap();
        let gram = &phi * phi.transpose();
        let eig = gram.symmetric_eigenvalues();
        let max = eig.amax();
        let rank = eig.iter().filter(|&&l| l > 1e-10 * max).count();
        assert!(rank <= 2);
    }
}

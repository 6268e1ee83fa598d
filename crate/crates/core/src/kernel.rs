//! Feature-map kernels built from one or two MLPs.
//!
//! * `Single`: `Ψ = φ(X)`.
//! * `Product`: `Ψ = Ξ`, the column-wise products of `φ₁(X)` and `φ₂(X)`,
//!   so that `ΨΨᵀ = K₁ ∘ K₂`.
//! * `Additive`: `Ψ = [φ₁(X) | φ₂(X)]`, so that `ΨΨᵀ = K₁ + K₂`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{FmgpError, Result};
use crate::lowrank::{product_features, GramAccumulator, ProductFeaturePlan};
use crate::nn::{FeatureMap, ForwardCache};
use crate::parallel;

/// Rows per block when featurising large inputs.
pub const FEATURE_BATCH_ROWS: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureKernel {
    Single { map: FeatureMap },
    Product { first: FeatureMap, second: FeatureMap },
    Additive { first: FeatureMap, second: FeatureMap },
}

pub enum KernelCache {
    Single(ForwardCache),
    Pair(ForwardCache, ForwardCache),
}

impl FeatureKernel {
    pub fn single(map: FeatureMap) -> Self {
        FeatureKernel::Single { map }
    }

    pub fn product(first: FeatureMap, second: FeatureMap) -> Result<Self> {
        Self::check_pair(&first, &second)?;
        Ok(FeatureKernel::Product { first, second })
    }

    pub fn additive(first: FeatureMap, second: FeatureMap) -> Result<Self> {
        Self::check_pair(&first, &second)?;
        Ok(FeatureKernel::Additive { first, second })
    }

    fn check_pair(first: &FeatureMap, second: &FeatureMap) -> Result<()> {
        if first.input_dim() != second.input_dim() {
            return Err(FmgpError::config(format!(
                "composed feature maps disagree on input dimension ({} vs {})",
                first.input_dim(),
                second.input_dim()
            )));
        }
        Ok(())
    }

    pub fn maps(&self) -> Vec<&FeatureMap> {
        match self {
            FeatureKernel::Single { map } => vec![map],
            FeatureKernel::Product { first, second } | FeatureKernel::Additive { first, second } => {
                vec![first, second]
            }
        }
    }

    fn maps_mut(&mut self) -> Vec<&mut FeatureMap> {
        match self {
            FeatureKernel::Single { map } => vec![map],
            FeatureKernel::Product { first, second } | FeatureKernel::Additive { first, second } => {
                vec![first, second]
            }
        }
    }

    pub fn input_dim(&self) -> usize {
        self.maps()[0].input_dim()
    }

    /// Number of columns of `Ψ`.
    pub fn output_dim(&self) -> usize {
        match self {
            FeatureKernel::Single { map } => map.output_dim(),
            FeatureKernel::Product { first, second } => first.output_dim() * second.output_dim(),
            FeatureKernel::Additive { first, second } => first.output_dim() + second.output_dim(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.maps().iter().map(|m| m.num_params()).sum()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        self.maps().iter().flat_map(|m| m.params_flat()).collect()
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(FmgpError::shape(format!(
                "expected {} kernel parameters, got {}",
                self.num_params(),
                params.len()
            )));
        }
        let mut offset = 0;
        for map in self.maps_mut() {
            let k = map.num_params();
            map.set_params_flat(&params[offset..offset + k])?;
            offset += k;
        }
        Ok(())
    }

    fn combine(&self, parts: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
        match self {
            FeatureKernel::Single { .. } => Ok(parts[0].clone()),
            FeatureKernel::Product { .. } => product_features(&parts[0], &parts[1]),
            FeatureKernel::Additive { .. } => {
                let (a, b) = (&parts[0], &parts[1]);
                let mut out = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
                out.columns_mut(0, a.ncols()).copy_from(a);
                out.columns_mut(a.ncols(), b.ncols()).copy_from(b);
                Ok(out)
            }
        }
    }

    /// `Ψ` for a block of inputs, single-threaded.
    pub fn features(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let parts = self.maps().iter().map(|m| m.forward(x)).collect::<Result<Vec<_>>>()?;
        self.combine(&parts)
    }

    /// `Ψ` computed over row blocks in parallel; identical to [`features`].
    ///
    /// [`features`]: FeatureKernel::features
    pub fn features_batched(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.nrows() <= FEATURE_BATCH_ROWS {
            return self.features(x);
        }
        let blocks =
            parallel::map_row_batches(x.nrows(), FEATURE_BATCH_ROWS, |s, l| self.features(&x.rows(s, l).into_owned()))?;
        let mut out = DMatrix::zeros(x.nrows(), self.output_dim());
        let mut start = 0;
        for b in blocks {
            out.rows_mut(start, b.nrows()).copy_from(&b);
            start += b.nrows();
        }
        Ok(out)
    }

    /// Accumulates `ΨᵀΨ` and `Ψᵀy` block by block without materialising
    /// the full `Ψ`. Block results are summed in row order.
    pub fn accumulate(&self, x: &DMatrix<f64>, y: Option<&nalgebra::DVector<f64>>) -> Result<GramAccumulator> {
        let p = self.output_dim();
        let partials = parallel::map_row_batches(x.nrows(), FEATURE_BATCH_ROWS, |s, l| {
            let psi = self.features(&x.rows(s, l).into_owned())?;
            let mut acc = GramAccumulator::new(p);
            let yb = y.map(|y| y.rows(s, l).into_owned());
            acc.add_batch(&psi, yb.as_ref())?;
            Ok(acc.into_parts())
        })?;
        let mut gram = DMatrix::zeros(p, p);
        let mut phi_t_y = nalgebra::DVector::zeros(p);
        let mut rows = 0;
        for (g, b, r) in partials {
            gram += g;
            phi_t_y += b;
            rows += r;
        }
        let mut acc = GramAccumulator::new(p);
        acc.add_parts(gram, phi_t_y, rows);
        Ok(acc)
    }

    pub fn features_with_cache(&self, x: &DMatrix<f64>) -> Result<(DMatrix<f64>, KernelCache)> {
        match self {
            FeatureKernel::Single { map } => {
                let cache = map.forward_with_cache(x)?;
                Ok((cache.output().clone(), KernelCache::Single(cache)))
            }
            FeatureKernel::Product { first, second } | FeatureKernel::Additive { first, second } => {
                let c1 = first.forward_with_cache(x)?;
                let c2 = second.forward_with_cache(x)?;
                let psi = self.combine(&[c1.output().clone(), c2.output().clone()])?;
                Ok((psi, KernelCache::Pair(c1, c2)))
            }
        }
    }

    /// Flat parameter gradient of `⟨upstream, Ψ⟩`.
    pub fn backward(&self, cache: &KernelCache, upstream: &DMatrix<f64>) -> Result<Vec<f64>> {
        match (self, cache) {
            (FeatureKernel::Single { map }, KernelCache::Single(c)) => {
                Ok(map.backward_from_cache(c, upstream)?.flatten())
            }
            (FeatureKernel::Product { first, second }, KernelCache::Pair(c1, c2)) => {
                let (a, b) = (c1.output(), c2.output());
                let plan = ProductFeaturePlan::new(a.ncols(), b.ncols());
                let mut da = DMatrix::zeros(a.nrows(), a.ncols());
                let mut db = DMatrix::zeros(b.nrows(), b.ncols());
                for j in 0..plan.p2 {
                    for i in 0..plan.p1 {
                        let up = upstream.column(plan.column_index(i, j));
                        let mut col_a = da.column_mut(i);
                        col_a += up.component_mul(&b.column(j));
                        let mut col_b = db.column_mut(j);
                        col_b += up.component_mul(&a.column(i));
                    }
                }
                let mut g = first.backward_from_cache(c1, &da)?.flatten();
                second.backward_from_cache(c2, &db)?.flatten_into(&mut g);
                Ok(g)
            }
            (FeatureKernel::Additive { first, second }, KernelCache::Pair(c1, c2)) => {
                let p1 = c1.output().ncols();
                let da = upstream.columns(0, p1).into_owned();
                let db = upstream.columns(p1, upstream.ncols() - p1).into_owned();
                let mut g = first.backward_from_cache(c1, &da)?.flatten();
                second.backward_from_cache(c2, &db)?.flatten_into(&mut g);
                Ok(g)
            }
            _ => Err(FmgpError::shape("kernel cache does not match kernel kind")),
        }
    }
}

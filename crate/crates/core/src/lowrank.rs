//! Low-rank linear algebra for kernels of the form `ΦΦᵀ + σ²I`.
//!
//! Everything here touches `n × n` objects only implicitly: the `p × p`
//! Gram `ΦᵀΦ` is eigendecomposed once into a [`FeatureDecomposition`], and
//! solves, quadratic forms and log-determinants are expressed through it.
//! With `w = U(Λ + σ²I)⁻¹UᵀΦᵀv` (the ridge solution) we have
//!
//! ```text
//! (ΦΦᵀ + σ²I)⁻¹ v = (v − Φw) / σ²
//! vᵀ(ΦΦᵀ + σ²I)⁻¹ v = ‖v − Φw‖² / σ² + ‖w‖²
//! log|ΦΦᵀ + σ²I| = Σ_{i ≤ min(n,p)} log(λ_i + σ²) + (n − min(n,p)) log σ²
//! ```
//!
//! The quadratic form is evaluated as a sum of two nonnegative terms, which
//! avoids the cancellation in `σ⁻²(vᵀv − bᵀ(Λ+σ²)⁻¹b)`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{FmgpError, Result};

const SYMMETRY_TOL: f64 = 1e-10;
const CLAMP_TOL: f64 = 1e-10;

/// Running sums `ΦᵀΦ` and `Φᵀy` over row batches of `Φ`.
///
/// Batches are added in call order, so the result is reproducible for a
/// fixed partition and agrees across partitions up to rounding.
#[derive(Debug, Clone)]
pub struct GramAccumulator {
    gram: DMatrix<f64>,
    phi_t_y: DVector<f64>,
    rows: usize,
}

impl GramAccumulator {
    pub fn new(p: usize) -> Self {
        Self { gram: DMatrix::zeros(p, p), phi_t_y: DVector::zeros(p), rows: 0 }
    }

    pub fn add_batch(&mut self, phi: &DMatrix<f64>, y: Option<&DVector<f64>>) -> Result<()> {
        let p = self.gram.nrows();
        if phi.ncols() != p {
            return Err(FmgpError::shape(format!("batch has {} columns, accumulator expects {p}", phi.ncols())));
        }
        self.gram += phi.tr_mul(phi);
        if let Some(y) = y {
            if y.len() != phi.nrows() {
                return Err(FmgpError::shape(format!("batch has {} rows but {} targets", phi.nrows(), y.len())));
            }
            self.phi_t_y += phi.tr_mul(y);
        }
        self.rows += phi.nrows();
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    pub fn phi_t_y(&self) -> &DVector<f64> {
        &self.phi_t_y
    }

    /// Adds precomputed partial sums, e.g. from another thread's batches.
    pub fn add_parts(&mut self, gram: DMatrix<f64>, phi_t_y: DVector<f64>, rows: usize) {
        self.gram += gram;
        self.phi_t_y += phi_t_y;
        self.rows += rows;
    }

    pub fn into_parts(self) -> (DMatrix<f64>, DVector<f64>, usize) {
        (self.gram, self.phi_t_y, self.rows)
    }

    pub fn decompose(self) -> Result<FeatureDecomposition> {
        let (gram, phi_t_y, n) = self.into_parts();
        FeatureDecomposition::decompose(&gram, &phi_t_y, n)
    }
}

/// `Σ_b Φ_bᵀΦ_b` over the given row batches.
pub fn accumulate_gram<'a, I>(batches: I) -> Result<DMatrix<f64>>
where
    I: IntoIterator<Item = &'a DMatrix<f64>>,
{
    let mut iter = batches.into_iter().peekable();
    let p = match iter.peek() {
        Some(first) => first.ncols(),
        None => return Err(FmgpError::shape("no batches to accumulate")),
    };
    let mut acc = GramAccumulator::new(p);
    for batch in iter {
        acc.add_batch(batch, None)?;
    }
    Ok(acc.gram)
}

/// Cached eigendecomposition `ΦᵀΦ = UΛUᵀ` plus the projected targets
/// `UᵀΦᵀy`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureDecomposition {
    /// Orthonormal eigenvectors, one per column, matching `eigenvalues`.
    #[serde(with = "crate::serde_mat::matrix")]
    pub eigenvectors: DMatrix<f64>,
    /// Descending, clamped to be nonnegative.
    #[serde(with = "crate::serde_mat::vector")]
    pub eigenvalues: DVector<f64>,
    #[serde(with = "crate::serde_mat::vector")]
    pub proj_targets: DVector<f64>,
    pub n: usize,
    pub trace_phi_sq: f64,
}

impl FeatureDecomposition {
    /// Eigendecomposes a symmetric PSD Gram matrix.
    ///
    /// Eigenvalues within `-1e-10·max(1, λ₁)` of zero are clamped to 0;
    /// anything more negative is reported as a numeric error.
    pub fn decompose(gram: &DMatrix<f64>, phi_t_y: &DVector<f64>, n: usize) -> Result<Self> {
        let p = gram.nrows();
        if gram.ncols() != p {
            return Err(FmgpError::shape(format!("gram is {}×{}", p, gram.ncols())));
        }
        if phi_t_y.len() != p {
            return Err(FmgpError::shape(format!("Φᵀy has length {}, gram is {p}×{p}", phi_t_y.len())));
        }
        if gram.iter().any(|v| !v.is_finite()) {
            return Err(FmgpError::numeric("non-finite entry in gram matrix"));
        }
        let scale = gram.amax().max(1.0);
        let asym = (gram - gram.transpose()).amax();
        if asym > SYMMETRY_TOL * scale {
            return Err(FmgpError::numeric(format!("gram matrix is not symmetric (max |G − Gᵀ| = {asym:e})")));
        }
        let sym = (gram + gram.transpose()) * 0.5;
        let eig = SymmetricEigen::try_new(sym, f64::EPSILON, 10_000)
            .ok_or_else(|| FmgpError::numeric("symmetric eigensolver did not converge"))?;

        let mut order: Vec<usize> = (0..p).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let top = order.first().map_or(0.0, |&i| eig.eigenvalues[i]);
        let floor = -CLAMP_TOL * top.max(1.0);
        let mut eigenvalues = DVector::zeros(p);
        let mut eigenvectors = DMatrix::zeros(p, p);
        for (dst, &src) in order.iter().enumerate() {
            let lambda = eig.eigenvalues[src];
            if lambda < floor {
                return Err(FmgpError::numeric(format!(
                    "gram matrix is not positive semi-definite (eigenvalue {lambda:e})"
                )));
            }
            eigenvalues[dst] = lambda.max(0.0);
            eigenvectors.set_column(dst, &eig.eigenvectors.column(src));
        }
        let proj_targets = eigenvectors.tr_mul(phi_t_y);
        Ok(Self { eigenvectors, eigenvalues, proj_targets, n, trace_phi_sq: gram.trace() })
    }

    /// Builds the decomposition directly from a feature matrix.
    pub fn from_features(phi: &DMatrix<f64>, y: Option<&DVector<f64>>) -> Result<Self> {
        let mut acc = GramAccumulator::new(phi.ncols());
        acc.add_batch(phi, y)?;
        acc.decompose()
    }

    pub fn p(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Copy with eigenvalue `index` multiplied by `factor`. Only useful to
    /// check that the oracle batteries notice a corrupted cache.
    pub fn with_scaled_eigenvalue(&self, index: usize, factor: f64) -> Self {
        let mut out = self.clone();
        if index < out.eigenvalues.len() {
            out.eigenvalues[index] *= factor;
        }
        out
    }

    /// `U(Λ + σ²I)⁻¹Uᵀ b` for a vector `b` already in feature space.
    pub fn ridge_solve(&self, sigma_sq: f64, b: &DVector<f64>) -> DVector<f64> {
        let mut coeffs = self.eigenvectors.tr_mul(b);
        for (c, l) in coeffs.iter_mut().zip(self.eigenvalues.iter()) {
            *c /= l + sigma_sq;
        }
        &self.eigenvectors * coeffs
    }

    /// Ridge weights for the cached targets, `U(Λ + σ²I)⁻¹UᵀΦᵀy`.
    pub fn ridge_weights(&self, sigma_sq: f64) -> DVector<f64> {
        let coeffs = DVector::from_iterator(
            self.p(),
            self.proj_targets.iter().zip(self.eigenvalues.iter()).map(|(b, l)| b / (l + sigma_sq)),
        );
        &self.eigenvectors * coeffs
    }

    /// `U diag(1/(λ + σ²)) Uᵀ`, i.e. `(ΦᵀΦ + σ²I)⁻¹`.
    pub fn shifted_inverse(&self, sigma_sq: f64) -> DMatrix<f64> {
        let mut scaled = self.eigenvectors.clone();
        for (j, l) in self.eigenvalues.iter().enumerate() {
            scaled.column_mut(j).unscale_mut(l + sigma_sq);
        }
        scaled * self.eigenvectors.transpose()
    }
}

fn check_sigma(sigma_xi_sq: f64) -> Result<()> {
    if sigma_xi_sq <= 0.0 || !sigma_xi_sq.is_finite() {
        return Err(FmgpError::domain(format!("noise variance must be positive and finite, got {sigma_xi_sq}")));
    }
    Ok(())
}

fn check_phi(decomp: &FeatureDecomposition, phi: &DMatrix<f64>, v: &DVector<f64>) -> Result<()> {
    if phi.ncols() != decomp.p() {
        return Err(FmgpError::shape(format!("Φ has {} columns, decomposition has p = {}", phi.ncols(), decomp.p())));
    }
    if v.len() != phi.nrows() {
        return Err(FmgpError::shape(format!("vector has length {}, Φ has {} rows", v.len(), phi.nrows())));
    }
    Ok(())
}

/// Residual `v − Φw` and ridge weights `w` for right-hand side `v`.
fn ridge_residual(
    decomp: &FeatureDecomposition,
    phi: &DMatrix<f64>,
    sigma_xi_sq: f64,
    v: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let w = decomp.ridge_solve(sigma_xi_sq, &phi.tr_mul(v));
    let r = v - phi * &w;
    (r, w)
}

/// `(ΦΦᵀ + σ_ξ²I)⁻¹ v` via the Woodbury identity.
pub fn woodbury_solve(
    decomp: &FeatureDecomposition,
    phi: &DMatrix<f64>,
    sigma_xi_sq: f64,
    v: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_sigma(sigma_xi_sq)?;
    check_phi(decomp, phi, v)?;
    let (r, _) = ridge_residual(decomp, phi, sigma_xi_sq, v);
    Ok(r / sigma_xi_sq)
}

/// Column-wise [`woodbury_solve`] for a block of right-hand sides.
pub fn woodbury_solve_matrix(
    decomp: &FeatureDecomposition,
    phi: &DMatrix<f64>,
    sigma_xi_sq: f64,
    rhs: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    check_sigma(sigma_xi_sq)?;
    if phi.ncols() != decomp.p() || rhs.nrows() != phi.nrows() {
        return Err(FmgpError::shape(format!(
            "Φ is {:?}, rhs is {:?}, decomposition has p = {}",
            phi.shape(),
            rhs.shape(),
            decomp.p()
        )));
    }
    let w = decomp.shifted_inverse(sigma_xi_sq) * phi.tr_mul(rhs);
    Ok((rhs - phi * w) / sigma_xi_sq)
}

/// `log|ΦΦᵀ + σ_ξ²I_n|` from the eigenvalues of `ΦᵀΦ`.
///
/// When `n < p` at most `n` eigenvalues are nonzero, so only the leading
/// `min(n, p)` enter the sum.
pub fn logdet_kxi(decomp: &FeatureDecomposition, sigma_xi_sq: f64, n: usize) -> Result<f64> {
    check_sigma(sigma_xi_sq)?;
    let m = n.min(decomp.p());
    let head: f64 = decomp.eigenvalues.iter().take(m).map(|l| (l + sigma_xi_sq).ln()).sum();
    Ok(head + (n - m) as f64 * sigma_xi_sq.ln())
}

/// `yᵀ(ΦΦᵀ + σ_ξ²I)⁻¹y`.
pub fn quad_form(decomp: &FeatureDecomposition, phi: &DMatrix<f64>, sigma_xi_sq: f64, y: &DVector<f64>) -> Result<f64> {
    check_sigma(sigma_xi_sq)?;
    check_phi(decomp, phi, y)?;
    let (r, w) = ridge_residual(decomp, phi, sigma_xi_sq, y);
    Ok(r.norm_squared() / sigma_xi_sq + w.norm_squared())
}

/// Column layout of a product feature matrix: column `i + j·p1` (0-based)
/// holds `φ_{1,i} ∘ φ_{2,j}`; in 1-based terms, column `i + (j−1)p1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProductFeaturePlan {
    pub p1: usize,
    pub p2: usize,
}

impl ProductFeaturePlan {
    pub fn new(p1: usize, p2: usize) -> Self {
        Self { p1, p2 }
    }

    pub fn total_columns(&self) -> usize {
        self.p1 * self.p2
    }

    /// 0-based column of the product of column `i` of `Φ1` and `j` of `Φ2`.
    pub fn column_index(&self, i: usize, j: usize) -> usize {
        i + j * self.p1
    }

    /// Inverse of [`column_index`](Self::column_index).
    pub fn components(&self, column: usize) -> (usize, usize) {
        (column % self.p1, column / self.p1)
    }
}

/// `Ξ` with `ΞΞᵀ = (Φ1Φ1ᵀ) ∘ (Φ2Φ2ᵀ)`.
pub fn product_features(phi1: &DMatrix<f64>, phi2: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if phi1.nrows() != phi2.nrows() {
        return Err(FmgpError::shape(format!(
            "product features need equal row counts, got {} and {}",
            phi1.nrows(),
            phi2.nrows()
        )));
    }
    let plan = ProductFeaturePlan::new(phi1.ncols(), phi2.ncols());
    let mut xi = DMatrix::zeros(phi1.nrows(), plan.total_columns());
    for j in 0..plan.p2 {
        for i in 0..plan.p1 {
            let col = phi1.column(i).component_mul(&phi2.column(j));
            xi.set_column(plan.column_index(i, j), &col);
        }
    }
    Ok(xi)
}

/// `(Φ1Φ1ᵀ + Φ2Φ2ᵀ + σ_ξ²I)⁻¹ v` with `A = Φ1Φ1ᵀ + σ_ξ²I` handled by
/// Woodbury and the second term by `(A + BC)⁻¹ = A⁻¹ − A⁻¹B(I + CA⁻¹B)⁻¹CA⁻¹`.
pub fn additive_solve(
    phi1: &DMatrix<f64>,
    phi2: &DMatrix<f64>,
    sigma_xi_sq: f64,
    v: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_sigma(sigma_xi_sq)?;
    if phi1.nrows() != phi2.nrows() || v.len() != phi1.nrows() {
        return Err(FmgpError::shape(format!(
            "additive solve needs matching rows: Φ1 {:?}, Φ2 {:?}, v {}",
            phi1.shape(),
            phi2.shape(),
            v.len()
        )));
    }
    let decomp = FeatureDecomposition::from_features(phi1, None)?;
    let a_inv_v = woodbury_solve(&decomp, phi1, sigma_xi_sq, v)?;
    if phi2.ncols() == 0 {
        return Ok(a_inv_v);
    }
    let a_inv_b = woodbury_solve_matrix(&decomp, phi1, sigma_xi_sq, phi2)?;
    let p2 = phi2.ncols();
    let capacitance = DMatrix::identity(p2, p2) + phi2.tr_mul(&a_inv_b);
    let rhs = phi2.tr_mul(&a_inv_v);
    let chol = capacitance
        .cholesky()
        .ok_or_else(|| FmgpError::numeric("capacitance matrix I + Φ2ᵀA⁻¹Φ2 is not positive definite"))?;
    let coeffs = chol.solve(&rhs);
    Ok(a_inv_v - a_inv_b * coeffs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn randn(n: usize, p: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        DMatrix::from_fn(n, p, |_, _| normal.sample(&mut rng))
    }

    fn randv(n: usize, seed: u64) -> DVector<f64> {
        randn(n, 1, seed).column(0).into_owned()
    }

    // Dense oracles: explicit n×n matrices, LU/Cholesky, no Woodbury.
    fn dense_k(phi: &DMatrix<f64>, s2: f64) -> DMatrix<f64> {
        phi * phi.transpose() + DMatrix::identity(phi.nrows(), phi.nrows()) * s2
    }

    fn dense_solve(k: &DMatrix<f64>, v: &DVector<f64>) -> DVector<f64> {
        k.clone().lu().solve(v).unwrap()
    }

    fn dense_logdet(k: &DMatrix<f64>) -> f64 {
        let l = k.clone().cholesky().unwrap();
        2.0 * l.l().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    fn rel(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        (a - b).amax() / b.amax().max(1e-300)
    }

    #[test]
    fn single_batch_equals_direct_product() {
        let phi = randn(10, 3, 1);
        let g = accumulate_gram([&phi]).unwrap();
        assert_eq!(g, phi.tr_mul(&phi));
    }

    #[test]
    fn two_batches_of_ones() {
        let a = DMatrix::from_element(2, 2, 1.0);
        let g = accumulate_gram([&a, &a]).unwrap();
        assert_eq!(g, DMatrix::from_element(2, 2, 4.0));
    }

    #[test]
    fn uneven_batches_match_unbatched() {
        let phi = randn(100, 8, 2);
        let cuts = [0, 3, 20, 21, 50, 77, 90, 100];
        let batches: Vec<DMatrix<f64>> = cuts.windows(2).map(|w| phi.rows(w[0], w[1] - w[0]).into_owned()).collect();
        let g = accumulate_gram(&batches).unwrap();
        let direct = phi.tr_mul(&phi);
        assert!((&g - &direct).amax() / direct.amax() <= 1e-10);
    }

    #[test]
    fn inconsistent_batch_width_is_error() {
        let a = DMatrix::zeros(2, 2);
        let b = DMatrix::zeros(2, 3);
        assert!(matches!(accumulate_gram([&a, &b]), Err(FmgpError::Shape(_))));
    }

    #[test]
    fn identity_and_diagonal_grams() {
        let d = FeatureDecomposition::decompose(&DMatrix::identity(4, 4), &DVector::zeros(4), 4).unwrap();
        assert!(d.eigenvalues.iter().all(|&l| (l - 1.0).abs() < 1e-14));
        let utu = d.eigenvectors.tr_mul(&d.eigenvectors);
        assert!((utu - DMatrix::identity(4, 4)).amax() < 1e-12);

        let g = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 3.0]));
        let d = FeatureDecomposition::decompose(&g, &DVector::zeros(2), 2).unwrap();
        assert_eq!(d.eigenvalues.as_slice(), &[3.0, 1.0]);
        for j in 0..2 {
            let col = d.eigenvectors.column(j);
            assert_eq!(col.iter().filter(|v| v.abs() == 1.0).count(), 1);
        }
        assert_eq!(d.eigenvectors[(1, 0)].abs(), 1.0);
    }

    #[test]
    fn random_psd_reconstructs() {
        let a = randn(12, 8, 3);
        let g = a.tr_mul(&a);
        let d = FeatureDecomposition::decompose(&g, &DVector::zeros(8), 12).unwrap();
        let recon = &d.eigenvectors * DMatrix::from_diagonal(&d.eigenvalues) * d.eigenvectors.transpose();
        assert!((recon - &g).norm() / g.norm().max(1.0) <= 1e-10);
        assert!((d.eigenvectors.tr_mul(&d.eigenvectors) - DMatrix::identity(8, 8)).amax() < 1e-10);
        assert!(d.eigenvalues.as_slice().windows(2).all(|w| w[0] >= w[1]));
        assert!((d.trace_phi_sq - a.norm_squared()).abs() < 1e-9);
    }

    #[test]
    fn rank_deficient_gram_is_clamped() {
        let a = randn(3, 6, 4);
        let d = FeatureDecomposition::from_features(&a, None).unwrap();
        assert!(d.eigenvalues.iter().all(|&l| l >= 0.0));
        assert!(d.eigenvalues.iter().skip(3).all(|&l| l < 1e-9));
    }

    #[test]
    fn asymmetric_or_indefinite_gram_is_error() {
        let g = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(FeatureDecomposition::decompose(&g, &DVector::zeros(2), 2), Err(FmgpError::Numeric(_))));
        let g = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(FeatureDecomposition::decompose(&g, &DVector::zeros(2), 2), Err(FmgpError::Numeric(_))));
    }

    #[test]
    fn woodbury_pure_noise() {
        let phi = DMatrix::zeros(3, 2);
        let d = FeatureDecomposition::from_features(&phi, None).unwrap();
        let v = DVector::from_vec(vec![1.0, -2.0, 3.0]);
        assert_eq!(woodbury_solve(&d, &phi, 1.0, &v).unwrap(), v);
        assert_eq!(quad_form(&d, &phi, 1.0, &v).unwrap(), v.norm_squared());
        let ld = logdet_kxi(&d, 0.5, 3).unwrap();
        assert!((ld - 3.0 * 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn woodbury_two_by_two() {
        // K = [[2,1],[1,2]], K⁻¹ = [[2,-1],[-1,2]]/3, |K| = 3
        let phi = DMatrix::from_element(2, 1, 1.0);
        let d = FeatureDecomposition::from_features(&phi, None).unwrap();
        let v = DVector::from_vec(vec![1.0, 0.0]);
        let x = woodbury_solve(&d, &phi, 1.0, &v).unwrap();
        assert!((x[0] - 2.0 / 3.0).abs() < 1e-15 && (x[1] + 1.0 / 3.0).abs() < 1e-15);
        assert!((quad_form(&d, &phi, 1.0, &v).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((logdet_kxi(&d, 1.0, 2).unwrap() - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn non_positive_noise_is_domain_error() {
        let phi = DMatrix::from_element(2, 1, 1.0);
        let d = FeatureDecomposition::from_features(&phi, None).unwrap();
        let v = DVector::zeros(2);
        for s in [0.0, -1.0, f64::NAN] {
            assert!(matches!(woodbury_solve(&d, &phi, s, &v), Err(FmgpError::Domain(_))));
            assert!(matches!(logdet_kxi(&d, s, 2), Err(FmgpError::Domain(_))));
        }
    }

    #[test]
    fn random_woodbury_matches_dense() {
        let phi = randn(50, 4, 5);
        let v = randv(50, 6);
        let d = FeatureDecomposition::from_features(&phi, None).unwrap();
        let k = dense_k(&phi, 0.3);
        let expected = dense_solve(&k, &v);
        assert!(rel(&woodbury_solve(&d, &phi, 0.3, &v).unwrap(), &expected) <= 1e-9);
        let q = quad_form(&d, &phi, 0.3, &v).unwrap();
        assert!((q - v.dot(&expected)).abs() / q <= 1e-9);
    }

    #[test]
    fn random_logdet_matches_dense() {
        let phi = randn(60, 5, 7);
        let d = FeatureDecomposition::from_features(&phi, None).unwrap();
        let expected = dense_logdet(&dense_k(&phi, 0.7));
        assert!((logdet_kxi(&d, 0.7, 60).unwrap() - expected).abs() <= 1e-9);
    }

    #[test]
    fn logdet_with_fewer_rows_than_features() {
        let phi = randn(4, 9, 8);
        let d = FeatureDecomposition::from_features(&phi, None).unwrap();
        let expected = dense_logdet(&dense_k(&phi, 0.01));
        assert!((logdet_kxi(&d, 0.01, 4).unwrap() - expected).abs() <= 1e-9);
    }

    #[test]
    fn product_features_scalar_case_and_layout() {
        let a = randn(4, 1, 1);
        let b = randn(4, 1, 2);
        let xi = product_features(&a, &b).unwrap();
        assert_eq!(xi.column(0).into_owned(), a.column(0).component_mul(&b.column(0)));

        let phi1 = randn(3, 2, 3);
        let phi2 = randn(3, 3, 4);
        let xi = product_features(&phi1, &phi2).unwrap();
        let plan = ProductFeaturePlan::new(2, 3);
        // (i = 2, j = 1) in 1-based terms lands in column 2, i.e. index 1
        assert_eq!(plan.column_index(1, 0), 1);
        assert_eq!(xi.column(1).into_owned(), phi1.column(1).component_mul(&phi2.column(0)));
        assert_eq!(plan.components(5), (1, 2));
        assert!(product_features(&randn(3, 1, 0), &randn(4, 1, 0)).is_err());
    }

    #[test]
    fn additive_degenerate_cases_reduce_to_woodbury() {
        let phi = randn(20, 3, 9);
        let zero = DMatrix::zeros(20, 2);
        let v = randv(20, 10);
        let d = FeatureDecomposition::from_features(&phi, None).unwrap();
        let single = woodbury_solve(&d, &phi, 0.5, &v).unwrap();
        assert!(rel(&additive_solve(&phi, &zero, 0.5, &v).unwrap(), &single) < 1e-12);
        let zero1 = DMatrix::zeros(20, 4);
        assert!(rel(&additive_solve(&zero1, &phi, 0.5, &v).unwrap(), &single) < 1e-12);
    }

    #[test]
    fn additive_matches_dense() {
        let phi1 = randn(40, 3, 11);
        let phi2 = randn(40, 2, 12);
        let v = randv(40, 13);
        let k = &phi1 * phi1.transpose() + &phi2 * phi2.transpose() + DMatrix::identity(40, 40) * 0.2;
        let expected = dense_solve(&k, &v);
        assert!(rel(&additive_solve(&phi1, &phi2, 0.2, &v).unwrap(), &expected) <= 1e-9);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn woodbury_identities_match_dense(
            seed in any::<u64>(),
            n in 1usize..120,
            p in 1usize..16,
            log_s2 in -4.0f64..1.0,
        ) {
            let s2 = 10f64.powf(log_s2);
            let phi = randn(n, p, seed) / (p as f64).sqrt();
            let y = randv(n, seed.wrapping_add(1));
            let d = FeatureDecomposition::from_features(&phi, Some(&y)).unwrap();
            let k = dense_k(&phi, s2);
            let x = dense_solve(&k, &y);
            prop_assert!(rel(&woodbury_solve(&d, &phi, s2, &y).unwrap(), &x) <= 1e-9);
            let q = quad_form(&d, &phi, s2, &y).unwrap();
            prop_assert!((q - y.dot(&x)).abs() / q <= 1e-9);
            let ld = logdet_kxi(&d, s2, n).unwrap();
            prop_assert!((ld - dense_logdet(&k)).abs() <= 1e-9 * ld.abs().max(1.0));
        }

        #[test]
        fn gram_is_partition_invariant(seed in any::<u64>(), cut1 in 0usize..30, cut2 in 0usize..30) {
            let phi = randn(60, 5, seed);
            let (a, b) = (cut1.min(cut2), cut1.max(cut2) + 30);
            let parts = [phi.rows(0, a).into_owned(), phi.rows(a, b - a).into_owned(), phi.rows(b, 60 - b).into_owned()];
            let g = accumulate_gram(&parts).unwrap();
            let direct = phi.tr_mul(&phi);
            prop_assert!((&g - &direct).amax() / direct.amax() <= 1e-9);
        }

        #[test]
        fn product_gram_is_hadamard(seed in any::<u64>(), n in 1usize..12, p1 in 1usize..5, p2 in 1usize..5) {
            let phi1 = randn(n, p1, seed);
            let phi2 = randn(n, p2, seed ^ 1);
            let xi = product_features(&phi1, &phi2).unwrap();
            let k = (&phi1 * phi1.transpose()).component_mul(&(&phi2 * phi2.transpose()));
            prop_assert!((&xi * xi.transpose() - k).amax() <= 1e-12);
        }
    }
}

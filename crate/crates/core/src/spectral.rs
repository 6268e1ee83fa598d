//! Gram matrices for a small kernel zoo, their spectra, and the
//! majorization inequalities for Hadamard products of PSD matrices.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FmgpError, Result};
use crate::nn::{FeatureMap, FeatureMapConfig, Normalization};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelSpec {
    /// `exp(−‖x−x'‖²/(2l²))`
    Rbf { lengthscale: f64 },
    /// `exp(−‖x−x'‖/l)`
    Exp { lengthscale: f64 },
    /// `(1 + √3 r/l) exp(−√3 r/l)`
    Matern32 { lengthscale: f64 },
    /// `exp(−2 sin²(π r/period)/l²)`
    Periodic { period: f64, lengthscale: f64 },
    /// Randomly initialised ReLU MLP feature map, `k(x, x') = φ(x)ᵀφ(x')`.
    Mlp {
        hidden_width: usize,
        depth: usize,
        output_dim: usize,
        seed: u64,
        #[serde(default)]
        rescale_to_unit: bool,
        #[serde(default)]
        layer_norm: bool,
    },
    /// `K_nm K_mm⁺ K_mn` with `m` landmarks drawn without replacement from
    /// the first argument's rows.
    Nystrom { base: Box<KernelSpec>, landmarks: usize, seed: u64 },
    /// Entrywise product of two Grams.
    Product { first: Box<KernelSpec>, second: Box<KernelSpec> },
}

impl KernelSpec {
    pub fn rbf(lengthscale: f64) -> Self {
        KernelSpec::Rbf { lengthscale }
    }

    pub fn exp(lengthscale: f64) -> Self {
        KernelSpec::Exp { lengthscale }
    }

    pub fn mlp(hidden_width: usize, depth: usize, output_dim: usize, seed: u64) -> Self {
        KernelSpec::Mlp { hidden_width, depth, output_dim, seed, rescale_to_unit: false, layer_norm: false }
    }

    pub fn product(first: KernelSpec, second: KernelSpec) -> Self {
        KernelSpec::Product { first: Box::new(first), second: Box::new(second) }
    }

    pub fn nystrom(base: KernelSpec, landmarks: usize, seed: u64) -> Self {
        KernelSpec::Nystrom { base: Box::new(base), landmarks, seed }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(FmgpError::config(format!("{name} must be positive, got {v}")))
            }
        };
        match self {
            KernelSpec::Rbf { lengthscale }
            | KernelSpec::Exp { lengthscale }
            | KernelSpec::Matern32 { lengthscale } => positive("lengthscale", *lengthscale),
            KernelSpec::Periodic { period, lengthscale } => {
                positive("period", *period)?;
                positive("lengthscale", *lengthscale)
            }
            KernelSpec::Mlp { hidden_width, output_dim, .. } => {
                if *hidden_width == 0 || *output_dim == 0 {
                    return Err(FmgpError::config("MLP widths must be positive"));
                }
                Ok(())
            }
            KernelSpec::Nystrom { base, landmarks, .. } => {
                if *landmarks == 0 {
                    return Err(FmgpError::config("Nyström needs at least one landmark"));
                }
                base.validate()
            }
            KernelSpec::Product { first, second } => {
                first.validate()?;
                second.validate()
            }
        }
    }

    /// Short human-readable label, used in spectrum reports.
    pub fn label(&self) -> String {
        match self {
            KernelSpec::Rbf { lengthscale } => format!("rbf(l={lengthscale})"),
            KernelSpec::Exp { lengthscale } => format!("exp(l={lengthscale})"),
            KernelSpec::Matern32 { lengthscale } => format!("matern32(l={lengthscale})"),
            KernelSpec::Periodic { period, lengthscale } => format!("periodic(p={period},l={lengthscale})"),
            KernelSpec::Mlp { hidden_width, depth, output_dim, .. } => {
                format!("mlp(w={hidden_width},L={depth},p={output_dim})")
            }
            KernelSpec::Nystrom { base, landmarks, .. } => format!("nystrom({},m={landmarks})", base.label()),
            KernelSpec::Product { first, second } => format!("{}*{}", first.label(), second.label()),
        }
    }

    /// Copy with every embedded seed offset by `offset`, so one spec can be
    /// evaluated over several independent random draws.
    pub fn reseeded(&self, offset: u64) -> Self {
        match self {
            KernelSpec::Mlp { hidden_width, depth, output_dim, seed, rescale_to_unit, layer_norm } => KernelSpec::Mlp {
                hidden_width: *hidden_width,
                depth: *depth,
                output_dim: *output_dim,
                seed: seed.wrapping_add(offset),
                rescale_to_unit: *rescale_to_unit,
                layer_norm: *layer_norm,
            },
            KernelSpec::Nystrom { base, landmarks, seed } => KernelSpec::Nystrom {
                base: Box::new(base.reseeded(offset)),
                landmarks: *landmarks,
                seed: seed.wrapping_add(offset),
            },
            KernelSpec::Product { first, second } => KernelSpec::Product {
                first: Box::new(first.reseeded(offset)),
                second: Box::new(second.reseeded(offset.wrapping_mul(31).wrapping_add(17))),
            },
            other => other.clone(),
        }
    }
}

fn distances(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| {
        let mut s = 0.0;
        for k in 0..a.ncols() {
            let d = a[(i, k)] - b[(j, k)];
            s += d * d;
        }
        s.sqrt()
    })
}

/// The MLP feature map described by an `Mlp` spec for input dimension `d`.
pub fn mlp_feature_map(spec: &KernelSpec, d: usize) -> Result<FeatureMap> {
    match spec {
        KernelSpec::Mlp { hidden_width, depth, output_dim, seed, rescale_to_unit, layer_norm } => {
            let mut widths = vec![d];
            widths.extend(std::iter::repeat_n(*hidden_width, *depth));
            widths.push(*output_dim);
            let norm = if *layer_norm { Normalization::LayerNorm } else { Normalization::None };
            let cfg = FeatureMapConfig::new(widths).with_normalization(norm).with_rescale(*rescale_to_unit);
            FeatureMap::init(&cfg, *seed)
        }
        _ => Err(FmgpError::config("not an MLP kernel spec")),
    }
}

fn nystrom_features(base: &KernelSpec, x: &DMatrix<f64>, landmarks: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let kmm = build_cross_gram(base, landmarks, landmarks)?;
    let kmm = (&kmm + kmm.transpose()) * 0.5;
    let eig = SymmetricEigen::try_new(kmm, 1e-14, 10_000)
        .ok_or_else(|| FmgpError::numeric("eigensolver failed on landmark Gram"))?;
    let lmax = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    let knm = build_cross_gram(base, x, landmarks)?;
    let keep: Vec<usize> = (0..eig.eigenvalues.len()).filter(|&i| eig.eigenvalues[i] > 1e-10 * lmax).collect();
    let mut basis = DMatrix::zeros(landmarks.nrows(), keep.len());
    for (c, &i) in keep.iter().enumerate() {
        basis.set_column(c, &(eig.eigenvectors.column(i) / eig.eigenvalues[i].sqrt()));
    }
    Ok(knm * basis)
}

/// Cross-covariance matrix between the rows of `a` and `b`.
pub fn build_cross_gram(spec: &KernelSpec, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    spec.validate()?;
    if a.ncols() != b.ncols() {
        return Err(FmgpError::shape(format!("inputs have {} and {} columns", a.ncols(), b.ncols())));
    }
    let gram = match spec {
        KernelSpec::Rbf { lengthscale } => {
            let l2 = 2.0 * lengthscale * lengthscale;
            distances(a, b).map(|r| (-(r * r) / l2).exp())
        }
        KernelSpec::Exp { lengthscale } => distances(a, b).map(|r| (-r / lengthscale).exp()),
        KernelSpec::Matern32 { lengthscale } => distances(a, b).map(|r| {
            let s = 3.0_f64.sqrt() * r / lengthscale;
            (1.0 + s) * (-s).exp()
        }),
        KernelSpec::Periodic { period, lengthscale } => distances(a, b).map(|r| {
            let s = (std::f64::consts::PI * r / period).sin();
            (-2.0 * s * s / (lengthscale * lengthscale)).exp()
        }),
        KernelSpec::Mlp { .. } => {
            let map = mlp_feature_map(spec, a.ncols())?;
            map.forward(a)? * map.forward(b)?.transpose()
        }
        KernelSpec::Nystrom { base, landmarks, seed } => {
            let m = (*landmarks).min(a.nrows());
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let idx = sample(&mut rng, a.nrows(), m).into_vec();
            let lm = a.select_rows(idx.iter());
            let fa = nystrom_features(base, a, &lm)?;
            let fb = nystrom_features(base, b, &lm)?;
            fa * fb.transpose()
        }
        KernelSpec::Product { first, second } => {
            build_cross_gram(first, a, b)?.component_mul(&build_cross_gram(second, a, b)?)
        }
    };
    if gram.iter().any(|v| !v.is_finite()) {
        return Err(FmgpError::numeric(format!("non-finite entry in {} Gram", spec.label())));
    }
    Ok(gram)
}

/// Symmetric Gram matrix over the rows of `x`.
pub fn build_gram(spec: &KernelSpec, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let g = build_cross_gram(spec, x, x)?;
    Ok((&g + g.transpose()) * 0.5)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub kernel_label: String,
    pub n: usize,
    pub d: usize,
    pub seed: u64,
    /// Descending, clamped at 0.
    pub eigenvalues: Vec<f64>,
    /// Count of eigenvalues above `1e-10·λ₁`.
    pub numeric_rank: usize,
}

impl SpectrumReport {
    pub fn labelled(mut self, label: impl Into<String>, d: usize, seed: u64) -> Self {
        self.kernel_label = label.into();
        self.d = d;
        self.seed = seed;
        self
    }

    pub fn total(&self) -> f64 {
        self.eigenvalues.iter().sum()
    }

    /// `Σ_{i>k} λ_i / Σ λ_i` with 1-based `i`.
    pub fn tail_mass(&self, k: usize) -> f64 {
        let total = self.total();
        if total <= 0.0 {
            return 0.0;
        }
        self.eigenvalues.iter().skip(k).sum::<f64>() / total
    }

    pub fn tail_sum(&self, k: usize) -> f64 {
        self.eigenvalues.iter().skip(k).sum()
    }
}

fn sorted_eigenvalues(m: &DMatrix<f64>) -> Result<Vec<f64>> {
    if m.nrows() != m.ncols() {
        return Err(FmgpError::shape(format!("Gram matrix is {:?}", m.shape())));
    }
    let scale = m.amax().max(1.0);
    let asym = (m - m.transpose()).amax();
    if asym > 1e-10 * scale {
        return Err(FmgpError::numeric(format!("Gram matrix asymmetric by {asym:e}")));
    }
    let eig = SymmetricEigen::try_new(m.clone(), 1e-15, 100_000)
        .ok_or_else(|| FmgpError::numeric("eigensolver did not converge"))?;
    let mut values: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    values.sort_by(|a, b| b.total_cmp(a));
    Ok(values)
}

/// Full spectrum of a symmetric PSD matrix, descending and clamped at 0.
pub fn spectrum(gram: &DMatrix<f64>) -> Result<SpectrumReport> {
    let eigenvalues: Vec<f64> = sorted_eigenvalues(gram)?.into_iter().map(|v| v.max(0.0)).collect();
    let top = eigenvalues.first().copied().unwrap_or(0.0);
    let numeric_rank = eigenvalues.iter().filter(|&&v| v > 1e-10 * top).count();
    Ok(SpectrumReport { kernel_label: String::new(), n: gram.nrows(), d: 0, seed: 0, eigenvalues, numeric_rank })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelledKernel {
    pub label: String,
    pub spec: KernelSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecayConfig {
    pub n: usize,
    pub d: usize,
    pub seeds: Vec<u64>,
    pub kernels: Vec<LabelledKernel>,
}

impl Default for DecayConfig {
    fn default() -> Self {
        Self {
            n: 512,
            d: 2,
            seeds: vec![0],
            kernels: vec![
                LabelledKernel { label: "rbf".into(), spec: KernelSpec::rbf(1.0) },
                LabelledKernel { label: "exp".into(), spec: KernelSpec::exp(1.0) },
            ],
        }
    }
}

/// Inputs uniform on `[0, 1]^d`, shared by every kernel for a given seed.
pub fn uniform_inputs(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(n, d, |_, _| rng.random::<f64>())
}

/// Spectra for every `(seed, kernel)` pair. Seeds also offset the random
/// draws inside MLP and Nyström specs.
pub fn decay_experiment(config: &DecayConfig) -> Result<Vec<SpectrumReport>> {
    if config.n == 0 || config.d == 0 {
        return Err(FmgpError::config("decay experiment needs n ≥ 1 and d ≥ 1"));
    }
    let mut reports = Vec::new();
    for &seed in &config.seeds {
        let x = uniform_inputs(config.n, config.d, seed);
        for k in &config.kernels {
            let gram = build_gram(&k.spec.reseeded(seed), &x)?;
            reports.push(spectrum(&gram)?.labelled(k.label.clone(), config.d, seed));
        }
    }
    Ok(reports)
}

pub const SPECTRUM_CSV_HEADER: &str = "kernel_label,seed,eigen_index,eigenvalue";

/// CSV with one row per eigenvalue; `eigen_index` is 1-based.
pub fn reports_to_csv(reports: &[SpectrumReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SPECTRUM_CSV_HEADER.split(',')).map_err(|e| FmgpError::Data(e.to_string()))?;
    for r in reports {
        for (i, v) in r.eigenvalues.iter().enumerate() {
            w.write_record([r.kernel_label.clone(), r.seed.to_string(), (i + 1).to_string(), format!("{v:e}")])
                .map_err(|e| FmgpError::Data(e.to_string()))?;
        }
    }
    let bytes = w.into_inner().map_err(|e| FmgpError::Data(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| FmgpError::Data(e.to_string()))
}

/// Smallest slacks of the Hadamard-product spectral inequalities.
///
/// With `x_i = λ_i(K1)↓·[K2]_{ii}↓`:
/// * prefix: `Σ_{i≤k} x_i − Σ_{i≤k} λ_i(K1∘K2)` for `k = 1..n`;
/// * tail: `Σ_{i>n−k} λ_i(K1∘K2) − Σ_{i>n−k} x_i` for `k = 1..n`.
///
/// Both are nonnegative for PSD pairs; the tail family needs the traces
/// to agree, which holds when `K2` has unit diagonal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MajorizationReport {
    pub min_prefix_slack: f64,
    pub min_tail_slack: f64,
}

pub fn majorization_check(k1: &DMatrix<f64>, k2: &DMatrix<f64>) -> Result<MajorizationReport> {
    if k1.shape() != k2.shape() {
        return Err(FmgpError::shape(format!("{:?} vs {:?}", k1.shape(), k2.shape())));
    }
    let n = k1.nrows();
    let prod = sorted_eigenvalues(&k1.component_mul(k2))?;
    let l1 = sorted_eigenvalues(k1)?;
    let mut diag: Vec<f64> = k2.diagonal().iter().copied().collect();
    diag.sort_by(|a, b| b.total_cmp(a));
    let x: Vec<f64> = l1.iter().zip(&diag).map(|(l, d)| l * d).collect();
    let mut min_prefix = f64::INFINITY;
    let (mut px, mut pp) = (0.0, 0.0);
    for k in 0..n {
        px += x[k];
        pp += prod[k];
        min_prefix = min_prefix.min(px - pp);
    }
    let mut min_tail = f64::INFINITY;
    let (mut tx, mut tp) = (0.0, 0.0);
    for k in (0..n).rev() {
        tx += x[k];
        tp += prod[k];
        min_tail = min_tail.min(tp - tx);
    }
    Ok(MajorizationReport { min_prefix_slack: min_prefix, min_tail_slack: min_tail })
}

/// Random PSD matrix with unit diagonal: normalized random feature rows.
pub fn random_unit_diagonal_psd(n: usize, rank: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut phi = DMatrix::from_fn(n, rank.max(1), |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
    for mut row in phi.row_iter_mut() {
        let norm = row.norm();
        if norm > 0.0 {
            row /= norm;
        }
    }
    let mut k = &phi * phi.transpose();
    k.fill_diagonal(1.0);
    k
}

/// Trace of a square matrix.
pub fn trace(m: &DMatrix<f64>) -> f64 {
    m.diagonal().sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn exp_and_rbf_closed_forms() {
        let x = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 1.0]);
        let g = build_gram(&KernelSpec::exp(0.7), &x).unwrap();
        assert_eq!(g[(0, 0)], 1.0);
        let l = 0.5;
        let r = 2.0_f64.sqrt() * l;
        let x = DMatrix::from_row_slice(2, 1, &[0.0, r]);
        let g = build_gram(&KernelSpec::rbf(l), &x).unwrap();
        assert!((g[(0, 1)] - (-1.0_f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn product_is_hadamard() {
        let x = uniform_inputs(30, 3, 2);
        let a = KernelSpec::rbf(0.4);
        let b = KernelSpec::mlp(16, 2, 8, 3);
        let g = build_gram(&KernelSpec::product(a.clone(), b.clone()), &x).unwrap();
        let want = build_gram(&a, &x).unwrap().component_mul(&build_gram(&b, &x).unwrap());
        assert!((g - want).amax() <= 1e-12);
    }

    #[test]
    fn spectrum_of_identity_and_ones() {
        let s = spectrum(&DMatrix::identity(5, 5)).unwrap();
        assert!(s.eigenvalues.iter().all(|v| (v - 1.0).abs() < 1e-12));
        let s = spectrum(&DMatrix::from_element(6, 6, 1.0)).unwrap();
        assert!((s.eigenvalues[0] - 6.0).abs() < 1e-12);
        assert!(s.eigenvalues[1..].iter().all(|v| v.abs() < 1e-12));
        assert_eq!(s.numeric_rank, 1);
    }

    #[test]
    fn mlp_gram_rank_bounded_by_p() {
        let x = uniform_inputs(64, 2, 1);
        let s = spectrum(&build_gram(&KernelSpec::mlp(32, 2, 8, 5), &x).unwrap()).unwrap();
        assert!(s.numeric_rank <= 8);
    }

    #[test]
    fn nystrom_has_rank_at_most_m_and_matches_on_landmarks() {
        let x = uniform_inputs(40, 2, 3);
        let base = KernelSpec::exp(0.5);
        let ny = KernelSpec::nystrom(base.clone(), 10, 4);
        let g = build_gram(&ny, &x).unwrap();
        let s = spectrum(&g).unwrap();
        assert!(s.numeric_rank <= 10);
        // With every point as a landmark the approximation is exact.
        let full = build_gram(&KernelSpec::nystrom(base.clone(), 40, 0), &x).unwrap();
        assert!((full - build_gram(&base, &x).unwrap()).amax() < 1e-6);
    }

    #[test]
    fn unit_diagonal_product_preserves_trace() {
        let x = uniform_inputs(25, 2, 5);
        let g = build_gram(&KernelSpec::product(KernelSpec::rbf(0.3), KernelSpec::exp(0.8)), &x).unwrap();
        assert!((trace(&g) - 25.0).abs() < 1e-12);
    }

    #[test]
    fn csv_has_four_columns() {
        let cfg = DecayConfig { n: 10, d: 1, ..Default::default() };
        let csv = reports_to_csv(&decay_experiment(&cfg).unwrap()).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), SPECTRUM_CSV_HEADER);
        assert_eq!(lines.count(), 20);
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(KernelSpec::rbf(0.0).validate().is_err());
        assert!(KernelSpec::nystrom(KernelSpec::exp(1.0), 0, 0).validate().is_err());
        let bad: std::result::Result<KernelSpec, _> = serde_json::from_str(r#"{"kind":"rbf","lengthscale":1,"x":2}"#);
        assert!(bad.is_err());
    }

    #[test]
    fn spec_json_round_trip() {
        let s = KernelSpec::product(KernelSpec::mlp(8, 1, 4, 2), KernelSpec::nystrom(KernelSpec::exp(0.3), 5, 1));
        let back: KernelSpec = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(s, back);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn majorization_holds(n in 2usize..32, r1 in 1usize..12, r2 in 1usize..12, seed in 0u64..10_000) {
            let k1 = random_unit_diagonal_psd(n, r1, seed);
            let k2 = random_unit_diagonal_psd(n, r2, seed + 1);
            let rep = majorization_check(&k1, &k2).unwrap();
            prop_assert!(rep.min_prefix_slack >= -1e-9);
            prop_assert!(rep.min_tail_slack >= -1e-9);
        }

        #[test]
        fn feature_gram_rank_bound(p in 1usize..10, seed in 0u64..1000) {
            let x = uniform_inputs(24, 2, seed);
            let s = spectrum(&build_gram(&KernelSpec::mlp(12, 1, p, seed), &x).unwrap()).unwrap();
            prop_assert!(s.numeric_rank <= p);
        }
    }
}

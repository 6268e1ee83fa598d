//! Feature-map GP regression.
//!
//! The model kernel is `k(x, x') = σ_f² ψ(x)ᵀψ(x') + σ_ξ² δ(x, x')`. Training
//! maximises the marginal likelihood on data subsets; afterwards a single
//! [`FeatureDecomposition`] of `ΨᵀΨ` over the full training set serves all
//! predictions.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::NormalizationStats;
use crate::error::{FmgpError, Result};
use crate::kernel::FeatureKernel;
use crate::lowrank::{logdet_kxi, quad_form, woodbury_solve, FeatureDecomposition};
use crate::training::{run_adam, training_subsets, TrainConfig, TrainingTrace};

pub const MODEL_SCHEMA: &str = "fmgp-regression-model";
pub const MODEL_VERSION: u32 = 1;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Pointwise predictive moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveDistribution {
    #[serde(with = "crate::serde_mat::vector")]
    pub mean: DVector<f64>,
    /// Latent (noise-free) variance.
    #[serde(with = "crate::serde_mat::vector")]
    pub variance: DVector<f64>,
    /// `variance + σ_ξ²`.
    #[serde(with = "crate::serde_mat::vector")]
    pub observation_variance: DVector<f64>,
}

impl PredictiveDistribution {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn mse(&self, y: &DVector<f64>) -> f64 {
        (&self.mean - y).norm_squared() / y.len().max(1) as f64
    }

    /// Mean Gaussian negative log predictive density using the observation
    /// variance.
    pub fn mean_nll(&self, y: &DVector<f64>) -> f64 {
        let total: f64 = (0..y.len())
            .map(|i| {
                let s = self.observation_variance[i];
                0.5 * (LN_2PI + s.ln() + (y[i] - self.mean[i]).powi(2) / s)
            })
            .sum();
        total / y.len().max(1) as f64
    }
}

/// Marginal log-likelihood and its gradient.
///
/// `gradient` holds the kernel parameters in [`FeatureKernel::params_flat`]
/// order, then `∂/∂ log σ_f²`, then `∂/∂ log σ_ξ²`.
#[derive(Debug, Clone)]
pub struct MllEvaluation {
    pub value: f64,
    pub gradient: Vec<f64>,
}

pub(crate) enum Noise<'a> {
    Constant(f64),
    PerPoint(&'a DVector<f64>),
}

/// Gaussian MLL of `y` under `K = FFᵀ + diag(s)`, with `∂/∂F` and `Σ_i ∂/∂s_i`.
pub(crate) struct GaussianTerms {
    pub value: f64,
    pub d_f: DMatrix<f64>,
    pub d_noise_sum: f64,
}

pub(crate) fn gaussian_mll(f: &DMatrix<f64>, y: &DVector<f64>, noise: Noise<'_>) -> Result<GaussianTerms> {
    let n = f.nrows();
    if y.len() != n {
        return Err(FmgpError::shape(format!("{} targets for {n} rows", y.len())));
    }
    if n == 0 {
        return Err(FmgpError::domain("marginal likelihood needs at least one point"));
    }
    let (quad, logdet, alpha, kinv_f, kinv_trace) = match noise {
        Noise::Constant(s) => {
            let decomp = FeatureDecomposition::from_features(f, Some(y))?;
            let quad = quad_form(&decomp, f, s, y)?;
            let logdet = logdet_kxi(&decomp, s, n)?;
            let alpha = woodbury_solve(&decomp, f, s, y)?;
            // K⁻¹F = F(FᵀF + sI)⁻¹
            let kinv_f = f * decomp.shifted_inverse(s);
            let m = n.min(decomp.p());
            let trace = decomp.eigenvalues.iter().take(m).map(|l| 1.0 / (l + s)).sum::<f64>() + (n - m) as f64 / s;
            (quad, logdet, alpha, kinv_f, trace)
        }
        Noise::PerPoint(s) => {
            if s.len() != n {
                return Err(FmgpError::shape(format!("{} noise values for {n} rows", s.len())));
            }
            if s.iter().any(|v| *v <= 0.0 || !v.is_finite()) {
                return Err(FmgpError::domain("per-point noise variances must be positive"));
            }
            // Whitening by D^{-1/2} turns K into D^{1/2}(F̃F̃ᵀ + I)D^{1/2}.
            let w = s.map(|v| 1.0 / v.sqrt());
            let mut ft = f.clone();
            for (i, wi) in w.iter().enumerate() {
                ft.row_mut(i).scale_mut(*wi);
            }
            let yt = y.component_mul(&w);
            let decomp = FeatureDecomposition::from_features(&ft, Some(&yt))?;
            let quad = quad_form(&decomp, &ft, 1.0, &yt)?;
            let logdet = logdet_kxi(&decomp, 1.0, n)? + s.iter().map(|v| v.ln()).sum::<f64>();
            let alpha = woodbury_solve(&decomp, &ft, 1.0, &yt)?.component_mul(&w);
            let ftm = &ft * decomp.shifted_inverse(1.0);
            let mut trace = 0.0;
            let mut kinv_f = ftm.clone();
            for i in 0..n {
                trace += w[i] * w[i] * (1.0 - ftm.row(i).dot(&ft.row(i)));
                kinv_f.row_mut(i).scale_mut(w[i]);
            }
            (quad, logdet, alpha, kinv_f, trace)
        }
    };
    let value = -0.5 * quad - 0.5 * logdet - 0.5 * n as f64 * LN_2PI;
    let d_f = &alpha * f.tr_mul(&alpha).transpose() - kinv_f;
    let d_noise_sum = 0.5 * alpha.norm_squared() - 0.5 * kinv_trace;
    Ok(GaussianTerms { value, d_f, d_noise_sum })
}

fn snapshot(kernel: &FeatureKernel, log_sigma_f_sq: f64, log_sigma_xi_sq: f64) -> String {
    let params = kernel.params_flat();
    let max_abs = params.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let non_finite = params.iter().filter(|v| !v.is_finite()).count();
    format!(
        "log σ_f² = {log_sigma_f_sq}, log σ_ξ² = {log_sigma_xi_sq}, {} kernel parameters (max |θ| = {max_abs}, {non_finite} non-finite)",
        params.len()
    )
}

/// Marginal log-likelihood `−½yᵀK_ξ⁻¹y − ½log|K_ξ| − (n/2)log 2π` with
/// `K_ξ = σ_f²ΨΨᵀ + σ_ξ²I`, and its gradient.
pub fn mll(
    kernel: &FeatureKernel,
    log_sigma_f_sq: f64,
    log_sigma_xi_sq: f64,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Result<MllEvaluation> {
    if x.nrows() != y.len() {
        return Err(FmgpError::shape(format!("{} inputs but {} targets", x.nrows(), y.len())));
    }
    let (psi, cache) = kernel.features_with_cache(x)?;
    let sigma_f = (0.5 * log_sigma_f_sq).exp();
    let sigma_xi_sq = log_sigma_xi_sq.exp();
    let f = &psi * sigma_f;
    let terms = gaussian_mll(&f, y, Noise::Constant(sigma_xi_sq))?;
    let d_log_sf2 = 0.5 * terms.d_f.dot(&f);
    let d_log_sxi2 = sigma_xi_sq * terms.d_noise_sum;
    let mut gradient = kernel.backward(&cache, &(terms.d_f * sigma_f))?;
    gradient.push(d_log_sf2);
    gradient.push(d_log_sxi2);
    if !terms.value.is_finite() || gradient.iter().any(|g| !g.is_finite()) {
        return Err(FmgpError::numeric(format!(
            "non-finite marginal likelihood {}; {}",
            terms.value,
            snapshot(kernel, log_sigma_f_sq, log_sigma_xi_sq)
        )));
    }
    Ok(MllEvaluation { value: terms.value, gradient })
}

pub(crate) fn select_rows(x: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    x.select_rows(rows.iter())
}

/// Trained regression model; immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GpModelDoc", into = "GpModelDoc")]
pub struct GpModel {
    kernel: FeatureKernel,
    sigma_f_sq: f64,
    sigma_xi_sq: f64,
    /// `σ_ξ²/σ_f²`, fixed at construction so that recalibration leaves
    /// the predictive mean bit-identical.
    gamma: f64,
    decomp: FeatureDecomposition,
    normalization: Option<NormalizationStats>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GpModelDoc {
    schema: String,
    version: u32,
    kernel: FeatureKernel,
    sigma_f_sq: f64,
    sigma_xi_sq: f64,
    gamma: f64,
    decomposition: FeatureDecomposition,
    #[serde(default)]
    normalization: Option<NormalizationStats>,
}

impl From<GpModel> for GpModelDoc {
    fn from(m: GpModel) -> Self {
        GpModelDoc {
            schema: MODEL_SCHEMA.to_string(),
            version: MODEL_VERSION,
            kernel: m.kernel,
            sigma_f_sq: m.sigma_f_sq,
            sigma_xi_sq: m.sigma_xi_sq,
            gamma: m.gamma,
            decomposition: m.decomp,
            normalization: m.normalization,
        }
    }
}

impl TryFrom<GpModelDoc> for GpModel {
    type Error = FmgpError;

    fn try_from(doc: GpModelDoc) -> Result<Self> {
        if doc.schema != MODEL_SCHEMA || doc.version != MODEL_VERSION {
            return Err(FmgpError::config(format!(
                "expected {MODEL_SCHEMA} version {MODEL_VERSION}, found {} version {}",
                doc.schema, doc.version
            )));
        }
        let model = GpModel {
            kernel: doc.kernel,
            sigma_f_sq: doc.sigma_f_sq,
            sigma_xi_sq: doc.sigma_xi_sq,
            gamma: doc.gamma,
            decomp: doc.decomposition,
            normalization: doc.normalization,
        };
        model.check()?;
        Ok(model)
    }
}

impl GpModel {
    /// Builds the model and its decomposition from the full training set.
    pub fn build(
        kernel: FeatureKernel,
        sigma_f_sq: f64,
        sigma_xi_sq: f64,
        x_train: &DMatrix<f64>,
        y_train: &DVector<f64>,
    ) -> Result<Self> {
        if x_train.nrows() != y_train.len() {
            return Err(FmgpError::shape(format!("{} inputs but {} targets", x_train.nrows(), y_train.len())));
        }
        if x_train.ncols() != kernel.input_dim() {
            return Err(FmgpError::shape(format!(
                "inputs have {} columns, kernel expects {}",
                x_train.ncols(),
                kernel.input_dim()
            )));
        }
        let decomp = kernel.accumulate(x_train, Some(y_train))?.decompose()?;
        let model =
            GpModel { kernel, sigma_f_sq, sigma_xi_sq, gamma: sigma_xi_sq / sigma_f_sq, decomp, normalization: None };
        model.check()?;
        Ok(model)
    }

    fn check(&self) -> Result<()> {
        for (name, v) in [("sigma_f_sq", self.sigma_f_sq), ("sigma_xi_sq", self.sigma_xi_sq), ("gamma", self.gamma)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(FmgpError::domain(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if self.decomp.p() != self.kernel.output_dim() {
            return Err(FmgpError::shape(format!(
                "decomposition has p = {}, kernel produces {}",
                self.decomp.p(),
                self.kernel.output_dim()
            )));
        }
        Ok(())
    }

    /// Trains on `(x, y)` and returns the model with its loss trace.
    pub fn fit(
        kernel: FeatureKernel,
        x: &DMatrix<f64>,
        y: &DVector<f64>,
        config: &TrainConfig,
    ) -> Result<(Self, TrainingTrace)> {
        config.validate()?;
        if x.nrows() == 0 {
            return Err(FmgpError::domain("training set is empty"));
        }
        if x.nrows() != y.len() {
            return Err(FmgpError::shape(format!("{} inputs but {} targets", x.nrows(), y.len())));
        }
        let subsets = training_subsets(x.nrows(), config.num_subsets, config.subset_size, config.seed);
        let blocks: Vec<(DMatrix<f64>, DVector<f64>)> = subsets
            .iter()
            .map(|s| (select_rows(x, s), DVector::from_iterator(s.len(), s.iter().map(|&i| y[i]))))
            .collect();
        let mut kernel = kernel;
        let k = kernel.num_params();
        let mut params = kernel.params_flat();
        params.push(config.init_sigma_f_sq.ln());
        params.push(config.init_sigma_xi_sq.ln());
        let mut probe = kernel.clone();
        let index: Vec<Vec<usize>> = (0..blocks.len()).map(|b| vec![b]).collect();
        let trace = run_adam(&mut params, &index, config, |p, sel| {
            let (bx, by) = &blocks[sel[0]];
            probe.set_params_flat(&p[..k])?;
            let eval = mll(&probe, p[k], p[k + 1], bx, by)?;
            let scale = -1.0 / by.len() as f64;
            Ok((eval.value * scale, eval.gradient.iter().map(|g| g * scale).collect()))
        })?;
        kernel.set_params_flat(&params[..k])?;
        let model = Self::build(kernel, params[k].exp(), params[k + 1].exp(), x, y)?;
        Ok((model, trace))
    }

    pub fn with_normalization(mut self, stats: NormalizationStats) -> Self {
        self.normalization = Some(stats);
        self
    }

    pub fn normalization(&self) -> Option<&NormalizationStats> {
        self.normalization.as_ref()
    }

    pub fn kernel(&self) -> &FeatureKernel {
        &self.kernel
    }

    pub fn sigma_f_sq(&self) -> f64 {
        self.sigma_f_sq
    }

    pub fn sigma_xi_sq(&self) -> f64 {
        self.sigma_xi_sq
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn decomposition(&self) -> &FeatureDecomposition {
        &self.decomp
    }

    pub fn input_dim(&self) -> usize {
        self.kernel.input_dim()
    }

    /// Replaces the cached decomposition. Test hook for the oracle
    /// batteries' perturbation mode.
    pub fn with_decomposition(mut self, decomp: FeatureDecomposition) -> Self {
        self.decomp = decomp;
        self
    }

    fn projected(&self, x_star: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x_star.ncols() != self.input_dim() {
            return Err(FmgpError::shape(format!(
                "test inputs have {} columns, model expects {}",
                x_star.ncols(),
                self.input_dim()
            )));
        }
        Ok(self.kernel.features_batched(x_star)? * &self.decomp.eigenvectors)
    }

    /// Predictive mean `ψ*ᵀU(Λ+γI)⁻¹UᵀΨᵀy` and the diagonal of the
    /// predictive covariance, computed as `σ_ξ² Σ_k (u_kᵀψ*)²/(λ_k+γ)`.
    pub fn predict(&self, x_star: &DMatrix<f64>) -> Result<PredictiveDistribution> {
        let z = self.projected(x_star)?;
        let inv: Vec<f64> = self.decomp.eigenvalues.iter().map(|l| 1.0 / (l + self.gamma)).collect();
        let coeffs = DVector::from_iterator(inv.len(), self.decomp.proj_targets.iter().zip(&inv).map(|(b, i)| b * i));
        let mean = &z * coeffs;
        let variance = DVector::from_iterator(
            z.nrows(),
            z.row_iter().map(|r| self.sigma_xi_sq * r.iter().zip(&inv).map(|(v, i)| v * v * i).sum::<f64>()),
        );
        let observation_variance = variance.add_scalar(self.sigma_xi_sq);
        Ok(PredictiveDistribution { mean, variance, observation_variance })
    }

    /// Full latent predictive covariance; intended for small `n*`.
    pub fn predict_covariance(&self, x_star: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        const MAX_ROWS: usize = 5000;
        if x_star.nrows() > MAX_ROWS {
            return Err(FmgpError::domain(format!(
                "full covariance limited to {MAX_ROWS} test points, got {}",
                x_star.nrows()
            )));
        }
        let z = self.projected(x_star)?;
        let mut scaled = z.clone();
        for (j, l) in self.decomp.eigenvalues.iter().enumerate() {
            scaled.column_mut(j).scale_mut(self.sigma_xi_sq / (l + self.gamma));
        }
        Ok(scaled * z.transpose())
    }

    /// Copy with both variances multiplied by `alpha`; `γ` and the
    /// predictive mean are unchanged.
    pub fn with_scaled_variances(&self, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(FmgpError::numeric(format!("variance scale must be positive, got {alpha}")));
        }
        let mut out = self.clone();
        out.sigma_f_sq *= alpha;
        out.sigma_xi_sq *= alpha;
        Ok(out)
    }

    /// Rescales both variances by the mean standardized squared residual on
    /// a calibration set; returns the new model and the factor.
    pub fn recalibrate(&self, x_cal: &DMatrix<f64>, y_cal: &DVector<f64>) -> Result<(Self, f64)> {
        if y_cal.is_empty() {
            return Err(FmgpError::domain("calibration set is empty"));
        }
        if x_cal.nrows() != y_cal.len() {
            return Err(FmgpError::shape(format!("{} calibration inputs but {} targets", x_cal.nrows(), y_cal.len())));
        }
        let pred = self.predict(x_cal)?;
        let alpha = recalibration_factor(&pred, y_cal)?;
        Ok((self.with_scaled_variances(alpha)?, alpha))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// `α = (1/c) Σ (y_i − μ_i)²/s_i²` with `s_i²` the observation variance.
pub fn recalibration_factor(pred: &PredictiveDistribution, y: &DVector<f64>) -> Result<f64> {
    if y.is_empty() {
        return Err(FmgpError::domain("calibration set is empty"));
    }
    if pred.len() != y.len() {
        return Err(FmgpError::shape(format!("{} predictions for {} targets", pred.len(), y.len())));
    }
    let mut total = 0.0;
    for i in 0..y.len() {
        let s = pred.observation_variance[i];
        if s.is_nan() || s <= 0.0 {
            return Err(FmgpError::numeric(format!("predictive variance {s} at calibration point {i}")));
        }
        total += (y[i] - pred.mean[i]).powi(2) / s;
    }
    Ok(total / y.len() as f64)
}

/// Dense exact-GP predictions via Cholesky of `K(X, X) + σ_ξ²I`.
///
/// `kernel(A, B)` must return the cross-covariance matrix between the rows
/// of `A` and `B`. Intended as a test oracle for moderate `n`.
pub fn exact_gp_oracle<K>(
    kernel: K,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    sigma_xi_sq: f64,
    x_star: &DMatrix<f64>,
) -> Result<PredictiveDistribution>
where
    K: Fn(&DMatrix<f64>, &DMatrix<f64>) -> DMatrix<f64>,
{
    if sigma_xi_sq.is_nan() || sigma_xi_sq <= 0.0 {
        return Err(FmgpError::domain(format!("noise variance must be positive, got {sigma_xi_sq}")));
    }
    let mut pred =
        exact_gp_oracle_heteroscedastic(kernel, x, y, &DVector::from_element(x.nrows(), sigma_xi_sq), x_star)?;
    pred.observation_variance = pred.variance.add_scalar(sigma_xi_sq);
    Ok(pred)
}

/// Dense exact-GP predictions with per-point noise `K(X, X) + diag(noise)`.
/// The returned observation variance equals the latent variance, since
/// test-point noise is unknown.
pub fn exact_gp_oracle_heteroscedastic<K>(
    kernel: K,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    noise: &DVector<f64>,
    x_star: &DMatrix<f64>,
) -> Result<PredictiveDistribution>
where
    K: Fn(&DMatrix<f64>, &DMatrix<f64>) -> DMatrix<f64>,
{
    if x.nrows() != y.len() || noise.len() != y.len() || x.ncols() != x_star.ncols() {
        return Err(FmgpError::shape(format!(
            "X is {:?}, y has {}, noise has {}, X* is {:?}",
            x.shape(),
            y.len(),
            noise.len(),
            x_star.shape()
        )));
    }
    let k_xi = kernel(x, x) + DMatrix::from_diagonal(noise);
    let chol = k_xi.cholesky().ok_or_else(|| FmgpError::numeric("K + noise is not positive definite"))?;
    let k_sn = kernel(x_star, x);
    let mean = &k_sn * chol.solve(y);
    let v = chol
        .l()
        .solve_lower_triangular(&k_sn.transpose())
        .ok_or_else(|| FmgpError::numeric("triangular solve failed in exact GP oracle"))?;
    let prior = kernel(x_star, x_star).diagonal();
    let variance = DVector::from_iterator(
        x_star.nrows(),
        (0..x_star.nrows()).map(|i| (prior[i] - v.column(i).norm_squared()).max(0.0)),
    );
    Ok(PredictiveDistribution { mean, observation_variance: variance.clone(), variance })
}

/// Dense Gaussian log-likelihood `log N(y | 0, K)` for a covariance that
/// already includes the noise.
pub fn dense_gaussian_mll(k: &DMatrix<f64>, y: &DVector<f64>) -> Result<f64> {
    let n = y.len();
    let chol = k.clone().cholesky().ok_or_else(|| FmgpError::numeric("covariance is not positive definite"))?;
    let logdet = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let quad = y.dot(&chol.solve(y));
    Ok(-0.5 * quad - 0.5 * logdet - 0.5 * n as f64 * LN_2PI)
}

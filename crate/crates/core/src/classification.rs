//! Dirichlet-based GP classification.
//!
//! Labels become per-class log-normal surrogate regression targets
//! `ỹ = log α − σ̃²/2` with fixed noise `σ̃² = log(1/α + 1)`. Each class is
//! a GP regression sharing one feature map, with its own `σ_f,c²`,
//! `σ_ξ,c²` and total per-point noise `σ̃²_{i,c} + σ_ξ,c²`. Class
//! probabilities are Monte-Carlo averages of a tempered softmax over the
//! latent posteriors.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::NormalizationStats;
use crate::error::{FmgpError, Result};
use crate::kernel::FeatureKernel;
use crate::lowrank::FeatureDecomposition;
use crate::parallel;
use crate::regression::{gaussian_mll, select_rows, Noise};
use crate::training::{run_adam, training_subsets, TrainConfig, TrainingTrace};

pub const CLASSIFIER_SCHEMA: &str = "fmgp-dirichlet-classifier";
pub const CLASSIFIER_VERSION: u32 = 1;
pub const DEFAULT_ALPHA_EPS: f64 = 0.01;
pub const DEFAULT_NUM_SAMPLES: usize = 1024;
pub const DEFAULT_ECE_BINS: usize = 15;

/// Surrogate regression targets and their fixed noise, both `n × C`.
#[derive(Debug, Clone, PartialEq)]
pub struct DirichletTargets {
    pub y_tilde: DMatrix<f64>,
    pub sigma_tilde_sq: DMatrix<f64>,
}

/// Log-normal moment match of a Gamma(α, 1) draw: returns
/// `(ỹ, σ̃²) = (log α − σ̃²/2, log(1/α + 1))`.
pub fn dirichlet_moments(alpha: f64) -> (f64, f64) {
    let s2 = (1.0 / alpha + 1.0).ln();
    (alpha.ln() - s2 / 2.0, s2)
}

/// Applies [`dirichlet_moments`] to `α_{i,c} = alpha_eps + 1{label_i = c}`.
pub fn dirichlet_transform(labels: &[usize], num_classes: usize, alpha_eps: f64) -> Result<DirichletTargets> {
    if !(alpha_eps > 0.0 && alpha_eps.is_finite()) {
        return Err(FmgpError::domain(format!("alpha_eps must be positive, got {alpha_eps}")));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(FmgpError::domain(format!("label {bad} outside 0..{num_classes}")));
    }
    let n = labels.len();
    let mut y_tilde = DMatrix::zeros(n, num_classes);
    let mut sigma_tilde_sq = DMatrix::zeros(n, num_classes);
    for (i, &l) in labels.iter().enumerate() {
        for c in 0..num_classes {
            let alpha = alpha_eps + if l == c { 1.0 } else { 0.0 };
            let (y, s2) = dirichlet_moments(alpha);
            sigma_tilde_sq[(i, c)] = s2;
            y_tilde[(i, c)] = y;
        }
    }
    Ok(DirichletTargets { y_tilde, sigma_tilde_sq })
}

/// Converts `f64` class indices (as stored in datasets) to `usize`.
pub fn labels_from_targets(targets: &DVector<f64>) -> Result<Vec<usize>> {
    targets
        .iter()
        .map(|&t| {
            if t >= 0.0 && t.fract() == 0.0 && t.is_finite() {
                Ok(t as usize)
            } else {
                Err(FmgpError::domain(format!("class label {t} is not a nonnegative integer")))
            }
        })
        .collect()
}

/// Per-class latent posterior moments, `n × C`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPosterior {
    pub mean: DMatrix<f64>,
    pub variance: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ClassifierDoc", into = "ClassifierDoc")]
pub struct DirichletClassifier {
    kernel: FeatureKernel,
    num_classes: usize,
    alpha_eps: f64,
    sigma_f_sq: Vec<f64>,
    sigma_xi_sq: Vec<f64>,
    /// Constant prior mean of each class's surrogate targets.
    prior_means: Vec<f64>,
    /// Decomposition of `F̃_cᵀF̃_c` with `F̃_c = σ_f,c D_c^{-1/2} Ψ`.
    caches: Vec<FeatureDecomposition>,
    temperature: f64,
    normalization: Option<NormalizationStats>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClassifierDoc {
    schema: String,
    version: u32,
    kernel: FeatureKernel,
    num_classes: usize,
    /// Surrogate noise policy: `σ̃² = log(1/α + 1)` with this `alpha_eps`.
    alpha_eps: f64,
    sigma_f_sq: Vec<f64>,
    sigma_xi_sq: Vec<f64>,
    prior_means: Vec<f64>,
    caches: Vec<FeatureDecomposition>,
    temperature: f64,
    #[serde(default)]
    normalization: Option<NormalizationStats>,
}

impl From<DirichletClassifier> for ClassifierDoc {
    fn from(c: DirichletClassifier) -> Self {
        ClassifierDoc {
            schema: CLASSIFIER_SCHEMA.into(),
            version: CLASSIFIER_VERSION,
            kernel: c.kernel,
            num_classes: c.num_classes,
            alpha_eps: c.alpha_eps,
            sigma_f_sq: c.sigma_f_sq,
            sigma_xi_sq: c.sigma_xi_sq,
            prior_means: c.prior_means,
            caches: c.caches,
            temperature: c.temperature,
            normalization: c.normalization,
        }
    }
}

impl TryFrom<ClassifierDoc> for DirichletClassifier {
    type Error = FmgpError;

    fn try_from(d: ClassifierDoc) -> Result<Self> {
        if d.schema != CLASSIFIER_SCHEMA || d.version != CLASSIFIER_VERSION {
            return Err(FmgpError::config(format!(
                "expected {CLASSIFIER_SCHEMA} version {CLASSIFIER_VERSION}, found {} version {}",
                d.schema, d.version
            )));
        }
        let c = DirichletClassifier {
            kernel: d.kernel,
            num_classes: d.num_classes,
            alpha_eps: d.alpha_eps,
            sigma_f_sq: d.sigma_f_sq,
            sigma_xi_sq: d.sigma_xi_sq,
            prior_means: d.prior_means,
            caches: d.caches,
            temperature: d.temperature,
            normalization: d.normalization,
        };
        c.check()?;
        Ok(c)
    }
}

fn scaled_rows(psi: &DMatrix<f64>, scale: f64, noise: &DVector<f64>) -> DMatrix<f64> {
    let mut f = psi * scale;
    for (i, s) in noise.iter().enumerate() {
        f.row_mut(i).unscale_mut(s.sqrt());
    }
    f
}

impl DirichletClassifier {
    fn check(&self) -> Result<()> {
        let c = self.num_classes;
        if c < 2 {
            return Err(FmgpError::domain("classifier needs at least two classes"));
        }
        if [self.sigma_f_sq.len(), self.sigma_xi_sq.len(), self.prior_means.len(), self.caches.len()]
            .iter()
            .any(|&l| l != c)
        {
            return Err(FmgpError::shape(format!("per-class arrays must have {c} entries")));
        }
        if self.sigma_f_sq.iter().chain(&self.sigma_xi_sq).any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(FmgpError::domain("class variances must be positive and finite"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(FmgpError::domain(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.caches.iter().any(|d| d.p() != self.kernel.output_dim()) {
            return Err(FmgpError::shape("class cache dimension does not match the kernel"));
        }
        Ok(())
    }

    /// Builds per-class caches from the full training set.
    pub fn build(
        kernel: FeatureKernel,
        x: &DMatrix<f64>,
        labels: &[usize],
        num_classes: usize,
        alpha_eps: f64,
        sigma_f_sq: Vec<f64>,
        sigma_xi_sq: Vec<f64>,
    ) -> Result<Self> {
        if x.nrows() != labels.len() {
            return Err(FmgpError::shape(format!("{} inputs but {} labels", x.nrows(), labels.len())));
        }
        let targets = dirichlet_transform(labels, num_classes, alpha_eps)?;
        let prior_means = column_means(&targets.y_tilde);
        let psi = kernel.features_batched(x)?;
        let mut caches = Vec::with_capacity(num_classes);
        for c in 0..num_classes {
            let noise = targets.sigma_tilde_sq.column(c).add_scalar(sigma_xi_sq[c]);
            let f = scaled_rows(&psi, sigma_f_sq[c].sqrt(), &noise);
            let y = targets.y_tilde.column(c).add_scalar(-prior_means[c]).component_div(&noise.map(f64::sqrt));
            caches.push(FeatureDecomposition::from_features(&f, Some(&y))?);
        }
        let clf = DirichletClassifier {
            kernel,
            num_classes,
            alpha_eps,
            sigma_f_sq,
            sigma_xi_sq,
            prior_means,
            caches,
            temperature: 1.0,
            normalization: None,
        };
        clf.check()?;
        Ok(clf)
    }

    /// Trains the shared feature map and per-class hyperparameters on the
    /// sum of per-class marginal likelihoods.
    pub fn fit(
        kernel: FeatureKernel,
        x: &DMatrix<f64>,
        labels: &[usize],
        num_classes: usize,
        alpha_eps: f64,
        config: &TrainConfig,
    ) -> Result<(Self, TrainingTrace)> {
        config.validate()?;
        if x.nrows() != labels.len() {
            return Err(FmgpError::shape(format!("{} inputs but {} labels", x.nrows(), labels.len())));
        }
        let mut present = labels.to_vec();
        present.sort_unstable();
        present.dedup();
        if present.len() < 2 {
            return Err(FmgpError::domain("classification needs at least two classes in the training data"));
        }
        let c_count = num_classes;
        let targets = dirichlet_transform(labels, c_count, alpha_eps)?;
        let prior_means = column_means(&targets.y_tilde);
        let centred = DMatrix::from_fn(x.nrows(), c_count, |i, c| targets.y_tilde[(i, c)] - prior_means[c]);

        let subsets = training_subsets(x.nrows(), config.num_subsets, config.subset_size, config.seed);
        let blocks: Vec<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> = subsets
            .iter()
            .map(|s| (select_rows(x, s), centred.select_rows(s.iter()), targets.sigma_tilde_sq.select_rows(s.iter())))
            .collect();

        let mut kernel = kernel;
        let k = kernel.num_params();
        let mut params = kernel.params_flat();
        // σ_f,c² starts at the spread of the centred surrogate targets.
        for c in 0..c_count {
            let col = centred.column(c);
            let var = col.norm_squared() / col.len() as f64;
            params.push(var.max(1e-6).ln());
        }
        params.extend(std::iter::repeat_n(config.init_sigma_xi_sq.ln(), c_count));
        let mut probe = kernel.clone();
        let index: Vec<Vec<usize>> = (0..blocks.len()).map(|b| vec![b]).collect();
        let trace = run_adam(&mut params, &index, config, |p, sel| {
            let (bx, by, bs) = &blocks[sel[0]];
            probe.set_params_flat(&p[..k])?;
            let (psi, cache) = probe.features_with_cache(bx)?;
            let mut d_psi = DMatrix::zeros(psi.nrows(), psi.ncols());
            let mut value = 0.0;
            let mut hyper = vec![0.0; 2 * c_count];
            for c in 0..c_count {
                let sigma_f = (0.5 * p[k + c]).exp();
                let sigma_xi_sq = p[k + c_count + c].exp();
                let f = &psi * sigma_f;
                let noise = bs.column(c).add_scalar(sigma_xi_sq);
                let yc = by.column(c).into_owned();
                let terms = gaussian_mll(&f, &yc, Noise::PerPoint(&noise))?;
                value += terms.value;
                hyper[c] = 0.5 * terms.d_f.dot(&f);
                hyper[c_count + c] = sigma_xi_sq * terms.d_noise_sum;
                d_psi += terms.d_f * sigma_f;
            }
            let mut grad = probe.backward(&cache, &d_psi)?;
            grad.extend(hyper);
            let scale = -1.0 / psi.nrows() as f64;
            Ok((value * scale, grad.iter().map(|g| g * scale).collect()))
        })?;
        kernel.set_params_flat(&params[..k])?;
        let sigma_f_sq = params[k..k + c_count].iter().map(|v| v.exp()).collect();
        let sigma_xi_sq = params[k + c_count..].iter().map(|v| v.exp()).collect();
        let clf = Self::build(kernel, x, labels, c_count, alpha_eps, sigma_f_sq, sigma_xi_sq)?;
        Ok((clf, trace))
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn alpha_eps(&self) -> f64 {
        self.alpha_eps
    }

    pub fn sigma_f_sq(&self) -> &[f64] {
        &self.sigma_f_sq
    }

    pub fn sigma_xi_sq(&self) -> &[f64] {
        &self.sigma_xi_sq
    }

    pub fn kernel(&self) -> &FeatureKernel {
        &self.kernel
    }

    pub fn input_dim(&self) -> usize {
        self.kernel.input_dim()
    }

    pub fn with_temperature(mut self, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(FmgpError::domain(format!("temperature must be positive, got {temperature}")));
        }
        self.temperature = temperature;
        Ok(self)
    }

    pub fn with_normalization(mut self, stats: NormalizationStats) -> Self {
        self.normalization = Some(stats);
        self
    }

    pub fn normalization(&self) -> Option<&NormalizationStats> {
        self.normalization.as_ref()
    }

    /// Per-class posterior mean and latent variance at `x_star`.
    pub fn predict_latent(&self, x_star: &DMatrix<f64>) -> Result<LatentPosterior> {
        if x_star.ncols() != self.input_dim() {
            return Err(FmgpError::shape(format!(
                "test inputs have {} columns, classifier expects {}",
                x_star.ncols(),
                self.input_dim()
            )));
        }
        let psi = self.kernel.features_batched(x_star)?;
        let n = psi.nrows();
        let mut mean = DMatrix::zeros(n, self.num_classes);
        let mut variance = DMatrix::zeros(n, self.num_classes);
        for (c, cache) in self.caches.iter().enumerate() {
            let z = &psi * &cache.eigenvectors * self.sigma_f_sq[c].sqrt();
            let inv: Vec<f64> = cache.eigenvalues.iter().map(|l| 1.0 / (l + 1.0)).collect();
            let coeffs = DVector::from_iterator(inv.len(), cache.proj_targets.iter().zip(&inv).map(|(b, i)| b * i));
            let m = &z * coeffs;
            for i in 0..n {
                mean[(i, c)] = self.prior_means[c] + m[i];
                variance[(i, c)] = z.row(i).iter().zip(&inv).map(|(v, w)| v * v * w).sum();
            }
        }
        Ok(LatentPosterior { mean, variance })
    }

    /// Monte-Carlo class probabilities at the stored temperature.
    pub fn predict_proba(&self, x_star: &DMatrix<f64>, num_samples: usize, seed: u64) -> Result<DMatrix<f64>> {
        let latent = self.predict_latent(x_star)?;
        mc_softmax(&latent, self.temperature, num_samples, seed)
    }

    /// Temperature minimising the mean multinomial NLL on a holdout set,
    /// searched over `log T` on a grid containing `T = 1` and refined by
    /// golden-section search. The same normal draws are used for every
    /// candidate. Returns the current temperature when the holdout has
    /// fewer than two classes.
    pub fn fit_temperature(
        &self,
        x_holdout: &DMatrix<f64>,
        labels: &[usize],
        num_samples: usize,
        seed: u64,
    ) -> Result<f64> {
        if labels.is_empty() {
            return Err(FmgpError::domain("temperature holdout is empty"));
        }
        let mut present = labels.to_vec();
        present.sort_unstable();
        present.dedup();
        if present.len() < 2 {
            log::warn!("temperature holdout contains a single class; keeping T = {}", self.temperature);
            return Ok(self.temperature);
        }
        let latent = self.predict_latent(x_holdout)?;
        let objective = |log_t: f64| -> Result<f64> {
            let probs = mc_softmax(&latent, log_t.exp(), num_samples, seed)?;
            Ok(mean_nll(&probs, labels))
        };
        let step = 0.25;
        let mut best = (0.0, objective(0.0)?);
        for k in -12..=12 {
            let lt = k as f64 * step;
            let v = objective(lt)?;
            if v < best.1 {
                best = (lt, v);
            }
        }
        let (lo, hi) = (best.0 - step, best.0 + step);
        let refined = golden_section(lo, hi, 30, objective)?;
        let chosen = if refined.1 <= best.1 { refined.0 } else { best.0 };
        Ok(chosen.exp())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

fn column_means(m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows().max(1) as f64;
    m.column_iter().map(|c| c.sum() / n).collect()
}

fn golden_section<F>(mut a: f64, mut b: f64, iterations: usize, mut f: F) -> Result<(f64, f64)>
where
    F: FnMut(f64) -> Result<f64>,
{
    let r = (5.0_f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let mut fc = f(c)?;
    let mut fd = f(d)?;
    for _ in 0..iterations {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d)?;
        }
    }
    Ok(if fc < fd { (c, fc) } else { (d, fd) })
}

fn softmax_accumulate(logits: &[f64], scratch: &mut [f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (e, l) in scratch.iter_mut().zip(logits) {
        *e = (l - max).exp();
        total += *e;
    }
    for (o, e) in out.iter_mut().zip(scratch.iter()) {
        *o += e / total;
    }
}

/// Monte-Carlo average of `softmax(f/T)` with `f_c ~ N(mean_c, var_c)`.
///
/// Draws come in antithetic pairs `(ε, −ε)` from a per-row stream of
/// `seed`, so results do not depend on thread count, and for two classes
/// the argmax does not depend on `T`. Rows are renormalised to sum to 1.
pub fn mc_softmax(latent: &LatentPosterior, temperature: f64, num_samples: usize, seed: u64) -> Result<DMatrix<f64>> {
    if num_samples == 0 {
        return Err(FmgpError::domain("num_samples must be at least 1"));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(FmgpError::domain(format!("temperature must be positive, got {temperature}")));
    }
    let (n, c) = latent.mean.shape();
    let rows = parallel::map_row_batches(n, 256, |start, len| {
        let mut block = DMatrix::zeros(len, c);
        let mut eps = vec![0.0; c];
        let mut logits = vec![0.0; c];
        let mut scratch = vec![0.0; c];
        let mut acc = vec![0.0; c];
        for r in 0..len {
            let i = start + r;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let sd: Vec<f64> = (0..c).map(|k| latent.variance[(i, k)].max(0.0).sqrt()).collect();
            acc.iter_mut().for_each(|a| *a = 0.0);
            let mut drawn = 0;
            while drawn < num_samples {
                for e in eps.iter_mut() {
                    *e = rng.sample(StandardNormal);
                }
                for sign in [1.0, -1.0] {
                    if drawn == num_samples {
                        break;
                    }
                    for k in 0..c {
                        logits[k] = (latent.mean[(i, k)] + sign * sd[k] * eps[k]) / temperature;
                    }
                    softmax_accumulate(&logits, &mut scratch, &mut acc);
                    drawn += 1;
                }
            }
            let total: f64 = acc.iter().sum();
            for k in 0..c {
                block[(r, k)] = acc[k] / total;
            }
        }
        Ok(block)
    })?;
    let mut out = DMatrix::zeros(n, c);
    let mut start = 0;
    for b in rows {
        out.rows_mut(start, b.nrows()).copy_from(&b);
        start += b.nrows();
    }
    Ok(out)
}

pub fn argmax_rows(probs: &DMatrix<f64>) -> Vec<usize> {
    probs
        .row_iter()
        .map(|r| {
            let mut best = 0;
            for k in 1..r.len() {
                if r[k] > r[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

pub fn error_rate(probs: &DMatrix<f64>, labels: &[usize]) -> f64 {
    let wrong = argmax_rows(probs).iter().zip(labels).filter(|(p, l)| p != l).count();
    wrong as f64 / labels.len().max(1) as f64
}

/// Mean negative log-probability of the true labels.
pub fn mean_nll(probs: &DMatrix<f64>, labels: &[usize]) -> f64 {
    let total: f64 = labels.iter().enumerate().map(|(i, &l)| -probs[(i, l)].max(1e-300).ln()).sum();
    total / labels.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub ece: f64,
    pub num_bins: usize,
    pub bin_confidences: Vec<f64>,
    pub bin_accuracies: Vec<f64>,
    pub bin_counts: Vec<usize>,
}

/// Expected calibration error of the top-label confidence over `num_bins`
/// equal-width bins of `(0, 1]`.
pub fn compute_ece(probs: &DMatrix<f64>, labels: &[usize], num_bins: usize) -> Result<CalibrationReport> {
    if labels.is_empty() || probs.nrows() == 0 {
        return Err(FmgpError::domain("ECE needs at least one prediction"));
    }
    if num_bins == 0 {
        return Err(FmgpError::domain("ECE needs at least one bin"));
    }
    if probs.nrows() != labels.len() {
        return Err(FmgpError::shape(format!("{} predictions for {} labels", probs.nrows(), labels.len())));
    }
    let mut conf_sum = vec![0.0; num_bins];
    let mut correct = vec![0usize; num_bins];
    let mut counts = vec![0usize; num_bins];
    let preds = argmax_rows(probs);
    for (i, &l) in labels.iter().enumerate() {
        let conf = probs[(i, preds[i])];
        let bin = ((conf * num_bins as f64).ceil() as usize).clamp(1, num_bins) - 1;
        conf_sum[bin] += conf;
        counts[bin] += 1;
        if preds[i] == l {
            correct[bin] += 1;
        }
    }
    let total = labels.len() as f64;
    let mut ece = 0.0;
    let mut bin_confidences = vec![0.0; num_bins];
    let mut bin_accuracies = vec![0.0; num_bins];
    for b in 0..num_bins {
        if counts[b] == 0 {
            continue;
        }
        let cnt = counts[b] as f64;
        bin_confidences[b] = conf_sum[b] / cnt;
        bin_accuracies[b] = correct[b] as f64 / cnt;
        ece += cnt / total * (bin_accuracies[b] - bin_confidences[b]).abs();
    }
    Ok(CalibrationReport { ece, num_bins, bin_confidences, bin_accuracies, bin_counts: counts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{FeatureMap, FeatureMapConfig};
    use proptest::prelude::*;
    use rand::Rng;

    fn latent(mean: Vec<f64>, var: Vec<f64>, c: usize) -> LatentPosterior {
        let n = mean.len() / c;
        LatentPosterior { mean: DMatrix::from_row_slice(n, c, &mean), variance: DMatrix::from_row_slice(n, c, &var) }
    }

    #[test]
    fn transform_values() {
        let t = dirichlet_transform(&[0], 2, 1e-300).unwrap();
        // Observed class with α = 1 up to alpha_eps.
        assert!((t.sigma_tilde_sq[(0, 0)] - 2.0_f64.ln()).abs() < 1e-12);
        assert!((t.y_tilde[(0, 0)] + 2.0_f64.ln() / 2.0).abs() < 1e-12);
        let t = dirichlet_transform(&[1], 2, 0.01).unwrap();
        assert!((t.sigma_tilde_sq[(0, 0)] - 4.61512).abs() < 1e-5);
        assert!((t.y_tilde[(0, 0)] + 6.91273).abs() < 1e-5);
        assert!(dirichlet_transform(&[2], 2, 0.01).is_err());
        assert!(dirichlet_transform(&[0], 2, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn transform_identities(eps in 1e-4f64..1.0, label in 0usize..4) {
            let t = dirichlet_transform(&[label], 4, eps).unwrap();
            for c in 0..4 {
                let alpha = eps + if c == label { 1.0 } else { 0.0 };
                let s2 = t.sigma_tilde_sq[(0, c)];
                prop_assert_eq!(s2, (1.0 / alpha + 1.0).ln());
                prop_assert_eq!(t.y_tilde[(0, c)], alpha.ln() - s2 / 2.0);
            }
        }

        #[test]
        fn noise_decreases_with_alpha(a in 1e-4f64..10.0, b in 1e-4f64..10.0) {
            prop_assume!(a < b);
            prop_assert!((1.0 / a + 1.0).ln() > (1.0 / b + 1.0).ln());
        }

        #[test]
        fn probabilities_sum_to_one(m in proptest::collection::vec(-20.0f64..20.0, 6),
                                    v in proptest::collection::vec(0.0f64..5.0, 6),
                                    t in 0.1f64..10.0, seed in 0u64..100) {
            let p = mc_softmax(&latent(m, v, 3), t, 33, seed).unwrap();
            for r in p.row_iter() {
                prop_assert!((r.sum() - 1.0).abs() <= 1e-12);
            }
        }

        #[test]
        fn binary_argmax_invariant_to_temperature(m1 in -3.0f64..3.0, m2 in -3.0f64..3.0,
                                                  v1 in 0.0f64..4.0, v2 in 0.0f64..4.0,
                                                  t in 0.05f64..20.0, seed in 0u64..100) {
            prop_assume!((m1 - m2).abs() > 1e-9);
            let l = latent(vec![m1, m2], vec![v1, v2], 2);
            let a = argmax_rows(&mc_softmax(&l, 1.0, 64, seed).unwrap());
            let b = argmax_rows(&mc_softmax(&l, t, 64, seed).unwrap());
            prop_assert_eq!(a, b);
        }

        #[test]
        fn ece_in_unit_interval(probs in proptest::collection::vec(0.0f64..1.0, 20), labels in proptest::collection::vec(0usize..2, 20)) {
            let p = DMatrix::from_fn(20, 2, |i, j| if j == 0 { probs[i] } else { 1.0 - probs[i] });
            let r = compute_ece(&p, &labels, 15).unwrap();
            prop_assert!((0.0..=1.0).contains(&r.ece));
            prop_assert_eq!(r.bin_counts.iter().sum::<usize>(), 20);
        }
    }

    #[test]
    fn symmetric_posteriors_give_uniform() {
        let l = latent(vec![0.3, 0.3, 0.3], vec![1.0, 1.0, 1.0], 3);
        let p = mc_softmax(&l, 1.0, 10_000, 5).unwrap();
        for k in 0..3 {
            // Standard error of a mean of values in [0, 1].
            assert!((p[(0, k)] - 1.0 / 3.0).abs() < 3.0 * 0.5 / 100.0);
        }
    }

    #[test]
    fn saturated_class_dominates() {
        let l = latent(vec![100.0, 0.0, 0.0], vec![1.0, 1.0, 1.0], 3);
        let p = mc_softmax(&l, 1.0, 256, 1).unwrap();
        assert!(p[(0, 0)] >= 0.999);
    }

    #[test]
    fn zero_variance_is_logistic() {
        let (m1, m2, t): (f64, f64, f64) = (0.7, -0.4, 1.7);
        let l = latent(vec![m1, m2], vec![0.0, 0.0], 2);
        let p = mc_softmax(&l, t, 10, 0).unwrap();
        let want = 1.0 / (1.0 + (-(m1 - m2) / t).exp());
        assert!((p[(0, 0)] - want).abs() < 1e-15);
    }

    #[test]
    fn doubling_samples_changes_little() {
        let l = latent(vec![0.5, -0.2, 0.1, 1.0], vec![2.0, 1.0, 0.5, 3.0], 2);
        let a = mc_softmax(&l, 1.0, 1 << 10, 3).unwrap();
        let b = mc_softmax(&l, 1.0, 1 << 11, 3).unwrap();
        for i in 0..2 {
            for k in 0..2 {
                let se = (a[(i, k)] * (1.0 - a[(i, k)]) / 1024.0).sqrt().max(1e-6);
                assert!((a[(i, k)] - b[(i, k)]).abs() <= 5.0 * se);
            }
        }
    }

    #[test]
    fn ece_examples() {
        let perfect = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(compute_ece(&perfect, &[0, 1], 15).unwrap().ece, 0.0);
        let wrong = DMatrix::from_row_slice(2, 2, &[0.8, 0.2, 0.8, 0.2]);
        assert!((compute_ece(&wrong, &[1, 1], 15).unwrap().ece - 0.8).abs() < 1e-15);
        assert!(compute_ece(&DMatrix::zeros(0, 2), &[], 15).is_err());
    }

    fn blobs(n: usize, seed: u64) -> (DMatrix<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let x = DMatrix::from_fn(n, 1, |i, _| {
            let centre = if labels[i] == 1 { 2.0 } else { -2.0 };
            centre + 0.3 * rng.sample::<f64, _>(StandardNormal)
        });
        (x, labels)
    }

    fn kernel(seed: u64) -> FeatureKernel {
        FeatureKernel::single(FeatureMap::init(&FeatureMapConfig::new(vec![1, 16, 8]), seed).unwrap())
    }

    #[test]
    fn fit_improves_and_is_deterministic() {
        let (x, y) = blobs(80, 1);
        let cfg = TrainConfig { iterations: 40, learning_rate: 0.02, ..Default::default() };
        let (a, ta) = DirichletClassifier::fit(kernel(2), &x, &y, 2, 0.01, &cfg).unwrap();
        let (b, tb) = DirichletClassifier::fit(kernel(2), &x, &y, 2, 0.01, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        assert!(ta.best().unwrap() < ta.first().unwrap());
        let p = a.predict_proba(&x, 128, 0).unwrap();
        assert!(error_rate(&p, &y) < 0.05);
    }

    #[test]
    fn single_class_rejected() {
        let x = DMatrix::zeros(4, 1);
        let cfg = TrainConfig::default();
        assert!(matches!(
            DirichletClassifier::fit(kernel(0), &x, &[0, 0, 0, 0], 2, 0.01, &cfg),
            Err(FmgpError::Domain(_))
        ));
    }

    #[test]
    fn permuting_labels_permutes_posteriors() {
        let (x, y) = blobs(30, 4);
        let swapped: Vec<usize> = y.iter().map(|l| 1 - l).collect();
        let cfg = TrainConfig { iterations: 0, ..Default::default() };
        let (a, _) = DirichletClassifier::fit(kernel(3), &x, &y, 2, 0.01, &cfg).unwrap();
        let (b, _) = DirichletClassifier::fit(kernel(3), &x, &swapped, 2, 0.01, &cfg).unwrap();
        assert_eq!(a.sigma_f_sq()[0], b.sigma_f_sq()[1]);
        let la = a.predict_latent(&x).unwrap();
        let lb = b.predict_latent(&x).unwrap();
        for i in 0..30 {
            assert!((la.mean[(i, 0)] - lb.mean[(i, 1)]).abs() < 1e-10);
            assert!((la.variance[(i, 1)] - lb.variance[(i, 0)]).abs() < 1e-10);
        }
    }

    #[test]
    fn temperature_recovers_calibrated_logits() {
        // Labels drawn from softmax of the latent means: T ≈ 1 is optimal.
        let n = 3000;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut mean = DMatrix::zeros(n, 3);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            for k in 0..3 {
                mean[(i, k)] = 2.0 * rng.sample::<f64, _>(StandardNormal);
            }
            let l = LatentPosterior { mean: mean.rows(i, 1).into_owned(), variance: DMatrix::zeros(1, 3) };
            let p = mc_softmax(&l, 1.0, 1, 0).unwrap();
            let u: f64 = rng.random();
            labels.push(if u < p[(0, 0)] {
                0
            } else if u < p[(0, 0)] + p[(0, 1)] {
                1
            } else {
                2
            });
        }
        let latent = LatentPosterior { mean, variance: DMatrix::zeros(n, 3) };
        let nll = |t: f64| mean_nll(&mc_softmax(&latent, t, 1, 0).unwrap(), &labels);
        let mut best = (1.0, nll(1.0));
        for lt in (-40..=40).map(|k| k as f64 * 0.01) {
            if nll(lt.exp()) < best.1 {
                best = (lt.exp(), nll(lt.exp()));
            }
        }
        assert!((0.8..=1.25).contains(&best.0), "{}", best.0);
    }

    #[test]
    fn fitted_temperature_does_not_hurt_nll_or_argmax() {
        let (x, y) = blobs(120, 7);
        let cfg = TrainConfig { iterations: 10, ..Default::default() };
        let (clf, _) = DirichletClassifier::fit(kernel(5), &x, &y, 2, 0.01, &cfg).unwrap();
        let (xh, yh) = blobs(60, 8);
        let t = clf.fit_temperature(&xh, &yh, 64, 1).unwrap();
        let before = clf.predict_proba(&xh, 64, 1).unwrap();
        let tuned = clf.clone().with_temperature(t).unwrap();
        let after = tuned.predict_proba(&xh, 64, 1).unwrap();
        assert!(mean_nll(&after, &yh) <= mean_nll(&before, &yh));
        assert_eq!(argmax_rows(&before), argmax_rows(&after));
    }

    #[test]
    fn single_class_holdout_keeps_temperature() {
        let (x, y) = blobs(40, 2);
        let cfg = TrainConfig { iterations: 0, ..Default::default() };
        let (clf, _) = DirichletClassifier::fit(kernel(1), &x, &y, 2, 0.01, &cfg).unwrap();
        assert_eq!(clf.fit_temperature(&x.rows(0, 1).into_owned(), &[0], 16, 0).unwrap(), 1.0);
    }

    #[test]
    fn json_round_trip() {
        let (x, y) = blobs(20, 3);
        let cfg = TrainConfig { iterations: 2, ..Default::default() };
        let (clf, _) = DirichletClassifier::fit(kernel(1), &x, &y, 2, 0.01, &cfg).unwrap();
        let clf = clf.with_temperature(1.3).unwrap();
        let back = DirichletClassifier::from_json(&clf.to_json().unwrap()).unwrap();
        assert_eq!(clf, back);
    }
}

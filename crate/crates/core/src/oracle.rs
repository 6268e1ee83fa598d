//! Randomized equivalence batteries: every low-rank quantity against an
//! explicit dense computation.
//!
//! Each battery reports the largest error it saw and the tolerance it is
//! held to. `perturb_eigenvalue` multiplies the leading cached eigenvalue
//! by the given factor in the batteries that consume a decomposition, to
//! confirm that the batteries notice a corrupted cache.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::classification::{dirichlet_transform, DirichletClassifier};
use crate::error::{FmgpError, Result};
use crate::kernel::FeatureKernel;
use crate::lowrank::{
    additive_solve, logdet_kxi, product_features, quad_form, woodbury_solve, FeatureDecomposition, ProductFeaturePlan,
};
use crate::nn::{FeatureMap, FeatureMapConfig, Normalization};
use crate::regression::{
    dense_gaussian_mll, exact_gp_oracle, exact_gp_oracle_heteroscedastic, gaussian_mll, mll, GpModel, Noise,
};
use crate::spectral::{build_gram, majorization_check, random_unit_diagonal_psd, uniform_inputs, KernelSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub instances: usize,
    pub seed: u64,
    pub perturb_eigenvalue: Option<f64>,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { instances: 100, seed: 0, perturb_eigenvalue: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatteryResult {
    pub name: String,
    pub instances: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub batteries: Vec<BatteryResult>,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.batteries.iter().all(|b| b.passed)
    }

    pub fn get(&self, name: &str) -> Option<&BatteryResult> {
        self.batteries.iter().find(|b| b.name == name)
    }
}

struct Tracker {
    name: &'static str,
    tolerance: f64,
    instances: usize,
    max_error: f64,
}

impl Tracker {
    fn new(name: &'static str, tolerance: f64) -> Self {
        Self { name, tolerance, instances: 0, max_error: 0.0 }
    }

    fn record(&mut self, error: f64) {
        self.instances += 1;
        // NaN counts as a failure.
        if error.is_nan() || error > self.max_error {
            self.max_error = if error.is_nan() { f64::INFINITY } else { error };
        }
    }

    fn finish(self) -> BatteryResult {
        BatteryResult {
            name: self.name.into(),
            instances: self.instances,
            max_error: self.max_error,
            tolerance: self.tolerance,
            passed: self.max_error <= self.tolerance,
        }
    }
}

fn randn(rng: &mut ChaCha8Rng, n: usize, p: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal))
}

fn randv(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal))
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp()
}

/// `‖a − b‖_∞ / ‖b‖_∞`.
pub fn rel_inf(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax() / b.amax().max(f64::MIN_POSITIVE)
}

fn rel_scalar(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

fn dense_k(phi: &DMatrix<f64>, s2: f64) -> DMatrix<f64> {
    phi * phi.transpose() + DMatrix::identity(phi.nrows(), phi.nrows()) * s2
}

fn dense_logdet(k: &DMatrix<f64>) -> Result<f64> {
    let l = k.clone().cholesky().ok_or_else(|| FmgpError::numeric("dense oracle matrix not positive definite"))?;
    Ok(2.0 * l.l().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

fn perturb(decomp: FeatureDecomposition, cfg: &OracleConfig) -> FeatureDecomposition {
    match cfg.perturb_eigenvalue {
        Some(f) => decomp.with_scaled_eigenvalue(0, f),
        None => decomp,
    }
}

/// Random MLP kernel with input dimension `d` and output dimension `p`.
pub fn random_kernel(rng: &mut ChaCha8Rng, d: usize, p: usize) -> Result<FeatureKernel> {
    let hidden = rng.random_range(4..=24);
    let depth = rng.random_range(1..=2);
    let mut widths = vec![d];
    widths.extend(std::iter::repeat_n(hidden, depth));
    widths.push(p);
    let norm = if rng.random::<bool>() { Normalization::LayerNorm } else { Normalization::None };
    let cfg = FeatureMapConfig::new(widths).with_normalization(norm).with_rescale(rng.random::<bool>());
    Ok(FeatureKernel::single(FeatureMap::init(&cfg, rng.random())?))
}

/// Woodbury solve and quadratic form: relative error against dense LU.
pub fn woodbury_battery(cfg: &OracleConfig) -> Result<Vec<BatteryResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x1001);
    let mut solve = Tracker::new("woodbury_solve", 1e-9);
    let mut quad = Tracker::new("quad_form", 1e-9);
    for _ in 0..cfg.instances {
        let n = rng.random_range(1..=200);
        let p = rng.random_range(1..=16);
        let s2 = log_uniform(&mut rng, 1e-4, 10.0);
        let phi = randn(&mut rng, n, p);
        let v = randv(&mut rng, n);
        let decomp = perturb(FeatureDecomposition::from_features(&phi, None)?, cfg);
        let k = dense_k(&phi, s2);
        let want = k.clone().lu().solve(&v).ok_or_else(|| FmgpError::numeric("dense LU failed"))?;
        solve.record(rel_inf(&woodbury_solve(&decomp, &phi, s2, &v)?, &want));
        quad.record(rel_scalar(quad_form(&decomp, &phi, s2, &v)?, v.dot(&want)));
    }
    Ok(vec![solve.finish(), quad.finish()])
}

/// `log|ΦΦᵀ + σ²I|` against a dense Cholesky, including `n < p`.
pub fn logdet_battery(cfg: &OracleConfig) -> Result<BatteryResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x1002);
    let mut t = Tracker::new("logdet", 1e-9);
    for i in 0..cfg.instances {
        let p = rng.random_range(1..=32);
        // Every fourth instance has fewer rows than features.
        let n = if i % 4 == 0 { rng.random_range(1..=p) } else { rng.random_range(1..=500) };
        let s2 = log_uniform(&mut rng, 1e-4, 10.0);
        let phi = randn(&mut rng, n, p) * (1.0 / (p as f64).sqrt());
        let decomp = perturb(FeatureDecomposition::from_features(&phi, None)?, cfg);
        let got = logdet_kxi(&decomp, s2, n)?;
        t.record((got - dense_logdet(&dense_k(&phi, s2))?).abs());
    }
    Ok(t.finish())
}

/// Low-rank predictions against the dense exact GP with `K = σ_f²ΨΨᵀ`.
///
/// Targets are drawn from the model's own prior so that instances look
/// like data the model could have produced.
pub fn prediction_battery(cfg: &OracleConfig) -> Result<Vec<BatteryResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x1003);
    let mut means = Tracker::new("prediction_mean", 1e-8);
    let mut vars = Tracker::new("prediction_variance", 1e-8);
    for _ in 0..cfg.instances {
        let n = rng.random_range(1..=500);
        let d = rng.random_range(1..=8);
        let p = rng.random_range(1..=32);
        let s2 = log_uniform(&mut rng, 1e-4, 10.0);
        let sf2 = log_uniform(&mut rng, 0.5, 2.0);
        let kernel = random_kernel(&mut rng, d, p)?;
        let x = randn(&mut rng, n, d);
        let xs = randn(&mut rng, 50, d);
        let psi = kernel.features(&x)?;
        let y = &psi * randv(&mut rng, p) * sf2.sqrt() + randv(&mut rng, n) * s2.sqrt();
        let model = GpModel::build(kernel.clone(), sf2, s2, &x, &y)?;
        let model = match cfg.perturb_eigenvalue {
            Some(_) => {
                let d = perturb(model.decomposition().clone(), cfg);
                model.with_decomposition(d)
            }
            None => model,
        };
        let got = model.predict(&xs)?;
        let dense = |a: &DMatrix<f64>, b: &DMatrix<f64>| {
            let fa = kernel.features(a).expect("features of validated input");
            let fb = kernel.features(b).expect("features of validated input");
            fa * fb.transpose() * sf2
        };
        let want = exact_gp_oracle(dense, &x, &y, s2, &xs)?;
        means.record(rel_inf(&got.mean, &want.mean));
        vars.record((&got.variance - &want.variance).amax());
    }
    Ok(vec![means.finish(), vars.finish()])
}

/// `ΞΞᵀ` against `K1∘K2` entrywise, and the column layout by position.
pub fn product_battery(cfg: &OracleConfig) -> Result<Vec<BatteryResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x1004);
    let mut t = Tracker::new("product_kernel", 1e-12);
    let mut layout = Tracker::new("product_column_layout", 0.0);
    for _ in 0..cfg.instances.clamp(1, 50) {
        let n = rng.random_range(1..=40);
        let p1 = rng.random_range(1..=6);
        let p2 = rng.random_range(1..=6);
        let a = randn(&mut rng, n, p1);
        let b = randn(&mut rng, n, p2);
        let xi = product_features(&a, &b)?;
        let k = (&a * a.transpose()).component_mul(&(&b * b.transpose()));
        t.record((&xi * xi.transpose() - k).amax());
        let plan = ProductFeaturePlan::new(p1, p2);
        let mut worst = 0.0_f64;
        for j in 0..p2 {
            for i in 0..p1 {
                let col = xi.column(plan.column_index(i, j));
                let want = a.column(i).component_mul(&b.column(j));
                worst = worst.max((col - want).amax());
            }
        }
        layout.record(worst);
    }
    Ok(vec![t.finish(), layout.finish()])
}

/// Two-term additive solve against dense LU.
pub fn additive_battery(cfg: &OracleConfig) -> Result<BatteryResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x1005);
    let mut t = Tracker::new("additive_solve", 1e-9);
    for _ in 0..cfg.instances.clamp(1, 50) {
        let n = rng.random_range(1..=120);
        let p1 = rng.random_range(1..=8);
        let p2 = rng.random_range(1..=8);
        let s2 = log_uniform(&mut rng, 1e-2, 10.0);
        let a = randn(&mut rng, n, p1);
        let b = randn(&mut rng, n, p2);
        let v = randv(&mut rng, n);
        let k = &a * a.transpose() + &b * b.transpose() + DMatrix::identity(n, n) * s2;
        let want = k.lu().solve(&v).ok_or_else(|| FmgpError::numeric("dense LU failed"))?;
        t.record(rel_inf(&additive_solve(&a, &b, s2, &v)?, &want));
    }
    Ok(t.finish())
}

/// Hadamard-product eigenvalue inequalities on `instances` random
/// unit-diagonal PSD pairs, then on stationary and unit-rescaled kernel
/// Grams. Reports the most negative slack, so the tolerance is on `−slack`.
pub fn majorization_battery(cfg: &OracleConfig) -> Result<BatteryResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x1006);
    let mut t = Tracker::new("majorization", 1e-9);
    let mut record = |k1: &DMatrix<f64>, k2: &DMatrix<f64>| -> Result<()> {
        let rep = majorization_check(k1, k2)?;
        t.record((-rep.min_prefix_slack).max(-rep.min_tail_slack).max(0.0));
        Ok(())
    };
    for _ in 0..cfg.instances {
        let n = rng.random_range(2..=32);
        let k1 = random_unit_diagonal_psd(n, rng.random_range(1..=n), rng.random());
        let k2 = random_unit_diagonal_psd(n, rng.random_range(1..=n), rng.random());
        record(&k1, &k2)?;
    }
    // Stationary and unit-rescaled MLP Grams also have unit diagonals.
    for i in 0..cfg.instances.div_ceil(4) {
        let n = rng.random_range(2..=32);
        let x = uniform_inputs(n, 2, rng.random());
        let rbf = build_gram(&KernelSpec::rbf(log_uniform(&mut rng, 0.05, 2.0)), &x)?;
        let exp = build_gram(&KernelSpec::exp(log_uniform(&mut rng, 0.05, 2.0)), &x)?;
        record(&rbf, &exp)?;
        let mut unit = |seed: u64| KernelSpec::Mlp {
            hidden_width: 16,
            depth: 1,
            output_dim: rng.random_range(2..=16),
            seed,
            rescale_to_unit: true,
            layer_norm: false,
        };
        let (s1, s2) = (unit(i as u64), unit(i as u64 + 7919));
        record(&build_gram(&s1, &x)?, &build_gram(&s2, &x)?)?;
    }
    Ok(t.finish())
}

/// Per-point noise: the whitened low-rank MLL and the classifier's latent
/// posterior against dense heteroscedastic computations.
pub fn heteroscedastic_battery(cfg: &OracleConfig) -> Result<Vec<BatteryResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x1007);
    let mut mll_t = Tracker::new("heteroscedastic_mll", 1e-8);
    let mut pred_t = Tracker::new("heteroscedastic_prediction", 1e-8);
    for _ in 0..cfg.instances.clamp(1, 50) {
        let n = rng.random_range(1..=200);
        let p = rng.random_range(1..=16);
        let f = randn(&mut rng, n, p);
        let s = DVector::from_fn(n, |_, _| log_uniform(&mut rng, 1e-2, 10.0));
        let y = randv(&mut rng, n);
        let terms = gaussian_mll(&f, &y, Noise::PerPoint(&s))?;
        let want = dense_gaussian_mll(&(&f * f.transpose() + DMatrix::from_diagonal(&s)), &y)?;
        mll_t.record(rel_scalar(terms.value, want));

        let d = rng.random_range(1..=4);
        let classes = rng.random_range(2..=4);
        let kernel = random_kernel(&mut rng, d, p)?;
        // Every class labelled at least once.
        let x = randn(&mut rng, n.max(classes), d);
        let labels: Vec<usize> = (0..x.nrows()).map(|i| i % classes).collect();
        let sf2: Vec<f64> = (0..classes).map(|_| log_uniform(&mut rng, 0.5, 5.0)).collect();
        let sx2: Vec<f64> = (0..classes).map(|_| log_uniform(&mut rng, 1e-3, 1.0)).collect();
        let alpha_eps = 0.01;
        let clf =
            DirichletClassifier::build(kernel.clone(), &x, &labels, classes, alpha_eps, sf2.clone(), sx2.clone())?;
        let xs = randn(&mut rng, 20, d);
        let got = clf.predict_latent(&xs)?;
        let targets = dirichlet_transform(&labels, classes, alpha_eps)?;
        let mut worst = 0.0_f64;
        for c in 0..classes {
            let yc = targets.y_tilde.column(c).into_owned();
            let m = yc.mean();
            let noise = targets.sigma_tilde_sq.column(c).add_scalar(sx2[c]);
            let dense = |a: &DMatrix<f64>, b: &DMatrix<f64>| {
                let fa = kernel.features(a).expect("features of validated input");
                let fb = kernel.features(b).expect("features of validated input");
                fa * fb.transpose() * sf2[c]
            };
            let want = exact_gp_oracle_heteroscedastic(dense, &x, &yc.add_scalar(-m), &noise, &xs)?;
            let gm = got.mean.column(c).add_scalar(-m);
            worst = worst.max(rel_inf(&gm, &want.mean));
            worst = worst.max((got.variance.column(c) - &want.variance).amax());
        }
        pred_t.record(worst);
    }
    Ok(vec![mll_t.finish(), pred_t.finish()])
}

/// Relative error between an analytic derivative and a central difference.
/// The denominator is floored at `1e-6·max(1, |f|)`, since difference
/// roundoff grows with the magnitude of the objective `f`.
pub fn gradient_rel_error(analytic: f64, fd: f64, objective: f64) -> f64 {
    let floor = 1e-6 * objective.abs().max(1.0);
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(floor)
}

/// A generic parameter point: He initialization plus `N(0, 0.3²)` on every
/// parameter, so biases and layer-norm offsets are nonzero. Unit rescaling
/// is not differentiable at a zero feature row, so draws whose raw rows come
/// close to the origin are rejected.
fn smooth_kernel(rng: &mut ChaCha8Rng, cfg: &FeatureMapConfig, x: &DMatrix<f64>) -> Result<FeatureKernel> {
    loop {
        let mut map = FeatureMap::init(cfg, rng.random())?;
        let params: Vec<f64> =
            map.params_flat().iter().map(|v| v + 0.3 * rng.sample::<f64, _>(StandardNormal)).collect();
        map.set_params_flat(&params)?;
        let mut raw = map.clone();
        raw.set_rescale_to_unit(false);
        let min_norm = raw.forward(x)?.row_iter().map(|r| r.norm()).fold(f64::INFINITY, f64::min);
        if !cfg.rescale_to_unit || min_norm > 1e-2 {
            return Ok(FeatureKernel::single(map));
        }
    }
}

/// MLL gradient (all MLP parameters and both log-variances) against
/// central differences with step `1e-5`.
pub fn mll_gradient_battery(cfg: &OracleConfig) -> Result<BatteryResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x1008);
    let mut t = Tracker::new("mll_gradient", 1e-4);
    let h = 1e-5;
    for _ in 0..5 {
        let n = rng.random_range(8..=64);
        let d = rng.random_range(1..=4);
        let p = rng.random_range(1..=8);
        let widths = vec![d, rng.random_range(2..=8), p];
        let norm = if rng.random::<bool>() { Normalization::LayerNorm } else { Normalization::None };
        let map_cfg = FeatureMapConfig::new(widths).with_normalization(norm).with_rescale(rng.random::<bool>());
        let x = randn(&mut rng, n, d);
        let kernel = smooth_kernel(&mut rng, &map_cfg, &x)?;
        let y = randv(&mut rng, n);
        let (lf, lx) = (rng.random_range(-1.0..1.0), rng.random_range(-3.0..0.0));
        let eval = mll(&kernel, lf, lx, &x, &y)?;
        let k = kernel.num_params();
        let mut params = kernel.params_flat();
        params.push(lf);
        params.push(lx);
        let mut probe = kernel.clone();
        let mut value = |q: &[f64]| -> Result<(f64, Vec<DMatrix<f64>>)> {
            probe.set_params_flat(&q[..k])?;
            let masks = probe.maps()[0].forward_with_cache(&x)?.activation_masks().cloned().collect();
            Ok((mll(&probe, q[k], q[k + 1], &x, &y)?.value, masks))
        };
        let mut worst = 0.0_f64;
        for j in 0..params.len() {
            let mut q = params.clone();
            q[j] += h;
            let (up, up_masks) = value(&q)?;
            q[j] -= 2.0 * h;
            let (dn, dn_masks) = value(&q)?;
            // The difference straddles a ReLU kink; the derivative is not
            // defined along the whole stencil.
            if up_masks != dn_masks {
                continue;
            }
            worst = worst.max(gradient_rel_error(eval.gradient[j], (up - dn) / (2.0 * h), eval.value));
        }
        t.record(worst);
    }
    Ok(t.finish())
}

/// Runs every battery.
pub fn run_all(cfg: &OracleConfig) -> Result<OracleReport> {
    let mut batteries = woodbury_battery(cfg)?;
    batteries.push(logdet_battery(cfg)?);
    batteries.extend(prediction_battery(cfg)?);
    batteries.extend(product_battery(cfg)?);
    batteries.push(additive_battery(cfg)?);
    batteries.push(majorization_battery(cfg)?);
    batteries.extend(heteroscedastic_battery(cfg)?);
    batteries.push(mll_gradient_battery(cfg)?);
    Ok(OracleReport { batteries })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_run_passes() {
        for seed in [0, 4] {
            let cfg = OracleConfig { instances: 12, seed, perturb_eigenvalue: None };
            let report = run_all(&cfg).unwrap();
            for b in &report.batteries {
                assert!(b.passed, "seed {seed}: {b:?}");
            }
        }
    }

    #[test]
    fn perturbation_is_detected() {
        let cfg = OracleConfig { instances: 12, seed: 3, perturb_eigenvalue: Some(1.0 + 1e-3) };
        let report = run_all(&cfg).unwrap();
        assert!(!report.passed());
        assert!(!report.get("logdet").unwrap().passed);
        assert!(!report.get("prediction_mean").unwrap().passed);
    }
}

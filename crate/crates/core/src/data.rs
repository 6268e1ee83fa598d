//! CSV ingestion, seeded splitting with train-only whitening, and synthetic
//! generators.
//!
//! Regression targets are normalized with training statistics, and every
//! reported metric is in those normalized units.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{FmgpError, Result};
use crate::spectral::{build_cross_gram, KernelSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Regression,
    Classification,
}

/// Parsed CSV: all but the last column are inputs, the last is the target.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    pub x: DMatrix<f64>,
    /// Real targets, or contiguous class indices `0..C` stored as `f64`.
    pub targets: DVector<f64>,
    pub task: Task,
    /// Original label value of each class index (classification only).
    pub label_mapping: Option<Vec<f64>>,
    pub header: Option<Vec<String>>,
}

impl RawTable {
    pub fn new(x: DMatrix<f64>, targets: DVector<f64>, task: Task) -> Result<Self> {
        if x.nrows() != targets.len() {
            return Err(FmgpError::shape(format!("{} input rows but {} targets", x.nrows(), targets.len())));
        }
        let mut table = RawTable { x, targets, task, label_mapping: None, header: None };
        if task == Task::Classification {
            table.remap_labels();
        }
        Ok(table)
    }

    fn remap_labels(&mut self) {
        let mut values: Vec<f64> = self.targets.iter().copied().collect();
        values.sort_by(f64::total_cmp);
        values.dedup();
        for t in self.targets.iter_mut() {
            *t = values.binary_search_by(|v| v.total_cmp(t)).unwrap_or(0) as f64;
        }
        self.label_mapping = Some(values);
    }

    pub fn num_classes(&self) -> usize {
        self.label_mapping.as_ref().map_or(0, Vec::len)
    }
}

fn is_numeric(field: &str) -> bool {
    field.trim().parse::<f64>().is_ok()
}

/// Parses CSV text. A first row with any non-numeric cell is a header.
pub fn parse_csv(text: &str, task: Task) -> Result<RawTable> {
    let mut reader =
        csv::ReaderBuilder::new().has_headers(false).flexible(true).trim(csv::Trim::All).from_reader(text.as_bytes());
    let mut header = None;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| FmgpError::Parse { row, column: 0, message: e.to_string() })?;
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        if i == 0 && record.iter().any(|f| !is_numeric(f)) {
            header = Some(record.iter().map(str::to_string).collect::<Vec<_>>());
            width = Some(record.len());
            continue;
        }
        let w = *width.get_or_insert(record.len());
        if record.len() != w {
            return Err(FmgpError::Parse {
                row,
                column: record.len().min(w) + 1,
                message: format!("expected {w} fields, found {}", record.len()),
            });
        }
        let values = record
            .iter()
            .enumerate()
            .map(|(j, f)| {
                f.parse::<f64>().map_err(|_| FmgpError::Parse {
                    row,
                    column: j + 1,
                    message: format!("non-numeric value {f:?}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(values);
    }
    let width = width.unwrap_or(0);
    if rows.is_empty() {
        return Err(FmgpError::Parse { row: 0, column: 0, message: "no data rows".into() });
    }
    if width < 2 {
        return Err(FmgpError::Parse {
            row: 1,
            column: width,
            message: "need at least one input column and a target column".into(),
        });
    }
    let d = width - 1;
    let x = DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]);
    let y = DVector::from_iterator(rows.len(), rows.iter().map(|r| r[d]));
    let mut table = RawTable::new(x, y, task)?;
    table.header = header;
    Ok(table)
}

pub fn load_csv(path: impl AsRef<Path>, task: Task) -> Result<RawTable> {
    let path = path.as_ref();
    let text =
        std::fs::read_to_string(path).map_err(|e| FmgpError::Data(format!("cannot read {}: {e}", path.display())))?;
    parse_csv(&text, task)
}

/// Writes inputs and targets as a headerless CSV with the target last.
pub fn write_csv(path: impl AsRef<Path>, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| FmgpError::Data(e.to_string()))?;
    for i in 0..x.nrows() {
        let mut fields: Vec<String> = x.row(i).iter().map(|v| format!("{v:?}")).collect();
        fields.push(format!("{:?}", y[i]));
        writer.write_record(&fields).map_err(|e| FmgpError::Data(e.to_string()))?;
    }
    writer.flush()?;
    Ok(())
}

/// Whitening statistics computed on the training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub feature_means: Vec<f64>,
    pub feature_stds: Vec<f64>,
    pub target_mean: f64,
    pub target_std: f64,
}

impl NormalizationStats {
    /// Column means and (population) standard deviations of `x`; a column
    /// with zero spread gets std 1.
    pub fn from_training(x: &DMatrix<f64>, y: Option<&DVector<f64>>) -> Self {
        let n = x.nrows().max(1) as f64;
        let mut feature_means = Vec::with_capacity(x.ncols());
        let mut feature_stds = Vec::with_capacity(x.ncols());
        for (j, col) in x.column_iter().enumerate() {
            let mean = col.sum() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let mut std = var.sqrt();
            if std.is_nan() || std <= 0.0 {
                log::warn!("input column {j} is constant on the training rows; using std 1");
                std = 1.0;
            }
            feature_means.push(mean);
            feature_stds.push(std);
        }
        let (target_mean, target_std) = match y {
            Some(y) => {
                let mean = y.sum() / n;
                let std = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
                (mean, if std > 0.0 { std } else { 1.0 })
            }
            None => (0.0, 1.0),
        };
        NormalizationStats { feature_means, feature_stds, target_mean, target_std }
    }

    pub fn apply_inputs(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.feature_means.len() {
            return Err(FmgpError::shape(format!(
                "inputs have {} columns, normalization expects {}",
                x.ncols(),
                self.feature_means.len()
            )));
        }
        Ok(DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| (x[(i, j)] - self.feature_means[j]) / self.feature_stds[j]))
    }

    pub fn apply_targets(&self, y: &DVector<f64>) -> DVector<f64> {
        y.map(|v| (v - self.target_mean) / self.target_std)
    }

    pub fn invert_targets(&self, y: &DVector<f64>) -> DVector<f64> {
        y.map(|v| v * self.target_std + self.target_mean)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub recalibration: Vec<usize>,
}

/// `(train, test, recal)` sizes. When the requested held-out sets would
/// take more than half of the rows, both are shrunk proportionally so that
/// they take half.
pub fn split_sizes(n: usize, test_n: usize, recal_n: usize) -> (usize, usize, usize) {
    let held = test_n + recal_n;
    if held == 0 {
        return (n, 0, 0);
    }
    if 2 * held <= n {
        return (n - held, test_n, recal_n);
    }
    let budget = n / 2;
    let test = (test_n * budget) / held;
    let recal = (budget - test).min(recal_n);
    log::warn!("only {n} rows for {test_n} test and {recal_n} recalibration points; using {test} and {recal}");
    (n - test - recal, test, recal)
}

/// Whitened, split dataset. Rows keep their original order; `split`
/// holds row indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Whitened inputs.
    pub x: DMatrix<f64>,
    /// Normalized targets (regression) or class indices.
    pub targets: DVector<f64>,
    pub task: Task,
    pub stats: NormalizationStats,
    pub split: Split,
    pub label_mapping: Option<Vec<f64>>,
}

impl Dataset {
    fn rows(&self, idx: &[usize]) -> (DMatrix<f64>, DVector<f64>) {
        (self.x.select_rows(idx.iter()), DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.targets[i])))
    }

    pub fn train(&self) -> (DMatrix<f64>, DVector<f64>) {
        self.rows(&self.split.train)
    }

    pub fn test(&self) -> (DMatrix<f64>, DVector<f64>) {
        self.rows(&self.split.test)
    }

    pub fn recalibration(&self) -> (DMatrix<f64>, DVector<f64>) {
        self.rows(&self.split.recalibration)
    }

    pub fn num_classes(&self) -> usize {
        self.label_mapping.as_ref().map_or(0, Vec::len)
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }
}

/// Seeded shuffle and split, then whitening from the training rows.
pub fn prepare(raw: &RawTable, seed: u64, test_n: usize, recal_n: usize) -> Result<Dataset> {
    let n = raw.x.nrows();
    if n < 3 {
        return Err(FmgpError::domain(format!("need at least 3 rows, got {n}")));
    }
    let (n_train, n_test, _) = split_sizes(n, test_n, recal_n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let split = Split {
        test: order[..n_test].to_vec(),
        recalibration: order[n_test..n - n_train].to_vec(),
        train: order[n - n_train..].to_vec(),
    };
    let train_x = raw.x.select_rows(split.train.iter());
    let train_y = DVector::from_iterator(n_train, split.train.iter().map(|&i| raw.targets[i]));
    let stats = NormalizationStats::from_training(&train_x, (raw.task == Task::Regression).then_some(&train_y));
    let x = stats.apply_inputs(&raw.x)?;
    let targets = match raw.task {
        Task::Regression => stats.apply_targets(&raw.targets),
        Task::Classification => raw.targets.clone(),
    };
    Ok(Dataset { x, targets, task: raw.task, stats, split, label_mapping: raw.label_mapping.clone() })
}

/// `K + jitter·I` factorised with jitter `1e-8, 1e-7, …, 1e-4` until
/// Cholesky succeeds.
pub fn jittered_cholesky(k: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = k.nrows();
    let mut jitter = 1e-8;
    while jitter <= 1e-4 * (1.0 + 1e-9) {
        let shifted = k + DMatrix::identity(n, n) * jitter;
        if let Some(c) = shifted.cholesky() {
            return Ok(c.unpack());
        }
        jitter *= 10.0;
    }
    Err(FmgpError::numeric("Cholesky failed at maximum jitter 1e-4"))
}

/// Inputs, latent function values and noisy targets.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub x: DMatrix<f64>,
    pub f: DVector<f64>,
    pub y: DVector<f64>,
    /// Manifold coordinates (angles) when generated on a manifold.
    pub latents: Option<DMatrix<f64>>,
}

impl SyntheticSample {
    pub fn into_raw(self) -> RawTable {
        RawTable { x: self.x, targets: self.y, task: Task::Regression, label_mapping: None, header: None }
    }
}

fn standard_normals(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Draws `f ~ N(0, K)` at given inputs and adds `N(0, noise_sd²)` noise.
pub fn synth_gp_at(kernel: &KernelSpec, x: DMatrix<f64>, noise_sd: f64, seed: u64) -> Result<SyntheticSample> {
    let k = build_cross_gram(kernel, &x, &x)?;
    let l = jittered_cholesky(&k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = l * standard_normals(&mut rng, x.nrows());
    let y = &f + standard_normals(&mut rng, x.nrows()) * noise_sd;
    Ok(SyntheticSample { x, f, y, latents: None })
}

/// GP sample at `n` inputs drawn uniformly from `[0, 1]^d`.
pub fn synth_gp_sample(kernel: &KernelSpec, n: usize, d: usize, noise_sd: f64, seed: u64) -> Result<SyntheticSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1e55);
    let x = DMatrix::from_fn(n, d, |_, _| rng.random::<f64>());
    synth_gp_at(kernel, x, noise_sd, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LatentKind {
    Circle,
    Torus { major_radius: f64, minor_radius: f64 },
}

impl LatentKind {
    pub fn torus() -> Self {
        LatentKind::Torus { major_radius: 2.0, minor_radius: 0.5 }
    }

    /// Dimension of the Euclidean space holding the latent points.
    pub fn embedding_dim(&self) -> usize {
        match self {
            LatentKind::Circle => 2,
            LatentKind::Torus { .. } => 3,
        }
    }
}

/// Standard deviation of the jitter added to latent points.
pub const LATENT_JITTER_SD: f64 = 0.1;

/// Jittered latent points, their angles and the noise-free targets.
fn latent_points(
    rng: &mut ChaCha8Rng,
    n: usize,
    latent: LatentKind,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DVector<f64>)> {
    let k = latent.embedding_dim();
    let jitter = Normal::new(0.0, LATENT_JITTER_SD).map_err(|e| FmgpError::numeric(e.to_string()))?;
    let tau = std::f64::consts::TAU;
    let mut z = DMatrix::zeros(n, k);
    let mut angles = DMatrix::zeros(n, k - 1);
    let mut f = DVector::zeros(n);
    for i in 0..n {
        match latent {
            LatentKind::Circle => {
                let t = rng.random::<f64>() * tau;
                z[(i, 0)] = t.cos();
                z[(i, 1)] = t.sin();
                angles[(i, 0)] = t;
                f[i] = t.sin();
            }
            LatentKind::Torus { major_radius, minor_radius } => {
                let u = rng.random::<f64>() * tau;
                let v = rng.random::<f64>() * tau;
                let ring = major_radius + minor_radius * v.cos();
                z[(i, 0)] = ring * u.cos();
                z[(i, 1)] = ring * u.sin();
                z[(i, 2)] = minor_radius * v.sin();
                angles[(i, 0)] = u;
                angles[(i, 1)] = v;
                f[i] = u.sin() + v.cos();
            }
        }
        for j in 0..k {
            z[(i, j)] += jitter.sample(rng);
        }
    }
    Ok((z, angles, f))
}

/// The jittered latent points `synth_manifold` uses for the same seed,
/// before warping.
pub fn manifold_latents(n: usize, latent: LatentKind, seed: u64) -> Result<DMatrix<f64>> {
    Ok(latent_points(&mut ChaCha8Rng::seed_from_u64(seed), n, latent)?.0)
}

/// Points on a circle or torus, jittered, then warped into `d_ambient`
/// dimensions by `g(z) = zP + ε[sin(zP_s)∘cos(zP_c) + sin(zP_s) + 2cos(zP_c)]`.
///
/// Targets are `sin θ` on the circle and `sin u + cos v` on the torus,
/// plus `N(0, noise_sd²)` noise. `latents` holds the angles.
pub fn synth_manifold(
    n: usize,
    latent: LatentKind,
    d_ambient: usize,
    eps: f64,
    noise_sd: f64,
    seed: u64,
) -> Result<SyntheticSample> {
    let k = latent.embedding_dim();
    if d_ambient < k {
        return Err(FmgpError::config(format!(
            "ambient dimension {d_ambient} is below latent embedding dimension {k}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (z, angles, f) = latent_points(&mut rng, n, latent)?;
    let mut draw = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal));
    let p = draw(k, d_ambient);
    let ps = draw(k, d_ambient);
    let pc = draw(k, d_ambient);
    let linear = &z * p;
    let s = (&z * ps).map(f64::sin);
    let c = (&z * pc).map(f64::cos);
    let warp = s.component_mul(&c) + &s + c * 2.0;
    let x = linear + warp * eps;
    let y = &f + standard_normals(&mut rng, n) * noise_sd;
    Ok(SyntheticSample { x, f, y, latents: Some(angles) })
}

/// Two isotropic unit-variance Gaussian classes whose means are
/// `separation` apart along the first axis; labels alternate 0, 1.
pub fn gaussian_blobs(n: usize, d: usize, separation: f64, seed: u64) -> Result<RawTable> {
    if d == 0 {
        return Err(FmgpError::config("blobs need at least one dimension"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = DMatrix::zeros(n, d);
    let mut y = DVector::zeros(n);
    for i in 0..n {
        let label = i % 2;
        for j in 0..d {
            x[(i, j)] = rng.sample::<f64, _>(StandardNormal);
        }
        x[(i, 0)] += if label == 1 { separation / 2.0 } else { -separation / 2.0 };
        y[i] = label as f64;
    }
    RawTable::new(x, y, Task::Classification)
}

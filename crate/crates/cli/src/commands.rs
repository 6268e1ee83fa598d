use std::fs;
use std::path::Path;
use std::time::Instant;

use fmgp_core::classification::{compute_ece, error_rate, labels_from_targets, mean_nll};
use fmgp_core::data::{gaussian_blobs, load_csv, prepare, synth_gp_sample, synth_manifold};
use fmgp_core::spectral::{decay_experiment, reports_to_csv};
use fmgp_core::{oracle, Dataset, DirichletClassifier, GpModel, Task};
use log::info;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{DataSource, RunConfig};
use crate::error::CliError;

pub type CmdResult = Result<Value, CliError>;

fn write(dir: &Path, name: &str, contents: &str) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::data(format!("cannot create {}: {e}", dir.display())))?;
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| CliError::data(format!("cannot write {}: {e}", path.display())))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::numeric("json", e.to_string()))?;
    write(dir, name, &(text + "\n"))
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset, CliError> {
    let raw = match cfg.data()? {
        DataSource::Csv { path } => load_csv(path, cfg.task)?,
        DataSource::SyntheticGp { kernel, n, d, noise_sd, seed } => {
            synth_gp_sample(kernel, *n, *d, *noise_sd, *seed)?.into_raw()
        }
        DataSource::Manifold { latent, n, d_ambient, eps, noise_sd, seed } => {
            synth_manifold(*n, *latent, *d_ambient, *eps, *noise_sd, *seed)?.into_raw()
        }
        DataSource::Blobs { n, d, separation, seed } => gaussian_blobs(*n, *d, *separation, *seed)?,
    };
    Ok(prepare(&raw, cfg.seed, cfg.split.test_n, cfg.split.recal_n)?)
}

pub fn train(cfg: &RunConfig) -> CmdResult {
    let ds = load_dataset(cfg)?;
    let (x, y) = ds.train();
    let (xr, yr) = ds.recalibration();
    let kernel = cfg.build_kernel(ds.dim())?;
    info!("training on {} rows, {} features", x.nrows(), ds.dim());
    let dir = &cfg.output_dir;
    let start = Instant::now();
    let (model_json, trace, extra) = match cfg.task {
        Task::Regression => {
            let (mut model, trace) = GpModel::fit(kernel, &x, &y, &cfg.training)?;
            let mut alpha = None;
            if cfg.recalibrate && xr.nrows() > 0 {
                let (m, a) = model.recalibrate(&xr, &yr)?;
                model = m;
                alpha = Some(a);
            }
            let model = model.with_normalization(ds.stats.clone());
            let extra = json!({
                "sigma_f_sq": model.sigma_f_sq(),
                "sigma_xi_sq": model.sigma_xi_sq(),
                "recalibration_alpha": alpha,
            });
            (model.to_json()?, trace, extra)
        }
        Task::Classification => {
            let c = &cfg.classification;
            let (mut clf, trace) = DirichletClassifier::fit(
                kernel,
                &x,
                &labels_from_targets(&y)?,
                ds.num_classes(),
                c.alpha_eps,
                &cfg.training,
            )?;
            if c.temperature && xr.nrows() > 0 {
                let t = clf.fit_temperature(&xr, &labels_from_targets(&yr)?, c.num_samples, cfg.seed)?;
                clf = clf.with_temperature(t)?;
            }
            let clf = clf.with_normalization(ds.stats.clone());
            let extra = json!({
                "num_classes": clf.num_classes(),
                "temperature": clf.temperature(),
                "label_mapping": ds.label_mapping,
            });
            (clf.to_json()?, trace, extra)
        }
    };
    let train_seconds = start.elapsed().as_secs_f64();

    let model_path = cfg.model_path();
    if let Some(parent) = model_path.parent() {
        write(parent, model_path.file_name().and_then(|s| s.to_str()).unwrap_or("model.json"), &model_json)?;
    }
    write(dir, "trace.csv", &trace.to_csv())?;
    write_json(dir, "timing.json", &json!({ "train_seconds": train_seconds }))?;
    let summary = json!({
        "command": "train",
        "task": cfg.task,
        "n_train": x.nrows(),
        "n_test": ds.split.test.len(),
        "n_recalibration": ds.split.recalibration.len(),
        "iterations": trace.losses.len(),
        "first_loss": trace.first(),
        "final_loss": trace.losses.last(),
        "model": extra,
    });
    write_json(dir, "train_summary.json", &summary)?;
    Ok(summary)
}

pub fn eval(cfg: &RunConfig) -> CmdResult {
    let path = cfg.model_path();
    let text =
        fs::read_to_string(&path).map_err(|e| CliError::data(format!("cannot read model {}: {e}", path.display())))?;
    let ds = load_dataset(cfg)?;
    let (xt, yt) = ds.test();
    if xt.nrows() == 0 {
        return Err(CliError::data("test split is empty"));
    }
    let check_dim = |model_d: usize| {
        if model_d != ds.dim() {
            Err(CliError::config(format!("model expects {model_d} features but data has {}", ds.dim())))
        } else {
            Ok(())
        }
    };
    let (metrics, predict_seconds) = match cfg.task {
        Task::Regression => {
            let model = GpModel::from_json(&text)?;
            check_dim(model.input_dim())?;
            let start = Instant::now();
            let pred = model.predict(&xt)?;
            let elapsed = start.elapsed().as_secs_f64();
            let metrics = json!({
                "mse": pred.mse(&yt),
                "nll": pred.mean_nll(&yt),
                "units": "normalized",
            });
            (metrics, elapsed)
        }
        Task::Classification => {
            let c = &cfg.classification;
            let clf = DirichletClassifier::from_json(&text)?;
            check_dim(clf.input_dim())?;
            let truth = labels_from_targets(&yt)?;
            let start = Instant::now();
            let probs = clf.predict_proba(&xt, c.num_samples, cfg.seed)?;
            let elapsed = start.elapsed().as_secs_f64();
            let ece = compute_ece(&probs, &truth, c.ece_bins)?;
            let metrics = json!({
                "error_rate": error_rate(&probs, &truth),
                "ece": ece.ece,
                "nll": mean_nll(&probs, &truth),
                "temperature": clf.temperature(),
            });
            (metrics, elapsed)
        }
    };
    let n = xt.nrows();
    let result = json!({ "command": "eval", "task": cfg.task, "n_test": n, "metrics": metrics });
    write_json(&cfg.output_dir, "metrics.json", &result)?;
    write_json(
        &cfg.output_dir,
        "eval_timing.json",
        &json!({
            "predict_seconds": predict_seconds,
            "predict_seconds_per_point": predict_seconds / n as f64,
        }),
    )?;
    Ok(result)
}

pub fn spectral(cfg: &RunConfig) -> CmdResult {
    let reports = decay_experiment(&cfg.spectral)?;
    write(&cfg.output_dir, "spectrum.csv", &reports_to_csv(&reports)?)?;
    let summary: Vec<Value> = reports
        .iter()
        .map(|r| {
            json!({
                "kernel_label": r.kernel_label,
                "seed": r.seed,
                "numeric_rank": r.numeric_rank,
                "trace": r.total(),
            })
        })
        .collect();
    let result = json!({ "command": "spectral", "n": cfg.spectral.n, "d": cfg.spectral.d, "reports": summary });
    write_json(&cfg.output_dir, "spectral_summary.json", &result)?;
    Ok(result)
}

pub fn oracle_check(cfg: &RunConfig) -> CmdResult {
    let report = oracle::run_all(&cfg.oracle)?;
    write_json(&cfg.output_dir, "oracle_report.json", &report)?;
    let failed: Vec<&str> = report.batteries.iter().filter(|b| !b.passed).map(|b| b.name.as_str()).collect();
    if !failed.is_empty() {
        return Err(CliError::numeric("oracle", format!("batteries over tolerance: {}", failed.join(", "))));
    }
    Ok(json!({ "command": "oracle-check", "passed": true, "batteries": report.batteries }))
}

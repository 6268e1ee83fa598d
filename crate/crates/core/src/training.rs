//! Subset-cycling Adam loop shared by the regression and classification fits.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FmgpError, Result};
use crate::nn::Adam;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub num_subsets: usize,
    /// Upper bound on the size of each subset; the actual size is
    /// `min(subset_size, n_train)`.
    pub subset_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub init_sigma_f_sq: f64,
    pub init_sigma_xi_sq: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            num_subsets: 4,
            subset_size: 20_000,
            learning_rate: 0.01,
            seed: 0,
            init_sigma_f_sq: 1.0,
            init_sigma_xi_sq: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_subsets == 0 || self.subset_size == 0 {
            return Err(FmgpError::config("num_subsets and subset_size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(FmgpError::config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        for (name, v) in [("init_sigma_f_sq", self.init_sigma_f_sq), ("init_sigma_xi_sq", self.init_sigma_xi_sq)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(FmgpError::config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Per-iteration training losses (negative MLL per point of the subset).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub losses: Vec<f64>,
    pub subset_index: Vec<usize>,
}

impl TrainingTrace {
    pub fn first(&self) -> Option<f64> {
        self.losses.first().copied()
    }

    pub fn best(&self) -> Option<f64> {
        self.losses.iter().copied().reduce(f64::min)
    }

    /// CSV with columns `iteration,subset,loss`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,subset,loss\n");
        for (i, (l, s)) in self.losses.iter().zip(&self.subset_index).enumerate() {
            out.push_str(&format!("{i},{s},{l}\n"));
        }
        out
    }
}

/// Row indices of each training subset.
///
/// Indices are shuffled once with `seed`; subset `k` is the contiguous
/// block of `min(subset_size, n)` shuffled positions starting at
/// `k·size`, wrapping around the end.
pub fn training_subsets(n: usize, num_subsets: usize, subset_size: usize, seed: u64) -> Vec<Vec<usize>> {
    if n == 0 {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let size = subset_size.min(n).max(1);
    (0..num_subsets.max(1)).map(|k| (0..size).map(|j| order[(k * size + j) % n]).collect()).collect()
}

/// Runs Adam on `objective(params, subset) -> (loss, grad)`, cycling
/// through `subsets` one per iteration.
pub(crate) fn run_adam<F>(
    params: &mut [f64],
    subsets: &[Vec<usize>],
    config: &TrainConfig,
    mut objective: F,
) -> Result<TrainingTrace>
where
    F: FnMut(&[f64], &[usize]) -> Result<(f64, Vec<f64>)>,
{
    let mut adam = Adam::new(params.len(), config.learning_rate);
    let mut trace = TrainingTrace::default();
    for it in 0..config.iterations {
        let s = it % subsets.len();
        let (loss, grad) = objective(params, &subsets[s])
            .map_err(|e| FmgpError::Training { iteration: it, message: e.to_string() })?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(FmgpError::Training {
                iteration: it,
                message: format!("non-finite loss or gradient (loss = {loss})"),
            });
        }
        trace.losses.push(loss);
        trace.subset_index.push(s);
        if it % 20 == 0 {
            log::debug!("iteration {it}: loss {loss:.6}");
        }
        adam.step(params, &grad)?;
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subsets_are_contiguous_blocks_of_one_permutation() {
        let subsets = training_subsets(10, 4, 2, 7);
        assert_eq!(subsets.len(), 4);
        let mut seen: Vec<usize> = subsets.concat();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 8);
    }

    #[test]
    fn small_data_uses_everything() {
        let subsets = training_subsets(5, 4, 20_000, 1);
        for s in &subsets {
            let mut s = s.clone();
            s.sort_unstable();
            assert_eq!(s, vec![0, 1, 2, 3, 4]);
        }
    }

    #[test]
    fn subsets_deterministic() {
        assert_eq!(training_subsets(50, 4, 7, 3), training_subsets(50, 4, 7, 3));
        assert_ne!(training_subsets(50, 4, 7, 3), training_subsets(50, 4, 7, 4));
    }

    #[test]
    fn adam_loop_minimises_quadratic() {
        let subsets = vec![vec![0]];
        let cfg = TrainConfig { iterations: 500, learning_rate: 0.05, ..Default::default() };
        let mut params = vec![2.0, -1.0];
        let trace = run_adam(&mut params, &subsets, &cfg, |p, _| {
            Ok((p.iter().map(|v| v * v).sum(), p.iter().map(|v| 2.0 * v).collect()))
        })
        .unwrap();
        assert_eq!(trace.losses.len(), 500);
        assert!(params.iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn divergence_reports_iteration() {
        let cfg = TrainConfig { iterations: 5, ..Default::default() };
        let mut params = vec![0.0];
        let mut calls = 0;
        let err = run_adam(&mut params, &[vec![0]], &cfg, |_, _| {
            calls += 1;
            Ok((if calls == 3 { f64::NAN } else { 1.0 }, vec![0.0]))
        })
        .unwrap_err();
        assert!(matches!(err, FmgpError::Training { iteration: 2, .. }));
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = TrainConfig { learning_rate: 0.0, ..Default::default() };
        assert!(cfg.validate().is_err());
    }
}

//! Row-batch parallelism with deterministic, batch-ordered results.
//!
//! Worker count comes from `FMGP_THREADS` (default: available cores).
//! Results are always combined in batch order, so outputs do not depend on
//! the number of threads.

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::Result;

pub const THREADS_ENV: &str = "FMGP_THREADS";

pub fn max_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&t| t > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Splits `0..n` into contiguous `(start, len)` blocks of `batch_rows`.
pub fn row_batches(n: usize, batch_rows: usize) -> Vec<(usize, usize)> {
    let batch_rows = batch_rows.max(1);
    (0..n.div_ceil(batch_rows))
        .map(|b| {
            let start = b * batch_rows;
            (start, batch_rows.min(n - start))
        })
        .collect()
}

/// Runs `f(start, len)` over each row batch, returning results in batch
/// order.
pub fn map_row_batches<T, F>(n: usize, batch_rows: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, usize) -> Result<T> + Sync,
{
    let batches = row_batches(n, batch_rows);
    let threads = max_threads().min(batches.len()).max(1);
    if threads == 1 {
        return batches.iter().map(|&(s, l)| f(s, l)).collect();
    }
    let next = AtomicUsize::new(0);
    let mut slots: Vec<Option<Result<T>>> = (0..batches.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|_| {
                scope.spawn(|| {
                    let mut local = Vec::new();
                    loop {
                        let b = next.fetch_add(1, Ordering::Relaxed);
                        if b >= batches.len() {
                            break;
                        }
                        let (s, l) = batches[b];
                        local.push((b, f(s, l)));
                    }
                    local
                })
            })
            .collect();
        for h in handles {
            for (b, r) in h.join().expect("worker thread panicked") {
                slots[b] = Some(r);
            }
        }
    });
    slots.into_iter().map(|s| s.expect("every batch processed")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_range() {
        assert_eq!(row_batches(7, 3), vec![(0, 3), (3, 3), (6, 1)]);
        assert!(row_batches(0, 3).is_empty());
    }

    #[test]
    fn results_are_in_batch_order() {
        let out = map_row_batches(10, 2, |s, l| Ok(s * 100 + l)).unwrap();
        assert_eq!(out, vec![2, 202, 402, 602, 802]);
    }
}

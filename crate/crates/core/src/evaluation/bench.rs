//! Wall-clock benchmarking of attack runs.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchStats {
    pub mean: f64,
    pub std: f64,
    /// `mean / iterations`.
    pub per_iteration: f64,
    pub repetitions: usize,
    pub iterations: usize,
    pub resolution: usize,
}

/// Runs `thunk` once to warm up, then `repetitions` timed times.
pub fn runtime_bench(
    mut thunk: impl FnMut() -> Result<()>,
    repetitions: usize,
    iterations: usize,
    resolution: usize,
) -> Result<BenchStats> {
    if repetitions < 3 {
        return Err(Error::config(format!("runtime_bench needs at least 3 repetitions, got {repetitions}")));
    }
    thunk()?;
    let mut times = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let t0 = Instant::now();
        thunk()?;
        times.push(t0.elapsed().as_secs_f64());
    }
    let mean = times.iter().sum::<f64>() / repetitions as f64;
    let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (repetitions - 1) as f64;
    Ok(BenchStats {
        mean,
        std: var.sqrt(),
        per_iteration: mean / iterations.max(1) as f64,
        repetitions,
        iterations,
        resolution,
    })
}

//! Fixed-length slice windows over variable-length volumes.
//!
//! Evaluation draws one symmetric, evenly spread window; training draws one
//! stratified random window; the second stage tiles the whole volume.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_WINDOW: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowMode {
    TrainRandom,
    EvalSymmetric,
    Stage2Sequential,
}

/// Slice windows selected for one volume.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowPlan {
    pub windows: Vec<Vec<usize>>,
    pub mode: WindowMode,
}

fn check_counts(n_avail: usize, n_target: usize) -> Result<()> {
    if n_avail == 0 {
        return Err(Error::Data("cannot sample a window from a volume with no slices".into()));
    }
    if n_target == 0 {
        return Err(Error::Config("window length must be positive".into()));
    }
    Ok(())
}

/// Midpoint resampling: index `k` is the slice containing `(k + 0.5) * n_avail / n_target`.
///
/// When that position falls exactly on a slice boundary the slice nearer the
/// volume centre is taken, which makes the window mirror-symmetric.
pub fn sample_eval(n_avail: usize, n_target: usize) -> Result<Vec<usize>> {
    check_counts(n_avail, n_target)?;
    let den = 2 * n_target;
    Ok((0..n_target)
        .map(|k| {
            let num = (2 * k + 1) * n_avail;
            let idx = num / den;
            if num % den == 0 && 2 * k + 1 > n_target {
                idx - 1
            } else {
                idx
            }
        })
        .collect())
}

/// Stratified random window: one uniform draw from each of `n_target` equal strata.
pub fn sample_train(n_avail: usize, n_target: usize, seed: u64) -> Result<Vec<usize>> {
    check_counts(n_avail, n_target)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = n_avail as f64;
    let t = n_target as f64;
    Ok((0..n_target)
        .map(|k| {
            let lo = (k * n_avail) / n_target;
            let hi = ((k + 1) * n_avail).div_ceil(n_target) - 1;
            let u: f64 = rng.random();
            let pos = (k as f64 + u) * n / t;
            (pos.floor() as usize).clamp(lo, hi)
        })
        .collect())
}

/// Sequential tiling used to embed a whole volume.
///
/// Full windows are laid end to end; a leftover tail gets one extra window
/// aligned to the last slice. Volumes shorter than a window are resampled.
pub fn stage2_windows(n_avail: usize, n_target: usize) -> Result<WindowPlan> {
    check_counts(n_avail, n_target)?;
    let windows = if n_avail < n_target {
        vec![sample_eval(n_avail, n_target)?]
    } else {
        let full = n_avail / n_target;
        let mut w: Vec<Vec<usize>> =
            (0..full).map(|i| (i * n_target..(i + 1) * n_target).collect()).collect();
        if n_avail % n_target != 0 {
            w.push((n_avail - n_target..n_avail).collect());
        }
        w
    };
    Ok(WindowPlan { windows, mode: WindowMode::Stage2Sequential })
}

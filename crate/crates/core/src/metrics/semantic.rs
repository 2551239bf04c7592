//! Global semantic quality and effective rank of pooled latents.

use nalgebra::DMatrix;
use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::harness::config::SpectrumMode;
use crate::rng::seeded;

/// Mean-centers and unit-normalizes rows; zero rows stay zero.
pub fn center_normalize(x: &Array2<f64>) -> Array2<f64> {
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    let mut c = x - &mean;
    for mut row in c.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row /= norm;
        }
    }
    c
}

/// Nearest-neighbour label purity of one set. `None` below two samples.
pub fn nn_purity(pooled: &Array2<f64>, labels: &[usize]) -> Result<Option<f64>> {
    let n = pooled.nrows();
    if n != labels.len() {
        return Err(config_err(format!("{n} features but {} labels", labels.len())));
    }
    if n < 2 {
        return Ok(None);
    }
    let f = center_normalize(pooled);
    let sim = f.dot(&f.t());
    let mut hits = 0usize;
    for i in 0..n {
        let mut best = usize::MAX;
        let mut best_sim = f64::NEG_INFINITY;
        for j in 0..n {
            if j != i && sim[[i, j]] > best_sim {
                best_sim = sim[[i, j]];
                best = j;
            }
        }
        if labels[best] == labels[i] {
            hits += 1;
        }
    }
    Ok(Some(hits as f64 / n as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GsqResult {
    pub mean: f64,
    /// Population standard deviation over evaluated subsets.
    pub std: f64,
    pub per_subset: Vec<f64>,
    /// Class ids drawn for each subset.
    pub subsets: Vec<Vec<usize>>,
    pub skipped: Vec<usize>,
}

/// GSQ over `subsets` random draws of `classes` labels each (all classes
/// when fewer exist). Centering is recomputed within each subset.
pub fn gsq(pooled: &Array2<f64>, labels: &[usize], classes: usize, subsets: usize, seed: u64) -> Result<GsqResult> {
    if pooled.nrows() != labels.len() {
        return Err(config_err(format!("{} features but {} labels", pooled.nrows(), labels.len())));
    }
    if subsets == 0 || classes == 0 {
        return Err(config_err("gsq needs at least one subset and one class"));
    }
    let mut distinct: Vec<usize> = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    let mut rng = seeded(seed);
    let mut per_subset = Vec::new();
    let mut drawn = Vec::new();
    let mut skipped = Vec::new();
    for s in 0..subsets {
        let mut pool = distinct.clone();
        pool.shuffle(&mut rng);
        let mut chosen: Vec<usize> = pool.into_iter().take(classes).collect();
        chosen.sort_unstable();
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| chosen.binary_search(&labels[i]).is_ok()).collect();
        let sub = pooled.select(Axis(0), &idx);
        let sub_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        match nn_purity(&sub, &sub_labels)? {
            Some(v) => per_subset.push(v),
            None => {
                log::warn!("gsq: subset {s} has fewer than two samples, skipped");
                skipped.push(s);
            }
        }
        drawn.push(chosen);
    }
    if per_subset.is_empty() {
        return Err(config_err("gsq: no subset had two or more samples"));
    }
    let mean = per_subset.iter().sum::<f64>() / per_subset.len() as f64;
    let var = per_subset.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / per_subset.len() as f64;
    Ok(GsqResult {
        mean,
        std: var.sqrt(),
        per_subset,
        subsets: drawn,
        skipped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErankResult {
    pub value: f64,
    /// Set when the centered matrix is zero and the value defaults to `1/C`.
    pub degenerate: bool,
}

/// Normalized entropy effective rank of mean-centered features `[N, C]`.
pub fn erank(features: &Array2<f64>, mode: SpectrumMode) -> Result<ErankResult> {
    let (n, c) = features.dim();
    if n < 2 || c == 0 {
        return Err(config_err(format!("erank needs at least two rows and one column, got {n}x{c}")));
    }
    let mean = features.mean_axis(Axis(0)).expect("non-empty");
    let centered = features - &mean;
    let m = DMatrix::from_fn(n, c, |i, j| centered[[i, j]]);
    let sv = m.singular_values();
    let spectrum: Vec<f64> = sv
        .iter()
        .map(|&s| match mode {
            SpectrumMode::Singular => s,
            SpectrumMode::Variance => s * s,
        })
        .collect();
    Ok(erank_from_spectrum(&spectrum, c))
}

/// `exp(−Σ p ln p) / C` with `p` the normalized spectrum and `0·ln 0 = 0`.
pub fn erank_from_spectrum(spectrum: &[f64], channels: usize) -> ErankResult {
    let total: f64 = spectrum.iter().sum();
    if total <= 0.0 {
        return ErankResult {
            value: 1.0 / channels as f64,
            degenerate: true,
        };
    }
    let entropy: f64 = spectrum
        .iter()
        .map(|&s| s / total)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    ErankResult {
        value: entropy.exp() / channels as f64,
        degenerate: false,
    }
}

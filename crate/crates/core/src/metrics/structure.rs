//! Spatial structure coherence: mask projection, token affinity, normalized
//! spectral clustering and normalized mutual information.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::rng::seeded;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLabels {
    pub labels: Vec<usize>,
    pub k: usize,
}

impl TokenLabels {
    /// Relabels to `[0, k)` in order of first appearance.
    pub fn canonical(raw: &[usize]) -> Self {
        let mut map = BTreeMap::new();
        let labels = raw
            .iter()
            .map(|&l| {
                let next = map.len();
                *map.entry(l).or_insert(next)
            })
            .collect();
        Self { labels, k: map.len().max(1) }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Majority vote of each pixel block; ties go to the smaller segment id.
/// Segment ids are then compacted to `[0, k)` preserving their order.
pub fn project_mask_to_latent(mask: &Array2<u32>, grid: (usize, usize)) -> Result<TokenLabels> {
    let votes = majority_ids(mask, grid)?;
    let mut ids = votes.clone();
    ids.sort_unstable();
    ids.dedup();
    let labels = votes.iter().map(|v| ids.binary_search(v).expect("present")).collect();
    Ok(TokenLabels { labels, k: ids.len() })
}

/// Winning raw segment id of every block, row-major.
pub fn majority_ids(mask: &Array2<u32>, grid: (usize, usize)) -> Result<Vec<u32>> {
    let (h, w) = mask.dim();
    let (rows, cols) = grid;
    if rows == 0 || cols == 0 || h % rows != 0 || w % cols != 0 {
        return Err(config_err(format!("mask {h}x{w} is not divisible into a {rows}x{cols} grid")));
    }
    let (bh, bw) = (h / rows, w / cols);
    let mut votes = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
            for y in r * bh..(r + 1) * bh {
                for x in c * bw..(c + 1) * bw {
                    *counts.entry(mask[[y, x]]).or_default() += 1;
                }
            }
            let best = counts
                .iter()
                .fold((0u32, 0usize), |acc, (&id, &n)| if n > acc.1 { (id, n) } else { acc });
            votes.push(best.0);
        }
    }
    Ok(votes)
}

/// `A_ij = exp(⟨ẑ_i, ẑ_j⟩ / σ)` with `A_ii = 0` for token rows `[N, d]`.
/// Returns the indices of zero tokens, which are eps-normalized.
pub fn token_affinity(tokens: &Array2<f64>, sigma: f64) -> Result<(Array2<f64>, Vec<usize>)> {
    if !(sigma > 0.0) {
        return Err(config_err(format!("affinity temperature must be positive, got {sigma}")));
    }
    let (n, _) = tokens.dim();
    let mut unit = tokens.clone();
    let mut zero = Vec::new();
    for (i, mut row) in unit.rows_mut().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if norm == 0.0 {
            zero.push(i);
        }
        row /= norm.max(1e-12);
    }
    let cos = unit.dot(&unit.t());
    let mut a = cos.mapv(|c| (c / sigma).exp());
    for i in 0..n {
        a[[i, i]] = 0.0;
    }
    Ok((a, zero))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub labels: TokenLabels,
    pub inertia: f64,
    pub isolated: Vec<usize>,
    pub degenerate: bool,
}

/// Normalized spectral clustering of a symmetric non-negative affinity into
/// `k` groups: bottom-`k` eigenvectors of `I − D^{-1/2} A D^{-1/2}`, rows
/// unit-normalized, then seeded k-means++ with `restarts` runs keeping the
/// lowest inertia. A constant off-diagonal affinity carries no structure and
/// yields the constant partition.
pub fn spectral_cluster(a: &Array2<f64>, k: usize, seed: u64, restarts: usize) -> Result<Clustering> {
    let (n, m) = a.dim();
    if n != m {
        return Err(config_err(format!("affinity must be square, got {n}x{m}")));
    }
    if k == 0 || k > n {
        return Err(config_err(format!("cluster count {k} outside [1, {n}]")));
    }
    if a.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(config_err("affinity must be finite and non-negative"));
    }
    for i in 0..n {
        for j in 0..i {
            if (a[[i, j]] - a[[j, i]]).abs() > 1e-9 * a[[i, j]].abs().max(1.0) {
                return Err(config_err("affinity must be symmetric"));
            }
        }
    }
    let constant = |labels: Vec<usize>, degenerate| Clustering {
        labels: TokenLabels { labels, k: 1 },
        inertia: 0.0,
        isolated: Vec::new(),
        degenerate,
    };
    if k == 1 {
        return Ok(constant(vec![0; n], false));
    }
    let first = if n > 1 { a[[0, 1]] } else { 0.0 };
    let flat = (0..n).all(|i| (0..n).all(|j| i == j || (a[[i, j]] - first).abs() <= 1e-12 * first.abs().max(1.0)));
    if flat {
        log::debug!("spectral_cluster: constant affinity, returning one cluster");
        return Ok(constant(vec![0; n], true));
    }

    let degree: Vec<f64> = (0..n).map(|i| a.row(i).sum()).collect();
    let isolated: Vec<usize> = (0..n).filter(|&i| degree[i] == 0.0).collect();
    if !isolated.is_empty() {
        log::debug!("spectral_cluster: {} zero-degree nodes", isolated.len());
    }
    let inv_sqrt: Vec<f64> = degree.iter().map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 }).collect();
    let lap = DMatrix::from_fn(n, n, |i, j| {
        let id = if i == j { 1.0 } else { 0.0 };
        id - inv_sqrt[i] * a[[i, j]] * inv_sqrt[j]
    });
    let eig = SymmetricEigen::new(lap);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| eig.eigenvalues[x].total_cmp(&eig.eigenvalues[y]).then(x.cmp(&y)));
    let mut emb = Array2::zeros((n, k));
    for (c, &idx) in order.iter().take(k).enumerate() {
        for r in 0..n {
            emb[[r, c]] = eig.eigenvectors[(r, idx)];
        }
    }
    for mut row in emb.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row /= norm;
        }
    }
    let (labels, inertia) = kmeans(&emb, k, seed, restarts.max(1));
    Ok(Clustering {
        labels: TokenLabels::canonical(&labels),
        inertia,
        isolated,
        degenerate: false,
    })
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm with k-means++ seeding; best of `restarts` runs drawn
/// from one seeded stream. Ties in inertia keep the earlier run.
pub fn kmeans(x: &Array2<f64>, k: usize, seed: u64, restarts: usize) -> (Vec<usize>, f64) {
    let (n, d) = x.dim();
    let mut rng = seeded(seed);
    let mut best: Option<(Vec<usize>, f64)> = None;
    for _ in 0..restarts {
        let mut centers = Array2::<f64>::zeros((k, d));
        let first = rng.random_range(0..n);
        centers.row_mut(0).assign(&x.row(first));
        let mut dist: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), centers.row(0))).collect();
        for c in 1..k {
            let total: f64 = dist.iter().sum();
            let pick = if total > 0.0 {
                let mut target = rng.random::<f64>() * total;
                let mut chosen = n - 1;
                for (i, &w) in dist.iter().enumerate() {
                    if target < w {
                        chosen = i;
                        break;
                    }
                    target -= w;
                }
                chosen
            } else {
                rng.random_range(0..n)
            };
            centers.row_mut(c).assign(&x.row(pick));
            for i in 0..n {
                dist[i] = dist[i].min(sq_dist(x.row(i), centers.row(c)));
            }
        }

        let mut assign = vec![usize::MAX; n];
        for _ in 0..300 {
            let mut changed = false;
            for i in 0..n {
                let mut bi = 0;
                let mut bd = f64::INFINITY;
                for c in 0..k {
                    let dd = sq_dist(x.row(i), centers.row(c));
                    if dd < bd {
                        bd = dd;
                        bi = c;
                    }
                }
                if assign[i] != bi {
                    assign[i] = bi;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
            let mut sums = Array2::<f64>::zeros((k, d));
            let mut counts = vec![0usize; k];
            for i in 0..n {
                counts[assign[i]] += 1;
                let mut row = sums.row_mut(assign[i]);
                row += &x.row(i);
            }
            for c in 0..k {
                if counts[c] > 0 {
                    let mean = &sums.row(c) / counts[c] as f64;
                    centers.row_mut(c).assign(&mean);
                } else {
                    // Reseed an empty cluster at the point farthest from its center.
                    let far = (0..n)
                        .max_by(|&p, &q| {
                            sq_dist(x.row(p), centers.row(assign[p]))
                                .total_cmp(&sq_dist(x.row(q), centers.row(assign[q])))
                                .then(q.cmp(&p))
                        })
                        .expect("n > 0");
                    centers.row_mut(c).assign(&x.row(far));
                }
            }
        }
        let inertia: f64 = (0..n).map(|i| sq_dist(x.row(i), centers.row(assign[i]))).sum();
        if best.as_ref().is_none_or(|(_, b)| inertia < *b) {
            best = Some((assign, inertia));
        }
    }
    best.expect("at least one restart")
}

fn same_partition(a: &[usize], b: &[usize]) -> bool {
    TokenLabels::canonical(a).labels == TokenLabels::canonical(b).labels
}

/// `I(y; ŷ) / sqrt(H(y) H(ŷ))` with natural logs. When either entropy is
/// zero the value is 1 for identical partitions and 0 otherwise.
pub fn nmi(y: &[usize], y_hat: &[usize]) -> Result<f64> {
    if y.len() != y_hat.len() {
        return Err(config_err(format!("label lengths differ: {} vs {}", y.len(), y_hat.len())));
    }
    if y.is_empty() {
        return Err(config_err("nmi needs at least one label"));
    }
    let n = y.len() as f64;
    let mut joint: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut pa: BTreeMap<usize, f64> = BTreeMap::new();
    let mut pb: BTreeMap<usize, f64> = BTreeMap::new();
    for (&a, &b) in y.iter().zip(y_hat) {
        *joint.entry((a, b)).or_default() += 1.0;
        *pa.entry(a).or_default() += 1.0;
        *pb.entry(b).or_default() += 1.0;
    }
    let entropy = |p: &BTreeMap<usize, f64>| -p.values().map(|c| c / n * (c / n).ln()).sum::<f64>();
    let (ha, hb) = (entropy(&pa), entropy(&pb));
    if ha <= 0.0 || hb <= 0.0 {
        return Ok(if same_partition(y, y_hat) { 1.0 } else { 0.0 });
    }
    let mi: f64 = joint
        .iter()
        .map(|(&(a, b), &c)| c / n * (c * n / (pa[&a] * pb[&b])).ln())
        .sum();
    Ok((mi / (ha * hb).sqrt()).clamp(0.0, 1.0))
}

/// NMI between ground-truth segments and the spectral clustering of the
/// token affinity with as many clusters as segments.
pub fn ssc(tokens: &Array2<f64>, gt: &TokenLabels, sigma: f64, seed: u64, restarts: usize) -> Result<f64> {
    if tokens.nrows() != gt.len() {
        return Err(config_err(format!("{} tokens but {} labels", tokens.nrows(), gt.len())));
    }
    let (a, _) = token_affinity(tokens, sigma)?;
    let clusters = spectral_cluster(&a, gt.k, seed, restarts)?;
    nmi(&gt.labels, &clusters.labels.labels)
}

//! Prior refinement: turns frozen-encoder features into fixed,
//! bottleneck-matched supervision.
//!
//! * the semantic prior `Z_T = P(H)` (and its pool `z_Tg`) comes from a
//!   projector/deprojector pair trained to reconstruct `H` while matching
//!   the token Gram of the structural reference;
//! * the structural reference `H_ref` is `H` upsampled, low-pass filtered
//!   and resampled back to token resolution; its unit-token Gram is stored
//!   as `gram_ref`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use ndarray::{Array1, Array2, Array3, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::backbone::FeatureMap;
use crate::error::{config_err, PaeError, Result};
use crate::harness::config::{GramConvention, RefinementConfig};
use crate::harness::container::{read_tensor, write_tensor, StoredTensor};
use crate::harness::train::lr_at;
use crate::losses::{gram_alignment, unit_gram_host};
use crate::nn::{file_sha256, scalar, ParamStore, TokenNet, TokenNetShape};
use crate::rng::{streams, substream};

// ---------------------------------------------------------------------------
// Spatial refinement

/// Bilinear resize of a `[rows, cols, D]` grid with half-pixel centers.
pub fn resize_bilinear(grid: &Array3<f64>, out_rows: usize, out_cols: usize) -> Array3<f64> {
    let (rows, cols, d) = grid.dim();
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, src - lo as f64)
            })
            .collect()
    };
    let ty = taps(out_rows, rows);
    let tx = taps(out_cols, cols);
    let mut out = Array3::zeros((out_rows, out_cols, d));
    for (r, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (c, &(x0, x1, fx)) in tx.iter().enumerate() {
            for k in 0..d {
                let top = grid[[y0, x0, k]] * (1.0 - fx) + grid[[y0, x1, k]] * fx;
                let bottom = grid[[y1, x0, k]] * (1.0 - fx) + grid[[y1, x1, k]] * fx;
                out[[r, c, k]] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

/// Normalized 1-D Gaussian taps with radius `ceil(3σ)`; `[1.0]` for σ = 0.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Separable per-channel Gaussian blur with replicated borders.
pub fn gaussian_blur(grid: &Array3<f64>, sigma: f64) -> Array3<f64> {
    let kernel = gaussian_kernel(sigma);
    if kernel.len() == 1 {
        return grid.clone();
    }
    let radius = (kernel.len() / 2) as i64;
    let (rows, cols, d) = grid.dim();
    let clamp = |i: i64, n: usize| i.clamp(0, n as i64 - 1) as usize;
    let mut tmp = Array3::<f64>::zeros((rows, cols, d));
    for r in 0..rows {
        for c in 0..cols {
            for (j, w) in kernel.iter().enumerate() {
                let cc = clamp(c as i64 + j as i64 - radius, cols);
                for k in 0..d {
                    tmp[[r, c, k]] += w * grid[[r, cc, k]];
                }
            }
        }
    }
    let mut out = Array3::zeros((rows, cols, d));
    for r in 0..rows {
        for (j, w) in kernel.iter().enumerate() {
            let rr = clamp(r as i64 + j as i64 - radius, rows);
            for c in 0..cols {
                for k in 0..d {
                    out[[r, c, k]] += w * tmp[[rr, c, k]];
                }
            }
        }
    }
    out
}

/// Upsample the token grid so its longer side spans `upsample_size` pixels,
/// blur with σ = `strength`·`sigma_max`, and resample back to the original
/// grid. Constant maps are preserved exactly up to rounding.
pub fn spatial_refine(
    features: &FeatureMap,
    upsample_size: usize,
    strength: f64,
    sigma_max: f64,
) -> Result<FeatureMap> {
    if !(0.0..=1.0).contains(&strength) {
        return Err(config_err(format!("low-pass strength {strength} outside [0, 1]")));
    }
    let (rows, cols) = features.grid;
    let longest = rows.max(cols);
    if upsample_size < longest {
        return Err(config_err(format!(
            "upsample size {upsample_size} below latent resolution {longest}"
        )));
    }
    let up_rows = (upsample_size * rows).div_ceil(longest);
    let up_cols = (upsample_size * cols).div_ceil(longest);
    let up = resize_bilinear(&features.to_grid(), up_rows, up_cols);
    let blurred = gaussian_blur(&up, strength * sigma_max);
    let down = resize_bilinear(&blurred, rows, cols);
    FeatureMap::from_grid(down, features.source_id.clone(), features.image_size)
}

// ---------------------------------------------------------------------------
// Projector / deprojector

#[derive(Debug, Clone)]
pub struct PriorNet {
    pub projector: TokenNet,
    pub deprojector: TokenNet,
    pub grid: (usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PriorShapes {
    pub projector: TokenNetShape,
    pub deprojector: TokenNetShape,
}

impl PriorShapes {
    pub fn new(feature_dim: usize, cfg: &RefinementConfig) -> Self {
        Self {
            projector: TokenNetShape {
                input: feature_dim,
                width: cfg.projector_width,
                depth: cfg.projector_depth,
                heads: cfg.heads,
                output: cfg.latent_dim,
                conv: true,
            },
            deprojector: TokenNetShape {
                input: cfg.latent_dim,
                width: cfg.decoder_hidden,
                depth: cfg.decoder_depth,
                heads: cfg.heads,
                output: feature_dim,
                conv: false,
            },
        }
    }

    pub fn param_count(&self) -> usize {
        TokenNet::param_count(self.projector) + TokenNet::param_count(self.deprojector)
    }
}

impl PriorNet {
    pub fn new(ps: &mut ParamStore, seed: u64, shapes: PriorShapes, grid: (usize, usize)) -> Result<Self> {
        let mut rng = substream(seed, streams::INIT);
        Ok(Self {
            projector: TokenNet::new(ps, &mut rng, "prior_projector", shapes.projector)?,
            deprojector: TokenNet::new(ps, &mut rng, "prior_deprojector", shapes.deprojector)?,
            grid,
        })
    }

    /// `H [B, N, D]` → (`Z_T [B, N, d]`, `Ĥ [B, N, D]`).
    pub fn forward(&self, features: &Tensor) -> Result<(Tensor, Tensor)> {
        let (_, n, d) = features.dims3()?;
        if n != self.grid.0 * self.grid.1 || d != self.projector.input.weight.dim(0)? {
            return Err(config_err(format!(
                "features {:?} do not match prior net (grid {:?}, input dim {})",
                features.dims(),
                self.grid,
                self.projector.input.weight.dim(0)?
            )));
        }
        let z_t = self.projector.forward(features, self.grid)?;
        let h_hat = self.deprojector.forward(&z_t, self.grid)?;
        Ok((z_t, h_hat))
    }
}

#[derive(Debug, Clone)]
pub struct RefinementLoss {
    pub total: Tensor,
    pub rep: f64,
    pub gram: f64,
}

/// `λ_rep·mean‖Ĥ − H‖² + λ_gram·‖Gram(Z_T) − gram_ref‖²_F / N²`, with the
/// Gram taken on unit-normalized tokens.
pub fn refinement_loss(
    z_t: &Tensor,
    h_hat: &Tensor,
    h_vfm: &Tensor,
    gram_ref: &Tensor,
    lambda_rep: f64,
    lambda_gram: f64,
) -> Result<RefinementLoss> {
    refinement_loss_with(z_t, h_hat, h_vfm, gram_ref, lambda_rep, lambda_gram, GramConvention::Normalized)
}

pub fn refinement_loss_with(
    z_t: &Tensor,
    h_hat: &Tensor,
    h_vfm: &Tensor,
    gram_ref: &Tensor,
    lambda_rep: f64,
    lambda_gram: f64,
    convention: GramConvention,
) -> Result<RefinementLoss> {
    if h_hat.dims() != h_vfm.dims() {
        return Err(config_err(format!(
            "reconstruction {:?} vs features {:?}",
            h_hat.dims(),
            h_vfm.dims()
        )));
    }
    for (t, what) in [(h_vfm, "features"), (gram_ref, "reference Gram"), (z_t, "prior tokens"), (h_hat, "reconstruction")] {
        if !scalar(&t.sum_all()?)?.is_finite() {
            return Err(PaeError::Numeric(format!("non-finite value in {what}")));
        }
    }
    let rep = (h_hat - h_vfm)?.sqr()?.mean_all()?;
    let gram = gram_alignment(z_t, gram_ref, convention)?;
    let total = ((&rep * lambda_rep)? + (&gram * lambda_gram)?)?;
    Ok(RefinementLoss {
        rep: scalar(&rep)?,
        gram: scalar(&gram)?,
        total,
    })
}

// ---------------------------------------------------------------------------
// Training and the prior store

#[derive(Debug, Clone, PartialEq)]
pub struct RefinedPrior {
    pub id: String,
    /// `[N, d]`.
    pub z_t: Array2<f64>,
    /// `[d]`, mean over tokens of `z_t`.
    pub z_tg: Array1<f64>,
    /// `[N, N]`.
    pub gram_ref: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorManifest {
    pub config_hash: String,
    pub backbone_id: String,
    pub entries: Vec<PriorManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorManifestEntry {
    pub id: String,
    pub files: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorStore {
    pub config_hash: String,
    pub backbone_id: String,
    pub priors: Vec<RefinedPrior>,
}

impl PriorStore {
    pub fn get(&self, id: &str) -> Option<&RefinedPrior> {
        self.priors.iter().find(|p| p.id == id)
    }

    /// Writes `<dir>/<id>/{z_t,z_tg,gram_ref}.paet` and `manifest.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut entries = Vec::new();
        for p in &self.priors {
            let mut files = BTreeMap::new();
            for (name, stored) in [
                ("z_t", StoredTensor::from_array(&p.z_t.clone().into_dyn())),
                ("z_tg", StoredTensor::from_array(&p.z_tg.clone().into_dyn())),
                ("gram_ref", StoredTensor::from_array(&p.gram_ref.clone().into_dyn())),
            ] {
                let rel = format!("{}/{name}.paet", p.id);
                let path = dir.join(&rel);
                write_tensor(&path, &stored)?;
                files.insert(rel, file_sha256(&path)?);
            }
            entries.push(PriorManifestEntry {
                id: p.id.clone(),
                files,
            });
        }
        let manifest = PriorManifest {
            config_hash: self.config_hash.clone(),
            backbone_id: self.backbone_id.clone(),
            entries,
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| PaeError::Format(e.to_string()))?;
        fs::write(dir.join("manifest.json"), text)?;
        Ok(())
    }

    /// Reads a store, verifying every file against its manifest hash.
    pub fn read(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("manifest.json"))?;
        let manifest: PriorManifest = serde_json::from_str(&text).map_err(|e| PaeError::Format(e.to_string()))?;
        let mut priors = Vec::new();
        for entry in &manifest.entries {
            for (rel, hash) in &entry.files {
                let actual = file_sha256(&dir.join(rel))?;
                if &actual != hash {
                    return Err(PaeError::Format(format!(
                        "prior file {rel} hash mismatch: manifest {hash}, file {actual}"
                    )));
                }
            }
            let load2 = |name: &str| -> Result<Array2<f64>> {
                read_tensor(dir.join(format!("{}/{name}.paet", entry.id)))?
                    .to_array()?
                    .into_dimensionality()
                    .map_err(|e| PaeError::Format(e.to_string()))
            };
            let z_tg = read_tensor(dir.join(format!("{}/z_tg.paet", entry.id)))?
                .to_array()?
                .into_dimensionality()
                .map_err(|e| PaeError::Format(e.to_string()))?;
            priors.push(RefinedPrior {
                id: entry.id.clone(),
                z_t: load2("z_t")?,
                z_tg,
                gram_ref: load2("gram_ref")?,
            });
        }
        Ok(Self {
            config_hash: manifest.config_hash,
            backbone_id: manifest.backbone_id,
            priors,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RefinementLog {
    pub total: Vec<f64>,
    pub rep: Vec<f64>,
    pub gram: Vec<f64>,
}

#[derive(Debug)]
pub struct RefinementArtifacts {
    pub params: ParamStore,
    pub net: PriorNet,
    pub shapes: PriorShapes,
    pub log: RefinementLog,
}

impl RefinementArtifacts {
    pub fn projector_params(&self) -> usize {
        self.params.num_params_with_prefix("prior_projector.")
    }

    pub fn deprojector_params(&self) -> usize {
        self.params.num_params_with_prefix("prior_deprojector.")
    }
}

/// Stacks feature maps into `[B, N, D]`.
pub fn features_to_tensor(maps: &[&FeatureMap], dtype: DType) -> Result<Tensor> {
    let first = maps.first().ok_or_else(|| config_err("empty feature batch"))?;
    let (n, d) = first.tokens.dim();
    let mut data = Vec::with_capacity(maps.len() * n * d);
    for m in maps {
        if m.tokens.dim() != (n, d) {
            return Err(config_err("feature maps in a batch must share one shape"));
        }
        data.extend(m.tokens.iter().copied());
    }
    Ok(Tensor::from_vec(data, (maps.len(), n, d), &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn host_matrices_to_tensor(mats: &[&Array2<f64>], dtype: DType) -> Result<Tensor> {
    let (r, c) = mats[0].dim();
    let data: Vec<f64> = mats.iter().flat_map(|m| m.iter().copied()).collect();
    Ok(Tensor::from_vec(data, (mats.len(), r, c), &Device::Cpu)?.to_dtype(dtype)?)
}

/// The structural reference Gram for one feature map.
pub fn structural_gram(features: &FeatureMap, cfg: &RefinementConfig) -> Result<Array2<f64>> {
    let refined = spatial_refine(features, cfg.upsample_size, cfg.lowpass_strength, cfg.sigma_max)?;
    Ok(unit_gram_host(&refined.tokens))
}

/// Trains the projector/deprojector pair on `(id, features)` pairs, then
/// freezes the resulting priors into a [`PriorStore`]. Deterministic in
/// `seed`.
pub fn train_refinement(
    cfg: &RefinementConfig,
    dataset: &[(String, FeatureMap)],
    seed: u64,
    config_hash: &str,
    dtype: DType,
) -> Result<(RefinementArtifacts, PriorStore)> {
    let first = dataset
        .first()
        .ok_or_else(|| config_err("refinement dataset is empty"))?;
    let grid = first.1.grid;
    let feature_dim = first.1.dim();
    let backbone_id = first.1.source_id.clone();
    let shapes = PriorShapes::new(feature_dim, cfg);
    let mut params = ParamStore::new(dtype);
    let net = PriorNet::new(&mut params, seed, shapes, grid)?;

    let grams: Vec<Array2<f64>> = dataset
        .iter()
        .map(|(_, f)| structural_gram(f, cfg))
        .collect::<Result<_>>()?;

    let mut log = RefinementLog::default();
    let o = &cfg.optim;
    if o.steps > 0 {
        let mut opt = AdamW::new(
            params.vars(),
            ParamsAdamW {
                lr: o.learning_rate,
                beta1: o.beta1,
                beta2: o.beta2,
                eps: 1e-8,
                weight_decay: o.weight_decay,
            },
        )?;
        let mut rng = substream(seed, streams::TRAIN);
        let mut order: Vec<usize> = Vec::new();
        for step in 0..o.steps {
            let batch = next_batch(&mut order, dataset.len(), o.batch_size, &mut rng);
            let feats: Vec<&FeatureMap> = batch.iter().map(|&i| &dataset[i].1).collect();
            let refs: Vec<&Array2<f64>> = batch.iter().map(|&i| &grams[i]).collect();
            let h = features_to_tensor(&feats, dtype)?;
            let g = host_matrices_to_tensor(&refs, dtype)?;
            let (z_t, h_hat) = net.forward(&h)?;
            let loss = refinement_loss(&z_t, &h_hat, &h, &g, cfg.lambda_rep, cfg.lambda_gram)?;
            opt.set_learning_rate(lr_at(o, step));
            opt.backward_step(&loss.total)?;
            log.total.push(scalar(&loss.total)?);
            log.rep.push(loss.rep);
            log.gram.push(loss.gram);
        }
    }

    let mut priors = Vec::with_capacity(dataset.len());
    for ((id, f), gram_ref) in dataset.iter().zip(grams) {
        let h = features_to_tensor(&[f], dtype)?;
        let (z_t, _) = net.forward(&h)?;
        let z_t: Vec<Vec<f64>> = z_t.squeeze(0)?.to_dtype(DType::F64)?.to_vec2()?;
        let z_t = Array2::from_shape_vec(
            (z_t.len(), cfg.latent_dim),
            z_t.into_iter().flatten().collect(),
        )
        .map_err(|e| PaeError::Internal(e.to_string()))?;
        let z_tg = z_t.mean_axis(Axis(0)).expect("non-empty token set");
        priors.push(RefinedPrior {
            id: id.clone(),
            z_t,
            z_tg,
            gram_ref,
        });
    }
    let store = PriorStore {
        config_hash: config_hash.to_string(),
        backbone_id,
        priors,
    };
    Ok((
        RefinementArtifacts {
            params,
            net,
            shapes,
            log,
        },
        store,
    ))
}

/// Draws the next minibatch from a reshuffled-per-epoch index order.
pub(crate) fn next_batch<R: rand::Rng + ?Sized>(
    order: &mut Vec<usize>,
    len: usize,
    batch: usize,
    rng: &mut R,
) -> Vec<usize> {
    let batch = batch.clamp(1, len);
    if order.len() < batch {
        let mut fresh: Vec<usize> = (0..len).collect();
        fresh.shuffle(rng);
        order.extend(fresh);
    }
    order.drain(..batch).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fmap(grid: Array3<f64>) -> FeatureMap {
        FeatureMap::from_grid(grid, "test", (0, 0)).unwrap()
    }

    #[test]
    fn constant_map_is_preserved() {
        let f = fmap(Array3::from_elem((4, 4, 3), 1.75));
        for strength in [0.0, 0.4, 1.0] {
            let out = spatial_refine(&f, 32, strength, 4.0).unwrap();
            assert!(out.tokens.iter().all(|v| (v - 1.75).abs() < 1e-12));
        }
    }

    #[test]
    fn zero_strength_is_pure_resampling() {
        let g = Array3::from_shape_fn((4, 4, 2), |(r, c, k)| (r * 5 + c * 3 + k) as f64 % 7.0);
        let f = fmap(g.clone());
        let out = spatial_refine(&f, 16, 0.0, 4.0).unwrap();
        let expect = resize_bilinear(&resize_bilinear(&g, 16, 16), 4, 4);
        assert_eq!(out.to_grid(), expect);
    }

    #[test]
    fn rejects_bad_parameters() {
        let f = fmap(Array3::zeros((4, 4, 1)));
        assert!(matches!(spatial_refine(&f, 16, 1.2, 4.0), Err(PaeError::Config(_))));
        assert!(matches!(spatial_refine(&f, 2, 0.4, 4.0), Err(PaeError::Config(_))));
    }

    #[test]
    fn gram_of_refined_reference_is_symmetric_psd() {
        let g = Array3::from_shape_fn((4, 4, 5), |(r, c, k)| ((r * 7 + c * 11 + k * 13) % 17) as f64 - 8.0);
        let gram = structural_gram(&fmap(g), &RefinementConfig { upsample_size: 16, ..RefinementConfig::default() }).unwrap();
        let m = nalgebra::DMatrix::from_fn(16, 16, |i, j| gram[[i, j]]);
        assert!((&m - m.transpose()).abs().max() < 1e-12);
        let eig = m.symmetric_eigen();
        assert!(eig.eigenvalues.iter().all(|&l| l > -1e-6));
        for i in 0..16 {
            assert!((gram[[i, i]] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_is_zero_at_fixed_point_and_gram_three_case() {
        let z = Tensor::new(&[[[1.0f64], [0.0]]], &Device::Cpu).unwrap();
        let reference = Array2::from_shape_vec((2, 1), vec![1.0, 1.0]).unwrap();
        let g = host_matrices_to_tensor(&[&unit_gram_host(&reference)], DType::F64).unwrap();
        let h = Tensor::new(&[[[0.5f64, 2.0], [1.0, -1.0]]], &Device::Cpu).unwrap();
        let l = refinement_loss_with(&z, &h, &h, &g, 1.0, 1.0, GramConvention::Literal).unwrap();
        assert_eq!(l.rep, 0.0);
        assert!((l.gram - 3.0).abs() < 1e-12);
        let l = refinement_loss(&z, &h, &h, &g, 1.0, 1.0).unwrap();
        assert!((l.gram - 0.75).abs() < 1e-12);

        let own = host_matrices_to_tensor(&[&unit_gram_host(&Array2::from_shape_vec((2, 1), vec![1.0, 0.0]).unwrap())], DType::F64).unwrap();
        let l = refinement_loss(&z, &h, &h, &own, 1.0, 1.0).unwrap();
        assert!(scalar(&l.total).unwrap().abs() < 1e-12);
    }

    #[test]
    fn loss_rejects_nan() {
        let z = Tensor::new(&[[[1.0f64], [0.0]]], &Device::Cpu).unwrap();
        let h = Tensor::new(&[[[f64::NAN], [0.0]]], &Device::Cpu).unwrap();
        let g = Tensor::zeros((1, 2, 2), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(refinement_loss(&z, &z, &h, &g, 1.0, 1.0), Err(PaeError::Numeric(_))));
    }

    #[test]
    fn gram_loss_ignores_channel_scaling_of_reference() {
        let reference = Array2::from_shape_fn((6, 4), |(i, j)| ((i * 3 + j * 5) % 7) as f64 - 3.0);
        let scaled = reference.mapv(|v| 4.5 * v);
        let z = Tensor::randn(0.0f64, 1.0, (1, 6, 2), &Device::Cpu).unwrap();
        let h = Tensor::zeros((1, 6, 4), DType::F64, &Device::Cpu).unwrap();
        let a = refinement_loss(&z, &h, &h, &host_matrices_to_tensor(&[&unit_gram_host(&reference)], DType::F64).unwrap(), 1.0, 1.0).unwrap();
        let b = refinement_loss(&z, &h, &h, &host_matrices_to_tensor(&[&unit_gram_host(&scaled)], DType::F64).unwrap(), 1.0, 1.0).unwrap();
        assert!((a.gram - b.gram).abs() < 1e-12);
    }

    #[test]
    fn empty_dataset_is_config_error() {
        let err = train_refinement(&RefinementConfig::default(), &[], 0, "h", DType::F64).unwrap_err();
        assert!(matches!(err, PaeError::Config(_)));
    }

    #[test]
    fn impulse_blur_matches_direct_convolution() {
        let mut g = Array3::zeros((21, 21, 1));
        g[[10, 10, 0]] = 1.0;
        let sigma = 0.4 * 4.0;
        let out = gaussian_blur(&g, sigma);
        let r = (3.0 * sigma).ceil() as i64;
        let norm: f64 = (-r..=r)
            .flat_map(|i| (-r..=r).map(move |j| (-((i * i + j * j) as f64) / (2.0 * sigma * sigma)).exp()))
            .sum();
        for i in 0..21i64 {
            for j in 0..21i64 {
                let (di, dj) = (i - 10, j - 10);
                let expect = if di.abs() <= r && dj.abs() <= r {
                    (-((di * di + dj * dj) as f64) / (2.0 * sigma * sigma)).exp() / norm
                } else {
                    0.0
                };
                assert!((out[[i as usize, j as usize, 0]] - expect).abs() < 1e-12);
            }
        }
        assert!(out[[10, 10, 0]] < 0.1);

        let mut small = Array3::zeros((4, 4, 1));
        small[[1, 2, 0]] = 1.0;
        let refined = spatial_refine(&fmap(small.clone()), 32, 0.4, 4.0).unwrap().to_grid();
        let expect = resize_bilinear(&gaussian_blur(&resize_bilinear(&small, 32, 32), sigma), 4, 4);
        assert_eq!(refined, expect);
        assert!(refined[[1, 2, 0]] < 1.0 && refined[[1, 1, 0]] > 0.0 && refined[[2, 2, 0]] > 0.0);
    }

    // Host re-evaluation of the projector/deprojector stacks from raw weights.
    mod host {
        use ndarray::{s, Array1, Array2};

        use crate::nn::{ParamStore, LN_EPS};

        pub fn mat(ps: &ParamStore, name: &str, rows: usize, cols: usize) -> Array2<f64> {
            Array2::from_shape_vec((rows, cols), ps.values(name).unwrap()).unwrap()
        }

        pub fn vec(ps: &ParamStore, name: &str) -> Array1<f64> {
            Array1::from(ps.values(name).unwrap())
        }

        pub fn linear(ps: &ParamStore, name: &str, x: &Array2<f64>, out: usize) -> Array2<f64> {
            x.dot(&mat(ps, &format!("{name}.weight"), x.ncols(), out)) + vec(ps, &format!("{name}.bias"))
        }

        pub fn norm(ps: &ParamStore, name: &str, x: &Array2<f64>) -> Array2<f64> {
            let gain = vec(ps, &format!("{name}.gain"));
            let shift = vec(ps, &format!("{name}.shift"));
            let mut y = x.clone();
            for mut row in y.rows_mut() {
                let m = row.mean().unwrap();
                let v = row.mapv(|a| (a - m) * (a - m)).mean().unwrap();
                row.mapv_inplace(|a| (a - m) / (v + LN_EPS).sqrt());
                row.assign(&(&row * &gain + &shift));
            }
            y
        }

        pub fn attention(ps: &ParamStore, name: &str, x: &Array2<f64>, heads: usize) -> Array2<f64> {
            let w = x.ncols();
            let q = linear(ps, &format!("{name}.q"), x, w);
            let k = linear(ps, &format!("{name}.k"), x, w);
            let v = linear(ps, &format!("{name}.v"), x, w);
            let hd = w / heads;
            let mut mixed = Array2::zeros(x.dim());
            for h in 0..heads {
                let cols = s![.., h * hd..(h + 1) * hd];
                let mut sc = q.slice(cols).dot(&k.slice(cols).t()) / (hd as f64).sqrt();
                for mut row in sc.rows_mut() {
                    let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                    row.mapv_inplace(|a| (a - m).exp());
                    let z = row.sum();
                    row.mapv_inplace(|a| a / z);
                }
                mixed.slice_mut(cols).assign(&sc.dot(&v.slice(cols)));
            }
            linear(ps, &format!("{name}.out"), &mixed, w)
        }

        pub fn gelu(a: f64) -> f64 {
            0.5 * a * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (a + 0.044715 * a.powi(3))).tanh())
        }

        pub fn block(ps: &ParamStore, name: &str, x: &Array2<f64>, heads: usize) -> Array2<f64> {
            let w = x.ncols();
            let x = x + &attention(ps, &format!("{name}.attn"), &norm(ps, &format!("{name}.norm1"), x), heads);
            let h = linear(ps, &format!("{name}.mlp.fc1"), &norm(ps, &format!("{name}.norm2"), &x), 4 * w).mapv(gelu);
            &x + &linear(ps, &format!("{name}.mlp.fc2"), &h, w)
        }

        pub fn conv(ps: &ParamStore, name: &str, x: &Array2<f64>, grid: (usize, usize)) -> Array2<f64> {
            let c = x.ncols();
            let weight = ps.values(&format!("{name}.weight")).unwrap();
            let bias = vec(ps, &format!("{name}.bias"));
            let mut y = x.clone();
            for r in 0..grid.0 {
                for col in 0..grid.1 {
                    for o in 0..c {
                        let mut acc = bias[o];
                        for i in 0..c {
                            for dr in 0..3 {
                                for dc in 0..3 {
                                    let (rr, cc) = (r as i64 + dr as i64 - 1, col as i64 + dc as i64 - 1);
                                    if rr < 0 || cc < 0 || rr >= grid.0 as i64 || cc >= grid.1 as i64 {
                                        continue;
                                    }
                                    let t = rr as usize * grid.1 + cc as usize;
                                    acc += weight[((o * c + i) * 3 + dr) * 3 + dc] * x[[t, i]];
                                }
                            }
                        }
                        y[[r * grid.1 + col, o]] += acc;
                    }
                }
            }
            y
        }
    }

    #[test]
    fn tiny_forward_matches_host_reevaluation() {
        let cfg = RefinementConfig {
            latent_dim: 2,
            projector_width: 4,
            projector_depth: 1,
            decoder_depth: 1,
            decoder_hidden: 4,
            heads: 2,
            ..RefinementConfig::default()
        };
        let grid = (2, 2);
        let mut ps = ParamStore::new(DType::F64);
        let net = PriorNet::new(&mut ps, 7, PriorShapes::new(8, &cfg), grid).unwrap();
        // Non-trivial norm parameters so the affine part is exercised.
        for name in ps.names().map(str::to_string).collect::<Vec<_>>() {
            if name.ends_with(".gain") || name.ends_with(".bias") || name.ends_with(".shift") {
                let n = ps.values(&name).unwrap().len();
                let v: Vec<f64> = (0..n).map(|i| 0.9 + 0.05 * i as f64).collect();
                ps.set(&name, &Tensor::from_vec(v, n, &Device::Cpu).unwrap()).unwrap();
            }
        }
        let h = Array2::from_shape_fn((4, 8), |(i, j)| ((i * 8 + j) as f64 * 0.37).sin());
        let (z_t, h_hat) = net
            .forward(&host_matrices_to_tensor(&[&h], DType::F64).unwrap())
            .unwrap();

        let x = host::linear(&ps, "prior_projector.input", &h, 4);
        let x = host::block(&ps, "prior_projector.block0", &x, 2);
        let x = host::conv(&ps, "prior_projector.conv", &x, grid);
        let z_expect = host::linear(&ps, "prior_projector.output", &x, 2);
        let y = host::linear(&ps, "prior_deprojector.input", &z_expect, 4);
        let y = host::block(&ps, "prior_deprojector.block0", &y, 2);
        let h_expect = host::linear(&ps, "prior_deprojector.output", &y, 8);

        let z_t: Vec<Vec<f64>> = z_t.squeeze(0).unwrap().to_vec2().unwrap();
        let h_hat: Vec<Vec<f64>> = h_hat.squeeze(0).unwrap().to_vec2().unwrap();
        for i in 0..4 {
            for j in 0..2 {
                assert!((z_t[i][j] - z_expect[[i, j]]).abs() < 1e-10, "z[{i},{j}]");
            }
            for j in 0..8 {
                assert!((h_hat[i][j] - h_expect[[i, j]]).abs() < 1e-10, "h[{i},{j}]");
            }
        }
    }

    #[test]
    fn zero_steps_store_initial_outputs_and_runs_repeat() {
        let data: Vec<(String, FeatureMap)> = (0..3)
            .map(|i| {
                let g = Array3::from_shape_fn((2, 2, 6), |(r, c, k)| ((i * 31 + r * 7 + c * 3 + k) as f64 * 0.21).cos());
                (format!("img{i}"), fmap(g))
            })
            .collect();
        let mut cfg = RefinementConfig {
            latent_dim: 2,
            projector_width: 4,
            decoder_depth: 1,
            decoder_hidden: 4,
            heads: 2,
            upsample_size: 8,
            ..RefinementConfig::default()
        };
        cfg.optim.steps = 0;
        let (art, store) = train_refinement(&cfg, &data, 3, "h", DType::F64).unwrap();
        let (z, _) = art.net.forward(&features_to_tensor(&[&data[1].1], DType::F64).unwrap()).unwrap();
        let z: Vec<Vec<f64>> = z.squeeze(0).unwrap().to_vec2().unwrap();
        let stored = &store.get("img1").unwrap().z_t;
        for (i, row) in z.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                assert_eq!(*v, stored[[i, j]]);
            }
        }
        cfg.optim.steps = 5;
        cfg.optim.batch_size = 2;
        let a = train_refinement(&cfg, &data, 3, "h", DType::F64).unwrap().1;
        let b = train_refinement(&cfg, &data, 3, "h", DType::F64).unwrap().1;
        assert_eq!(a, b);
    }
}

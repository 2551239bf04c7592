//! The tokenizer: frozen features are modulated by pixel detail (DAM),
//! projected to a compact RMS-normalized latent, mapped back to feature
//! space and decoded to pixels.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{encode_image, images_to_tensor, Backbone, FeatureMap, ImageTensor};
use crate::error::{config_err, PaeError, Result};
use crate::harness::config::{RmsMode, RunConfig};
use crate::harness::train::lr_at;
use crate::losses::{
    mcr_loss, mcr_perturb, perceptual_backend, recon_loss, rms_tokens, scr_loss, ssr_loss,
    total_loss, LossComponents, LossReport, LossWeights, PatchDiscriminator, PerturbationSpec,
};
use crate::nn::{
    layer_norm, patchify, scalar, unpatchify, Block, CheckpointMeta, Linear, ParamStore, TokenNet,
    TokenNetShape, LN_EPS,
};
use crate::prior::{features_to_tensor, host_matrices_to_tensor, next_batch, PriorStore};
use crate::rng::{streams, substream};

/// Latent `[d, H′, W′]` on the RMS shell.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    pub z: Array3<f64>,
    pub rms_eps: f64,
}

impl LatentCode {
    pub fn channels(&self) -> usize {
        self.z.shape()[0]
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.z.shape()[1], self.z.shape()[2])
    }

    /// Token view `[H′·W′, d]`.
    pub fn tokens(&self) -> Array2<f64> {
        latent_to_tokens(&self.z)
    }

    /// Mean of z² over channels at every location.
    pub fn location_mean_squares(&self) -> Vec<f64> {
        let (d, h, w) = self.z.dim();
        let mut out = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                out.push((0..d).map(|k| self.z[[k, r, c]].powi(2)).sum::<f64>() / d as f64);
            }
        }
        out
    }

    /// Whether every non-zero location lies within `tol` of the unit RMS
    /// shell.
    pub fn on_shell(&self, tol: f64) -> bool {
        self.location_mean_squares()
            .iter()
            .all(|&m| m == 0.0 || (m - 1.0).abs() <= tol)
    }
}

pub fn latent_to_tokens(z: &Array3<f64>) -> Array2<f64> {
    let (d, h, w) = z.dim();
    Array2::from_shape_fn((h * w, d), |(t, k)| z[[k, t / w, t % w]])
}

pub fn tokens_to_latent(tokens: &Array2<f64>, grid: (usize, usize)) -> Result<Array3<f64>> {
    let (n, d) = tokens.dim();
    if n != grid.0 * grid.1 {
        return Err(config_err(format!("{n} tokens do not fill grid {grid:?}")));
    }
    Ok(Array3::from_shape_fn((d, grid.0, grid.1), |(k, r, c)| {
        tokens[[r * grid.1 + c, k]]
    }))
}

/// Divides each location of `z_tilde` (`[d, H′, W′]`) by the root of its
/// channel mean square plus `eps`. All-zero locations stay zero and are
/// reported.
pub fn rms_normalize(z_tilde: &Array3<f64>, eps: f64) -> Result<(LatentCode, Vec<(usize, usize)>)> {
    if eps < 0.0 {
        return Err(config_err("rms eps must be non-negative"));
    }
    if z_tilde.iter().any(|v| !v.is_finite()) {
        return Err(PaeError::Numeric("non-finite latent entry".into()));
    }
    let (d, h, w) = z_tilde.dim();
    let mut z = z_tilde.clone();
    let mut zero = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let ms = (0..d).map(|k| z_tilde[[k, r, c]].powi(2)).sum::<f64>() / d as f64;
            if ms == 0.0 {
                zero.push((r, c));
                continue;
            }
            let scale = (ms + eps).sqrt();
            for k in 0..d {
                z[[k, r, c]] /= scale;
            }
        }
    }
    if !zero.is_empty() {
        log::debug!("rms_normalize: {} all-zero locations", zero.len());
    }
    Ok((LatentCode { z, rms_eps: eps }, zero))
}

/// Global variant: one RMS over every entry of each sample, `[B, N, d]`.
pub fn rms_global(z: &Tensor, eps: f64) -> Result<Tensor> {
    let (b, _, _) = z.dims3()?;
    let ms = z.sqr()?.flatten_from(1)?.mean_keepdim(1)?.reshape((b, 1, 1))?;
    Ok(z.broadcast_div(&(ms + eps)?.sqrt()?)?)
}

// ---------------------------------------------------------------------------
// Detail-aware modulator

#[derive(Debug, Clone)]
pub struct Dam {
    pub pixel_embed: Linear,
    pub blocks: Vec<Block>,
    /// Zero-initialized, maps ΔH to the concatenated (γ, β).
    pub fusion: Linear,
    pub feature_dim: usize,
}

impl Dam {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        rng: &mut R,
        pixel_dim: usize,
        feature_dim: usize,
        width: usize,
        depth: usize,
        heads: usize,
    ) -> Result<Self> {
        let pixel_embed = Linear::new(ps, rng, "dam.pixel_embed", pixel_dim, width)?;
        let blocks = (0..depth)
            .map(|i| Block::new(ps, rng, &format!("dam.block{i}"), width, heads, Some(feature_dim)))
            .collect::<Result<Vec<_>>>()?;
        let fusion = Linear::zeros_no_bias(ps, "dam.fusion", width, 2 * feature_dim)?;
        Ok(Self {
            pixel_embed,
            blocks,
            fusion,
            feature_dim,
        })
    }

    /// Stack output ΔH for pixel tokens attending to the frozen features.
    pub fn delta(&self, h_vfm: &Tensor, pixel_tokens: &Tensor) -> Result<Tensor> {
        let mut h = self.pixel_embed.forward(pixel_tokens)?;
        for block in &self.blocks {
            h = block.forward(&h, Some(h_vfm))?;
        }
        Ok(h)
    }

    /// `LayerNorm(H ⊙ (1 + γ) + β)` with `(γ, β) = split(W·ΔH)`.
    pub fn forward(&self, h_vfm: &Tensor, pixel_tokens: &Tensor) -> Result<Tensor> {
        let (b, n, d) = h_vfm.dims3()?;
        let (pb, pn, _) = pixel_tokens.dims3()?;
        if (pb, pn) != (b, n) {
            return Err(config_err(format!(
                "pixel tokens {:?} do not align with feature grid {:?}",
                pixel_tokens.dims(),
                h_vfm.dims()
            )));
        }
        if d != self.feature_dim {
            return Err(config_err(format!("feature dim {d}, modulator expects {}", self.feature_dim)));
        }
        let gb = self.fusion.forward(&self.delta(h_vfm, pixel_tokens)?)?;
        let gamma = gb.narrow(2, 0, d)?;
        let beta = gb.narrow(2, d, d)?;
        modulate(h_vfm, &gamma, &beta)
    }
}

/// `LayerNorm(H ⊙ (1 + γ) + β)` over the channel axis.
pub fn modulate(h: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let pre = ((h * (gamma + 1.0)?)? + beta)?;
    layer_norm(&pre, LN_EPS)
}

// ---------------------------------------------------------------------------
// Full tokenizer

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenizerSpec {
    pub patch: usize,
    pub grid: (usize, usize),
    pub feature_dim: usize,
    pub latent_dim: usize,
    pub rms_eps: f64,
    pub rms_mode: RmsMode,
}

#[derive(Debug)]
pub struct Tokenizer {
    pub spec: TokenizerSpec,
    pub params: ParamStore,
    pub dam: Dam,
    pub projector: TokenNet,
    pub deprojector: TokenNet,
    pub decoder: TokenNet,
}

impl Tokenizer {
    pub fn new(cfg: &RunConfig, feature_dim: usize, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let t = &cfg.tokenizer;
        let patch = cfg.backbone.patch_size;
        let grid = (cfg.token_grid(), cfg.token_grid());
        let pixel_dim = 3 * patch * patch;
        let mut params = ParamStore::new(dtype);
        let mut rng = substream(cfg.seed, &format!("{}.tokenizer", streams::INIT));
        let dam = Dam::new(&mut params, &mut rng, pixel_dim, feature_dim, t.dam_width, t.dam_depth, t.heads)?;
        let projector = TokenNet::new(
            &mut params,
            &mut rng,
            "projector",
            TokenNetShape {
                input: feature_dim,
                width: t.projector_width,
                depth: t.projector_depth,
                heads: t.heads,
                output: t.latent_dim,
                conv: true,
            },
        )?;
        let deprojector = TokenNet::new(
            &mut params,
            &mut rng,
            "deprojector",
            TokenNetShape {
                input: t.latent_dim,
                width: t.deprojector_width,
                depth: t.deprojector_depth,
                heads: t.heads,
                output: feature_dim,
                conv: true,
            },
        )?;
        let decoder = TokenNet::new(
            &mut params,
            &mut rng,
            "decoder",
            TokenNetShape {
                input: feature_dim,
                width: t.decoder_width,
                depth: t.decoder_depth,
                heads: t.heads,
                output: pixel_dim,
                conv: false,
            },
        )?;
        Ok(Self {
            spec: TokenizerSpec {
                patch,
                grid,
                feature_dim,
                latent_dim: t.latent_dim,
                rms_eps: t.rms_eps,
                rms_mode: t.rms_mode,
            },
            params,
            dam,
            projector,
            deprojector,
            decoder,
        })
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn num_tokens(&self) -> usize {
        self.spec.grid.0 * self.spec.grid.1
    }

    fn normalize(&self, z: &Tensor) -> Result<Tensor> {
        match self.spec.rms_mode {
            RmsMode::PerLocation => rms_tokens(z, self.spec.rms_eps),
            RmsMode::Global => rms_global(z, self.spec.rms_eps),
        }
    }

    /// `H_vfm [B, N, D]`, images `[B, 3, H, W]` → pre-normalization `z̃`.
    pub fn project(&self, h_vfm: &Tensor, images: &Tensor) -> Result<Tensor> {
        let pixels = patchify(images, self.spec.patch)?;
        let h_z = self.dam.forward(h_vfm, &pixels)?;
        self.projector.forward(&h_z, self.spec.grid)
    }

    /// Latent tokens `[B, N, d]` on the RMS shell.
    pub fn encode_tokens(&self, h_vfm: &Tensor, images: &Tensor) -> Result<Tensor> {
        self.normalize(&self.project(h_vfm, images)?)
    }

    /// Latent tokens `[B, N, d]` to images `[B, 3, H, W]`.
    pub fn decode_tokens(&self, z: &Tensor) -> Result<Tensor> {
        let (_, n, d) = z.dims3()?;
        if n != self.num_tokens() || d != self.spec.latent_dim {
            return Err(config_err(format!(
                "latent {:?} does not match tokenizer ({} tokens x {} channels)",
                z.dims(),
                self.num_tokens(),
                self.spec.latent_dim
            )));
        }
        let h = self.deprojector.forward(z, self.spec.grid)?;
        let patches = self.decoder.forward(&h, self.spec.grid)?;
        unpatchify(&patches, self.spec.grid, self.spec.patch, 3)
    }

    pub fn encode(&self, image: &ImageTensor, backend: &dyn Backbone) -> Result<LatentCode> {
        let features = encode_image(image, backend)?;
        self.encode_features(image, &features)
    }

    pub fn encode_features(&self, image: &ImageTensor, features: &FeatureMap) -> Result<LatentCode> {
        if features.grid != self.spec.grid {
            return Err(config_err(format!(
                "feature grid {:?} differs from tokenizer grid {:?}",
                features.grid, self.spec.grid
            )));
        }
        let h = features_to_tensor(&[features], self.dtype())?;
        let x = images_to_tensor(&[image], &Device::Cpu)?.to_dtype(self.dtype())?;
        let z = self.encode_tokens(&h, &x)?;
        let tokens = tensor_to_array2(&z.squeeze(0)?)?;
        Ok(LatentCode {
            z: tokens_to_latent(&tokens, self.spec.grid)?,
            rms_eps: self.spec.rms_eps,
        })
    }

    /// Decodes to `[3, H, W]` without clamping.
    pub fn reconstruct(&self, z: &LatentCode) -> Result<Array3<f64>> {
        if z.grid() != self.spec.grid || z.channels() != self.spec.latent_dim {
            return Err(config_err(format!(
                "latent {:?} does not match tokenizer",
                z.z.shape()
            )));
        }
        let tokens = latent_tokens_tensor(&[z], self.dtype())?;
        let img = self.decode_tokens(&tokens)?.squeeze(0)?.to_dtype(DType::F64)?;
        let (c, h, w) = img.dims3()?;
        Array3::from_shape_vec((c, h, w), img.flatten_all()?.to_vec1()?)
            .map_err(|e| PaeError::Internal(e.to_string()))
    }

    pub fn save(&self, dir: &Path, meta: &CheckpointMeta) -> Result<()> {
        self.params.save(dir, meta)
    }

    pub fn load(&self, dir: &Path) -> Result<CheckpointMeta> {
        self.params.load(dir)
    }
}

impl crate::metrics::LatentDecoder for Tokenizer {
    fn decode(&self, z: &Tensor) -> Result<Tensor> {
        self.decode_tokens(&z.to_dtype(self.dtype())?)?
            .to_dtype(DType::F64)
            .map_err(Into::into)
    }
}

/// Stacks latents into `[B, N, d]` tokens.
pub fn latent_tokens_tensor(latents: &[&LatentCode], dtype: DType) -> Result<Tensor> {
    let mats: Vec<Array2<f64>> = latents.iter().map(|l| l.tokens()).collect();
    let refs: Vec<&Array2<f64>> = mats.iter().collect();
    host_matrices_to_tensor(&refs, dtype)
}

pub fn tensor_to_array2(t: &Tensor) -> Result<Array2<f64>> {
    let (r, c) = t.dims2()?;
    Array2::from_shape_vec((r, c), t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?)
        .map_err(|e| PaeError::Internal(e.to_string()))
}

// ---------------------------------------------------------------------------
// Training

#[derive(Debug, Clone)]
pub struct TrainItem {
    pub id: String,
    pub image: ImageTensor,
    pub features: FeatureMap,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TokenizerLog {
    pub steps: Vec<LossReport>,
}

impl TokenizerLog {
    pub fn component(&self, name: &str) -> Vec<f64> {
        self.steps
            .iter()
            .map(|r| r.components.get(name).copied().unwrap_or(0.0))
            .collect()
    }
}

pub fn loss_weights(cfg: &RunConfig) -> LossWeights {
    let l = &cfg.losses;
    LossWeights {
        lpips: l.lambda_lpips,
        gan: if l.gan_enabled { l.lambda_gan } else { 0.0 },
        ssr: l.lambda_ssr,
        mcr: l.lambda_mcr,
        scr: l.lambda_scr,
    }
}

/// Optimizes the tokenizer on `items` with the reconstruction objective plus
/// whichever regularizers carry non-zero weight. Regularizers need `priors`
/// covering every item id.
pub fn train_tokenizer(
    cfg: &RunConfig,
    items: &[TrainItem],
    priors: Option<&PriorStore>,
    dtype: DType,
) -> Result<(Tokenizer, TokenizerLog)> {
    let first = items.first().ok_or_else(|| config_err("tokenizer dataset is empty"))?;
    let tok = Tokenizer::new(cfg, first.features.dim(), dtype)?;
    let weights = loss_weights(cfg);
    let needs_priors = weights.ssr > 0.0 || weights.scr > 0.0;
    let prior_rows = if needs_priors {
        let store = priors.ok_or_else(|| config_err("structure/semantic regularizers need a prior store"))?;
        let rows = items
            .iter()
            .map(|it| {
                store
                    .get(&it.id)
                    .ok_or_else(|| config_err(format!("no prior for image `{}`", it.id)))
            })
            .collect::<Result<Vec<_>>>()?;
        Some(rows)
    } else {
        None
    };

    let perceptual = perceptual_backend(cfg.losses.perceptual);
    let perceptual = if cfg.losses.lambda_lpips > 0.0 || cfg.losses.lambda_mcr > 0.0 {
        Some(perceptual.as_ref())
    } else {
        None
    };
    let spec = PerturbationSpec::from_config(&cfg.perturbation)?;

    let mut disc_params = ParamStore::new(dtype);
    let discriminator = if cfg.losses.gan_enabled {
        let mut rng = substream(cfg.seed, &format!("{}.disc", streams::INIT));
        Some(PatchDiscriminator::new(&mut disc_params, &mut rng, 16)?)
    } else {
        None
    };

    let o = &cfg.tokenizer.optim;
    let adam = |vars| {
        AdamW::new(
            vars,
            ParamsAdamW {
                lr: o.learning_rate,
                beta1: o.beta1,
                beta2: o.beta2,
                eps: 1e-8,
                weight_decay: o.weight_decay,
            },
        )
    };
    let mut opt = adam(tok.params.vars())?;
    let mut disc_opt = if discriminator.is_some() { Some(adam(disc_params.vars())?) } else { None };
    let mut batch_rng = substream(cfg.seed, &format!("{}.tokenizer", streams::TRAIN));
    let mut perturb_rng = substream(cfg.seed, streams::PERTURBATION);
    let mut order = Vec::new();
    let mut log = TokenizerLog::default();

    for step in 0..o.steps {
        let batch = next_batch(&mut order, items.len(), o.batch_size, &mut batch_rng);
        let imgs: Vec<&ImageTensor> = batch.iter().map(|&i| &items[i].image).collect();
        let feats: Vec<&FeatureMap> = batch.iter().map(|&i| &items[i].features).collect();
        let x = images_to_tensor(&imgs, &Device::Cpu)?.to_dtype(dtype)?;
        let h = features_to_tensor(&feats, dtype)?;

        let z = tok.encode_tokens(&h, &x)?;
        let x_r = tok.decode_tokens(&z)?;
        let gan_active = discriminator.is_some() && step >= cfg.losses.gan_start_step;
        let disc = if gan_active { discriminator.as_ref() } else { None };
        let recon = recon_loss(&x, &x_r, weights.lpips, weights.gan, perceptual, disc)?;

        let ssr = if weights.ssr > 0.0 {
            let rows = prior_rows.as_ref().expect("priors checked above");
            let grams: Vec<&Array2<f64>> = batch.iter().map(|&i| &rows[i].gram_ref).collect();
            Some(ssr_loss(&z, &host_matrices_to_tensor(&grams, dtype)?, cfg.losses.ssr_convention)?)
        } else {
            None
        };
        let mcr = if weights.mcr > 0.0 {
            let (z_m, z_l, _) = mcr_perturb(&z, &spec, &mut perturb_rng, cfg.tokenizer.rms_eps)?;
            let x_m = tok.decode_tokens(&z_m)?;
            let x_l = tok.decode_tokens(&z_l)?;
            Some(mcr_loss(&x_r, &x_m, &x_l, perceptual, cfg.perturbation.design)?)
        } else {
            None
        };
        let scr = if weights.scr > 0.0 {
            let rows = prior_rows.as_ref().expect("priors checked above");
            let zt: Vec<&Array2<f64>> = batch.iter().map(|&i| &rows[i].z_t).collect();
            let z_t = host_matrices_to_tensor(&zt, dtype)?;
            let tg: Vec<f64> = batch.iter().flat_map(|&i| rows[i].z_tg.iter().copied()).collect();
            let z_tg = Tensor::from_vec(tg, (batch.len(), cfg.tokenizer.latent_dim), &Device::Cpu)?.to_dtype(dtype)?;
            let z_g = z.mean(1)?;
            Some(scr_loss(&z, &z_g, &z_t, &z_tg, cfg.losses.scr_scope)?)
        } else {
            None
        };

        let (total, report) = total_loss(&LossComponents { recon, ssr, mcr, scr }, &weights)?;
        if !report.total.is_finite() {
            return Err(PaeError::Numeric(format!("tokenizer loss diverged at step {step}")));
        }
        opt.set_learning_rate(lr_at(o, step));
        opt.backward_step(&total)?;

        if let (Some(d), Some(dopt)) = (discriminator.as_ref(), disc_opt.as_mut()) {
            if gan_active {
                let dl = d.discriminator_loss(&x, &x_r)?;
                dopt.set_learning_rate(lr_at(o, step));
                dopt.backward_step(&dl)?;
            }
        }
        log.steps.push(report);
    }
    Ok((tok, log))
}

/// Encodes a set of images with a trained tokenizer.
pub fn encode_all(tok: &Tokenizer, items: &[TrainItem]) -> Result<Vec<LatentCode>> {
    items
        .iter()
        .map(|it| tok.encode_features(&it.image, &it.features))
        .collect()
}

/// Mean absolute reconstruction error over a set of images.
pub fn reconstruction_error(tok: &Tokenizer, items: &[TrainItem]) -> Result<f64> {
    let mut total = 0.0;
    for it in items {
        let z = tok.encode_features(&it.image, &it.features)?;
        let xr = tok.reconstruct(&z)?;
        total += (&xr - it.image.pixels()).mapv(f64::abs).mean().unwrap_or(0.0);
    }
    Ok(total / items.len().max(1) as f64)
}

pub fn summarize(report: &LossReport) -> BTreeMap<String, f64> {
    let mut m = report.components.clone();
    m.insert("total".into(), report.total);
    m
}

pub fn check_scalar_finite(t: &Tensor) -> Result<f64> {
    let v = scalar(t)?;
    if !v.is_finite() {
        return Err(PaeError::Numeric("non-finite scalar".into()));
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rms_of_three_four() {
        let z = Array3::from_shape_vec((2, 1, 1), vec![3.0, 4.0]).unwrap();
        let (code, zero) = rms_normalize(&z, 0.0).unwrap();
        assert!(zero.is_empty());
        let v: Vec<f64> = code.z.iter().copied().collect();
        assert!((v[0] - 0.848528137423857).abs() < 1e-4);
        assert!((v[1] - 1.131370849898476).abs() < 1e-4);
        assert!((code.location_mean_squares()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rms_constant_and_zero_locations() {
        let mut z = Array3::zeros((4, 1, 2));
        for k in 0..4 {
            z[[k, 0, 0]] = -2.5;
        }
        let (code, zero) = rms_normalize(&z, 1e-6).unwrap();
        assert_eq!(zero, vec![(0, 1)]);
        for k in 0..4 {
            assert!((code.z[[k, 0, 0]] + 1.0).abs() < 1e-6);
            assert_eq!(code.z[[k, 0, 1]], 0.0);
        }
        assert!(code.on_shell(1e-3));
    }

    #[test]
    fn modulation_layer_norm_examples() {
        let h = Tensor::new(&[[[2.0f64, 4.0]]], &Device::Cpu).unwrap();
        let zero = Tensor::zeros((1, 1, 2), DType::F64, &Device::Cpu).unwrap();
        let half = Tensor::full(0.5f64, (1, 1, 2), &Device::Cpu).unwrap();
        for gamma in [&zero, &half] {
            let out: Vec<f64> = modulate(&h, gamma, &zero).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            assert!((out[0] + 1.0).abs() < 1e-6 && (out[1] - 1.0).abs() < 1e-6, "{out:?}");
        }
    }

    #[test]
    fn latent_token_layout_round_trip() {
        let z = Array3::from_shape_fn((3, 2, 4), |(k, r, c)| (k * 100 + r * 10 + c) as f64);
        let t = latent_to_tokens(&z);
        assert_eq!(t[[5, 2]], 211.0);
        assert_eq!(tokens_to_latent(&t, (2, 4)).unwrap(), z);
    }

    fn toy_image(seed: u64) -> ImageTensor {
        let mut rng = crate::rng::seeded(seed);
        ImageTensor::new(Array3::from_shape_fn((3, 32, 32), |_| rng.random::<f64>())).unwrap()
    }

    #[test]
    fn fresh_modulator_ignores_the_image() {
        let cfg = RunConfig::toy();
        let tok = Tokenizer::new(&cfg, 32, DType::F64).unwrap();
        let h = Tensor::randn(0.0f64, 1.0, (1, 64, 32), &Device::Cpu).unwrap();
        let x1 = images_to_tensor(&[&toy_image(1)], &Device::Cpu).unwrap();
        let x2 = images_to_tensor(&[&toy_image(2)], &Device::Cpu).unwrap();
        let p1 = patchify(&x1, 4).unwrap();
        let p2 = patchify(&x2, 4).unwrap();
        let a = tok.dam.forward(&h, &p1).unwrap().to_vec3::<f64>().unwrap();
        let b = tok.dam.forward(&h, &p2).unwrap().to_vec3::<f64>().unwrap();
        assert_eq!(a, b);
        assert_eq!(a, layer_norm(&h, LN_EPS).unwrap().to_vec3::<f64>().unwrap());
        assert!(tok.params.values("dam.fusion.weight").unwrap().iter().all(|&w| w == 0.0));
        let wrong = patchify(&images_to_tensor(&[&ImageTensor::zeros(16, 16)], &Device::Cpu).unwrap(), 4).unwrap();
        assert!(matches!(tok.dam.forward(&h, &wrong), Err(PaeError::Config(_))));
    }

    #[test]
    fn default_latent_shape_and_encode_contract() {
        let cfg = RunConfig::default();
        let tok = Tokenizer::new(&cfg, cfg.backbone.feature_dim, DType::F32).unwrap();
        let backbone = crate::backbone::SyntheticBackbone::new(0, 16, cfg.backbone.feature_dim).unwrap();
        let mut rng = crate::rng::seeded(3);
        let img = ImageTensor::new(Array3::from_shape_fn((3, 256, 256), |_| rng.random::<f64>())).unwrap();
        let z = tok.encode(&img, &backbone).unwrap();
        assert_eq!(z.z.dim(), (32, 16, 16));
        assert!(z.on_shell(1e-3));
        assert_eq!(z, tok.encode(&img, &backbone).unwrap());
        let x = tok.reconstruct(&z).unwrap();
        assert_eq!(x.dim(), (3, 256, 256));
        assert_eq!(x, tok.reconstruct(&z).unwrap());
        let bad = LatentCode { z: Array3::zeros((16, 16, 16)), rms_eps: 1e-6 };
        assert!(matches!(tok.reconstruct(&bad), Err(PaeError::Config(_))));
    }

    #[test]
    fn zeroed_decoder_gives_constant_output() {
        let cfg = RunConfig::toy();
        let tok = Tokenizer::new(&cfg, 32, DType::F64).unwrap();
        for name in tok.params.names().filter(|n| n.starts_with("decoder.")).map(str::to_string).collect::<Vec<_>>() {
            let v = tok.params.get(&name).unwrap();
            tok.params.set(&name, &v.as_tensor().zeros_like().unwrap()).unwrap();
        }
        let mut rng = crate::rng::seeded(5);
        let z = Array3::from_shape_fn((8, 8, 8), |_| rng.random::<f64>() - 0.5);
        let (code, _) = rms_normalize(&z, 1e-6).unwrap();
        let x = tok.reconstruct(&code).unwrap();
        assert!(x.iter().all(|&v| v == x[[0, 0, 0]]));
    }

    #[test]
    fn recon_gradient_reaches_projector_weights() {
        let cfg = RunConfig::toy();
        let tok = Tokenizer::new(&cfg, 32, DType::F64).unwrap();
        let backbone = crate::backbone::SyntheticBackbone::new(0, 4, 32).unwrap();
        let img = toy_image(9);
        let h = features_to_tensor(&[&encode_image(&img, &backbone).unwrap()], DType::F64).unwrap();
        let x = images_to_tensor(&[&img], &Device::Cpu).unwrap();
        let loss = || -> f64 {
            let xh = tok.decode_tokens(&tok.encode_tokens(&h, &x).unwrap()).unwrap();
            scalar(&(xh - &x).unwrap().abs().unwrap().mean_all().unwrap()).unwrap()
        };
        let var = tok.params.get("projector.input.weight").unwrap().clone();
        let xh = tok.decode_tokens(&tok.encode_tokens(&h, &x).unwrap()).unwrap();
        let grads = (xh - &x).unwrap().abs().unwrap().mean_all().unwrap().backward().unwrap();
        let g = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let base = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let shape = var.as_tensor().shape().clone();
        let step = 1e-4;
        for idx in [0usize, 37, 301, 777] {
            let mut v = base.clone();
            v[idx] += step;
            var.set(&Tensor::from_vec(v.clone(), shape.clone(), &Device::Cpu).unwrap()).unwrap();
            let up = loss();
            v[idx] -= 2.0 * step;
            var.set(&Tensor::from_vec(v, shape.clone(), &Device::Cpu).unwrap()).unwrap();
            let down = loss();
            var.set(&Tensor::from_vec(base.clone(), shape.clone(), &Device::Cpu).unwrap()).unwrap();
            let fd = (up - down) / (2.0 * step);
            let rel = (fd - g[idx]).abs() / fd.abs().max(g[idx].abs()).max(1e-8);
            assert!(rel < 1e-3, "weight {idx}: analytic {} vs numeric {fd}", g[idx]);
        }
    }
}

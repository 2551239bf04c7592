//! Reconstruction objective and the three prior-alignment regularizers.
//!
//! All losses are built from differentiable candle ops so that one backward
//! pass through [`total_loss`] trains the tokenizer. Batched inputs use the
//! token layout `[B, N, C]`.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor, D};
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, PaeError, Result};
use crate::harness::config::{
    AngleSampling, DirectionSharing, GramConvention, PerceptualKind, PerturbationConfig,
    PerturbationDesign, ScrScope,
};
use crate::nn::{scalar, ParamStore};

/// Guard used wherever a vector is divided by its own norm.
pub const NORM_EPS: f64 = 1e-12;

// ---------------------------------------------------------------------------
// Perceptual backends

pub trait Perceptual: Send + Sync {
    fn name(&self) -> &str;

    /// Distance for each batch element of two `[B, 3, H, W]` images, `[B]`.
    fn per_sample(&self, a: &Tensor, b: &Tensor) -> Result<Tensor>;

    /// Batch mean of [`Perceptual::per_sample`].
    fn distance(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        Ok(self.per_sample(a, b)?.mean_all()?)
    }
}

/// Mean absolute pixel difference.
#[derive(Debug, Clone, Copy, Default)]
pub struct MeanAbsDiff;

impl Perceptual for MeanAbsDiff {
    fn name(&self) -> &str {
        "mean-abs"
    }

    fn per_sample(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        check_same_shape(a, b)?;
        Ok((a - b)?.abs()?.flatten_from(1)?.mean(1)?)
    }
}

/// Multi-scale intensity and gradient distance: at each average-pooling
/// scale, compares pooled intensities and their horizontal/vertical finite
/// differences. A fixed, parameter-free stand-in for a learned metric.
#[derive(Debug, Clone)]
pub struct MultiScaleDistance {
    pub scales: Vec<usize>,
}

impl Default for MultiScaleDistance {
    fn default() -> Self {
        Self { scales: vec![1, 2, 4] }
    }
}

impl Perceptual for MultiScaleDistance {
    fn name(&self) -> &str {
        "multi-scale"
    }

    fn per_sample(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        check_same_shape(a, b)?;
        let (_, _, h, w) = a.dims4()?;
        let diff = (a - b)?;
        let mut total: Option<Tensor> = None;
        let mut used = 0usize;
        for &s in &self.scales {
            if s == 0 || h % s != 0 || w % s != 0 || h / s < 2 || w / s < 2 {
                continue;
            }
            let p = if s == 1 { diff.clone() } else { diff.avg_pool2d(s)? };
            let (_, _, ph, pw) = p.dims4()?;
            let dx = (p.narrow(3, 1, pw - 1)? - p.narrow(3, 0, pw - 1)?)?;
            let dy = (p.narrow(2, 1, ph - 1)? - p.narrow(2, 0, ph - 1)?)?;
            let term = ((p.abs()?.flatten_from(1)?.mean(1)?
                + dx.abs()?.flatten_from(1)?.mean(1)?)?
                + dy.abs()?.flatten_from(1)?.mean(1)?)?;
            total = Some(match total {
                Some(t) => (t + term)?,
                None => term,
            });
            used += 1;
        }
        match total {
            Some(t) => Ok((t / used as f64)?),
            None => MeanAbsDiff.per_sample(a, b),
        }
    }
}

pub fn perceptual_backend(kind: PerceptualKind) -> Box<dyn Perceptual> {
    match kind {
        PerceptualKind::MeanAbs => Box::new(MeanAbsDiff),
        PerceptualKind::MultiScale => Box::new(MultiScaleDistance::default()),
    }
}

fn check_same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(config_err(format!(
            "shape mismatch: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    let s = scalar(&t.to_dtype(DType::F64)?.sum_all()?)?;
    if !s.is_finite() {
        return Err(PaeError::Numeric(format!("non-finite value in {what}")));
    }
    Ok(())
}

fn mean_abs(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.abs()?.mean_all()?)
}

// ---------------------------------------------------------------------------
// Adversarial term

/// Small convolutional patch discriminator producing a logit map.
#[derive(Debug, Clone)]
pub struct PatchDiscriminator {
    layers: Vec<(Tensor, Tensor, usize, usize)>,
}

impl PatchDiscriminator {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamStore, rng: &mut R, width: usize) -> Result<Self> {
        let specs = [
            (3, width, 4, 2, 1),
            (width, 2 * width, 4, 2, 1),
            (2 * width, 1, 3, 1, 1),
        ];
        let mut layers = Vec::new();
        for (i, (cin, cout, k, stride, pad)) in specs.into_iter().enumerate() {
            let std = 1.0 / ((cin * k * k) as f64).sqrt();
            let w = ps.normal(rng, &format!("disc.conv{i}.weight"), &[cout, cin, k, k], std)?;
            let b = ps.constant(&format!("disc.conv{i}.bias"), &[cout], 0.0)?;
            layers.push((w, b, stride, pad));
        }
        Ok(Self { layers })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, (w, b, stride, pad)) in self.layers.iter().enumerate() {
            let c = w.dim(0)?;
            h = h
                .conv2d(w, *pad, *stride, 1, 1)?
                .broadcast_add(&b.reshape((1, c, 1, 1))?)?;
            if i != last {
                h = h.maximum(&(&h * 0.2)?)?;
            }
        }
        Ok(h)
    }

    /// Non-saturating generator loss `mean(softplus(-D(x̂)))`.
    pub fn generator_loss(&self, fake: &Tensor) -> Result<Tensor> {
        softplus(&self.forward(fake)?.neg()?)?.mean_all().map_err(Into::into)
    }

    /// Hinge loss for the discriminator update; `fake` is detached here.
    pub fn discriminator_loss(&self, real: &Tensor, fake: &Tensor) -> Result<Tensor> {
        let real_logits = self.forward(real)?;
        let fake_logits = self.forward(&fake.detach())?;
        let lr = (1.0 - real_logits)?.relu()?.mean_all()?;
        let lf = (fake_logits + 1.0)?.relu()?.mean_all()?;
        Ok((lr + lf)?)
    }
}

fn softplus(x: &Tensor) -> Result<Tensor> {
    let pos = x.relu()?;
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((pos + tail)?)
}

// ---------------------------------------------------------------------------
// Reconstruction

#[derive(Debug, Clone)]
pub struct ReconTerms {
    pub l1: Tensor,
    pub perceptual: Tensor,
    pub gan: Tensor,
    pub total: Tensor,
}

/// `L1 + λ_lpips·perceptual + λ_gan·adversarial`. A missing backend or
/// discriminator contributes an exact zero.
pub fn recon_loss(
    x: &Tensor,
    x_hat: &Tensor,
    lambda_lpips: f64,
    lambda_gan: f64,
    perceptual: Option<&dyn Perceptual>,
    discriminator: Option<&PatchDiscriminator>,
) -> Result<ReconTerms> {
    check_same_shape(x, x_hat)?;
    check_finite(x, "target image")?;
    check_finite(x_hat, "reconstruction")?;
    let zero = Tensor::zeros((), x_hat.dtype(), x_hat.device())?;
    let l1 = mean_abs(x_hat, x)?;
    let perceptual = match perceptual {
        Some(p) => p.distance(x_hat, x)?,
        None => zero.clone(),
    };
    let gan = match discriminator {
        Some(d) => d.generator_loss(x_hat)?,
        None => zero,
    };
    let total = ((&l1 + (&perceptual * lambda_lpips)?)? + (&gan * lambda_gan)?)?;
    Ok(ReconTerms {
        l1,
        perceptual,
        gan,
        total,
    })
}

// ---------------------------------------------------------------------------
// Gram matrices and SSR

/// Divides each token (last axis) by its ℓ2 norm; zero tokens stay zero.
pub fn unit_tokens(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(D::Minus1)? + NORM_EPS * NORM_EPS)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

/// Token Gram matrix `[B, N, N]` of `[B, N, C]` tokens.
pub fn gram(x: &Tensor, normalize: bool) -> Result<Tensor> {
    let t = if normalize { unit_tokens(x)? } else { x.clone() };
    Ok(t.matmul(&t.transpose(1, 2)?.contiguous()?)?)
}

/// Gram matrix of unit-normalized rows of `tokens` (`[N, C]`); rows with zero
/// norm produce zero rows and columns.
pub fn unit_gram_host(tokens: &Array2<f64>) -> Array2<f64> {
    let mut unit = tokens.clone();
    for mut row in unit.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row.mapv_inplace(|v| v / n);
        }
    }
    unit.dot(&unit.t())
}

/// Batch mean of `‖Gram(z) − reference‖²_F`, divided by N² and computed on
/// unit-normalized tokens under [`GramConvention::Normalized`].
pub fn gram_alignment(z: &Tensor, reference: &Tensor, convention: GramConvention) -> Result<Tensor> {
    let (b, n, _) = z.dims3()?;
    if reference.dims() != [b, n, n] {
        return Err(config_err(format!(
            "reference Gram {:?} does not match {n} tokens x batch {b}",
            reference.dims()
        )));
    }
    let g = gram(z, convention == GramConvention::Normalized)?;
    let sq = (g - reference)?.sqr()?.sum_all()?;
    let per_image = (sq / b as f64)?;
    Ok(match convention {
        GramConvention::Normalized => (per_image / (n * n) as f64)?,
        GramConvention::Literal => per_image,
    })
}

/// Spatial structure regularizer against fixed reference Gram statistics.
pub fn ssr_loss(z: &Tensor, gram_ref: &Tensor, convention: GramConvention) -> Result<Tensor> {
    gram_alignment(z, gram_ref, convention)
}

// ---------------------------------------------------------------------------
// MCR

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationSpec {
    pub angle_small: f64,
    pub angle_large: f64,
    pub sampling: AngleSampling,
    pub direction: DirectionSharing,
}

impl PerturbationSpec {
    pub fn new(
        angle_small: f64,
        angle_large: f64,
        sampling: AngleSampling,
        direction: DirectionSharing,
    ) -> Result<Self> {
        if !(0.0 < angle_small && angle_small < angle_large && angle_large <= 180.0) {
            return Err(config_err(format!(
                "need 0 < small < large <= 180 degrees, got {angle_small} / {angle_large}"
            )));
        }
        Ok(Self {
            angle_small,
            angle_large,
            sampling,
            direction,
        })
    }

    pub fn from_config(c: &PerturbationConfig) -> Result<Self> {
        Self::new(c.angle_small, c.angle_large, c.sampling, c.direction)
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R, max_deg: f64) -> f64 {
        let frac = match self.sampling {
            AngleSampling::Fixed => 1.0,
            // (0, 1]
            AngleSampling::Uniform => 1.0 - rng.random::<f64>(),
        };
        (frac * max_deg).to_radians()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PerturbationMeta {
    /// Per-sample medium-level angle in radians.
    pub angles_medium: Vec<f64>,
    pub angles_large: Vec<f64>,
    /// `(sample, token)` pairs left unperturbed because their norm is zero.
    pub zero_locations: Vec<(usize, usize)>,
}

/// Per-location RMS normalization over the channel axis of `[B, N, C]`.
pub fn rms_tokens(z: &Tensor, eps: f64) -> Result<Tensor> {
    let ms = z.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(z.broadcast_div(&(ms + eps)?.sqrt()?)?)
}

/// Rotates every token of `z` (`[B, N, C]`) toward `direction` (broadcastable
/// to `z`) by the per-sample angle `theta[b]` (radians), keeping its norm,
/// then re-applies RMS normalization. Zero tokens are returned unchanged.
pub fn rotate_toward(z: &Tensor, direction: &Tensor, theta: &[f64], eps: f64) -> Result<(Tensor, Vec<(usize, usize)>)> {
    let (b, n, _) = z.dims3()?;
    if theta.len() != b {
        return Err(config_err(format!("{} angles for batch of {b}", theta.len())));
    }
    let dev = z.device();
    let dtype = z.dtype();
    let norms_host: Vec<Vec<f64>> = z
        .to_dtype(DType::F64)?
        .sqr()?
        .sum(D::Minus1)?
        .sqrt()?
        .to_vec2()?;
    let mut zero = Vec::new();
    let mut mask = Vec::with_capacity(b * n);
    for (i, row) in norms_host.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if v > 0.0 {
                mask.push(1.0);
            } else {
                mask.push(0.0);
                zero.push((i, j));
            }
        }
    }
    let mask = Tensor::from_vec(mask, (b, n, 1), dev)?.to_dtype(dtype)?;

    let norm = (z.sqr()?.sum_keepdim(D::Minus1)? + NORM_EPS * NORM_EPS)?.sqrt()?;
    let unit = z.broadcast_div(&norm)?;
    let u = direction.broadcast_as(z.shape())?;
    let along = (&u * &unit)?.sum_keepdim(D::Minus1)?;
    let perp = (u - unit.broadcast_mul(&along)?)?;
    let perp = unit_tokens(&perp)?;
    let cos = Tensor::from_vec(theta.iter().map(|t| t.cos()).collect(), (b, 1, 1), dev)?.to_dtype(dtype)?;
    let sin = Tensor::from_vec(theta.iter().map(|t| t.sin()).collect(), (b, 1, 1), dev)?.to_dtype(dtype)?;
    let rotated = (z.broadcast_mul(&cos)? + perp.broadcast_mul(&norm)?.broadcast_mul(&sin)?)?;
    let rotated = rms_tokens(&rotated, eps)?;
    let keep = (1.0 - &mask)?;
    let out = (rotated.broadcast_mul(&mask)? + z.broadcast_mul(&keep)?)?;
    Ok((out, zero))
}

/// Builds the medium and large perturbations of `z` (`[B, N, C]`) along one
/// random direction per sample (or per location), with angles drawn from
/// `spec`. Gradients flow through `z`.
pub fn mcr_perturb<R: Rng + ?Sized>(
    z: &Tensor,
    spec: &PerturbationSpec,
    rng: &mut R,
    eps: f64,
) -> Result<(Tensor, Tensor, PerturbationMeta)> {
    let (b, n, c) = z.dims3()?;
    let dir_shape = match spec.direction {
        DirectionSharing::PerSample => (b, 1, c),
        DirectionSharing::PerLocation => (b, n, c),
    };
    let count = dir_shape.0 * dir_shape.1 * dir_shape.2;
    let dir: Vec<f64> = (0..count).map(|_| rng.sample(StandardNormal)).collect();
    let dir = Tensor::from_vec(dir, dir_shape, z.device())?.to_dtype(z.dtype())?;
    let mut medium = Vec::with_capacity(b);
    let mut large = Vec::with_capacity(b);
    for _ in 0..b {
        medium.push(spec.draw(rng, spec.angle_small));
        large.push(spec.draw(rng, spec.angle_large));
    }
    let (z_m, zero) = rotate_toward(z, &dir, &medium, eps)?;
    let (z_l, _) = rotate_toward(z, &dir, &large, eps)?;
    if !zero.is_empty() {
        log::warn!("mcr_perturb: {} zero-norm locations left unperturbed", zero.len());
    }
    Ok((
        z_m,
        z_l,
        PerturbationMeta {
            angles_medium: medium,
            angles_large: large,
            zero_locations: zero,
        },
    ))
}

/// Cascaded consistency between neighbouring perturbation levels, with
/// stop-gradient on the less perturbed decode of each pair.
pub fn mcr_loss(
    x_r: &Tensor,
    x_m: &Tensor,
    x_l: &Tensor,
    perceptual: Option<&dyn Perceptual>,
    design: PerturbationDesign,
) -> Result<Tensor> {
    check_same_shape(x_r, x_m)?;
    check_same_shape(x_r, x_l)?;
    let pair = |moving: &Tensor, anchor: &Tensor| -> Result<Tensor> {
        let anchor = anchor.detach();
        let mut t = mean_abs(moving, &anchor)?;
        if let Some(p) = perceptual {
            t = (t + p.distance(moving, &anchor)?)?;
        }
        Ok(t)
    };
    match design {
        PerturbationDesign::Cascaded => Ok((pair(x_m, x_r)? + pair(x_l, x_m)?)?),
        PerturbationDesign::Small => pair(x_m, x_r),
        PerturbationDesign::Large => pair(x_l, x_r),
    }
}

// ---------------------------------------------------------------------------
// SCR

fn cosine_last(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((unit_tokens(a)? * unit_tokens(b)?)?.sum(D::Minus1)?)
}

/// Semantic consistency between tokenizer tokens `z` (`[B, N, d]`) with pool
/// `z_g` (`[B, d]`) and the refined targets. Batch-averaged.
pub fn scr_loss(
    z: &Tensor,
    z_g: &Tensor,
    z_t: &Tensor,
    z_tg: &Tensor,
    scope: ScrScope,
) -> Result<Tensor> {
    check_same_shape(z, z_t)?;
    check_same_shape(z_g, z_tg)?;
    let pooled = (1.0 - cosine_last(z_tg, z_g)?)?.mean_all()?;
    match scope {
        ScrScope::PooledOnly => Ok(pooled),
        ScrScope::PooledAndTokens => {
            let tokens = (1.0 - cosine_last(z_t, z)?)?.mean_all()?;
            Ok((pooled + tokens)?)
        }
    }
}

// ---------------------------------------------------------------------------
// Combination

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lpips: f64,
    pub gan: f64,
    pub ssr: f64,
    pub mcr: f64,
    pub scr: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lpips: 1.0,
            gan: 0.5,
            ssr: 0.2,
            mcr: 0.5,
            scr: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub components: BTreeMap<String, f64>,
    pub weights: BTreeMap<String, f64>,
}

impl LossReport {
    /// Σ weight·component.
    pub fn weighted_sum(&self) -> f64 {
        self.components
            .iter()
            .map(|(k, v)| self.weights.get(k).copied().unwrap_or(0.0) * v)
            .sum()
    }
}

/// Component tensors for one batch. The recon terms are always required;
/// a regularizer may be absent only when its weight is zero.
#[derive(Debug, Clone)]
pub struct LossComponents {
    pub recon: ReconTerms,
    pub ssr: Option<Tensor>,
    pub mcr: Option<Tensor>,
    pub scr: Option<Tensor>,
}

/// `L_recon + λ_ssr·L_SSR + λ_mcr·L_MCR + λ_scr·L_SCR`.
pub fn total_loss(parts: &LossComponents, w: &LossWeights) -> Result<(Tensor, LossReport)> {
    let mut total = parts.recon.total.clone();
    let mut components = BTreeMap::new();
    components.insert("l1".to_string(), scalar(&parts.recon.l1)?);
    components.insert("lpips".to_string(), scalar(&parts.recon.perceptual)?);
    components.insert("gan".to_string(), scalar(&parts.recon.gan)?);
    let mut weights = BTreeMap::new();
    weights.insert("l1".to_string(), 1.0);
    weights.insert("lpips".to_string(), w.lpips);
    weights.insert("gan".to_string(), w.gan);
    for (name, weight, term) in [
        ("ssr", w.ssr, &parts.ssr),
        ("mcr", w.mcr, &parts.mcr),
        ("scr", w.scr, &parts.scr),
    ] {
        weights.insert(name.to_string(), weight);
        match term {
            Some(t) => {
                components.insert(name.to_string(), scalar(t)?);
                if weight != 0.0 {
                    total = (total + (t * weight)?)?;
                }
            }
            None if weight > 0.0 => {
                return Err(config_err(format!(
                    "loss component `{name}` missing while its weight is {weight}"
                )))
            }
            None => {
                components.insert(name.to_string(), 0.0);
            }
        }
    }
    let report = LossReport {
        total: scalar(&total)?,
        components,
        weights,
    };
    Ok((total, report))
}

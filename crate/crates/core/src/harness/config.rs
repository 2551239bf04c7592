//! Run configuration.
//!
//! Serialized as TOML. Every section falls back to its documented defaults
//! and unknown keys are rejected, so a mistyped loss weight fails loudly
//! instead of silently training with the default.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config_err, PaeError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub backbone: BackboneConfig,
    pub refinement: RefinementConfig,
    pub tokenizer: TokenizerConfig,
    pub losses: LossConfig,
    pub perturbation: PerturbationConfig,
    pub metrics: MetricsConfig,
    pub generator: GeneratorConfig,
    pub sampler: SamplerSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub image_size: usize,
    pub train_images: usize,
    pub heldout_images: usize,
    pub num_classes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneKind {
    Synthetic,
    FeatureCache,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub patch_size: usize,
    pub feature_dim: usize,
    pub seed: u64,
    /// Directory of feature-cache files; only read by the `feature-cache` kind.
    pub cache_dir: String,
    pub id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub min_learning_rate: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefinementConfig {
    pub latent_dim: usize,
    pub projector_width: usize,
    pub projector_depth: usize,
    pub decoder_depth: usize,
    pub decoder_hidden: usize,
    pub heads: usize,
    pub upsample_size: usize,
    pub lowpass_strength: f64,
    pub sigma_max: f64,
    pub lambda_rep: f64,
    pub lambda_gram: f64,
    pub optim: OptimConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RmsMode {
    PerLocation,
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerConfig {
    pub latent_dim: usize,
    pub latent_size: usize,
    pub dam_depth: usize,
    pub dam_width: usize,
    pub heads: usize,
    pub projector_width: usize,
    pub projector_depth: usize,
    pub deprojector_width: usize,
    pub deprojector_depth: usize,
    pub decoder_width: usize,
    pub decoder_depth: usize,
    pub rms_eps: f64,
    pub rms_mode: RmsMode,
    pub optim: OptimConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerceptualKind {
    MeanAbs,
    MultiScale,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GramConvention {
    /// Unit-normalized tokens, squared Frobenius distance divided by N².
    Normalized,
    /// Raw tokens, undivided squared Frobenius distance.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScrScope {
    PooledAndTokens,
    PooledOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_lpips: f64,
    pub lambda_gan: f64,
    pub lambda_ssr: f64,
    pub lambda_mcr: f64,
    pub lambda_scr: f64,
    pub perceptual: PerceptualKind,
    pub gan_enabled: bool,
    pub gan_start_step: usize,
    pub ssr_convention: GramConvention,
    pub scr_scope: ScrScope,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AngleSampling {
    Fixed,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbationDesign {
    Cascaded,
    Small,
    Large,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DirectionSharing {
    PerSample,
    PerLocation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbationConfig {
    pub angle_small: f64,
    pub angle_large: f64,
    pub sampling: AngleSampling,
    pub design: PerturbationDesign,
    pub direction: DirectionSharing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpectrumMode {
    Singular,
    Variance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub sigma: f64,
    pub lpc_scales: Vec<f64>,
    pub lpc_directions: usize,
    pub lpc_samples: usize,
    pub gsq_classes: usize,
    pub gsq_subsets: usize,
    pub kmeans_restarts: usize,
    pub erank_spectrum: SpectrumMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub label_dropout: f64,
    pub train_time_shift: f64,
    pub optim: OptimConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerMode {
    /// SDE without guidance, ODE when guidance is active.
    Auto,
    Ode,
    Sde,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IntervalMode {
    /// Guidance active for warped t >= interval (t = 1 is data).
    Late,
    /// Guidance active for warped t <= interval.
    Early,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSettings {
    pub steps: usize,
    pub time_shift: f64,
    pub cfg_scale: f64,
    pub cfg_interval: f64,
    pub interval_mode: IntervalMode,
    pub mode: SamplerMode,
    pub sde_noise: f64,
    pub num_samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            backbone: BackboneConfig::default(),
            refinement: RefinementConfig::default(),
            tokenizer: TokenizerConfig::default(),
            losses: LossConfig::default(),
            perturbation: PerturbationConfig::default(),
            metrics: MetricsConfig::default(),
            generator: GeneratorConfig::default(),
            sampler: SamplerSettings::default(),
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            image_size: 256,
            train_images: 64,
            heldout_images: 64,
            num_classes: 10,
        }
    }
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            kind: BackboneKind::Synthetic,
            patch_size: 16,
            feature_dim: 64,
            seed: 0,
            cache_dir: String::new(),
            id: "synthetic".into(),
        }
    }
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 8,
            learning_rate: 2e-4,
            min_learning_rate: 2e-5,
            warmup_steps: 0,
            beta1: 0.9,
            beta2: 0.98,
            weight_decay: 0.0,
        }
    }
}

impl Default for RefinementConfig {
    fn default() -> Self {
        Self {
            latent_dim: 32,
            projector_width: 256,
            projector_depth: 1,
            decoder_depth: 4,
            decoder_hidden: 1024,
            heads: 4,
            upsample_size: 256,
            lowpass_strength: 0.4,
            sigma_max: 4.0,
            lambda_rep: 1.0,
            lambda_gram: 1.0,
            optim: OptimConfig::default(),
        }
    }
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            latent_dim: 32,
            latent_size: 16,
            dam_depth: 6,
            dam_width: 256,
            heads: 4,
            projector_width: 256,
            projector_depth: 1,
            deprojector_width: 256,
            deprojector_depth: 2,
            decoder_width: 256,
            decoder_depth: 4,
            rms_eps: 1e-6,
            rms_mode: RmsMode::PerLocation,
            optim: OptimConfig::default(),
        }
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_lpips: 1.0,
            lambda_gan: 0.5,
            lambda_ssr: 0.2,
            lambda_mcr: 0.5,
            lambda_scr: 1.0,
            perceptual: PerceptualKind::MeanAbs,
            gan_enabled: false,
            gan_start_step: 0,
            ssr_convention: GramConvention::Normalized,
            scr_scope: ScrScope::PooledAndTokens,
        }
    }
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        Self {
            angle_small: 42.5,
            angle_large: 85.0,
            sampling: AngleSampling::Uniform,
            design: PerturbationDesign::Cascaded,
            direction: DirectionSharing::PerSample,
        }
    }
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            sigma: 0.1,
            lpc_scales: vec![0.1, 0.5, 1.0, 2.0],
            lpc_directions: 8,
            lpc_samples: 256,
            gsq_classes: 10,
            gsq_subsets: 5,
            kmeans_restarts: 10,
            erank_spectrum: SpectrumMode::Singular,
        }
    }
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            depth: 6,
            width: 256,
            heads: 4,
            label_dropout: 0.1,
            train_time_shift: 0.7,
            optim: OptimConfig {
                steps: 500,
                batch_size: 8,
                learning_rate: 2e-4,
                min_learning_rate: 2e-4,
                warmup_steps: 0,
                beta1: 0.9,
                beta2: 0.95,
                weight_decay: 0.0,
            },
        }
    }
}

impl Default for SamplerSettings {
    fn default() -> Self {
        Self {
            steps: 250,
            time_shift: 0.4,
            cfg_scale: 3.3,
            cfg_interval: 0.3,
            interval_mode: IntervalMode::Late,
            mode: SamplerMode::Auto,
            sde_noise: 1.0,
            num_samples: 16,
        }
    }
}

impl RunConfig {
    /// Laptop-scale preset used by the end-to-end toy run: 32×32 images,
    /// 4-pixel patches, an 8×8×8 latent, and narrow networks.
    pub fn toy() -> Self {
        let mut c = Self::default();
        c.data = DataConfig {
            image_size: 32,
            train_images: 64,
            heldout_images: 64,
            num_classes: 4,
        };
        c.backbone.patch_size = 4;
        c.backbone.feature_dim = 32;
        c.refinement = RefinementConfig {
            latent_dim: 8,
            projector_width: 32,
            projector_depth: 1,
            decoder_depth: 4,
            decoder_hidden: 32,
            heads: 2,
            upsample_size: 32,
            optim: OptimConfig {
                steps: 200,
                batch_size: 8,
                learning_rate: 2e-3,
                min_learning_rate: 2e-4,
                warmup_steps: 10,
                ..OptimConfig::default()
            },
            ..RefinementConfig::default()
        };
        c.tokenizer = TokenizerConfig {
            latent_dim: 8,
            latent_size: 8,
            dam_depth: 2,
            dam_width: 32,
            heads: 2,
            projector_width: 32,
            projector_depth: 1,
            deprojector_width: 32,
            deprojector_depth: 1,
            decoder_width: 64,
            decoder_depth: 2,
            optim: OptimConfig {
                steps: 600,
                batch_size: 8,
                learning_rate: 2e-3,
                min_learning_rate: 2e-4,
                warmup_steps: 20,
                ..OptimConfig::default()
            },
            ..TokenizerConfig::default()
        };
        c.metrics.lpc_samples = 16;
        c.metrics.gsq_classes = 4;
        c.generator = GeneratorConfig {
            depth: 2,
            width: 64,
            heads: 2,
            optim: OptimConfig {
                steps: 300,
                batch_size: 16,
                learning_rate: 1e-3,
                min_learning_rate: 1e-3,
                warmup_steps: 0,
                beta1: 0.9,
                beta2: 0.95,
                weight_decay: 0.0,
            },
            ..GeneratorConfig::default()
        };
        c.sampler.steps = 32;
        c.sampler.num_samples = 16;
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default()),
            "toy" => Ok(Self::toy()),
            other => Err(config_err(format!("unknown preset `{other}` (expected default|toy)"))),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| PaeError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| PaeError::Config(e.to_string()))
    }

    /// Hex SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> Result<String> {
        let text = self.to_toml()?;
        Ok(hex::encode(Sha256::digest(text.as_bytes())))
    }

    pub fn token_grid(&self) -> usize {
        self.data.image_size / self.backbone.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        let b = &self.backbone;
        // TOML integers are signed.
        for (name, seed) in [("seed", self.seed), ("backbone.seed", b.seed)] {
            if seed > i64::MAX as u64 {
                return Err(config_err(format!("{name} {seed} exceeds {}", i64::MAX)));
            }
        }
        if b.patch_size == 0 || d.image_size % b.patch_size != 0 {
            return Err(config_err(format!(
                "image size {} is not divisible by patch size {}",
                d.image_size, b.patch_size
            )));
        }
        if self.token_grid() != self.tokenizer.latent_size {
            return Err(config_err(format!(
                "token grid {} does not match latent size {}",
                self.token_grid(),
                self.tokenizer.latent_size
            )));
        }
        if d.num_classes == 0 {
            return Err(config_err("num_classes must be positive"));
        }
        let r = &self.refinement;
        if !(0.0..=1.0).contains(&r.lowpass_strength) {
            return Err(config_err(format!(
                "low-pass strength {} outside [0, 1]",
                r.lowpass_strength
            )));
        }
        if r.upsample_size < self.token_grid() {
            return Err(config_err(format!(
                "upsample size {} below latent resolution {}",
                r.upsample_size,
                self.token_grid()
            )));
        }
        if r.latent_dim != self.tokenizer.latent_dim {
            return Err(config_err(format!(
                "prior latent dim {} differs from tokenizer latent dim {}",
                r.latent_dim, self.tokenizer.latent_dim
            )));
        }
        for (name, width, heads) in [
            ("refinement.projector_width", r.projector_width, r.heads),
            ("refinement.decoder_hidden", r.decoder_hidden, r.heads),
            ("tokenizer.dam_width", self.tokenizer.dam_width, self.tokenizer.heads),
            ("tokenizer.projector_width", self.tokenizer.projector_width, self.tokenizer.heads),
            ("tokenizer.deprojector_width", self.tokenizer.deprojector_width, self.tokenizer.heads),
            ("tokenizer.decoder_width", self.tokenizer.decoder_width, self.tokenizer.heads),
            ("generator.width", self.generator.width, self.generator.heads),
        ] {
            if heads == 0 || width % heads != 0 {
                return Err(config_err(format!("{name} = {width} not divisible by {heads} heads")));
            }
        }
        if self.tokenizer.rms_eps <= 0.0 {
            return Err(config_err("rms_eps must be positive"));
        }
        let p = &self.perturbation;
        if !(0.0 < p.angle_small && p.angle_small < p.angle_large && p.angle_large <= 180.0) {
            return Err(config_err(format!(
                "perturbation angles must satisfy 0 < small < large <= 180, got {} / {}",
                p.angle_small, p.angle_large
            )));
        }
        let l = &self.losses;
        for (name, v) in [
            ("lambda_lpips", l.lambda_lpips),
            ("lambda_gan", l.lambda_gan),
            ("lambda_ssr", l.lambda_ssr),
            ("lambda_mcr", l.lambda_mcr),
            ("lambda_scr", l.lambda_scr),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(config_err(format!("{name} must be a finite non-negative weight")));
            }
        }
        let m = &self.metrics;
        if m.sigma <= 0.0 {
            return Err(config_err("metrics.sigma must be positive"));
        }
        if m.lpc_scales.is_empty() || m.lpc_scales.iter().any(|&s| s <= 0.0) {
            return Err(config_err("metrics.lpc_scales must be non-empty and positive"));
        }
        let s = &self.sampler;
        if s.steps == 0 {
            return Err(config_err("sampler.steps must be at least 1"));
        }
        if s.time_shift <= 0.0 || self.generator.train_time_shift <= 0.0 {
            return Err(config_err("time shifts must be positive"));
        }
        if !(0.0..=1.0).contains(&s.cfg_interval) {
            return Err(config_err("sampler.cfg_interval must lie in [0, 1]"));
        }
        if s.cfg_scale < 0.0 {
            return Err(config_err("sampler.cfg_scale must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.generator.label_dropout) {
            return Err(config_err("generator.label_dropout must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
        RunConfig::toy().validate().unwrap();
    }

    #[test]
    fn toml_round_trip() {
        for cfg in [RunConfig::default(), RunConfig::toy()] {
            let text = cfg.to_toml().unwrap();
            let back = RunConfig::from_toml(&text).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(back.to_toml().unwrap(), text);
        }
    }

    #[test]
    fn seeds_must_fit_toml_integers() {
        let mut cfg = RunConfig::toy();
        cfg.seed = i64::MAX as u64;
        RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        cfg.seed += 1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml("[losses]\nlambda_sr = 0.3\n").unwrap_err();
        assert!(err.to_string().contains("lambda_sr"), "{err}");
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg = RunConfig::from_toml("seed = 9\n[losses]\nlambda_ssr = 0.05\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.losses.lambda_ssr, 0.05);
        assert_eq!(cfg.losses.lambda_mcr, 0.5);
        assert_eq!(cfg.tokenizer.dam_depth, 6);
    }

    #[test]
    fn rejects_bad_geometry() {
        let mut cfg = RunConfig::default();
        cfg.data.image_size = 250;
        assert!(matches!(cfg.validate(), Err(PaeError::Config(_))));
        let mut cfg = RunConfig::default();
        cfg.perturbation.angle_small = 90.0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.refinement.lowpass_strength = 1.5;
        assert!(cfg.validate().is_err());
    }
}

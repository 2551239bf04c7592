//! Toy flow-matching transformer over tokenizer latents, with time-shifted
//! Euler sampling and interval-limited classifier-free guidance.
//!
//! Time runs from noise at `t = 0` to data at `t = 1`; the interpolant is
//! `z_t = (1 − t)·z0 + t·z1` and the regression target is `z1 − z0`.

use candle_core::{DType, Device, Tensor, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{config_err, PaeError, Result};
use crate::harness::config::{GeneratorConfig, IntervalMode, SamplerMode, SamplerSettings};
use crate::harness::train::lr_at;
use crate::nn::{layer_norm, scalar, Attention, Linear, Mlp, ParamStore, LN_EPS};
use crate::prior::{host_matrices_to_tensor, next_batch};
use crate::rng::{streams, substream};
use crate::tokenizer::{rms_normalize, tokens_to_latent, LatentCode};

/// `t′ = s·t / (1 + (s − 1)·t)`, with the endpoints pinned to 0 and 1.
pub fn time_shift(t: f64, s: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    if t >= 1.0 {
        return 1.0;
    }
    s * t / (1.0 + (s - 1.0) * t)
}

/// `steps + 1` warped times from 0 to 1.
pub fn time_grid(steps: usize, shift: f64) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(config_err("sampler needs at least one step"));
    }
    if !(shift > 0.0) {
        return Err(config_err(format!("time shift must be positive, got {shift}")));
    }
    Ok((0..=steps).map(|i| time_shift(i as f64 / steps as f64, shift)).collect())
}

/// Whether guidance applies at warped time `t`.
pub fn guidance_active(t: f64, interval: f64, mode: IntervalMode) -> bool {
    match mode {
        IntervalMode::Late => t >= interval,
        IntervalMode::Early => t <= interval,
    }
}

/// `v_u + w·(v_c − v_u)` inside the guidance interval, `v_c` outside. With
/// `w = 1` the conditional velocity is returned untouched.
pub fn cfg_velocity(v_cond: &Tensor, v_uncond: &Tensor, w: f64, t: f64, interval: f64, mode: IntervalMode) -> Result<Tensor> {
    if v_cond.dims() != v_uncond.dims() {
        return Err(config_err(format!(
            "velocity shapes differ: {:?} vs {:?}",
            v_cond.dims(),
            v_uncond.dims()
        )));
    }
    if w == 1.0 || !guidance_active(t, interval, mode) {
        return Ok(v_cond.clone());
    }
    Ok((v_uncond + ((v_cond - v_uncond)? * w)?)?)
}

/// Velocity field over latent tokens `[B, N, d]`. `None` labels select the
/// null class.
pub trait VelocityModel {
    fn velocity(&self, z: &Tensor, t: &[f64], labels: &[Option<usize>]) -> Result<Tensor>;
}

// ---------------------------------------------------------------------------
// Transformer

#[derive(Debug, Clone)]
struct AdaBlock {
    attn: Attention,
    mlp: Mlp,
    ada: Linear,
}

fn zero_linear(ps: &mut ParamStore, name: &str, input: usize, output: usize) -> Result<Linear> {
    Ok(Linear {
        weight: ps.constant(&format!("{name}.weight"), &[input, output], 0.0)?,
        bias: Some(ps.constant(&format!("{name}.bias"), &[output], 0.0)?),
    })
}

/// `x·(1 + scale) + shift` with per-sample `[B, C]` modulation.
fn modulate(x: &Tensor, shift: &Tensor, scale: &Tensor) -> Result<Tensor> {
    Ok(x
        .broadcast_mul(&(scale.unsqueeze(1)? + 1.0)?)?
        .broadcast_add(&shift.unsqueeze(1)?)?)
}

pub const TIME_FREQUENCIES: usize = 32;

/// Sinusoidal embedding of `1000·t`, `[B, 2·TIME_FREQUENCIES]`.
pub fn timestep_embedding(t: &[f64]) -> Vec<f64> {
    let half = TIME_FREQUENCIES;
    let mut out = Vec::with_capacity(t.len() * 2 * half);
    for &ti in t {
        let x = ti * 1000.0;
        let freqs = (0..half).map(|i| (-(10000f64).ln() * i as f64 / half as f64).exp());
        let (cos, sin): (Vec<f64>, Vec<f64>) = freqs.map(|f| ((x * f).cos(), (x * f).sin())).unzip();
        out.extend(cos);
        out.extend(sin);
    }
    out
}

/// Class-conditional transformer with adaptive-norm conditioning whose
/// modulation and output layers start at zero.
#[derive(Debug)]
pub struct Generator {
    pub params: ParamStore,
    pub num_classes: usize,
    pub num_tokens: usize,
    pub channels: usize,
    input: Linear,
    pos: Tensor,
    classes: Tensor,
    time1: Linear,
    time2: Linear,
    blocks: Vec<AdaBlock>,
    final_ada: Linear,
    output: Linear,
}

impl Generator {
    pub fn new(cfg: &GeneratorConfig, num_tokens: usize, channels: usize, num_classes: usize, seed: u64, dtype: DType) -> Result<Self> {
        let w = cfg.width;
        if cfg.heads == 0 || w % cfg.heads != 0 {
            return Err(config_err(format!("width {w} not divisible by {} heads", cfg.heads)));
        }
        let mut ps = ParamStore::new(dtype);
        let mut rng = substream(seed, &format!("{}.generator", streams::INIT));
        let input = Linear::new(&mut ps, &mut rng, "gen.input", channels, w)?;
        let pos = ps.normal(&mut rng, "gen.pos", &[num_tokens, w], 0.02)?;
        let classes = ps.normal(&mut rng, "gen.classes", &[num_classes + 1, w], 0.02)?;
        let time1 = Linear::new(&mut ps, &mut rng, "gen.time1", 2 * TIME_FREQUENCIES, w)?;
        let time2 = Linear::new(&mut ps, &mut rng, "gen.time2", w, w)?;
        let blocks = (0..cfg.depth)
            .map(|i| {
                Ok(AdaBlock {
                    attn: Attention::new(&mut ps, &mut rng, &format!("gen.block{i}.attn"), w, w, cfg.heads)?,
                    mlp: Mlp::new(&mut ps, &mut rng, &format!("gen.block{i}.mlp"), w)?,
                    ada: zero_linear(&mut ps, &format!("gen.block{i}.ada"), w, 6 * w)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let final_ada = zero_linear(&mut ps, "gen.final_ada", w, 2 * w)?;
        let output = zero_linear(&mut ps, "gen.output", w, channels)?;
        Ok(Self {
            params: ps,
            num_classes,
            num_tokens,
            channels,
            input,
            pos,
            classes,
            time1,
            time2,
            blocks,
            final_ada,
            output,
        })
    }

    pub fn null_class(&self) -> usize {
        self.num_classes
    }

    fn class_ids(&self, labels: &[Option<usize>]) -> Result<Tensor> {
        let ids = labels
            .iter()
            .map(|l| match l {
                Some(c) if *c < self.num_classes => Ok(*c as u32),
                Some(c) => Err(config_err(format!("label {c} outside {} classes", self.num_classes))),
                None => Ok(self.num_classes as u32),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::from_vec(ids, labels.len(), &Device::Cpu)?)
    }

    /// Conditioning vector `[B, w]`.
    pub fn condition(&self, t: &[f64], labels: &[Option<usize>]) -> Result<Tensor> {
        let dtype = self.params.dtype();
        let temb = Tensor::from_vec(timestep_embedding(t), (t.len(), 2 * TIME_FREQUENCIES), &Device::Cpu)?.to_dtype(dtype)?;
        let temb = self.time2.forward(&candle_nn::ops::silu(&self.time1.forward(&temb)?)?)?;
        let cemb = self.classes.index_select(&self.class_ids(labels)?, 0)?;
        Ok((temb + cemb)?)
    }

    pub fn forward(&self, z: &Tensor, t: &[f64], labels: &[Option<usize>]) -> Result<Tensor> {
        let (b, n, d) = z.dims3()?;
        if n != self.num_tokens || d != self.channels {
            return Err(config_err(format!(
                "latent {:?} does not match generator ({} tokens x {} channels)",
                z.dims(),
                self.num_tokens,
                self.channels
            )));
        }
        if t.len() != b || labels.len() != b {
            return Err(config_err("time and label counts must equal the batch size"));
        }
        let c = candle_nn::ops::silu(&self.condition(t, labels)?)?;
        let mut x = self.input.forward(&z.to_dtype(self.params.dtype())?)?.broadcast_add(&self.pos)?;
        for blk in &self.blocks {
            let m = blk.ada.forward(&c)?.chunk(6, D::Minus1)?;
            let h = modulate(&layer_norm(&x, LN_EPS)?, &m[0], &m[1])?;
            x = (&x + blk.attn.forward(&h, &h)?.broadcast_mul(&m[2].unsqueeze(1)?)?)?;
            let h = modulate(&layer_norm(&x, LN_EPS)?, &m[3], &m[4])?;
            x = (&x + blk.mlp.forward(&h)?.broadcast_mul(&m[5].unsqueeze(1)?)?)?;
        }
        let m = self.final_ada.forward(&c)?.chunk(2, D::Minus1)?;
        let h = modulate(&layer_norm(&x, LN_EPS)?, &m[0], &m[1])?;
        self.output.forward(&h)
    }
}

impl VelocityModel for Generator {
    fn velocity(&self, z: &Tensor, t: &[f64], labels: &[Option<usize>]) -> Result<Tensor> {
        self.forward(z, t, labels)
    }
}

// ---------------------------------------------------------------------------
// Training

/// Mean squared error between a predicted velocity and `z1 − z0`.
pub fn flow_mse(pred: &Tensor, z1: &Tensor, z0: &Tensor) -> Result<Tensor> {
    Ok((pred - (z1 - z0)?)?.sqr()?.mean_all()?)
}

/// Flow-matching loss at raw times `t` (warped by `shift` before use).
pub fn flow_loss(
    model: &dyn VelocityModel,
    z1: &Tensor,
    labels: &[Option<usize>],
    t: &[f64],
    z0: &Tensor,
    shift: f64,
) -> Result<Tensor> {
    let (b, _, _) = z1.dims3()?;
    if t.len() != b {
        return Err(config_err(format!("{} times for batch of {b}", t.len())));
    }
    let warped: Vec<f64> = t.iter().map(|&ti| time_shift(ti, shift)).collect();
    if let Some(bad) = warped.iter().find(|w| !(0.0..=1.0).contains(*w)) {
        return Err(PaeError::Internal(format!("warped time {bad} left [0, 1]")));
    }
    let tt = Tensor::from_vec(warped.clone(), (b, 1, 1), z1.device())?.to_dtype(z1.dtype())?;
    let zt = (z0.broadcast_mul(&(1.0 - &tt)?)? + z1.broadcast_mul(&tt)?)?;
    let pred = model.velocity(&zt, &warped, labels)?;
    flow_mse(&pred, z1, z0)
}

pub fn gaussian_tensor<R: Rng + ?Sized>(rng: &mut R, shape: (usize, usize, usize), dtype: DType) -> Result<Tensor> {
    let n = shape.0 * shape.1 * shape.2;
    let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GeneratorLog {
    pub losses: Vec<f64>,
}

/// Trains a generator on latents with integer class labels. Labels are
/// dropped to the null class with probability `label_dropout`.
pub fn train_generator(
    cfg: &GeneratorConfig,
    latents: &[LatentCode],
    labels: &[usize],
    num_classes: usize,
    seed: u64,
    dtype: DType,
) -> Result<(Generator, GeneratorLog)> {
    let first = latents.first().ok_or_else(|| config_err("generator dataset is empty"))?;
    if latents.len() != labels.len() {
        return Err(config_err(format!("{} latents but {} labels", latents.len(), labels.len())));
    }
    let (rows, cols) = first.grid();
    let n = rows * cols;
    let d = first.channels();
    let model = Generator::new(cfg, n, d, num_classes, seed, dtype)?;
    let tokens: Vec<Array2<f64>> = latents.iter().map(|l| l.tokens()).collect();
    let o = &cfg.optim;
    let mut opt = AdamW::new(
        model.params.vars(),
        ParamsAdamW {
            lr: o.learning_rate,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: 1e-8,
            weight_decay: o.weight_decay,
        },
    )?;
    let mut batch_rng = substream(seed, &format!("{}.generator", streams::TRAIN));
    let mut noise_rng = substream(seed, &format!("{}.generator.noise", streams::TRAIN));
    let mut order = Vec::new();
    let mut log = GeneratorLog::default();
    for step in 0..o.steps {
        let batch = next_batch(&mut order, tokens.len(), o.batch_size, &mut batch_rng);
        let mats: Vec<&Array2<f64>> = batch.iter().map(|&i| &tokens[i]).collect();
        let z1 = host_matrices_to_tensor(&mats, dtype)?;
        let z0 = gaussian_tensor(&mut noise_rng, (batch.len(), n, d), dtype)?;
        let t: Vec<f64> = batch.iter().map(|_| noise_rng.random::<f64>()).collect();
        let y: Vec<Option<usize>> = batch
            .iter()
            .map(|&i| if noise_rng.random::<f64>() < cfg.label_dropout { None } else { Some(labels[i]) })
            .collect();
        let loss = flow_loss(&model, &z1, &y, &t, &z0, cfg.train_time_shift)?;
        let value = scalar(&loss)?;
        if !value.is_finite() {
            return Err(PaeError::Numeric(format!("flow loss diverged at step {step}")));
        }
        opt.set_learning_rate(lr_at(o, step));
        opt.backward_step(&loss)?;
        log.losses.push(value);
    }
    Ok((model, log))
}

// ---------------------------------------------------------------------------
// Sampling

/// Integration scheme chosen for a sampler configuration: the stochastic
/// sampler without guidance, the deterministic one with guidance.
pub fn resolve_mode(s: &SamplerSettings) -> Result<SamplerMode> {
    Ok(match s.mode {
        SamplerMode::Auto if s.cfg_scale == 1.0 => SamplerMode::Sde,
        SamplerMode::Auto => SamplerMode::Ode,
        SamplerMode::Sde if s.cfg_scale != 1.0 => {
            return Err(config_err("the stochastic sampler runs without guidance; use cfg_scale = 1 or ode mode"));
        }
        m => m,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatentShape {
    pub grid: (usize, usize),
    pub channels: usize,
}

/// Integrates from Gaussian noise at `t = 0` to `t = 1` and returns the raw
/// endpoint tokens `[B, N, d]`.
pub fn integrate(model: &dyn VelocityModel, labels: &[usize], shape: LatentShape, s: &SamplerSettings, seed: u64) -> Result<Tensor> {
    if labels.is_empty() {
        return Err(config_err("nothing to sample"));
    }
    let mode = resolve_mode(s)?;
    let grid = time_grid(s.steps, s.time_shift)?;
    let b = labels.len();
    let n = shape.grid.0 * shape.grid.1;
    let mut rng = substream(seed, streams::SAMPLER);
    let mut z = gaussian_tensor(&mut rng, (b, n, shape.channels), DType::F64)?;
    let cond: Vec<Option<usize>> = labels.iter().map(|&l| Some(l)).collect();
    let null = vec![None; b];
    for k in 0..s.steps {
        let (t, dt) = (grid[k], grid[k + 1] - grid[k]);
        let ts = vec![t; b];
        let v_c = model.velocity(&z, &ts, &cond)?.to_dtype(DType::F64)?;
        let v = if s.cfg_scale != 1.0 && guidance_active(t, s.cfg_interval, s.interval_mode) {
            let v_u = model.velocity(&z, &ts, &null)?.to_dtype(DType::F64)?;
            cfg_velocity(&v_c, &v_u, s.cfg_scale, t, s.cfg_interval, s.interval_mode)?
        } else {
            v_c
        };
        let last = k + 1 == s.steps;
        z = if mode == SamplerMode::Sde && !last && s.sde_noise > 0.0 {
            let eta = s.sde_noise;
            let drift = (&v - ((&z - (&v * t)?)? * eta)?)?;
            let std = (2.0 * eta * (1.0 - t) * dt).sqrt();
            let noise = gaussian_tensor(&mut rng, (b, n, shape.channels), DType::F64)?;
            ((&z + (drift * dt)?)? + (noise * std)?)?
        } else {
            (&z + (v * dt)?)?
        };
    }
    Ok(z)
}

/// Samples latents for `labels` and projects them onto the RMS shell.
pub fn sample(
    model: &dyn VelocityModel,
    labels: &[usize],
    shape: LatentShape,
    s: &SamplerSettings,
    seed: u64,
    rms_eps: f64,
) -> Result<Vec<LatentCode>> {
    let z = integrate(model, labels, shape, s, seed)?;
    (0..labels.len())
        .map(|i| {
            let tok = z.get(i)?;
            let (n, d) = tok.dims2()?;
            let host = Array2::from_shape_vec((n, d), tok.flatten_all()?.to_vec1::<f64>()?)
                .map_err(|e| PaeError::Internal(e.to_string()))?;
            Ok(rms_normalize(&tokens_to_latent(&host, shape.grid)?, rms_eps)?.0)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warp_values() {
        assert!((time_shift(0.5, 0.7) - 0.35 / 0.85).abs() < 1e-15);
        assert!((time_shift(0.5, 0.7) - 0.4118).abs() < 1e-4);
        let g = time_grid(7, 0.4).unwrap();
        assert_eq!((g[0], g[7]), (0.0, 1.0));
        assert!(g.windows(2).all(|w| w[1] > w[0]));
        assert!(time_grid(0, 0.4).is_err());
    }

    #[test]
    fn cfg_examples() {
        let dev = Device::Cpu;
        let vc = Tensor::new(&[1.0f64, -2.0], &dev).unwrap();
        let vu = Tensor::new(&[0.0f64, 0.0], &dev).unwrap();
        let late = IntervalMode::Late;
        let g: Vec<f64> = cfg_velocity(&vc, &vu, 3.3, 0.5, 0.3, late).unwrap().to_vec1().unwrap();
        assert!((g[0] - 3.3).abs() < 1e-15);
        let outside: Vec<f64> = cfg_velocity(&vc, &vu, 3.3, 0.1, 0.3, late).unwrap().to_vec1().unwrap();
        assert_eq!(outside, vec![1.0, -2.0]);
        let zero: Vec<f64> = cfg_velocity(&vc, &vu, 0.0, 0.9, 0.3, late).unwrap().to_vec1().unwrap();
        assert_eq!(zero, vec![0.0, 0.0]);
        let early: Vec<f64> = cfg_velocity(&vc, &vu, 2.0, 0.1, 0.3, IntervalMode::Early).unwrap().to_vec1().unwrap();
        assert_eq!(early, vec![2.0, -4.0]);
    }

    #[test]
    fn mode_resolution() {
        let mut s = SamplerSettings::default();
        assert_eq!(resolve_mode(&s).unwrap(), SamplerMode::Ode);
        s.cfg_scale = 1.0;
        assert_eq!(resolve_mode(&s).unwrap(), SamplerMode::Sde);
        s.mode = SamplerMode::Sde;
        s.cfg_scale = 2.0;
        assert!(resolve_mode(&s).is_err());
    }

    #[test]
    fn zero_init_generator_outputs_zero_and_null_class_exists() {
        let cfg = GeneratorConfig {
            depth: 1,
            width: 16,
            heads: 2,
            ..GeneratorConfig::default()
        };
        let g = Generator::new(&cfg, 4, 3, 2, 0, DType::F64).unwrap();
        assert_eq!(g.null_class(), 2);
        let z = Tensor::ones((2, 4, 3), DType::F64, &Device::Cpu).unwrap();
        let v = g.forward(&z, &[0.1, 0.9], &[Some(1), None]).unwrap();
        assert_eq!(v.abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap(), 0.0);
        assert!(g.forward(&z, &[0.1, 0.9], &[Some(2), None]).is_err());
    }

    struct ToData(Tensor);

    impl VelocityModel for ToData {
        fn velocity(&self, z: &Tensor, t: &[f64], _: &[Option<usize>]) -> Result<Tensor> {
            Ok(((&self.0 - z)? / (1.0 - t[0]))?)
        }
    }

    struct Counting {
        nulls: std::cell::Cell<usize>,
    }

    impl VelocityModel for Counting {
        fn velocity(&self, z: &Tensor, t: &[f64], labels: &[Option<usize>]) -> Result<Tensor> {
            if labels.iter().any(Option::is_none) {
                self.nulls.set(self.nulls.get() + 1);
            }
            Ok(((z * -0.5)? + t[0])?)
        }
    }

    fn ode(steps: usize) -> SamplerSettings {
        SamplerSettings {
            steps,
            mode: SamplerMode::Ode,
            ..SamplerSettings::default()
        }
    }

    #[test]
    fn straight_field_is_integrated_exactly_at_any_resolution() {
        let shape = LatentShape { grid: (2, 2), channels: 3 };
        let target = Tensor::from_vec((0..24).map(|i| (i as f64 * 0.7).sin()).collect(), (2, 4, 3), &Device::Cpu).unwrap();
        let model = ToData(target.clone());
        let a = integrate(&model, &[0, 1], shape, &ode(8), 5).unwrap();
        let b = integrate(&model, &[0, 1], shape, &ode(16), 5).unwrap();
        let err = |x: &Tensor| (x - &target).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(err(&a) < 1e-12 && err(&b) < 1e-12);
    }

    #[test]
    fn unit_guidance_never_queries_the_null_branch() {
        let shape = LatentShape { grid: (2, 2), channels: 2 };
        let model = Counting { nulls: 0.into() };
        let mut s = ode(6);
        s.cfg_scale = 1.0;
        let guided = integrate(&model, &[0, 1], shape, &s, 9).unwrap();
        assert_eq!(model.nulls.get(), 0);
        s.cfg_scale = 3.3;
        let _ = integrate(&model, &[0, 1], shape, &s, 9).unwrap();
        assert!(model.nulls.get() > 0);

        let v_c = Tensor::randn(0.0f64, 1.0, (3, 5), &Device::Cpu).unwrap();
        let v_u = Tensor::randn(0.0f64, 1.0, (3, 5), &Device::Cpu).unwrap();
        let out = cfg_velocity(&v_c, &v_u, 1.0, 0.9, 0.3, IntervalMode::Late).unwrap();
        assert_eq!(out.to_vec2::<f64>().unwrap(), v_c.to_vec2::<f64>().unwrap());
        let plain = integrate(&model, &[0, 1], shape, &ode(6), 9).unwrap();
        assert_eq!(guided.to_vec3::<f64>().unwrap(), plain.to_vec3::<f64>().unwrap());
    }

    #[test]
    fn sampling_is_deterministic_and_on_shell() {
        let cfg = GeneratorConfig {
            depth: 1,
            width: 16,
            heads: 2,
            ..GeneratorConfig::default()
        };
        let g = Generator::new(&cfg, 4, 3, 2, 1, DType::F64).unwrap();
        let shape = LatentShape { grid: (2, 2), channels: 3 };
        for mode in [SamplerMode::Ode, SamplerMode::Sde] {
            let s = SamplerSettings { steps: 5, mode, cfg_scale: 1.0, ..SamplerSettings::default() };
            let a = sample(&g, &[0, 1, 1], shape, &s, 4, 1e-6).unwrap();
            let b = sample(&g, &[0, 1, 1], shape, &s, 4, 1e-6).unwrap();
            assert_eq!(a, b);
            assert!(a.iter().all(|z| z.on_shell(1e-3)));
        }
        assert!(integrate(&g, &[0], shape, &ode(0), 4).is_err());
    }

    #[test]
    fn flow_loss_algebra() {
        struct Fixed(Tensor);
        impl VelocityModel for Fixed {
            fn velocity(&self, _: &Tensor, _: &[f64], _: &[Option<usize>]) -> Result<Tensor> {
                Ok(self.0.clone())
            }
        }
        let dev = Device::Cpu;
        let z1 = Tensor::randn(0.0f64, 1.0, (2, 4, 3), &dev).unwrap();
        let z0 = Tensor::randn(0.0f64, 1.0, (2, 4, 3), &dev).unwrap();
        let target = (&z1 - &z0).unwrap();
        let exact = flow_loss(&Fixed(target.clone()), &z1, &[None, None], &[0.2, 0.8], &z0, 0.7).unwrap();
        assert_eq!(scalar(&exact).unwrap(), 0.0);
        let zero = flow_loss(&Fixed(target.zeros_like().unwrap()), &z1, &[None, None], &[0.2, 0.8], &z0, 0.7).unwrap();
        let expect = scalar(&target.sqr().unwrap().mean_all().unwrap()).unwrap();
        assert!((scalar(&zero).unwrap() - expect).abs() < 1e-14);
        assert!(matches!(
            flow_loss(&Fixed(target), &z1, &[None, None], &[0.2, f64::NAN], &z0, 0.7),
            Err(PaeError::Internal(_))
        ));
    }

    #[test]
    fn dropped_label_is_the_null_class() {
        let cfg = GeneratorConfig {
            depth: 1,
            width: 16,
            heads: 2,
            ..GeneratorConfig::default()
        };
        let g = Generator::new(&cfg, 4, 3, 2, 0, DType::F64).unwrap();
        let a = g.condition(&[0.3], &[None]).unwrap();
        assert!(g.condition(&[0.3], &[Some(g.null_class())]).is_err());
        let c = g.condition(&[0.3], &[Some(0)]).unwrap();
        assert_ne!(a.to_vec2::<f64>().unwrap(), c.to_vec2::<f64>().unwrap());
        let twice = g.condition(&[0.3, 0.3], &[None, None]).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(twice[0], twice[1]);
        assert_eq!(twice[0], a.to_vec2::<f64>().unwrap()[0]);
    }
}

//! Experiment stages. The in-memory functions compose into
//! [`run_experiment`]; the `stage_*` functions wrap them with run-directory
//! persistence for the command-line driver.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::DType;
use ndarray::{Array1, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::backbone::{encode_image, Backbone, FeatureCacheBackbone, ImageTensor, SyntheticBackbone};
use crate::data::{synthetic_dataset, Dataset};
use crate::error::{config_err, PaeError, Result};
use crate::generator::{sample, train_generator, Generator, GeneratorLog, LatentShape};
use crate::harness::config::{BackboneKind, RunConfig};
use crate::harness::container::{read_tensor, write_tensor, StoredTensor};
use crate::harness::fid::fid;
use crate::harness::run_dir::{read_json, RunDir};
use crate::harness::sweep::{pilot_sweep, SweepKnob, SweepReport};
use crate::losses::perceptual_backend;
use crate::metrics::{geometry_report, project_mask_to_latent, GeometryInputs, GeometryReport, TokenLabels};
use crate::nn::CheckpointMeta;
use crate::prior::{train_refinement, PriorStore, RefinementLog};
use crate::rng::substream_seed;
use crate::tokenizer::{encode_all, train_tokenizer, LatentCode, Tokenizer, TokenizerLog, TrainItem};

/// Floating-point type of every trained network in the pipeline.
pub const PIPELINE_DTYPE: DType = DType::F32;

pub fn make_backbone(cfg: &RunConfig) -> Result<Box<dyn Backbone>> {
    let b = &cfg.backbone;
    Ok(match b.kind {
        BackboneKind::Synthetic => Box::new(SyntheticBackbone::new(b.seed, b.patch_size, b.feature_dim)?),
        BackboneKind::FeatureCache => Box::new(FeatureCacheBackbone::new(
            b.cache_dir.clone(),
            b.id.clone(),
            b.patch_size,
            b.feature_dim,
            b.seed,
        )),
    })
}

/// Dataset, backbone and precomputed features shared by every stage.
pub struct Workspace {
    pub cfg: RunConfig,
    pub dataset: Dataset,
    pub backbone: Box<dyn Backbone>,
    pub train: Vec<TrainItem>,
    pub heldout: Vec<TrainItem>,
}

impl Workspace {
    pub fn prepare(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let dataset = synthetic_dataset(&cfg.data, cfg.seed)?;
        let backbone = make_backbone(cfg)?;
        let items = |samples: &[crate::data::Sample]| -> Result<Vec<TrainItem>> {
            samples
                .iter()
                .map(|s| {
                    Ok(TrainItem {
                        id: s.id.clone(),
                        image: s.image.clone(),
                        features: encode_image(&s.image, backbone.as_ref())?,
                    })
                })
                .collect()
        };
        let train = items(&dataset.train)?;
        let heldout = items(&dataset.heldout)?;
        Ok(Self {
            cfg: cfg.clone(),
            dataset,
            backbone,
            train,
            heldout,
        })
    }

    pub fn grid(&self) -> (usize, usize) {
        let g = self.cfg.token_grid();
        (g, g)
    }

    pub fn latent_shape(&self) -> LatentShape {
        LatentShape {
            grid: self.grid(),
            channels: self.cfg.tokenizer.latent_dim,
        }
    }

    pub fn heldout_labels(&self) -> Vec<usize> {
        self.dataset.heldout.iter().map(|s| s.label).collect()
    }

    pub fn train_labels(&self) -> Vec<usize> {
        self.dataset.train.iter().map(|s| s.label).collect()
    }

    pub fn heldout_masks(&self) -> Result<Vec<TokenLabels>> {
        self.dataset
            .heldout
            .iter()
            .map(|s| project_mask_to_latent(&s.mask, self.grid()))
            .collect()
    }

    /// Pooled backbone features of a set of images, `[n, D]`.
    pub fn pooled_features(&self, images: &[ImageTensor]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((images.len(), self.backbone.feature_dim()));
        for (i, img) in images.iter().enumerate() {
            let f = encode_image(img, self.backbone.as_ref())?;
            out.row_mut(i).assign(&Array1::from(f.pooled()));
        }
        Ok(out)
    }

    pub fn heldout_images(&self) -> Vec<ImageTensor> {
        self.heldout.iter().map(|it| it.image.clone()).collect()
    }
}

pub fn needs_priors(cfg: &RunConfig) -> bool {
    cfg.losses.lambda_ssr > 0.0 || cfg.losses.lambda_scr > 0.0
}

pub fn refine(ws: &Workspace) -> Result<(crate::prior::RefinementArtifacts, PriorStore)> {
    let data: Vec<(String, crate::backbone::FeatureMap)> =
        ws.train.iter().map(|it| (it.id.clone(), it.features.clone())).collect();
    let seed = substream_seed(ws.cfg.seed, "refinement");
    train_refinement(&ws.cfg.refinement, &data, seed, &ws.cfg.hash()?, PIPELINE_DTYPE)
}

pub fn fit_tokenizer(ws: &Workspace, priors: Option<&PriorStore>) -> Result<(Tokenizer, TokenizerLog)> {
    train_tokenizer(&ws.cfg, &ws.train, priors, PIPELINE_DTYPE)
}

/// Clamps to `[0, 1]` for use as an image.
pub fn to_image(pixels: &Array3<f64>) -> Result<ImageTensor> {
    ImageTensor::new(pixels.mapv(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) }))
}

fn window_mean(v: &[f64], head: bool) -> f64 {
    let w = (v.len() / 4).clamp(1, 10);
    let s = if head { &v[..w.min(v.len())] } else { &v[v.len().saturating_sub(w)..] };
    s.iter().sum::<f64>() / s.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizerReport {
    pub params: usize,
    /// Mean training L1 over the first and last few steps.
    pub l1_start: Option<f64>,
    pub l1_end: Option<f64>,
    pub l1_drop: Option<f64>,
    pub heldout_l1: f64,
    pub rfid_proxy: f64,
    pub geometry: GeometryReport,
}

pub fn evaluate_tokenizer(ws: &Workspace, tok: &Tokenizer, log: Option<&TokenizerLog>) -> Result<TokenizerReport> {
    let latents = encode_all(tok, &ws.heldout)?;
    evaluate_latents(ws, tok, &latents, log)
}

fn evaluate_latents(ws: &Workspace, tok: &Tokenizer, latents: &[LatentCode], log: Option<&TokenizerLog>) -> Result<TokenizerReport> {
    let mut recon = Vec::with_capacity(latents.len());
    let mut l1 = 0.0;
    for (z, it) in latents.iter().zip(&ws.heldout) {
        let x = tok.reconstruct(z)?;
        l1 += (&x - it.image.pixels()).mapv(f64::abs).mean().unwrap_or(0.0);
        recon.push(to_image(&x)?);
    }
    let heldout_l1 = l1 / latents.len().max(1) as f64;
    let rfid_proxy = fid(&ws.pooled_features(&ws.heldout_images())?, &ws.pooled_features(&recon)?)?;
    let labels = ws.heldout_labels();
    let masks = ws.heldout_masks()?;
    let perceptual = perceptual_backend(ws.cfg.losses.perceptual);
    let inputs = GeometryInputs {
        latents,
        decoder: Some(tok),
        masks: Some(&masks),
        labels: Some(&labels),
        perceptual: perceptual.as_ref(),
    };
    let geometry = geometry_report(&inputs, &ws.cfg.metrics, substream_seed(ws.cfg.seed, crate::rng::streams::METRICS))?;
    let (l1_start, l1_end, l1_drop) = match log {
        Some(l) if !l.steps.is_empty() => {
            let c = l.component("l1");
            let (a, b) = (window_mean(&c, true), window_mean(&c, false));
            (Some(a), Some(b), Some(1.0 - b / a))
        }
        _ => (None, None, None),
    };
    Ok(TokenizerReport {
        params: tok.params.num_params(),
        l1_start,
        l1_end,
        l1_drop,
        heldout_l1,
        rfid_proxy,
        geometry,
    })
}

pub fn fit_generator(ws: &Workspace, tok: &Tokenizer) -> Result<(Generator, GeneratorLog)> {
    let latents = encode_all(tok, &ws.train)?;
    train_generator(
        &ws.cfg.generator,
        &latents,
        &ws.train_labels(),
        ws.cfg.data.num_classes,
        substream_seed(ws.cfg.seed, "generator"),
        PIPELINE_DTYPE,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub num_samples: usize,
    pub loss_start: f64,
    pub loss_end: f64,
    pub gfid_proxy: f64,
    pub on_shell: bool,
}

pub struct Generated {
    pub labels: Vec<usize>,
    pub latents: Vec<LatentCode>,
    pub images: Vec<ImageTensor>,
}

pub fn generate(ws: &Workspace, tok: &Tokenizer, gen: &Generator) -> Result<Generated> {
    let k = ws.cfg.data.num_classes;
    let labels: Vec<usize> = (0..ws.cfg.sampler.num_samples).map(|i| i % k).collect();
    let latents = sample(
        gen,
        &labels,
        ws.latent_shape(),
        &ws.cfg.sampler,
        ws.cfg.seed,
        ws.cfg.tokenizer.rms_eps,
    )?;
    let images = latents
        .iter()
        .map(|z| to_image(&tok.reconstruct(z)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(Generated { labels, latents, images })
}

pub fn generation_report(ws: &Workspace, g: &Generated, log: &GeneratorLog) -> Result<GenerationReport> {
    let gfid_proxy = fid(&ws.pooled_features(&ws.heldout_images())?, &ws.pooled_features(&g.images)?)?;
    Ok(GenerationReport {
        num_samples: g.latents.len(),
        loss_start: window_mean(&log.losses, true),
        loss_end: window_mean(&log.losses, false),
        gfid_proxy,
        on_shell: g.latents.iter().all(|z| z.on_shell(1e-3)),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config_hash: String,
    pub seed: u64,
    pub tokenizer: TokenizerReport,
    pub generation: Option<GenerationReport>,
}

/// Refinement (when a regularizer needs priors), tokenizer training and
/// evaluation, then optionally generator training and sampling.
pub fn run_experiment(cfg: &RunConfig, with_generator: bool) -> Result<ExperimentReport> {
    let ws = Workspace::prepare(cfg)?;
    let priors = if needs_priors(cfg) { Some(refine(&ws)?.1) } else { None };
    let (tok, log) = fit_tokenizer(&ws, priors.as_ref())?;
    let tokenizer = evaluate_tokenizer(&ws, &tok, Some(&log))?;
    let generation = if with_generator {
        let (gen, glog) = fit_generator(&ws, &tok)?;
        let g = generate(&ws, &tok, &gen)?;
        Some(generation_report(&ws, &g, &glog)?)
    } else {
        None
    };
    Ok(ExperimentReport {
        config_hash: cfg.hash()?,
        seed: cfg.seed,
        tokenizer,
        generation,
    })
}

// ---------------------------------------------------------------------------
// Persistence

pub fn latents_to_stored(latents: &[LatentCode]) -> Result<StoredTensor> {
    let first = latents.first().ok_or_else(|| config_err("no latents to store"))?;
    let (d, h, w) = first.z.dim();
    let mut values = Vec::with_capacity(latents.len() * d * h * w);
    for z in latents {
        if z.z.dim() != (d, h, w) {
            return Err(config_err("latents in one dump must share a shape"));
        }
        values.extend(z.z.iter().copied());
    }
    StoredTensor::new(vec![latents.len(), d, h, w], values)
}

pub fn latents_from_stored(t: &StoredTensor, rms_eps: f64) -> Result<Vec<LatentCode>> {
    let a = t.to_array()?;
    if a.ndim() != 4 {
        return Err(PaeError::Format(format!("latent dump must be rank 4, got dims {:?}", t.dims)));
    }
    Ok(a.axis_iter(Axis(0))
        .map(|z| LatentCode {
            z: z.to_owned().into_dimensionality().expect("rank 3 slice"),
            rms_eps,
        })
        .collect())
}

pub fn labels_to_stored(labels: &[usize]) -> Result<StoredTensor> {
    StoredTensor::new(vec![labels.len()], labels.iter().map(|&l| l as f64).collect())
}

pub fn labels_from_stored(t: &StoredTensor) -> Vec<usize> {
    t.values.iter().map(|&v| v as usize).collect()
}

pub fn masks_to_stored(masks: &[TokenLabels], grid: (usize, usize)) -> Result<StoredTensor> {
    let values = masks.iter().flat_map(|m| m.labels.iter().map(|&l| l as f64)).collect();
    StoredTensor::new(vec![masks.len(), grid.0, grid.1], values)
}

pub fn masks_from_stored(t: &StoredTensor) -> Result<Vec<TokenLabels>> {
    if t.dims.len() != 3 {
        return Err(PaeError::Format(format!("mask dump must be rank 3, got dims {:?}", t.dims)));
    }
    let per = t.dims[1] * t.dims[2];
    Ok(t.values
        .chunks(per)
        .map(|c| TokenLabels::canonical(&c.iter().map(|&v| v as usize).collect::<Vec<_>>()))
        .collect())
}

/// Binary PPM of a `[3, H, W]` image in `[0, 1]`.
pub fn write_ppm(path: &Path, image: &ImageTensor) -> Result<()> {
    let p = image.pixels();
    let (_, h, w) = p.dim();
    let mut f = fs::File::create(path)?;
    write!(f, "P6\n{w} {h}\n255\n")?;
    let mut bytes = Vec::with_capacity(3 * h * w);
    for r in 0..h {
        for c in 0..w {
            for k in 0..3 {
                bytes.push((p[[k, r, c]] * 255.0).round() as u8);
            }
        }
    }
    f.write_all(&bytes)?;
    Ok(())
}

fn meta(cfg: &RunConfig, step: usize) -> Result<CheckpointMeta> {
    Ok(CheckpointMeta {
        config_hash: cfg.hash()?,
        step,
        seed: cfg.seed,
    })
}

fn check_meta(m: &CheckpointMeta, cfg: &RunConfig, what: &str) -> Result<()> {
    if m.config_hash != cfg.hash()? {
        return Err(config_err(format!("{what} checkpoint was trained under a different config")));
    }
    Ok(())
}

pub fn load_tokenizer(run: &RunDir, ws: &Workspace) -> Result<Tokenizer> {
    let dir = run.checkpoint("tokenizer");
    if !dir.join("manifest.json").exists() {
        return Err(config_err("no tokenizer checkpoint; run train-tokenizer first"));
    }
    let tok = Tokenizer::new(&ws.cfg, ws.backbone.feature_dim(), PIPELINE_DTYPE)?;
    check_meta(&tok.load(&dir)?, &ws.cfg, "tokenizer")?;
    Ok(tok)
}

pub fn load_generator(run: &RunDir, ws: &Workspace) -> Result<Generator> {
    let dir = run.checkpoint("generator");
    if !dir.join("manifest.json").exists() {
        return Err(config_err("no generator checkpoint; run train-generator first"));
    }
    let (r, c) = ws.grid();
    let gen = Generator::new(
        &ws.cfg.generator,
        r * c,
        ws.cfg.tokenizer.latent_dim,
        ws.cfg.data.num_classes,
        substream_seed(ws.cfg.seed, "generator"),
        PIPELINE_DTYPE,
    )?;
    check_meta(&gen.params.load(&dir)?, &ws.cfg, "generator")?;
    Ok(gen)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineReport {
    pub images: usize,
    pub projector_params: usize,
    pub deprojector_params: usize,
    pub loss_start: Option<f64>,
    pub loss_end: Option<f64>,
    pub log: RefinementLog,
}

pub fn stage_refine_prior(run: &RunDir, cfg: &RunConfig) -> Result<RefineReport> {
    let ws = Workspace::prepare(cfg)?;
    let (art, store) = refine(&ws)?;
    store.write(&run.priors())?;
    art.params.save(&run.checkpoint("prior"), &meta(cfg, cfg.refinement.optim.steps)?)?;
    let l = &art.log.total;
    let rep = RefineReport {
        images: store.priors.len(),
        projector_params: art.projector_params(),
        deprojector_params: art.deprojector_params(),
        loss_start: l.first().copied(),
        loss_end: l.last().copied(),
        log: art.log.clone(),
    };
    run.write_report("refine", &rep)?;
    run.log(&serde_json::json!({"stage": "refine-prior", "images": rep.images, "loss_end": rep.loss_end}))?;
    Ok(rep)
}

pub fn stage_train_tokenizer(run: &RunDir, cfg: &RunConfig) -> Result<TokenizerReport> {
    let ws = Workspace::prepare(cfg)?;
    let priors = if needs_priors(cfg) {
        let dir = run.priors();
        if !dir.join("manifest.json").exists() {
            return Err(config_err("regularizers need priors; run refine-prior first"));
        }
        let store = PriorStore::read(&dir)?;
        if store.config_hash != cfg.hash()? {
            return Err(config_err("priors were refined under a different config"));
        }
        Some(store)
    } else {
        None
    };
    let (tok, log) = fit_tokenizer(&ws, priors.as_ref())?;
    tok.save(&run.checkpoint("tokenizer"), &meta(cfg, cfg.tokenizer.optim.steps)?)?;
    for (step, r) in log.steps.iter().enumerate() {
        run.log(&serde_json::json!({"stage": "train-tokenizer", "step": step, "loss": r}))?;
    }
    let latents = encode_all(&tok, &ws.heldout)?;
    let dir = run.latents("heldout");
    write_tensor(dir.join("latents.paet"), &latents_to_stored(&latents)?)?;
    write_tensor(dir.join("labels.paet"), &labels_to_stored(&ws.heldout_labels())?)?;
    write_tensor(dir.join("masks.paet"), &masks_to_stored(&ws.heldout_masks()?, ws.grid())?)?;
    let rep = evaluate_latents(&ws, &tok, &latents, Some(&log))?;
    run.write_report("tokenizer", &rep)?;
    Ok(rep)
}

pub fn stage_train_generator(run: &RunDir, cfg: &RunConfig) -> Result<GeneratorLog> {
    let ws = Workspace::prepare(cfg)?;
    let tok = load_tokenizer(run, &ws)?;
    let (gen, log) = fit_generator(&ws, &tok)?;
    gen.params.save(&run.checkpoint("generator"), &meta(cfg, cfg.generator.optim.steps)?)?;
    for (step, l) in log.losses.iter().enumerate() {
        run.log(&serde_json::json!({"stage": "train-generator", "step": step, "flow_loss": l}))?;
    }
    run.write_report("generator", &log)?;
    Ok(log)
}

pub fn stage_sample(run: &RunDir, cfg: &RunConfig) -> Result<GenerationReport> {
    let ws = Workspace::prepare(cfg)?;
    let tok = load_tokenizer(run, &ws)?;
    let gen = load_generator(run, &ws)?;
    let g = generate(&ws, &tok, &gen)?;
    let dir = run.latents("samples");
    write_tensor(dir.join("latents.paet"), &latents_to_stored(&g.latents)?)?;
    write_tensor(dir.join("labels.paet"), &labels_to_stored(&g.labels)?)?;
    for (i, img) in g.images.iter().enumerate() {
        write_ppm(&run.samples().join(format!("sample-{i:04}-class{}.ppm", g.labels[i])), img)?;
    }
    let log: GeneratorLog = read_json(&run.report("generator"))?;
    let rep = generation_report(&ws, &g, &log)?;
    run.write_report("sample", &rep)?;
    run.log(&serde_json::json!({"stage": "sample", "gfid_proxy": rep.gfid_proxy}))?;
    Ok(rep)
}

/// Geometry report over a latent dump directory holding `latents.paet` and
/// optionally `labels.paet` and `masks.paet`. The run's tokenizer serves as
/// decoder when present. `metrics` may differ from the run's own settings.
pub fn stage_metrics(
    run: &RunDir,
    cfg: &RunConfig,
    metrics: &crate::harness::config::MetricsConfig,
    dump: Option<PathBuf>,
    seed: u64,
) -> Result<GeometryReport> {
    let dir = dump.unwrap_or_else(|| run.latents("heldout"));
    let latents = latents_from_stored(&read_tensor(dir.join("latents.paet"))?, cfg.tokenizer.rms_eps)?;
    let optional = |name: &str| -> Result<Option<StoredTensor>> {
        let p = dir.join(name);
        if p.exists() { Ok(Some(read_tensor(p)?)) } else { Ok(None) }
    };
    let labels = optional("labels.paet")?.map(|t| labels_from_stored(&t));
    let masks = optional("masks.paet")?.map(|t| masks_from_stored(&t)).transpose()?;
    let tok = if run.checkpoint("tokenizer").join("manifest.json").exists() {
        let ws = Workspace::prepare(cfg)?;
        Some(load_tokenizer(run, &ws)?)
    } else {
        None
    };
    let perceptual = perceptual_backend(cfg.losses.perceptual);
    let inputs = GeometryInputs {
        latents: &latents,
        decoder: tok.as_ref().map(|t| t as &dyn crate::metrics::LatentDecoder),
        masks: masks.as_deref(),
        labels: labels.as_deref(),
        perceptual: perceptual.as_ref(),
    };
    let rep = geometry_report(&inputs, metrics, seed)?;
    run.write_report("geometry", &rep)?;
    Ok(rep)
}

pub fn stage_sweep(run: &RunDir, cfg: &RunConfig, knob: SweepKnob, values: &[f64]) -> Result<SweepReport> {
    let rep = pilot_sweep(knob, values, cfg)?;
    run.write_report(&format!("sweep-{knob}"), &rep)?;
    Ok(rep)
}

/// Collects every report in the run into `reports/summary.json`.
pub fn stage_report(run: &RunDir) -> Result<BTreeMap<String, serde_json::Value>> {
    let mut out = BTreeMap::new();
    let dir = run.root().join("reports");
    let mut entries: Vec<PathBuf> = fs::read_dir(&dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json") && p.file_stem().is_some_and(|s| s != "summary"))
        .collect();
    entries.sort();
    for p in entries {
        let name = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        out.insert(name, read_json::<serde_json::Value>(&p)?);
    }
    run.write_report("summary", &out)?;
    Ok(out)
}


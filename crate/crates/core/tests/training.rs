use candle_core::DType;

use pae_core::generator::train_generator;
use pae_core::harness::config::RunConfig;
use pae_core::harness::pipeline::{fit_tokenizer, refine, Workspace};
use pae_core::tokenizer::{encode_all, reconstruction_error};

fn window_mean(v: &[f64], head: bool, len: usize) -> f64 {
    let w = if head { &v[..len] } else { &v[v.len() - len..] };
    w.iter().sum::<f64>() / len as f64
}

fn recon_only(mut cfg: RunConfig) -> RunConfig {
    cfg.losses.lambda_ssr = 0.0;
    cfg.losses.lambda_mcr = 0.0;
    cfg.losses.lambda_scr = 0.0;
    cfg
}

#[test]
fn refinement_halves_representation_loss() {
    let cfg = RunConfig::toy();
    assert_eq!((cfg.data.train_images, cfg.refinement.optim.steps), (64, 200));
    let ws = Workspace::prepare(&cfg).unwrap();
    let (art, store) = refine(&ws).unwrap();
    let rep = &art.log.rep;
    assert_eq!(rep.len(), 200);
    let (start, end) = (window_mean(rep, true, 10), window_mean(rep, false, 10));
    assert!(end < 0.5 * start, "L_rep {start} -> {end}");
    assert_eq!(store.priors.len(), cfg.data.train_images);
}

#[test]
fn tokenizer_overfits_eight_images() {
    let mut cfg = recon_only(RunConfig::toy());
    cfg.data.train_images = 8;
    cfg.data.heldout_images = 8;
    cfg.tokenizer.optim.steps = 1500;
    cfg.tokenizer.optim.min_learning_rate = 5e-4;
    let ws = Workspace::prepare(&cfg).unwrap();
    let (tok, _) = fit_tokenizer(&ws, None).unwrap();
    let err = reconstruction_error(&tok, &ws.train).unwrap();
    assert!(err < 0.05, "mean |x_hat - x| = {err}");
}

#[test]
fn generator_overfits_eight_latents() {
    let mut cfg = recon_only(RunConfig::toy());
    cfg.data.train_images = 8;
    cfg.data.heldout_images = 8;
    cfg.tokenizer.optim.steps = 50;
    let ws = Workspace::prepare(&cfg).unwrap();
    let (tok, _) = fit_tokenizer(&ws, None).unwrap();
    let latents = encode_all(&tok, &ws.train).unwrap();
    let mut g = cfg.generator.clone();
    g.optim.steps = 500;
    g.optim.batch_size = 8;
    let (_, log) = train_generator(&g, &latents, &ws.train_labels(), cfg.data.num_classes, 3, DType::F32).unwrap();
    let (start, end) = (window_mean(&log.losses, true, 10), window_mean(&log.losses, false, 50));
    assert!(end <= 0.3 * start, "flow loss {start} -> {end}");
}

use pae_core::harness::config::RunConfig;
use pae_core::harness::container::read_tensor;
use pae_core::harness::pipeline::{
    latents_from_stored, load_tokenizer, stage_metrics, stage_refine_prior, stage_report, stage_sample,
    stage_train_generator, stage_train_tokenizer, Workspace,
};
use pae_core::harness::run_dir::RunDir;
use pae_core::tokenizer::encode_all;

fn small() -> RunConfig {
    let mut c = RunConfig::toy();
    c.data.train_images = 16;
    c.data.heldout_images = 8;
    c.refinement.optim.steps = 5;
    c.tokenizer.optim.steps = 5;
    c.generator.optim.steps = 5;
    c.sampler.steps = 4;
    c.sampler.num_samples = 4;
    c.metrics.lpc_samples = 4;
    c.metrics.lpc_directions = 2;
    c
}

#[test]
fn stages_persist_and_reload() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small();
    let run = RunDir::open(tmp.path(), &cfg).unwrap();

    assert!(stage_train_tokenizer(&run, &cfg).is_err(), "regularized tokenizer must need priors");
    assert!(stage_train_generator(&run, &cfg).is_err(), "generator must need a tokenizer");

    let refine = stage_refine_prior(&run, &cfg).unwrap();
    assert_eq!(refine.images, 16);
    let tok_rep = stage_train_tokenizer(&run, &cfg).unwrap();
    assert!(tok_rep.l1_start.is_some_and(f64::is_finite) && tok_rep.l1_end.is_some_and(f64::is_finite));

    let ws = Workspace::prepare(&cfg).unwrap();
    let tok = load_tokenizer(&run, &ws).unwrap();
    let fresh = encode_all(&tok, &ws.heldout).unwrap();
    let stored = read_tensor(run.latents("heldout").join("latents.paet")).unwrap();
    let dumped = latents_from_stored(&stored, cfg.tokenizer.rms_eps).unwrap();
    assert_eq!(dumped.len(), fresh.len());
    for (a, b) in dumped.iter().zip(&fresh) {
        let gap = (&a.z - &b.z).mapv(f64::abs).fold(0.0f64, |m, v| m.max(*v));
        assert!(gap < 1e-6, "reloaded tokenizer drifts by {gap}");
    }

    stage_train_generator(&run, &cfg).unwrap();
    let gen = stage_sample(&run, &cfg).unwrap();
    assert_eq!(gen.num_samples, 4);
    let ppm = std::fs::read_dir(run.samples()).unwrap().count();
    assert_eq!(ppm, 4);

    let geo = stage_metrics(&run, &cfg, &cfg.metrics, None, cfg.seed).unwrap();
    assert!(geo.ssc.is_some() && geo.lpc.is_some() && geo.gsq.is_some() && geo.erank.is_some());
    let summary = stage_report(&run).unwrap();
    for key in ["refine", "tokenizer", "generator", "sample", "geometry"] {
        assert!(summary.contains_key(key), "summary lacks {key}");
    }
    drop(run);

    let mut other = cfg.clone();
    other.seed += 1;
    assert!(RunDir::open(tmp.path(), &other).is_err());
}

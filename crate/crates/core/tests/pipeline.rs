use std::path::Path;

use cuedgen_core::audio::FeatureExtractor;
use cuedgen_core::motion::{save_motion, PoseTable};
use cuedgen_core::pipeline::*;
use cuedgen_core::rules::MappingTable;
use cuedgen_core::Error;

fn corpus(n: usize) -> Vec<Item> {
    let cfg = CorpusConfig {
        sentences: n,
        ..CorpusConfig::default()
    };
    synth_corpus(&cfg, &MappingTable::default(), &PoseTable::default(), &FeatureExtractor::default()).unwrap()
}

fn tiny(dir: &Path) -> TrainConfig {
    let mut cfg = TrainConfig {
        out_dir: dir.to_path_buf(),
        batch: 4,
        lr: 1e-3,
        ae_epochs: 1,
        clip_epochs: 1,
        arm_warmup_epochs: 1,
        diffusion_epochs: 2,
        noise_draws: 1,
        ..TrainConfig::default()
    };
    cfg.ae.model_dim = 16;
    cfg.ae.latent_dim = 8;
    cfg.ae.heads = 2;
    cfg.encoder.model_dim = 16;
    cfg.encoder.embed_dim = 16;
    cfg.encoder.heads = 2;
    cfg.encoder.layers = 1;
    cfg.diffusion.model_dim = 16;
    cfg.diffusion.heads = 2;
    cfg.diffusion.layers = 1;
    cfg.diffusion.latent_dim = 8;
    cfg.diffusion.gloss_embed_dim = 16;
    cfg.diffusion.gloss_model_dim = 16;
    cfg.diffusion.steps = 20;
    cfg.diffusion.beta_end = 0.2;
    cfg
}

fn losses(h: &[EpochLog], stage: &str) -> Vec<f64> {
    h.iter().filter(|e| e.stage == stage).map(|e| e.loss).collect()
}

#[test]
fn staged_commands_reproduce_a_full_run() {
    let items = corpus(24);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let full = run_train(&tiny(a.path()), &MappingTable::default(), &items).unwrap();

    let cfg = tiny(b.path());
    let mut staged = Vec::new();
    for stage in [Stage::Autoencoder, Stage::Contrastive, Stage::Joint] {
        staged.extend(run_stage(&cfg, &MappingTable::default(), &items, stage).unwrap());
    }
    for stage in ["arm", "ae", "clip", "diffusion"] {
        assert_eq!(losses(&full.history, stage), losses(&staged, stage), "{stage}");
    }
    let m = RunManifest::load(b.path().join(MANIFEST_FILE)).unwrap();
    m.verify().unwrap();
    assert_eq!(m.command, "train-diffusion");
}

#[test]
fn joint_stage_needs_earlier_checkpoints() {
    let items = corpus(24);
    let dir = tempfile::tempdir().unwrap();
    let err = run_stage(&tiny(dir.path()), &MappingTable::default(), &items, Stage::Joint).unwrap_err();
    assert!(matches!(err, Error::MissingCheckpoint(_)), "{err}");
    assert!(matches!(Models::load(dir.path()), Err(Error::MissingCheckpoint(_))));
}

#[test]
fn zero_epochs_still_writes_a_verifiable_manifest() {
    let items = corpus(24);
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.ae_epochs = 0;
    cfg.clip_epochs = 0;
    cfg.arm_warmup_epochs = 0;
    cfg.diffusion_epochs = 0;
    let out = run_train(&cfg, &MappingTable::default(), &items).unwrap();
    assert!(out.history.is_empty());
    RunManifest::load(dir.path().join(MANIFEST_FILE)).unwrap().verify().unwrap();
    assert_eq!(out.train_ids.len() + out.test_ids.len(), 24);
}

#[test]
fn resume_reproduces_the_next_epoch() {
    let items = corpus(24);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut cfg = tiny(a.path());
    cfg.diffusion_epochs = 3;
    let straight = run_train(&cfg, &MappingTable::default(), &items).unwrap();

    let mut cfg = tiny(b.path());
    cfg.diffusion_epochs = 2;
    run_train(&cfg, &MappingTable::default(), &items).unwrap();
    cfg.diffusion_epochs = 3;
    cfg.resume = true;
    let resumed = run_train(&cfg, &MappingTable::default(), &items).unwrap();
    let resumed_losses = losses(&resumed.history, "diffusion");
    assert_eq!(resumed_losses.len(), 1);
    assert_eq!(losses(&straight.history, "diffusion")[2], resumed_losses[0]);
}

#[test]
fn joint_epochs_log_every_loss_component() {
    let items = corpus(24);
    let dir = tempfile::tempdir().unwrap();
    let out = run_train(&tiny(dir.path()), &MappingTable::default(), &items).unwrap();
    let w = LossWeights::default();
    let joint: Vec<&EpochLog> = out.history.iter().filter(|e| e.stage == "diffusion").collect();
    assert_eq!(joint.len(), 2);
    for e in joint {
        let (n, s, r) = (e.noise.unwrap(), e.semantic.unwrap(), e.rhythm.unwrap());
        assert!((e.loss - total_loss(n, s, r, w)).abs() < 1e-4 * e.loss.max(1.0));
    }
    let log = std::fs::read_to_string(dir.path().join(TRAIN_LOG_FILE)).unwrap();
    assert_eq!(log.lines().count(), out.history.len());
}

#[test]
fn disabling_the_rhythm_generator_drops_its_loss() {
    // Without residuals the autoencoder sees ground truth only, so it needs more items.
    let items = corpus(40);
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.arm_enabled = false;
    let out = run_train(&cfg, &MappingTable::default(), &items).unwrap();
    assert!(losses(&out.history, "arm").is_empty());
    assert!(out.history.iter().filter(|e| e.stage == "diffusion").all(|e| e.rhythm.is_none()));
    let g = generate_batch(&out.models, &[GenRequest::from_item(&items[0])], GenOptions::for_models(&out.models, 1), 1).unwrap();
    assert!(g[0].offset.offsets.iter().all(|&v| v == 0.0));
}

fn trained(dir: &Path, items: &[Item]) -> Models {
    run_train(&tiny(dir), &MappingTable::default(), items).unwrap().models
}

#[test]
fn generation_is_bit_identical_under_a_seed() {
    let items = corpus(24);
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path(), &items);
    let models = Models::load(dir.path()).unwrap();
    let table = MappingTable::default();
    let fx = FeatureExtractor::default();
    let opts = GenOptions::for_models(&models, 42);
    let mut files = Vec::new();
    for k in 0..2 {
        let g = run_generate(&models, &table, &items[0].text, &items[0].audio, &fx, opts).unwrap();
        let p = dir.path().join(format!("gen{k}.json"));
        save_motion(&g.motion, &p).unwrap();
        files.push(std::fs::read(p).unwrap());
    }
    assert_eq!(files[0], files[1]);
    let other = run_generate(&models, &table, &items[0].text, &items[0].audio, &fx, GenOptions { seed: 43, ..opts }).unwrap();
    let first = run_generate(&models, &table, &items[0].text, &items[0].audio, &fx, opts).unwrap();
    assert_ne!(other.motion.frames(), first.motion.frames());
}

#[test]
fn zeroed_rhythm_generator_leaves_the_semantic_path() {
    let items = corpus(24);
    let dir = tempfile::tempdir().unwrap();
    let models = trained(dir.path(), &items);
    for (_, v) in models.rhythm.store.vars() {
        v.set(&v.zeros_like().unwrap()).unwrap();
    }
    let opts = GenOptions::for_models(&models, 3);
    let g = generate_batch(&models, &[GenRequest::from_item(&items[1])], opts, 1).unwrap();
    assert_eq!(g[0].motion.frames(), g[0].semantic.frames());
}

#[test]
fn generation_errors_carry_their_stage() {
    let items = corpus(24);
    let dir = tempfile::tempdir().unwrap();
    let models = trained(dir.path(), &items);
    let opts = GenOptions::for_models(&models, 0);
    let err = run_generate(&models, &MappingTable::default(), "xq", &items[0].audio, &FeatureExtractor::default(), opts)
        .unwrap_err();
    assert!(err.to_string().contains("gloss"), "{err}");
}

#[test]
fn evaluation_reports_generated_and_baseline_metrics() {
    let items = corpus(24);
    let dir = tempfile::tempdir().unwrap();
    let models = trained(dir.path(), &items);
    let refs: Vec<&Item> = items.iter().collect();
    let opts = EvalOptions {
        gen: GenOptions::for_models(&models, 0),
        batch: 8,
        pck_delta_mm: 10.0,
        gad_tau_s: 0.3,
    };
    let ev = evaluate_items(&models, &refs, &PoseTable::default(), opts).unwrap();
    assert_eq!(ev.generated.len(), 24);
    for r in [&ev.report, &ev.baseline] {
        assert!((0.0..=1.0).contains(&r.pck));
        assert!(r.maje.is_finite() && r.maje >= 0.0);
        assert!(r.fgd.is_some() && r.gad.is_some());
    }
}

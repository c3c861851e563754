use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use cuedgen_core::pipeline::{RunManifest, MANIFEST_FILE};
use cuedgen_core::{AudioTrack, TrainConfig};

fn cuedgen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cuedgen")).args(args).output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn gloss_for_shu_is_fast_and_complete() {
    let t = Instant::now();
    let text = ok(&cuedgen(&["gloss", "shu"]));
    assert!(t.elapsed() < Duration::from_secs(1));
    assert!(text.contains("two fingers apart"), "{text}");
    assert!(text.contains("near the neck"), "{text}");
}

#[test]
fn gloss_json_lists_units() {
    let v: serde_json::Value = serde_json::from_str(&ok(&cuedgen(&["gloss", "--json", "ni hao"]))).unwrap();
    assert_eq!(v["units"].as_array().unwrap().len(), 2);
    assert!(v["gloss"].as_str().unwrap().len() > 20);
}

#[test]
fn bad_syllable_fails_with_a_message() {
    let out = cuedgen(&["gloss", "xq"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn llm_gloss_without_endpoint_is_reported() {
    let out = Command::new(env!("CARGO_BIN_EXE_cuedgen"))
        .args(["gloss", "--llm", "shu"])
        .env_remove("CUEDGEN_LLM_URL")
        .output()
        .unwrap();
    assert!(!out.status.success());
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let mut cfg = TrainConfig {
        batch: 4,
        lr: 1e-3,
        ae_epochs: 1,
        clip_epochs: 1,
        arm_warmup_epochs: 1,
        diffusion_epochs: 1,
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
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn staged_training_generation_and_evaluation() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let config = tiny_config(dir);
    let (data, run) = (dir.join("data"), dir.join("run"));
    ok(&cuedgen(&["synth", "--out", p(&data), "--sentences", "24"]));
    assert!(data.join("corpus.json").exists());

    let common = ["--config", p(&config), "--data", p(&data), "--out", p(&run)];
    for cmd in ["train-ae", "train-clip", "train-diffusion"] {
        let mut args = vec![cmd];
        args.extend(common);
        ok(&cuedgen(&args));
    }
    RunManifest::load(run.join(MANIFEST_FILE)).unwrap().verify().unwrap();

    let entries: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(data.join("corpus.json")).unwrap()).unwrap();
    let first = &entries[0];
    let wav = data.join(format!("{}.wav", first["id"].as_str().unwrap()));
    let text = first["text"].as_str().unwrap();
    let mut bytes = Vec::new();
    for k in 0..2 {
        let out = dir.join(format!("m{k}.json"));
        ok(&cuedgen(&[
            "generate", "--seed", "3", "--model", p(&run), "--text", text, "--audio", p(&wav), "--out", p(&out),
        ]));
        bytes.push(std::fs::read(&out).unwrap());
        RunManifest::load(dir.join(format!("m{k}.manifest.json"))).unwrap().verify().unwrap();
    }
    assert_eq!(bytes[0], bytes[1]);

    let report = dir.join("report.json");
    let summary = ok(&cuedgen(&["evaluate", "--model", p(&run), "--out", p(&report)]));
    assert!(summary.contains("PCK"));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(v["generated"]["pck"].is_number() && v["baseline"]["maje"].is_number());

    let emb = dir.join("emb.json");
    ok(&cuedgen(&["dump-embeddings", "--model", p(&run), "--out", p(&emb)]));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&emb).unwrap()).unwrap();
    assert_eq!(v["gloss"].as_array().unwrap().len(), 24);
    assert_eq!(v["motion"][0].as_array().unwrap().len(), 16);
}

#[test]
fn generate_without_checkpoints_names_the_missing_file() {
    let tmp = tempfile::tempdir().unwrap();
    let wav = tmp.path().join("a.wav");
    AudioTrack::new(vec![0.0; 1600], 16_000).unwrap().write_wav(&wav).unwrap();
    let out = cuedgen(&[
        "generate", "--model", p(tmp.path()), "--text", "shu", "--audio", p(&wav), "--out", p(&tmp.path().join("o.json")),
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("models.json") || err.contains("checkpoint"), "{err}");
}

#[test]
fn malformed_config_reports_its_location() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    std::fs::write(&cfg, "{\n  \"batch\": \"many\"\n}").unwrap();
    let out = cuedgen(&["train-ae", "--config", p(&cfg), "--out", p(tmp.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"), "{}", String::from_utf8_lossy(&out.stderr));
}

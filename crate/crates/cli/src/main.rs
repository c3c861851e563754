use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use cuedgen_core::audio::{FeatureServiceClient, FEATURE_URL_ENV};
use cuedgen_core::motion::save_motion;
use cuedgen_core::pipeline::{
    evaluate_items, load_dataset, run_generate, run_stage, run_train, save_dataset, synth_corpus, EvalOptions,
    GenOptions, Stage, AE_FILE, CLIP_FILE, DIFFUSION_FILE, MANIFEST_FILE, MEAN_FILE, RHYTHM_FILE, SPLIT_FILE,
};
use cuedgen_core::rules::{compile_gloss, rule_prompt, LlmClient};
use cuedgen_core::{AudioTrack, FeatureExtractor, Item, MappingTable, Models, PoseTable, RunManifest, TrainConfig};

#[derive(Parser)]
#[command(name = "cuedgen", version, about = "Cued Speech gesture generation from text and audio")]
struct Cli {
    /// JSON training/generation configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// -v for progress, -vv for debug output.
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
    /// Audio feature backend; `service` posts audio to $CUEDGEN_FEATURE_URL.
    #[arg(long, global = true, value_enum, default_value_t = Features::Mfcc)]
    features: Features,
    /// Cue mapping table (JSON); the built-in table otherwise.
    #[arg(long, global = true)]
    table: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Features {
    Mfcc,
    Service,
}

#[derive(Subcommand)]
enum Cmd {
    /// Compile pinyin text to an instructional gloss.
    Gloss {
        text: String,
        #[arg(long)]
        json: bool,
        /// Ask the language model at $CUEDGEN_LLM_URL instead of the rules.
        #[arg(long)]
        llm: bool,
    },
    /// Write a synthetic paired corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        sentences: Option<usize>,
    },
    /// Statistics, rhythm warm-up and the motion autoencoder.
    TrainAe(TrainArgs),
    /// Contrastive gloss/motion encoders.
    TrainClip(TrainArgs),
    /// Diffusion model, trained jointly with the rhythm generator.
    TrainDiffusion(TrainArgs),
    /// All stages in order.
    Train(TrainArgs),
    /// Text and audio to a landmark file.
    Generate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        text: String,
        #[arg(long)]
        audio: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        sampling: SamplingArgs,
    },
    /// Metrics on the held-out split against the mean-pose baseline.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        /// Dataset directory; defaults to the one the model was trained on.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Score every item rather than the test split.
        #[arg(long)]
        all: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        sampling: SamplingArgs,
    },
    /// Raw gloss and motion embedding matrices for external plotting.
    DumpEmbeddings {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory; a synthetic corpus is generated otherwise.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue the diffusion stage from its saved optimiser state.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct SamplingArgs {
    #[arg(long)]
    guidance: Option<f64>,
    /// Sample from the null gloss condition.
    #[arg(long)]
    no_gloss: bool,
    /// Drop the rhythm offsets.
    #[arg(long)]
    no_arm: bool,
    /// Deterministic reverse process (no injected noise).
    #[arg(long)]
    deterministic: bool,
}

impl SamplingArgs {
    fn options(&self, models: &Models, seed: u64) -> GenOptions {
        let mut o = GenOptions::for_models(models, seed);
        if let Some(g) = self.guidance {
            o.guidance = g;
        }
        o.gloss &= !self.no_gloss;
        o.arm &= !self.no_arm;
        o.stochastic = !self.deterministic;
        o
    }
}

fn main() {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn load_config(cli: &Cli) -> Result<TrainConfig> {
    let mut cfg = match &cli.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn table(cli: &Cli) -> Result<MappingTable> {
    Ok(match &cli.table {
        Some(p) => MappingTable::load(p)?,
        None => MappingTable::default(),
    })
}

fn extractor(cli: &Cli, audio_dim: usize) -> Result<FeatureExtractor> {
    Ok(match cli.features {
        Features::Mfcc => FeatureExtractor::default(),
        Features::Service => FeatureExtractor::Service(
            FeatureServiceClient::from_env(4, Some(audio_dim)).with_context(|| format!("set {FEATURE_URL_ENV}"))?,
        ),
    })
}

fn dataset(cfg: &TrainConfig, table: &MappingTable, fx: &FeatureExtractor) -> Result<Vec<Item>> {
    Ok(match &cfg.data_dir {
        Some(dir) => load_dataset(dir, fx).with_context(|| format!("loading {}", dir.display()))?,
        None => synth_corpus(&cfg.corpus, table, &PoseTable::default(), fx)?,
    })
}

/// The configuration a model directory was trained with.
fn trained_config(model: &Path) -> Result<TrainConfig> {
    let m = RunManifest::load(model.join(MANIFEST_FILE))?;
    Ok(serde_json::from_value(m.config)?)
}

fn manifest_path(out: &Path) -> PathBuf {
    out.with_extension("manifest.json")
}

fn run(cli: Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Gloss { text, json, llm } => {
            let table = table(&cli)?;
            let g = if *llm {
                LlmClient::from_env()?.gloss_via_llm(text, &rule_prompt(&table))?
            } else {
                compile_gloss(text, &table)?
            };
            if *json {
                println!("{}", serde_json::to_string_pretty(&json!({ "text": text, "gloss": g.text, "units": g.units }))?);
            } else {
                println!("{}", g.text);
            }
        }
        Cmd::Synth { out, sentences } => {
            let mut cfg = load_config(&cli)?;
            if let Some(n) = sentences {
                cfg.corpus.sentences = *n;
            }
            if let Some(s) = cli.seed {
                cfg.corpus.seed = s;
            }
            let fx = extractor(&cli, cfg.diffusion.audio_dim)?;
            let items = synth_corpus(&cfg.corpus, &table(&cli)?, &PoseTable::default(), &fx)?;
            save_dataset(&items, out)?;
            println!("wrote {} items to {}", items.len(), out.display());
        }
        Cmd::TrainAe(a) | Cmd::TrainClip(a) | Cmd::TrainDiffusion(a) | Cmd::Train(a) => {
            let mut cfg = load_config(&cli)?;
            if let Some(d) = &a.data {
                cfg.data_dir = Some(d.clone());
            }
            if let Some(o) = &a.out {
                cfg.out_dir = o.clone();
            }
            cfg.resume |= a.resume;
            let table = table(&cli)?;
            let items = dataset(&cfg, &table, &extractor(&cli, cfg.diffusion.audio_dim)?)?;
            let stage = match &cli.cmd {
                Cmd::TrainAe(_) => Some(Stage::Autoencoder),
                Cmd::TrainClip(_) => Some(Stage::Contrastive),
                Cmd::TrainDiffusion(_) => Some(Stage::Joint),
                _ => None,
            };
            let history = match stage {
                Some(s) => run_stage(&cfg, &table, &items, s)?,
                None => run_train(&cfg, &table, &items)?.history,
            };
            if let Some(last) = history.last() {
                println!("{} epoch {} loss {:.5}", last.stage, last.epoch, last.loss);
            }
            println!("checkpoints in {}", cfg.out_dir.display());
        }
        Cmd::Generate {
            model,
            text,
            audio,
            out,
            sampling,
        } => {
            let models = Models::load(model)?;
            let seed = cli.seed.unwrap_or(models.meta.seed);
            let opts = sampling.options(&models, seed);
            let track = AudioTrack::read_wav(audio).with_context(|| format!("reading {}", audio.display()))?;
            let fx = extractor(&cli, models.diffusion.config.audio_dim)?;
            let g = run_generate(&models, &table(&cli)?, text, &track, &fx, opts)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            save_motion(&g.motion, out)?;
            let mut m = RunManifest::new(
                "generate",
                json!({ "model": model, "text": text, "audio": audio, "options": opts }),
            );
            m.seeds.push(("generate".into(), seed));
            for name in [AE_FILE, CLIP_FILE, DIFFUSION_FILE, RHYTHM_FILE, MEAN_FILE] {
                m.add_artifact(name, model.join(name))?;
            }
            m.add_artifact("motion", out)?;
            m.save(manifest_path(out))?;
            println!("wrote {} frames to {}", g.motion.len(), out.display());
        }
        Cmd::Evaluate {
            model,
            data,
            all,
            out,
            sampling,
        } => {
            let mut cfg = trained_config(model)?;
            if let Some(d) = data {
                cfg.data_dir = Some(d.clone());
            }
            let models = Models::load(model)?;
            let fx = extractor(&cli, models.diffusion.config.audio_dim)?;
            let items = dataset(&cfg, &table(&cli)?, &fx)?;
            let chosen: Vec<&Item> = if *all {
                items.iter().collect()
            } else {
                let split: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(model.join(SPLIT_FILE))?)?;
                let ids: Vec<&str> = split["test"].as_array().into_iter().flatten().filter_map(|v| v.as_str()).collect();
                let chosen: Vec<&Item> = items.iter().filter(|it| ids.contains(&it.id.as_str())).collect();
                if chosen.len() != ids.len() {
                    bail!("dataset lacks {} of the {} test items", ids.len() - chosen.len(), ids.len());
                }
                chosen
            };
            let seed = cli.seed.unwrap_or(models.meta.seed);
            let opts = EvalOptions {
                gen: sampling.options(&models, seed),
                batch: 64,
                pck_delta_mm: cfg.pck_delta_mm,
                gad_tau_s: cfg.gad_tau_s,
            };
            let ev = evaluate_items(&models, &chosen, &PoseTable::default(), opts)?;
            let report = json!({ "generated": ev.report, "baseline": ev.baseline, "options": opts });
            for (name, r) in [("generated", &ev.report), ("mean pose", &ev.baseline)] {
                println!(
                    "{name:>10}: PCK {:.4}  MAJE {:.3} mm  MAD {:.1} mm/s²  FGD {}  GAD {}",
                    r.pck,
                    r.maje,
                    r.mad,
                    r.fgd.map_or("-".into(), |v| format!("{v:.4}")),
                    r.gad.map_or("-".into(), |v| format!("{v:.3}")),
                );
            }
            if let Some(out) = out {
                std::fs::write(out, serde_json::to_string_pretty(&report)?)?;
                let mut m = RunManifest::new("evaluate", json!({ "model": model, "items": chosen.len() }));
                m.seeds.push(("evaluate".into(), seed));
                m.add_report(out)?;
                m.save(manifest_path(out))?;
            }
        }
        Cmd::DumpEmbeddings { model, data, out } => {
            let mut cfg = trained_config(model)?;
            if let Some(d) = data {
                cfg.data_dir = Some(d.clone());
            }
            let models = Models::load(model)?;
            let items = dataset(&cfg, &table(&cli)?, &extractor(&cli, models.diffusion.config.audio_dim)?)?;
            let mut gloss = Vec::with_capacity(items.len());
            let mut motion = Vec::with_capacity(items.len());
            for it in &items {
                gloss.push(models.clip.encode_gloss(&it.gloss)?);
                motion.push(models.clip.encode_motion(&it.motion)?);
            }
            let ids: Vec<&str> = items.iter().map(|it| it.id.as_str()).collect();
            let doc = json!({ "ids": ids, "gloss": gloss, "motion": motion });
            std::fs::write(out, serde_json::to_string(&doc)?)?;
            println!("wrote {} × {} embeddings to {}", items.len(), models.clip.config.embed_dim, out.display());
        }
    }
    Ok(())
}

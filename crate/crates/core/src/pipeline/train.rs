//! Staged training: statistics, rhythm warm-up, autoencoder, contrastive
//! encoders, latent statistics, then diffusion trained jointly with the rhythm
//! generator under the weighted objective.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Tensor, Var};
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::Item;
use super::generate::{ModelMeta, Models, MODELS_META_FILE};
use super::{
    semantic_loss_tensor, split_dataset, total_loss_tensor, ArmMode, RunManifest, SemanticTarget, TrainConfig,
    AE_FILE, CLIP_FILE, DIFFUSION_FILE, MANIFEST_FILE, MEAN_FILE, RHYTHM_FILE, TRAIN_LOG_FILE,
};
use crate::diffusion::{
    noise_loss_parts, predict_z0, train_dropout_condition, Condition, GlossCondition, NoisePredictor,
};
use crate::encoders::{ClipModel, GlossTokenizer};
use crate::error::{Error, Result, StageExt};
use crate::latent::{latent_len, pad_rows, Autoencoder, TrainOptions};
use crate::motion::{load_motion, mean_motion, save_motion, MeanMotion, MotionSequence};
use crate::nn::{scalar, Adam, AdamConfig, Checkpoint};
use crate::rhythm::{centered_target, rhythm_loss_tensor, RhythmGenerator};
use crate::rules::MappingTable;
use crate::stats::{batch_tensor, flatten_frames, tensor_row, ChannelStats};
use crate::train::{epoch_batches, stage_rng};

pub const STATE_FILE: &str = "train_state.safetensors";
pub const SPLIT_FILE: &str = "split.json";
const STATE_KIND: &str = "train_state";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: String,
    pub epoch: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub semantic: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rhythm: Option<f64>,
    /// Wall-clock seconds since the run started.
    #[serde(default)]
    pub elapsed_s: f64,
}

impl EpochLog {
    fn simple(stage: &str, epoch: usize, loss: f64) -> Self {
        Self {
            stage: stage.into(),
            epoch,
            loss,
            noise: None,
            semantic: None,
            rhythm: None,
            elapsed_s: 0.0,
        }
    }
}

pub struct TrainOutcome {
    pub models: Models,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub history: Vec<EpochLog>,
}

#[derive(Serialize, Deserialize)]
struct Split {
    train: Vec<String>,
    test: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    /// Completed diffusion epochs.
    epoch: usize,
    steps: u64,
}

struct Logger {
    file: File,
    start: std::time::Instant,
    history: Vec<EpochLog>,
}

impl Logger {
    fn push(&mut self, mut e: EpochLog) -> Result<()> {
        e.elapsed_s = self.start.elapsed().as_secs_f64();
        log::info!("{} epoch {} loss {:.5}", e.stage, e.epoch, e.loss);
        writeln!(self.file, "{}", serde_json::to_string(&e)?)?;
        self.history.push(e);
        Ok(())
    }
}

/// Per-item arrays shared by the rhythm and diffusion stages.
struct Prepared {
    /// Normalised audio features (T_a, d_a).
    feats: Vec<Array2<f64>>,
    /// Raw audio features, pooled later by the diffusion model.
    raw_feats: Vec<Array2<f64>>,
    /// Ground truth (L, 3J), mm.
    gt: Vec<Array2<f64>>,
    /// M − M̄, (L, 3J), mm.
    targets: Vec<Array2<f64>>,
    glosses: Vec<String>,
    lens: Vec<usize>,
}

fn prepare(items: &[&Item], models_rhythm: &RhythmGenerator, mean: &crate::motion::MeanMotion) -> Result<Prepared> {
    let mut p = Prepared {
        feats: Vec::new(),
        raw_feats: Vec::new(),
        gt: Vec::new(),
        targets: Vec::new(),
        glosses: Vec::new(),
        lens: Vec::new(),
    };
    for it in items {
        p.feats.push(models_rhythm.feature_rows(&it.features)?);
        p.raw_feats.push(it.features.frames.clone());
        p.gt.push(flatten_frames(it.motion.frames()));
        p.targets.push(flatten_frames(&centered_target(&it.motion, mean)?));
        p.glosses.push(it.gloss.clone());
        p.lens.push(it.motion.len());
    }
    Ok(p)
}

/// (B, L, 3J) rhythm offsets for a batch whose motions share length `len`.
fn rhythm_batch(rhythm: &RhythmGenerator, feats: &[&Array2<f64>], len: usize) -> Result<Tensor> {
    if feats.iter().all(|f| f.dim() == feats[0].dim()) {
        let owned: Vec<Array2<f64>> = feats.iter().map(|f| (*f).clone()).collect();
        return rhythm.forward(&batch_tensor(&owned, rhythm.dtype())?, len);
    }
    let parts = feats
        .iter()
        .map(|f| rhythm.forward(&batch_tensor(&[(*f).clone()], rhythm.dtype())?, len))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&parts, 0)?)
}

fn prefixed(prefix: &str, vars: Vec<(String, Var)>) -> Vec<(String, Var)> {
    vars.into_iter().map(|(n, v)| (format!("{prefix}{n}"), v)).collect()
}

fn warm_up_rhythm(cfg: &TrainConfig, rhythm: &RhythmGenerator, p: &Prepared, log: &mut Logger) -> Result<()> {
    let mut opt = Adam::new(rhythm.store.vars(), AdamConfig { lr: cfg.lr, ..Default::default() });
    let batch = cfg.effective_batch(p.lens.len());
    for epoch in 0..cfg.arm_warmup_epochs {
        let mut rng = stage_rng(cfg.seed, "arm", epoch);
        let (mut sum, mut n) = (0.0, 0usize);
        for idx in epoch_batches(&p.lens, batch, &mut rng) {
            let feats: Vec<&Array2<f64>> = idx.iter().map(|&i| &p.feats[i]).collect();
            let targets: Vec<Array2<f64>> = idx.iter().map(|&i| p.targets[i].clone()).collect();
            let pred = rhythm_batch(rhythm, &feats, p.lens[idx[0]])?;
            let loss = rhythm_loss_tensor(&pred, &batch_tensor(&targets, rhythm.dtype())?)?;
            let v = scalar(&loss)?;
            if !v.is_finite() {
                return Err(Error::DivergenceDetected(format!("rhythm warm-up epoch {epoch}")));
            }
            opt.step(&loss.backward()?)?;
            sum += v * idx.len() as f64;
            n += idx.len();
        }
        log.push(EpochLog::simple("arm", epoch, sum / n.max(1) as f64))?;
    }
    Ok(())
}

/// Motions the autoencoder and latent statistics see as semantic targets.
fn semantic_motions(cfg: &TrainConfig, items: &[&Item], rhythm: &RhythmGenerator) -> Result<Vec<MotionSequence>> {
    items
        .iter()
        .map(|it| {
            if cfg.arm_enabled && cfg.semantic_target == SemanticTarget::Residual {
                let off = rhythm.rhythm_generate(&it.features, it.motion.len())?;
                it.motion.with_frames(it.motion.frames() - &off.offsets)
            } else {
                Ok(it.motion.clone())
            }
        })
        .collect()
}

fn train_clip(cfg: &TrainConfig, clip: &ClipModel, items: &[&Item], log: &mut Logger) -> Result<()> {
    let mut opt = Adam::new(clip.store.vars(), AdamConfig { lr: cfg.lr, ..Default::default() });
    let lens: Vec<usize> = items.iter().map(|it| it.motion.len()).collect();
    let batch = cfg.effective_batch(items.len());
    for epoch in 0..cfg.clip_epochs {
        let mut rng = stage_rng(cfg.seed, "clip", epoch);
        let (mut sum, mut n) = (0.0, 0usize);
        for idx in epoch_batches(&lens, batch, &mut rng) {
            if idx.len() < 2 {
                continue;
            }
            let ms: Vec<&MotionSequence> = idx.iter().map(|&i| &items[i].motion).collect();
            let gs: Vec<&str> = idx.iter().map(|&i| items[i].gloss.as_str()).collect();
            sum += clip.finetune_step(&mut opt, &ms, &gs)? * idx.len() as f64;
            n += idx.len();
        }
        log.push(EpochLog::simple("clip", epoch, sum / n.max(1) as f64))?;
    }
    Ok(())
}

fn repeat_rows(t: &Tensor, k: usize) -> Result<Tensor> {
    if k == 1 {
        return Ok(t.clone());
    }
    Ok(Tensor::cat(&vec![t; k], 0)?)
}

struct StepLosses {
    total: f64,
    noise: f64,
    semantic: f64,
    rhythm: f64,
}

fn diffusion_step(
    cfg: &TrainConfig,
    models: &Models,
    p: &Prepared,
    idx: &[usize],
    opt: &mut Adam,
    rng: &mut ChaCha8Rng,
) -> Result<StepLosses> {
    let b = idx.len();
    let l = p.lens[idx[0]];
    let tz = latent_len(l);
    let dtype = models.diffusion.dtype();
    let arm_on = cfg.arm_enabled;

    let (rloss, pred_rows) = if arm_on {
        let feats: Vec<&Array2<f64>> = idx.iter().map(|&i| &p.feats[i]).collect();
        let pred = rhythm_batch(&models.rhythm, &feats, l)?;
        let targets: Vec<Array2<f64>> = idx.iter().map(|&i| p.targets[i].clone()).collect();
        let rl = rhythm_loss_tensor(&pred, &batch_tensor(&targets, models.rhythm.dtype())?)?;
        let detached = pred.detach();
        let rows = (0..b).map(|k| tensor_row(&detached, k)).collect::<Result<Vec<_>>>()?;
        (Some(rl), Some(rows))
    } else {
        (None, None)
    };

    let ae = &models.ae;
    let rows: Vec<Array2<f64>> = idx
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            let mut r = p.gt[i].clone();
            if let (Some(pr), SemanticTarget::Residual) = (&pred_rows, cfg.semantic_target) {
                r -= &pr[k];
            }
            pad_rows(&ae.coord_stats.normalize(&r.view()))
        })
        .collect();
    let z = ae.encode_tensor(&batch_tensor(&rows, ae.dtype())?)?.detach().to_dtype(dtype)?;
    let stats = &models.diffusion.latent_stats;
    let z0 = z
        .broadcast_sub(&stats.mean_tensor(dtype)?)?
        .broadcast_div(&stats.std_tensor(dtype)?)?;

    let gloss = if cfg.gloss_conditioning {
        let texts: Vec<&str> = idx.iter().map(|&i| p.glosses[i].as_str()).collect();
        let enc = models.clip.encode_gloss_batch(&texts)?;
        let keep: Vec<bool> = (0..b)
            .map(|_| train_dropout_condition((), cfg.p_drop, rng).is_some())
            .collect();
        Some((enc, keep))
    } else {
        None
    };
    let audio_rows: Vec<Array2<f64>> = idx
        .iter()
        .map(|&i| models.diffusion.audio_rows(&p.raw_feats[i], tz))
        .collect();
    let audio = batch_tensor(&audio_rows, dtype)?;

    let k = cfg.noise_draws;
    let cond = Condition {
        gloss: match gloss {
            None => None,
            Some((enc, keep)) => Some(GlossCondition {
                embedding: repeat_rows(&enc.embedding.detach().to_dtype(dtype)?, k)?,
                clauses: repeat_rows(&enc.clauses.detach().to_dtype(dtype)?, k)?,
                clause_counts: enc.clause_counts.repeat(k),
                keep: keep.repeat(k),
            }),
        },
        audio: repeat_rows(&audio, k)?,
    };
    let z0 = repeat_rows(&z0, k)?;
    let schedule = &models.diffusion.schedule;
    let parts = noise_loss_parts(&models.diffusion, schedule, &z0, &cond, rng)?;
    let z0_hat = predict_z0(schedule, &parts.zn, &parts.steps, &parts.eps_hat)?;
    let sem = semantic_loss_tensor(&z0_hat, &z0)?;
    let zero = Tensor::zeros((), dtype, &candle_core::Device::Cpu)?;
    let joint = arm_on && cfg.arm_mode == ArmMode::Joint;
    let r_term = match (&rloss, joint) {
        (Some(r), true) => r.to_dtype(dtype)?,
        _ => zero,
    };
    let total = total_loss_tensor(&parts.loss, &sem, &r_term, cfg.weights)?;
    let v = scalar(&total)?;
    if !v.is_finite() {
        return Err(Error::DivergenceDetected(format!("joint loss {v}")));
    }
    opt.step(&total.backward()?)?;
    Ok(StepLosses {
        total: v,
        noise: scalar(&parts.loss)?,
        semantic: scalar(&sem)?,
        rhythm: match &rloss {
            Some(r) => scalar(r)?,
            None => 0.0,
        },
    })
}

fn joint_optimizer(cfg: &TrainConfig, models: &Models) -> Adam {
    let mut vars = prefixed("diffusion.", models.diffusion.store.vars());
    if cfg.arm_enabled && cfg.arm_mode == ArmMode::Joint {
        vars.extend(prefixed("rhythm.", models.rhythm.store.vars()));
    }
    Adam::new(vars, AdamConfig { lr: cfg.lr, ..Default::default() })
}

fn save_state(dir: &Path, opt: &Adam, epoch: usize) -> Result<()> {
    let meta = StateMeta {
        epoch,
        steps: opt.steps_taken(),
    };
    Checkpoint::new(STATE_KIND, serde_json::to_value(meta)?)
        .with_tensors("", opt.state_tensors(""))
        .save(dir.join(STATE_FILE))?;
    Ok(())
}

fn load_mean(dir: &Path) -> Result<(MeanMotion, ModelMeta)> {
    let need = |name: &str| {
        let p = dir.join(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::MissingCheckpoint(p))
        }
    };
    let meta: ModelMeta = serde_json::from_str(&std::fs::read_to_string(need(MODELS_META_FILE)?)?)?;
    let m = load_motion(need(MEAN_FILE)?)?;
    let mean = MeanMotion {
        fps: m.fps,
        joint_map: m.joint_map,
        count: meta.mean_count,
        frames: m.into_frames(),
    };
    Ok((mean, meta))
}

fn model_meta(cfg: &TrainConfig, mean: &MeanMotion, ae_sha256: Option<String>) -> ModelMeta {
    ModelMeta {
        seed: cfg.seed,
        guidance: cfg.guidance,
        arm_enabled: cfg.arm_enabled,
        gloss_conditioning: cfg.gloss_conditioning,
        mean_count: mean.count,
        ae_sha256,
    }
}

/// Statistics, rhythm warm-up and the autoencoder (trained on ground truth
/// plus residuals).
fn stage_autoencoder(
    cfg: &TrainConfig,
    train: &[&Item],
    log: &mut Logger,
) -> Result<(Autoencoder, RhythmGenerator, MeanMotion)> {
    let dtype = DType::F32;
    let motions: Vec<MotionSequence> = train.iter().map(|it| it.motion.clone()).collect();
    let flat: Vec<Array2<f64>> = motions.iter().map(|m| flatten_frames(m.frames())).collect();
    let coord_stats = ChannelStats::from_rows(flat.iter().map(|a| a.view()), 1e-3).stage("statistics")?;
    let audio_stats =
        ChannelStats::from_rows(train.iter().map(|it| it.features.frames.view()), 1e-6).stage("statistics")?;
    if audio_stats.dim() != cfg.diffusion.audio_dim {
        return Err(Error::InvalidConfig(format!(
            "audio features have {} channels, configuration expects {}",
            audio_stats.dim(),
            cfg.diffusion.audio_dim
        )));
    }
    let mean = mean_motion(&motions, None).stage("statistics")?;

    let rhythm = RhythmGenerator::new(
        cfg.rhythm.clone(),
        audio_stats,
        coord_stats.std.clone(),
        cfg.seed.wrapping_add(3),
        dtype,
    )?;
    if cfg.arm_enabled {
        let p = prepare(train, &rhythm, &mean)?;
        warm_up_rhythm(cfg, &rhythm, &p, log).stage("rhythm warm-up")?;
    }

    let mut ae_data = motions;
    if cfg.arm_enabled && cfg.semantic_target == SemanticTarget::Residual {
        ae_data.extend(semantic_motions(cfg, train, &rhythm).stage("residuals")?);
    }
    let ae = Autoencoder::new(cfg.ae.clone(), coord_stats, cfg.seed.wrapping_add(1), dtype)?;
    let opts = TrainOptions {
        epochs: cfg.ae_epochs,
        batch: cfg.effective_batch(ae_data.len()),
        lr: cfg.lr,
        seed: cfg.seed,
    };
    let mut ae_log = Vec::new();
    ae.train(&ae_data, opts, |e, l| ae_log.push(EpochLog::simple("ae", e, l)))
        .stage("autoencoder")?;
    for e in ae_log {
        log.push(e)?;
    }
    Ok((ae, rhythm, mean))
}

fn stage_contrastive(
    cfg: &TrainConfig,
    table: &MappingTable,
    coord_stats: ChannelStats,
    train: &[&Item],
    log: &mut Logger,
) -> Result<ClipModel> {
    let clip = ClipModel::new(
        cfg.encoder.clone(),
        GlossTokenizer::from_table(table),
        coord_stats,
        cfg.seed.wrapping_add(2),
        DType::F32,
    )?;
    train_clip(cfg, &clip, train, log).stage("contrastive encoders")?;
    Ok(clip)
}

/// Latent statistics and a fresh denoiser on top of the frozen stages.
fn assemble(
    cfg: &TrainConfig,
    train: &[&Item],
    ae: Autoencoder,
    clip: ClipModel,
    rhythm: RhythmGenerator,
    mean: MeanMotion,
    ae_sha256: Option<String>,
) -> Result<Models> {
    let residuals = semantic_motions(cfg, train, &rhythm).stage("residuals")?;
    let latent_rows: Vec<Array2<f64>> = residuals
        .iter()
        .map(|m| Ok(ae.ae_encode(m)?.codes))
        .collect::<Result<_>>()
        .stage("latent statistics")?;
    let latent_stats =
        ChannelStats::from_rows(latent_rows.iter().map(|a| a.view()), 1e-3).stage("latent statistics")?;
    let diffusion = NoisePredictor::new(
        cfg.diffusion.clone(),
        latent_stats,
        rhythm.feature_stats.clone(),
        cfg.seed.wrapping_add(4),
        DType::F32,
    )?;
    Ok(Models {
        meta: model_meta(cfg, &mean, ae_sha256),
        ae,
        clip,
        diffusion,
        rhythm,
        mean,
    })
}

/// Diffusion trained jointly with the rhythm generator; checkpoints and
/// optimiser state are written after every epoch.
fn stage_joint(
    cfg: &TrainConfig,
    models: &Models,
    train: &[&Item],
    dir: &Path,
    state: Option<(Checkpoint, usize, u64)>,
    log: &mut Logger,
) -> Result<()> {
    let p = prepare(train, &models.rhythm, &models.mean)?;
    let mut opt = joint_optimizer(cfg, models);
    let mut start = 0;
    if let Some((ck, epoch, steps)) = state {
        opt.load_state(&ck.tensor_map(), "", steps)?;
        start = epoch;
    }
    let batch = cfg.effective_batch(train.len());
    for epoch in start..cfg.diffusion_epochs {
        let mut rng = stage_rng(cfg.seed, "diffusion", epoch);
        let (mut t, mut nz, mut sm, mut rh, mut n) = (0.0, 0.0, 0.0, 0.0, 0usize);
        for idx in epoch_batches(&p.lens, batch, &mut rng) {
            let s = diffusion_step(cfg, models, &p, &idx, &mut opt, &mut rng).stage("joint training")?;
            let w = idx.len() as f64;
            t += s.total * w;
            nz += s.noise * w;
            sm += s.semantic * w;
            rh += s.rhythm * w;
            n += idx.len();
        }
        let n = n.max(1) as f64;
        log.push(EpochLog {
            stage: "diffusion".into(),
            epoch,
            loss: t / n,
            noise: Some(nz / n),
            semantic: Some(sm / n),
            rhythm: cfg.arm_enabled.then_some(rh / n),
            elapsed_s: 0.0,
        })?;
        models.save_trainable(dir)?;
        save_state(dir, &opt, epoch + 1)?;
    }
    Ok(())
}

/// One training stage, run on its own against checkpoints in `cfg.out_dir`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Statistics, rhythm warm-up and the autoencoder.
    Autoencoder,
    /// Gloss and motion encoders; needs the autoencoder stage.
    Contrastive,
    /// Diffusion with the rhythm generator; needs both earlier stages.
    Joint,
}

struct Run<'a> {
    dir: &'a Path,
    train: Vec<&'a Item>,
    split: Split,
    log: Logger,
}

fn open_run<'a>(cfg: &'a TrainConfig, items: &'a [Item], append: bool) -> Result<Run<'a>> {
    cfg.validate()?;
    let dir = cfg.out_dir.as_path();
    std::fs::create_dir_all(dir)?;
    let (train_idx, test_idx) = split_dataset(items.len(), cfg.split_ratio, cfg.seed)?;
    let train: Vec<&Item> = train_idx.iter().map(|&i| &items[i]).collect();
    let split = Split {
        train: train.iter().map(|it| it.id.clone()).collect(),
        test: test_idx.iter().map(|&i| items[i].id.clone()).collect(),
    };
    std::fs::write(dir.join(SPLIT_FILE), serde_json::to_string_pretty(&split)?)?;
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(dir.join(TRAIN_LOG_FILE))?;
    Ok(Run {
        dir,
        train,
        split,
        log: Logger {
            file,
            start: std::time::Instant::now(),
            history: Vec::new(),
        },
    })
}

fn write_manifest(cfg: &TrainConfig, dir: &Path, command: &str, names: &[&str]) -> Result<()> {
    let mut manifest = RunManifest::new(command, serde_json::to_value(cfg)?);
    manifest.seeds.push(("seed".into(), cfg.seed));
    for name in names {
        manifest.add_artifact(*name, dir.join(name))?;
    }
    manifest.save(dir.join(MANIFEST_FILE))
}

fn resume_state(cfg: &TrainConfig, dir: &Path) -> Result<Option<(Checkpoint, usize, u64)>> {
    let path = dir.join(STATE_FILE);
    if !(cfg.resume && path.exists()) {
        return Ok(None);
    }
    let ck = Checkpoint::load(&path)?.expect_kind(STATE_KIND)?;
    let meta: StateMeta = serde_json::from_value(ck.meta.clone())?;
    log::info!("resuming joint stage after epoch {}", meta.epoch);
    Ok(Some((ck, meta.epoch, meta.steps)))
}

const ALL_ARTIFACTS: [&str; 8] = [
    AE_FILE,
    CLIP_FILE,
    DIFFUSION_FILE,
    RHYTHM_FILE,
    MEAN_FILE,
    MODELS_META_FILE,
    TRAIN_LOG_FILE,
    SPLIT_FILE,
];

/// Runs a single stage; earlier stages are read from `cfg.out_dir`.
pub fn run_stage(cfg: &TrainConfig, table: &MappingTable, items: &[Item], stage: Stage) -> Result<Vec<EpochLog>> {
    let mut run = open_run(cfg, items, stage != Stage::Autoencoder)?;
    let dir = run.dir;
    match stage {
        Stage::Autoencoder => {
            let (ae, rhythm, mean) = stage_autoencoder(cfg, &run.train, &mut run.log)?;
            let sha = ae.save(dir.join(AE_FILE), cfg.seed)?;
            rhythm.save(dir.join(RHYTHM_FILE), cfg.seed)?;
            save_motion(&mean.as_motion()?, dir.join(MEAN_FILE))?;
            let meta = model_meta(cfg, &mean, Some(sha));
            std::fs::write(dir.join(MODELS_META_FILE), serde_json::to_string_pretty(&meta)?)?;
            write_manifest(cfg, dir, "train-ae", &[AE_FILE, RHYTHM_FILE, MEAN_FILE, MODELS_META_FILE, SPLIT_FILE])?;
        }
        Stage::Contrastive => {
            let ae = Autoencoder::load(need(dir, AE_FILE)?)?;
            let clip = stage_contrastive(cfg, table, ae.coord_stats, &run.train, &mut run.log)?;
            clip.save(dir.join(CLIP_FILE), cfg.seed)?;
            write_manifest(cfg, dir, "train-clip", &[CLIP_FILE, SPLIT_FILE])?;
        }
        Stage::Joint => {
            let state = resume_state(cfg, dir)?;
            let models = if state.is_some() {
                Models::load(dir).stage("resume")?
            } else {
                let (mean, meta) = load_mean(dir)?;
                let ae = Autoencoder::load(need(dir, AE_FILE)?)?;
                let clip = ClipModel::load(need(dir, CLIP_FILE)?)?;
                let rhythm = RhythmGenerator::load(need(dir, RHYTHM_FILE)?)?;
                let models = assemble(cfg, &run.train, ae, clip, rhythm, mean, meta.ae_sha256)?;
                models.save_trainable(dir)?;
                models
            };
            stage_joint(cfg, &models, &run.train, dir, state, &mut run.log)?;
            write_manifest(cfg, dir, "train-diffusion", &ALL_ARTIFACTS)?;
        }
    }
    Ok(run.log.history)
}

fn need(dir: &Path, name: &str) -> Result<std::path::PathBuf> {
    let p = dir.join(name);
    if p.exists() {
        Ok(p)
    } else {
        Err(Error::MissingCheckpoint(p))
    }
}

/// Full training run on `items`; writes checkpoints, logs, the split and a
/// manifest to `cfg.out_dir`. With `cfg.resume` and a saved optimiser state
/// the joint stage continues where it stopped.
pub fn run_train(cfg: &TrainConfig, table: &MappingTable, items: &[Item]) -> Result<TrainOutcome> {
    let resuming = cfg.resume && cfg.out_dir.join(STATE_FILE).exists();
    let mut run = open_run(cfg, items, resuming)?;
    let dir = run.dir;
    let state = resume_state(cfg, dir)?;
    let models = match state {
        Some(_) => Models::load(dir).stage("resume")?,
        None => {
            let (ae, rhythm, mean) = stage_autoencoder(cfg, &run.train, &mut run.log)?;
            let clip = stage_contrastive(cfg, table, ae.coord_stats.clone(), &run.train, &mut run.log)?;
            let mut models = assemble(cfg, &run.train, ae, clip, rhythm, mean, None)?;
            models.save(dir)?;
            models
        }
    };
    stage_joint(cfg, &models, &run.train, dir, state, &mut run.log)?;
    write_manifest(cfg, dir, "train", &ALL_ARTIFACTS)?;
    Ok(TrainOutcome {
        models,
        train_ids: run.split.train,
        test_ids: run.split.test,
        history: run.log.history,
    })
}

//! Trained model bundle, batched generation and evaluation against the
//! mean-pose baseline.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::corpus::Item;
use super::{AE_FILE, CLIP_FILE, DIFFUSION_FILE, MEAN_FILE, RHYTHM_FILE};
use crate::audio::{extract_audio_features, AudioFeatures, AudioTrack, FeatureExtractor};
use crate::diffusion::{sample, Condition, GlossCondition, NoisePredictor, SampleOptions};
use crate::encoders::ClipModel;
use crate::error::{Error, Result, StageExt};
use crate::latent::{latent_len, Autoencoder};
use crate::metrics::{evaluate_pairs, fgd, MetricConfig, MetricReport};
use crate::motion::segment::DEFAULT_OTHER_RADIUS_MM;
use crate::motion::{
    load_motion, save_motion, segment_gestures, MeanMotion, MotionSequence, PoseTable, SegmentAnnotation,
};
use crate::rhythm::{compose, RhythmGenerator, RhythmOffset};
use crate::rules::{compile_gloss, CsUnit, MappingTable};
use crate::stats::{batch_tensor, tensor_row};

pub const MODELS_META_FILE: &str = "models.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub seed: u64,
    pub guidance: f64,
    pub arm_enabled: bool,
    pub gloss_conditioning: bool,
    pub mean_count: usize,
    /// sha256 of the autoencoder checkpoint; identifies the FGD feature extractor.
    #[serde(default)]
    pub ae_sha256: Option<String>,
}

pub struct Models {
    pub ae: Autoencoder,
    pub clip: ClipModel,
    pub diffusion: NoisePredictor,
    pub rhythm: RhythmGenerator,
    pub mean: MeanMotion,
    pub meta: ModelMeta,
}

impl Models {
    pub fn fps(&self) -> f64 {
        self.mean.fps
    }

    pub fn save(&mut self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let seed = self.meta.seed;
        self.meta.ae_sha256 = Some(self.ae.save(dir.join(AE_FILE), seed)?);
        self.clip.save(dir.join(CLIP_FILE), seed)?;
        self.save_trainable(dir)
    }

    /// Writes only what the joint stage changes.
    pub fn save_trainable(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let seed = self.meta.seed;
        self.diffusion.save(dir.join(DIFFUSION_FILE), seed)?;
        self.rhythm.save(dir.join(RHYTHM_FILE), seed)?;
        save_motion(&self.mean.as_motion()?, dir.join(MEAN_FILE))?;
        std::fs::write(dir.join(MODELS_META_FILE), serde_json::to_string_pretty(&self.meta)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let need = |name: &str| {
            let p = dir.join(name);
            if p.exists() {
                Ok(p)
            } else {
                Err(Error::MissingCheckpoint(p))
            }
        };
        let meta: ModelMeta = serde_json::from_str(&std::fs::read_to_string(need(MODELS_META_FILE)?)?)?;
        let mean = load_motion(need(MEAN_FILE)?)?;
        Ok(Self {
            ae: Autoencoder::load(need(AE_FILE)?)?,
            clip: ClipModel::load(need(CLIP_FILE)?)?,
            diffusion: NoisePredictor::load(need(DIFFUSION_FILE)?)?,
            rhythm: RhythmGenerator::load(need(RHYTHM_FILE)?)?,
            mean: MeanMotion {
                fps: mean.fps,
                joint_map: mean.joint_map,
                count: meta.mean_count,
                frames: mean.into_frames(),
            },
            meta,
        })
    }
}

/// Inputs for one generated sequence.
#[derive(Debug, Clone)]
pub struct GenRequest {
    pub gloss: String,
    pub units: Vec<CsUnit>,
    pub features: AudioFeatures,
    pub frames: usize,
}

impl GenRequest {
    pub fn from_item(it: &Item) -> Self {
        Self {
            gloss: it.gloss.clone(),
            units: it.units.clone(),
            features: it.features.clone(),
            frames: it.motion.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenOptions {
    pub guidance: f64,
    pub seed: u64,
    /// false samples from the null gloss pathway.
    pub gloss: bool,
    /// false drops the rhythm offsets.
    pub arm: bool,
    pub stochastic: bool,
}

impl GenOptions {
    pub fn for_models(m: &Models, seed: u64) -> Self {
        Self {
            guidance: m.meta.guidance,
            seed,
            gloss: m.meta.gloss_conditioning,
            arm: m.meta.arm_enabled,
            stochastic: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Generated {
    /// M* = M̂ + M̃.
    pub motion: MotionSequence,
    pub semantic: MotionSequence,
    pub offset: RhythmOffset,
}

fn generate_group(models: &Models, reqs: &[&GenRequest], opts: GenOptions, seed: u64) -> Result<Vec<Generated>> {
    let b = reqs.len();
    let l = reqs[0].frames;
    let tz = latent_len(l);
    let dtype = models.diffusion.dtype();
    let rows: Vec<Array2<f64>> = reqs
        .iter()
        .map(|r| models.diffusion.audio_rows(&r.features.frames, tz))
        .collect();
    let audio = batch_tensor(&rows, dtype)?;
    let use_gloss = opts.gloss && models.meta.gloss_conditioning;
    let gloss = if use_gloss {
        let texts: Vec<&str> = reqs.iter().map(|r| r.gloss.as_str()).collect();
        let enc = models.clip.encode_gloss_batch(&texts)?;
        Some(GlossCondition {
            embedding: enc.embedding.to_dtype(dtype)?,
            clauses: enc.clauses.to_dtype(dtype)?,
            clause_counts: enc.clause_counts,
            keep: vec![true; b],
        })
    } else {
        None
    };
    let cond = Condition { gloss, audio };
    let sopts = SampleOptions {
        guidance: if use_gloss { opts.guidance } else { 1.0 },
        seed,
        stochastic: opts.stochastic,
    };
    let dz = models.diffusion.config.latent_dim;
    let z = sample(&models.diffusion, &models.diffusion.schedule, &cond, (b, tz, dz), sopts, dtype)?;
    let stats = &models.diffusion.latent_stats;
    let z = z
        .broadcast_mul(&stats.std_tensor(dtype)?)?
        .broadcast_add(&stats.mean_tensor(dtype)?)?
        .to_dtype(models.ae.dtype())?;
    let decoded = models.ae.decode_tensor(&z, l)?;
    let fps = models.fps();
    reqs.iter()
        .enumerate()
        .map(|(k, r)| {
            let semantic = models
                .ae
                .rows_to_motion(tensor_row(&decoded, k)?, fps)?
                .with_units(r.units.clone());
            let offset = if opts.arm && models.meta.arm_enabled {
                models.rhythm.rhythm_generate(&r.features, l)?
            } else {
                RhythmOffset::zeros(l, semantic.joints())
            };
            Ok(Generated {
                motion: compose(&semantic, &offset)?,
                semantic,
                offset,
            })
        })
        .collect()
}

/// Generates every request; requests are batched by length, `batch` at a time.
pub fn generate_batch(models: &Models, reqs: &[GenRequest], opts: GenOptions, batch: usize) -> Result<Vec<Generated>> {
    let mut out: Vec<Option<Generated>> = vec![None; reqs.len()];
    let mut lengths: Vec<usize> = reqs.iter().map(|r| r.frames).collect();
    lengths.sort_unstable();
    lengths.dedup();
    let mut group = 0u64;
    for l in lengths {
        let idx: Vec<usize> = (0..reqs.len()).filter(|&i| reqs[i].frames == l).collect();
        for chunk in idx.chunks(batch.max(1)) {
            let rs: Vec<&GenRequest> = chunk.iter().map(|&i| &reqs[i]).collect();
            let seed = opts.seed.wrapping_add(group.wrapping_mul(0x9e3779b97f4a7c15));
            group += 1;
            for (&i, g) in chunk.iter().zip(generate_group(models, &rs, opts, seed)?) {
                out[i] = Some(g);
            }
        }
    }
    Ok(out.into_iter().map(|g| g.expect("every request is generated")).collect())
}

/// Text and audio → motion, with stage-tagged errors.
pub fn run_generate(
    models: &Models,
    table: &MappingTable,
    text: &str,
    audio: &AudioTrack,
    extractor: &FeatureExtractor,
    opts: GenOptions,
) -> Result<Generated> {
    let gloss = compile_gloss(text, table).stage("gloss")?;
    let features = extract_audio_features(audio, extractor).stage("audio features")?;
    if features.dim() != models.diffusion.config.audio_dim {
        return Err(Error::shape(format!(
            "{} feature channels, model expects {}",
            features.dim(),
            models.diffusion.config.audio_dim
        )))
        .stage("audio features");
    }
    let frames = ((audio.duration() * models.fps()).round() as usize).max(1);
    let req = GenRequest {
        gloss: gloss.text,
        units: gloss.units,
        features,
        frames,
    };
    let mut out = generate_batch(models, &[req], opts, 1).stage("sampling")?;
    Ok(out.remove(0))
}

/// M̄ resampled to the item's length.
pub fn baseline_motion(models: &Models, it: &Item) -> Result<MotionSequence> {
    let l = it.motion.len();
    Ok(MotionSequence::new(models.mean.resampled(l), it.motion.fps, it.motion.joint_map)?.with_units(it.units.clone()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub gen: GenOptions,
    pub batch: usize,
    pub pck_delta_mm: f64,
    pub gad_tau_s: f64,
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub report: MetricReport,
    pub baseline: MetricReport,
    pub generated: Vec<Generated>,
}

fn report(
    models: &Models,
    preds: &[MotionSequence],
    items: &[&Item],
    poses: &PoseTable,
    config: MetricConfig,
) -> Result<MetricReport> {
    let gts: Vec<MotionSequence> = items.iter().map(|it| it.motion.clone()).collect();
    let segs: Vec<(SegmentAnnotation, SegmentAnnotation)> = preds
        .iter()
        .zip(items)
        .map(|(p, it)| Ok((segment_gestures(p, poses, DEFAULT_OTHER_RADIUS_MM)?, it.audio_segments.clone())))
        .collect::<Result<_>>()?;
    let fgd_value = if preds.len() >= 2 {
        let l = gts[0].len();
        let pf: Vec<Vec<f64>> = preds.iter().map(|m| models.ae.feature_vector(m, l)).collect::<Result<_>>()?;
        let gf: Vec<Vec<f64>> = gts.iter().map(|m| models.ae.feature_vector(m, l)).collect::<Result<_>>()?;
        Some(fgd(&pf, &gf)?)
    } else {
        None
    };
    evaluate_pairs(preds, &gts, Some(&segs), fgd_value, config)
}

/// Generates for every item and scores it, alongside the mean-pose baseline.
pub fn evaluate_items(models: &Models, items: &[&Item], poses: &PoseTable, opts: EvalOptions) -> Result<EvalOutcome> {
    if items.is_empty() {
        return Err(Error::EmptySet);
    }
    let reqs: Vec<GenRequest> = items.iter().map(|it| GenRequest::from_item(it)).collect();
    let generated = generate_batch(models, &reqs, opts.gen, opts.batch).stage("sampling")?;
    let config = MetricConfig {
        pck_delta_mm: opts.pck_delta_mm,
        gad_tau_s: opts.gad_tau_s,
        fps: models.fps(),
        fgd_extractor: models.meta.ae_sha256.clone(),
        ..MetricConfig::default()
    };
    let preds: Vec<MotionSequence> = generated.iter().map(|g| g.motion.clone()).collect();
    let base: Vec<MotionSequence> = items.iter().map(|it| baseline_motion(models, it)).collect::<Result<_>>()?;
    Ok(EvalOutcome {
        report: report(models, &preds, items, poses, config.clone()).stage("metrics")?,
        baseline: report(models, &base, items, poses, config).stage("metrics")?,
        generated,
    })
}

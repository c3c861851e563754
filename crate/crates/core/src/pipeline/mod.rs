//! Training orchestration, generation and evaluation.

mod corpus;
mod generate;
mod train;

use std::path::{Path, PathBuf};

use candle_core::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::DiffusionConfig;
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::latent::AeConfig;
use crate::nn::file_sha256;
use crate::rhythm::RhythmConfig;

pub use corpus::{load_dataset, save_dataset, synth_corpus, CorpusConfig, Item};
pub use generate::{
    baseline_motion, evaluate_items, generate_batch, run_generate, EvalOptions, EvalOutcome, GenOptions, GenRequest,
    Generated, ModelMeta, Models, MODELS_META_FILE,
};
pub use train::{run_stage, run_train, EpochLog, Stage, TrainOutcome, SPLIT_FILE, STATE_FILE};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const AE_FILE: &str = "ae.safetensors";
pub const CLIP_FILE: &str = "clip.safetensors";
pub const DIFFUSION_FILE: &str = "diffusion.safetensors";
pub const RHYTHM_FILE: &str = "rhythm.safetensors";
pub const MEAN_FILE: &str = "mean_motion.json";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.2,
            gamma: 0.1,
        }
    }
}

/// What the latent diffusion model reconstructs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SemanticTarget {
    /// M − M̃: ground truth minus the (detached) rhythm offsets, so M̂ + M̃ ≈ M.
    Residual,
    GroundTruth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArmMode {
    /// Warm-up, then trained together with diffusion under the weighted loss.
    Joint,
    /// Warm-up only; frozen during diffusion training.
    Separate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    /// Dataset directory; a synthetic corpus is generated when absent.
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub corpus: CorpusConfig,
    pub split_ratio: f64,
    pub batch: usize,
    pub lr: f64,
    pub ae: AeConfig,
    pub ae_epochs: usize,
    pub encoder: EncoderConfig,
    pub clip_epochs: usize,
    pub diffusion: DiffusionConfig,
    pub diffusion_epochs: usize,
    /// Independent noise draws per item in every diffusion step.
    pub noise_draws: usize,
    pub p_drop: f64,
    pub guidance: f64,
    pub rhythm: RhythmConfig,
    pub arm_enabled: bool,
    pub arm_mode: ArmMode,
    pub arm_warmup_epochs: usize,
    pub weights: LossWeights,
    pub semantic_target: SemanticTarget,
    /// false trains and samples with the null gloss condition only.
    pub gloss_conditioning: bool,
    /// Continue diffusion training from the checkpoint in `out_dir`.
    pub resume: bool,
    pub pck_delta_mm: f64,
    pub gad_tau_s: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data_dir: None,
            out_dir: PathBuf::from("runs/default"),
            corpus: CorpusConfig::default(),
            split_ratio: 0.8,
            batch: 128,
            lr: 1e-4,
            ae: AeConfig::default(),
            ae_epochs: 100,
            encoder: EncoderConfig::default(),
            clip_epochs: 50,
            diffusion: DiffusionConfig::default(),
            diffusion_epochs: 100,
            noise_draws: 4,
            p_drop: 0.1,
            guidance: 2.5,
            rhythm: RhythmConfig::default(),
            arm_enabled: true,
            arm_mode: ArmMode::Joint,
            arm_warmup_epochs: 50,
            weights: LossWeights::default(),
            semantic_target: SemanticTarget::Residual,
            gloss_conditioning: true,
            resume: false,
            pck_delta_mm: crate::metrics::DEFAULT_PCK_DELTA_MM,
            gad_tau_s: crate::metrics::DEFAULT_GAD_TAU_S,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        let w = self.weights;
        if [w.alpha, w.beta, w.gamma].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("loss weights must be finite and ≥ 0");
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return bad("split ratio must lie in (0, 1)");
        }
        if self.batch < 2 {
            return bad("batch must be ≥ 2");
        }
        if !(0.0..=1.0).contains(&self.p_drop) {
            return bad("p_drop must lie in [0, 1]");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("learning rate must be > 0");
        }
        if self.noise_draws == 0 {
            return bad("noise_draws must be ≥ 1");
        }
        if self.diffusion.latent_dim != self.ae.latent_dim {
            return bad("diffusion latent_dim must match the autoencoder");
        }
        if self.diffusion.gloss_embed_dim != self.encoder.embed_dim
            || self.diffusion.gloss_model_dim != self.encoder.model_dim
        {
            return bad("diffusion gloss dimensions must match the encoder");
        }
        self.diffusion.schedule().map(|_| ())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Format {
            location: format!("{} line {} column {}", path.as_ref().display(), e.line(), e.column()),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Batch clamped to the number of training items.
    pub fn effective_batch(&self, n: usize) -> usize {
        if self.batch > n {
            log::warn!("batch {} exceeds {} training items; clamping", self.batch, n);
        }
        self.batch.min(n).max(1)
    }
}

/// α·noise + β·semantic + γ·rhythm.
pub fn total_loss(noise: f64, semantic: f64, rhythm: f64, w: LossWeights) -> f64 {
    w.alpha * noise + w.beta * semantic + w.gamma * rhythm
}

pub fn total_loss_tensor(noise: &Tensor, semantic: &Tensor, rhythm: &Tensor, w: LossWeights) -> Result<Tensor> {
    Ok(((noise * w.alpha)? + (semantic * w.beta)? + (rhythm * w.gamma)?)?)
}

/// 1 − cos between two flattened latents.
pub fn semantic_loss(z0: &[f64], target: &[f64]) -> Result<f64> {
    if z0.len() != target.len() {
        return Err(Error::shape(format!("{} vs {} values", z0.len(), target.len())));
    }
    let dot: f64 = z0.iter().zip(target).map(|(a, b)| a * b).sum();
    let na = z0.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = target.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok(1.0 - dot / (na * nb))
}

/// Batch mean of 1 − cos over rows of (B, T, C) tensors, each row flattened.
pub fn semantic_loss_tensor(z0: &Tensor, target: &Tensor) -> Result<Tensor> {
    let b = z0.dim(0)?;
    let a = z0.reshape((b, ()))?;
    let t = target.reshape((b, ()))?;
    let dot = (&a * &t)?.sum(1)?;
    let na = a.sqr()?.sum(1)?.sqrt()?;
    let nt = t.sqr()?.sum(1)?.sqrt()?;
    let cos = (dot / ((na * nt)? + 1e-12)?)?;
    Ok(cos.affine(-1.0, 1.0)?.mean_all()?)
}

/// Seeded shuffle into ⌈ratio·n⌉ training and the remaining test indices.
pub fn split_dataset(n: usize, ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 5 {
        return Err(Error::TooFewItems { n, min: 5 });
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidConfig("split ratio must lie in (0, 1)".into()));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    // the small epsilon keeps 0.8 × 10 from rounding up to 9
    let n_train = ((ratio * n as f64) - 1e-9).ceil() as usize;
    let n_train = n_train.clamp(1, n - 1);
    let test = idx.split_off(n_train);
    Ok((idx, test))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub name: String,
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub command: String,
    pub created: String,
    pub seeds: Vec<(String, u64)>,
    pub config: serde_json::Value,
    pub artifacts: Vec<Artifact>,
    pub reports: Vec<PathBuf>,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        Self {
            schema_version: 1,
            command: command.into(),
            created: chrono::Utc::now().to_rfc3339(),
            seeds: Vec::new(),
            config,
            artifacts: Vec::new(),
            reports: Vec::new(),
        }
    }

    pub fn add_artifact(&mut self, name: &str, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let sha256 = file_sha256(path)?;
        self.artifacts.retain(|a| a.name != name);
        self.artifacts.push(Artifact {
            name: name.into(),
            path: path.to_path_buf(),
            sha256,
        });
        Ok(())
    }

    pub fn add_report(&mut self, path: impl AsRef<Path>) -> Result<()> {
        self.add_artifact("report", path.as_ref())?;
        self.reports.push(path.as_ref().to_path_buf());
        Ok(())
    }

    pub fn artifact(&self, name: &str) -> Option<&Artifact> {
        self.artifacts.iter().find(|a| a.name == name)
    }

    /// Every referenced file exists and matches its recorded hash.
    pub fn verify(&self) -> Result<()> {
        for a in &self.artifacts {
            if !a.path.exists() {
                return Err(Error::MissingCheckpoint(a.path.clone()));
            }
            let h = file_sha256(&a.path)?;
            if h != a.sha256 {
                return Err(Error::format(a.path.display().to_string(), "hash does not match the manifest"));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::to_vec_f64;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    #[test]
    fn total_loss_uses_weights() {
        let w = LossWeights::default();
        assert!((total_loss(1.0, 0.5, 0.2, w) - 1.12).abs() < 1e-12);
        assert_eq!(total_loss(0.0, 0.0, 0.0, w), 0.0);
        let noise_only = LossWeights { alpha: 1.0, beta: 0.0, gamma: 0.0 };
        assert_eq!(total_loss(0.7, 3.0, 9.0, noise_only), 0.7);
        let t = |v: f64| Tensor::new(v, &candle_core::Device::Cpu).unwrap();
        let v = to_vec_f64(&total_loss_tensor(&t(1.0), &t(0.5), &t(0.2), w).unwrap()).unwrap()[0];
        assert!((v - 1.12).abs() < 1e-12);
    }

    #[test]
    fn semantic_loss_extremes() {
        let z = [0.3, -1.0, 2.0];
        assert!(semantic_loss(&z, &z).unwrap().abs() < 1e-12);
        let neg: Vec<f64> = z.iter().map(|v| -v).collect();
        assert!((semantic_loss(&z, &neg).unwrap() - 2.0).abs() < 1e-12);
        assert!(matches!(semantic_loss(&z, &[0.0; 3]), Err(Error::ZeroVector)));
    }

    #[test]
    fn semantic_tensor_matches_scalar() {
        let a = [0.3, -1.0, 2.0, 0.5];
        let b = [1.0, 0.2, -0.4, 0.9];
        let ta = Tensor::from_slice(&a, (1, 2, 2), &candle_core::Device::Cpu).unwrap();
        let tb = Tensor::from_slice(&b, (1, 2, 2), &candle_core::Device::Cpu).unwrap();
        let got = to_vec_f64(&semantic_loss_tensor(&ta, &tb).unwrap()).unwrap()[0];
        assert!((got - semantic_loss(&a, &b).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn split_sizes_and_errors() {
        let (tr, te) = split_dataset(10, 0.8, 1).unwrap();
        assert_eq!((tr.len(), te.len()), (8, 2));
        assert_eq!(split_dataset(10, 0.8, 1).unwrap(), (tr, te));
        assert!(matches!(split_dataset(4, 0.8, 1), Err(Error::TooFewItems { n: 4, min: 5 })));
        let (tr, te) = split_dataset(7, 0.8, 3).unwrap();
        assert_eq!((tr.len(), te.len()), (6, 1));
    }

    #[test]
    fn config_defaults_validate_and_round_trip() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        let back: TrainConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        let partial: TrainConfig = serde_json::from_str(r#"{"seed": 9, "batch": 16}"#).unwrap();
        assert_eq!((partial.seed, partial.batch, partial.p_drop), (9, 16, 0.1));
        let bad = TrainConfig { batch: 1, ..TrainConfig::default() };
        assert!(matches!(bad.validate(), Err(Error::InvalidConfig(_))));
        assert_eq!(c.effective_batch(40), 40);
    }

    #[test]
    fn manifest_detects_tampering() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("a.bin");
        std::fs::write(&f, b"abc").unwrap();
        let mut m = RunManifest::new("test", serde_json::json!({}));
        m.add_artifact("a", &f).unwrap();
        m.verify().unwrap();
        let p = dir.path().join(MANIFEST_FILE);
        m.save(&p).unwrap();
        assert_eq!(RunManifest::load(&p).unwrap(), m);
        std::fs::write(&f, b"abd").unwrap();
        assert!(m.verify().is_err());
        std::fs::remove_file(&f).unwrap();
        assert!(matches!(m.verify(), Err(Error::MissingCheckpoint(_))));
    }

    proptest! {
        #[test]
        fn split_is_a_partition(n in 5usize..200, seed in 0u64..1000) {
            let (tr, te) = split_dataset(n, 0.8, seed).unwrap();
            let a: BTreeSet<_> = tr.iter().copied().collect();
            let b: BTreeSet<_> = te.iter().copied().collect();
            prop_assert_eq!(a.len(), tr.len());
            prop_assert!(a.is_disjoint(&b));
            prop_assert_eq!(a.union(&b).count(), n);
            let expect = (0.8 * n as f64 - 1e-9).ceil() as usize;
            prop_assert_eq!(tr.len(), expect.min(n - 1));
        }
    }
}

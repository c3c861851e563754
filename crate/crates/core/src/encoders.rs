//! Gloss and motion encoders trained with a symmetric contrastive objective.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::MotionSequence;
use crate::nn::{
    key_padding_bias, l2_normalize, log_softmax_last, sinusoidal, to_vec_f64, Adam, Block, Checkpoint,
    Init, LayerNorm, Linear, ParamStore, Scope,
};
use crate::rules::MappingTable;
use crate::stats::{flatten_frames, padded_batch, ChannelStats};

pub const CLIP_KIND: &str = "clip";
pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub temperature: f64,
    pub max_clauses: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            model_dim: 64,
            layers: 2,
            heads: 4,
            embed_dim: 64,
            temperature: 0.07,
            max_clauses: 32,
        }
    }
}

/// Whitespace tokenizer over the words of the template fragments.
#[derive(Debug, Clone, PartialEq)]
pub struct GlossTokenizer {
    pub vocab: Vec<String>,
    index: HashMap<String, usize>,
}

fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| c == '.' || c == ',').to_lowercase())
        .filter(|w| !w.is_empty())
}

impl GlossTokenizer {
    pub fn from_vocab(vocab: Vec<String>) -> Self {
        let index = vocab.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { vocab, index }
    }

    pub fn from_table(table: &MappingTable) -> Self {
        let mut set = std::collections::BTreeSet::new();
        let texts = table
            .shape_templates
            .values()
            .chain(table.position_templates.values())
            .chain(table.lip_templates.values())
            .chain(std::iter::once(&table.default_shape_template));
        for t in texts {
            set.extend(words(t));
        }
        set.extend(words("and place the hand while"));
        let mut vocab = vec![PAD.to_string(), UNK.to_string()];
        vocab.extend(set);
        Self::from_vocab(vocab)
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    /// Token ids and the clause index of each token; a clause ends at a period.
    pub fn encode(&self, text: &str) -> (Vec<u32>, Vec<u32>) {
        let mut ids = Vec::new();
        let mut clauses = Vec::new();
        let mut clause = 0u32;
        for raw in text.split_whitespace() {
            for w in words(raw) {
                ids.push(self.index.get(&w).copied().unwrap_or(1) as u32);
                clauses.push(clause);
            }
            if raw.ends_with('.') {
                clause += 1;
            }
        }
        if ids.is_empty() {
            ids.push(1);
            clauses.push(0);
        }
        (ids, clauses)
    }
}

/// Symmetric cross-entropy over the similarity matrix of paired embeddings.
/// Rows of `zm` and `zg` are assumed to be already normalised.
pub fn contrastive_loss(zm: &Tensor, zg: &Tensor, temperature: f64) -> Result<Tensor> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidTemperature(temperature));
    }
    let b = zm.dim(0)?;
    if b < 2 || zg.dim(0)? != b {
        return Err(Error::TooFewItems { n: b.min(zg.dim(0)?), min: 2 });
    }
    let logits = (zm.matmul(&zg.t()?)? / temperature)?;
    let eye = Tensor::eye(b, zm.dtype(), zm.device())?;
    let rows = (log_softmax_last(&logits)? * &eye)?.sum_all()?;
    let cols = (log_softmax_last(&logits.t()?.contiguous()?)? * &eye)?.sum_all()?;
    Ok(((rows + cols)? * (-0.5 / b as f64))?)
}

/// Plain f64 evaluation of [`contrastive_loss`] with its analytic gradient
/// with respect to both embedding sets.
pub fn contrastive_loss_f64(
    zm: &[Vec<f64>],
    zg: &[Vec<f64>],
    temperature: f64,
) -> Result<(f64, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidTemperature(temperature));
    }
    let b = zm.len();
    if b < 2 || zg.len() != b {
        return Err(Error::TooFewItems { n: b.min(zg.len()), min: 2 });
    }
    let s: Vec<Vec<f64>> = zm
        .iter()
        .map(|m| zg.iter().map(|g| m.iter().zip(g).map(|(a, c)| a * c).sum::<f64>() / temperature).collect())
        .collect();
    let softmax = |v: Vec<f64>| {
        let mx = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = v.iter().map(|x| (x - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|x| x / z).collect::<Vec<f64>>()
    };
    let p: Vec<Vec<f64>> = (0..b).map(|i| softmax(s[i].clone())).collect();
    let q: Vec<Vec<f64>> = (0..b).map(|j| softmax((0..b).map(|i| s[i][j]).collect())).collect();
    let mut loss = 0.0;
    for i in 0..b {
        loss -= p[i][i].ln() + q[i][i].ln();
    }
    loss /= 2.0 * b as f64;
    // dL/dS_ij = ((P - I)_ij + (Q - I)_ji) / 2B
    let d = zm[0].len();
    let mut gm = vec![vec![0.0; d]; b];
    let mut gg = vec![vec![0.0; d]; b];
    for i in 0..b {
        for j in 0..b {
            let delta = if i == j { 1.0 } else { 0.0 };
            let g = ((p[i][j] - delta) + (q[j][i] - delta)) / (2.0 * b as f64) / temperature;
            for k in 0..d {
                gm[i][k] += g * zg[j][k];
                gg[j][k] += g * zm[i][k];
            }
        }
    }
    Ok((loss, gm, gg))
}

fn pool_bias(lens: &[usize], t: usize, dtype: DType) -> Result<Tensor> {
    key_padding_bias(lens, t, dtype, &Device::Cpu)
}

/// (B, 1, T) averaging weights over the first `lens[b]` positions.
fn mean_weights(lens: &[usize], t: usize, dtype: DType) -> Result<Tensor> {
    let mut w = vec![0.0; lens.len() * t];
    for (b, &l) in lens.iter().enumerate() {
        for i in 0..l {
            w[b * t + i] = 1.0 / l as f64;
        }
    }
    Ok(Tensor::from_vec(w, (lens.len(), 1, t), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Per-sentence gloss encoding: pooled embedding and per-clause features.
pub struct GlossEncoding {
    /// (B, d), unit norm.
    pub embedding: Tensor,
    /// (B, C, model_dim) mean hidden state of each clause.
    pub clauses: Tensor,
    /// Number of clauses per row.
    pub clause_counts: Vec<usize>,
}

pub struct GlossEncoder {
    tok: Tensor,
    clause: Tensor,
    blocks: Vec<Block>,
    ln: LayerNorm,
    proj: Linear,
    cfg: EncoderConfig,
}

impl GlossEncoder {
    pub fn new(s: &Scope, vocab: usize, cfg: &EncoderConfig) -> Result<Self> {
        let d = cfg.model_dim;
        Ok(Self {
            tok: s.param("tok", &[vocab, d], Init::Normal(0.5))?,
            clause: s.param("clause", &[cfg.max_clauses, d], Init::Normal(0.5))?,
            blocks: (0..cfg.layers)
                .map(|i| Block::new(&s.sub(&format!("block{i}")), d, cfg.heads, false))
                .collect::<Result<_>>()?,
            ln: LayerNorm::new(&s.sub("ln"), d)?,
            proj: Linear::new(&s.sub("proj"), d, cfg.embed_dim)?,
            cfg: cfg.clone(),
        })
    }

    pub fn forward(&self, tokens: &[(Vec<u32>, Vec<u32>)]) -> Result<GlossEncoding> {
        let dtype = self.tok.dtype();
        let dev = Device::Cpu;
        let b = tokens.len();
        let t = tokens.iter().map(|x| x.0.len()).max().unwrap_or(1);
        let maxc = self.cfg.max_clauses;
        let mut ids = vec![0u32; b * t];
        let mut cls = vec![0u32; b * t];
        let lens: Vec<usize> = tokens.iter().map(|x| x.0.len()).collect();
        let counts: Vec<usize> = tokens
            .iter()
            .map(|x| (x.1.iter().max().copied().unwrap_or(0) as usize + 1).min(maxc))
            .collect();
        let cmax = counts.iter().copied().max().unwrap_or(1);
        let mut cw = vec![0.0; b * cmax * t];
        for (r, (tid, cid)) in tokens.iter().enumerate() {
            let mut per = vec![0usize; cmax];
            for &c in cid {
                per[(c as usize).min(maxc - 1)] += 1;
            }
            for (i, (&tk, &c)) in tid.iter().zip(cid).enumerate() {
                let c = (c as usize).min(maxc - 1);
                ids[r * t + i] = tk;
                cls[r * t + i] = c as u32;
                cw[(r * cmax + c) * t + i] = 1.0 / per[c] as f64;
            }
        }
        let ids = Tensor::from_vec(ids, b * t, &dev)?;
        let cls = Tensor::from_vec(cls, b * t, &dev)?;
        let x = (self.tok.index_select(&ids, 0)? + self.clause.index_select(&cls, 0)?)?
            .reshape((b, t, self.cfg.model_dim))?;
        let mut x = x.broadcast_add(&sinusoidal(t, self.cfg.model_dim, dtype, &dev)?)?;
        let bias = pool_bias(&lens, t, dtype)?;
        for blk in &self.blocks {
            x = blk.forward(&x, Some(&bias), None)?;
        }
        let h = self.ln.forward(&x)?;
        let pooled = mean_weights(&lens, t, dtype)?.matmul(&h)?.squeeze(1)?;
        let embedding = l2_normalize(&self.proj.forward(&pooled)?)?;
        let cw = Tensor::from_vec(cw, (b, cmax, t), &dev)?.to_dtype(dtype)?;
        let clauses = cw.matmul(&h)?;
        Ok(GlossEncoding {
            embedding,
            clauses,
            clause_counts: counts,
        })
    }
}

pub struct MotionEncoder {
    inp: Linear,
    blocks: Vec<Block>,
    ln: LayerNorm,
    proj: Linear,
    cfg: EncoderConfig,
}

impl MotionEncoder {
    pub fn new(s: &Scope, channels: usize, cfg: &EncoderConfig) -> Result<Self> {
        let d = cfg.model_dim;
        Ok(Self {
            inp: Linear::new(&s.sub("inp"), channels, d)?,
            blocks: (0..cfg.layers)
                .map(|i| Block::new(&s.sub(&format!("block{i}")), d, cfg.heads, false))
                .collect::<Result<_>>()?,
            ln: LayerNorm::new(&s.sub("ln"), d)?,
            proj: Linear::new(&s.sub("proj"), d, cfg.embed_dim)?,
            cfg: cfg.clone(),
        })
    }

    /// `x`: (B, T, 3J) normalised coordinates, rows valid up to `lens`.
    pub fn forward(&self, x: &Tensor, lens: &[usize]) -> Result<Tensor> {
        let (_, t, _) = x.dims3()?;
        let dtype = x.dtype();
        let mut h = self
            .inp
            .forward(x)?
            .broadcast_add(&sinusoidal(t, self.cfg.model_dim, dtype, &Device::Cpu)?)?;
        let bias = pool_bias(lens, t, dtype)?;
        for blk in &self.blocks {
            h = blk.forward(&h, Some(&bias), None)?;
        }
        let h = self.ln.forward(&h)?;
        let pooled = mean_weights(lens, t, dtype)?.matmul(&h)?.squeeze(1)?;
        l2_normalize(&self.proj.forward(&pooled)?)
    }
}

/// Gloss encoder, motion encoder and everything needed to feed them.
pub struct ClipModel {
    pub store: ParamStore,
    pub config: EncoderConfig,
    pub tokenizer: GlossTokenizer,
    pub coord_stats: ChannelStats,
    pub gloss: GlossEncoder,
    pub motion: MotionEncoder,
}

#[derive(Serialize, Deserialize)]
struct ClipMeta {
    config: EncoderConfig,
    vocab: Vec<String>,
    coord_stats: ChannelStats,
    seed: u64,
}

impl ClipModel {
    pub fn new(
        config: EncoderConfig,
        tokenizer: GlossTokenizer,
        coord_stats: ChannelStats,
        seed: u64,
        dtype: DType,
    ) -> Result<Self> {
        let store = ParamStore::new(seed, dtype);
        let root = store.root();
        let gloss = GlossEncoder::new(&root.sub("gloss"), tokenizer.len(), &config)?;
        let motion = MotionEncoder::new(&root.sub("motion"), coord_stats.dim(), &config)?;
        Ok(Self {
            store,
            config,
            tokenizer,
            coord_stats,
            gloss,
            motion,
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn encode_gloss_batch(&self, texts: &[&str]) -> Result<GlossEncoding> {
        let toks: Vec<_> = texts.iter().map(|t| self.tokenizer.encode(t)).collect();
        self.gloss.forward(&toks)
    }

    pub fn motion_input(&self, motions: &[&MotionSequence]) -> Result<(Tensor, Vec<usize>)> {
        let rows: Vec<Array2<f64>> = motions
            .iter()
            .map(|m| self.coord_stats.normalize(&flatten_frames(m.frames()).view()))
            .collect();
        padded_batch(&rows, self.dtype())
    }

    pub fn encode_motion_batch(&self, motions: &[&MotionSequence]) -> Result<Tensor> {
        let (x, lens) = self.motion_input(motions)?;
        self.motion.forward(&x, &lens)
    }

    pub fn encode_motion(&self, m: &MotionSequence) -> Result<Vec<f64>> {
        to_vec_f64(&self.encode_motion_batch(&[m])?)
    }

    pub fn encode_gloss(&self, text: &str) -> Result<Vec<f64>> {
        to_vec_f64(&self.encode_gloss_batch(&[text])?.embedding)
    }

    pub fn batch_loss(&self, motions: &[&MotionSequence], glosses: &[&str]) -> Result<Tensor> {
        if motions.len() != glosses.len() {
            return Err(Error::shape(format!(
                "{} motions vs {} glosses",
                motions.len(),
                glosses.len()
            )));
        }
        let zm = self.encode_motion_batch(motions)?;
        let zg = self.encode_gloss_batch(glosses)?.embedding;
        contrastive_loss(&zm, &zg, self.config.temperature)
    }

    /// One optimiser step on a paired batch; returns the loss before the step.
    pub fn finetune_step(&self, opt: &mut Adam, motions: &[&MotionSequence], glosses: &[&str]) -> Result<f64> {
        let loss = self.batch_loss(motions, glosses)?;
        let value = crate::nn::scalar(&loss)?;
        if !value.is_finite() {
            return Err(Error::DivergenceDetected(format!("contrastive loss {value}")));
        }
        opt.step(&loss.backward()?)?;
        Ok(value)
    }

    pub fn to_checkpoint(&self, seed: u64) -> Result<Checkpoint> {
        let meta = ClipMeta {
            config: self.config.clone(),
            vocab: self.tokenizer.vocab.clone(),
            coord_stats: self.coord_stats.clone(),
            seed,
        };
        Ok(Checkpoint::new(CLIP_KIND, serde_json::to_value(meta)?).with_tensors("", self.store.tensors()?))
    }

    pub fn from_checkpoint(ck: &Checkpoint, dtype: DType) -> Result<Self> {
        let meta: ClipMeta = serde_json::from_value(ck.meta.clone())?;
        let model = Self::new(
            meta.config,
            GlossTokenizer::from_vocab(meta.vocab),
            meta.coord_stats,
            meta.seed,
            dtype,
        )?;
        model.store.load_tensors(&ck.tensor_map(), "")?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>, seed: u64) -> Result<String> {
        self.to_checkpoint(seed)?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ck = Checkpoint::load(path)?.expect_kind(CLIP_KIND)?;
        Self::from_checkpoint(&ck, DType::F32)
    }
}

/// Cosine similarity of two equal-length vectors.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok(dot / (na * nb))
}

/// Cosine similarity matrix rows = motions, columns = glosses, from a (B, d) pair.
pub fn similarity_matrix(zm: &Tensor, zg: &Tensor) -> Result<Vec<Vec<f64>>> {
    let s = zm.matmul(&zg.t()?)?;
    let b = s.dim(0)?;
    let flat = to_vec_f64(&s)?;
    Ok(flat.chunks(s.dim(D::Minus1)?).take(b).map(<[f64]>::to_vec).collect())
}

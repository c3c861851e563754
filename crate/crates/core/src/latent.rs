//! Motion autoencoder: the latent space the diffusion model works in.
//!
//! Encoder: two stride-2 convolutions (×4 temporal downsampling), a
//! transformer block and a projection to `latent_dim` channels.
//! Decoder: one query per output frame (sinusoidal time features through a
//! linear layer) and `dec_layers` blocks. Self-attention is limited to
//! `±self_window` frames and cross-attention lets frame `i` see latent tokens
//! `j` with `|i/4 - j| <= cross_window`. A latent token `t` can therefore only
//! influence frames in `[4(t - W) - S, 4(t + W) + 3 + S]` per layer stack of
//! depth two (W = cross_window, S = self_window), see [`Autoencoder::influence_range`].

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::MotionSequence;
use crate::nn::{
    attention_bias, scalar, sinusoidal, sinusoidal_at, Adam, AdamConfig, Block, Checkpoint, Conv1d,
    LayerNorm, Linear, ParamStore,
};
use crate::stats::{batch_tensor, flatten_frames, tensor_row, unflatten_frames, ChannelStats};
use crate::train::{epoch_batches, stage_rng};

pub const AE_KIND: &str = "autoencoder";
pub const DOWNSAMPLE: usize = 4;
pub const MIN_AE_SEQUENCES: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AeConfig {
    pub model_dim: usize,
    pub latent_dim: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub self_window: usize,
    pub cross_window: usize,
}

impl Default for AeConfig {
    fn default() -> Self {
        Self {
            model_dim: 64,
            latent_dim: 32,
            heads: 4,
            enc_layers: 1,
            dec_layers: 2,
            self_window: 8,
            cross_window: 2,
        }
    }
}

/// T_z × d_z latent codes.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSequence {
    pub codes: Array2<f64>,
}

impl LatentSequence {
    pub fn new(codes: Array2<f64>) -> Result<Self> {
        if codes.nrows() == 0 {
            return Err(Error::shape("latent sequence needs at least one step"));
        }
        if codes.iter().any(|v| !v.is_finite()) {
            return Err(Error::shape("non-finite latent code"));
        }
        Ok(Self { codes })
    }

    pub fn len(&self) -> usize {
        self.codes.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.codes.iter().copied().collect()
    }
}

pub fn padded_len(len: usize) -> usize {
    len.div_ceil(DOWNSAMPLE) * DOWNSAMPLE
}

pub fn latent_len(len: usize) -> usize {
    len.div_ceil(DOWNSAMPLE)
}

/// Repeats the last row until the length is a multiple of [`DOWNSAMPLE`].
pub fn pad_rows(rows: &Array2<f64>) -> Array2<f64> {
    let len = rows.nrows();
    let target = padded_len(len);
    if target == len {
        return rows.clone();
    }
    let last = rows.row(len - 1).to_owned();
    let mut out = rows.clone();
    for _ in len..target {
        out.push_row(last.view()).expect("same width");
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

pub struct Autoencoder {
    pub store: ParamStore,
    pub config: AeConfig,
    pub coord_stats: ChannelStats,
    joints: usize,
    conv1: Conv1d,
    conv2: Conv1d,
    enc_blocks: Vec<Block>,
    enc_ln: LayerNorm,
    to_z: Linear,
    query: Linear,
    z_in: Linear,
    dec_blocks: Vec<Block>,
    dec_ln: LayerNorm,
    out: Linear,
}

#[derive(Serialize, Deserialize)]
struct AeMeta {
    config: AeConfig,
    coord_stats: ChannelStats,
    joints: usize,
    seed: u64,
}

impl Autoencoder {
    pub fn new(config: AeConfig, coord_stats: ChannelStats, seed: u64, dtype: DType) -> Result<Self> {
        let c = coord_stats.dim();
        if c % 3 != 0 {
            return Err(Error::shape(format!("{c} channels is not 3 × joints")));
        }
        let d = config.model_dim;
        let store = ParamStore::new(seed, dtype);
        let s = store.root();
        let (enc, dec) = (s.sub("enc"), s.sub("dec"));
        let conv1 = Conv1d::new(&enc.sub("conv1"), c, d, 4, 2, 1)?;
        let conv2 = Conv1d::new(&enc.sub("conv2"), d, d, 4, 2, 1)?;
        let enc_blocks = (0..config.enc_layers)
            .map(|i| Block::new(&enc.sub(&format!("block{i}")), d, config.heads, false))
            .collect::<Result<_>>()?;
        let enc_ln = LayerNorm::new(&enc.sub("ln"), d)?;
        let to_z = Linear::new(&enc.sub("to_z"), d, config.latent_dim)?;
        let query = Linear::new(&dec.sub("query"), d, d)?;
        let z_in = Linear::new(&dec.sub("z_in"), config.latent_dim, d)?;
        let dec_blocks = (0..config.dec_layers)
            .map(|i| Block::new(&dec.sub(&format!("block{i}")), d, config.heads, true))
            .collect::<Result<_>>()?;
        let dec_ln = LayerNorm::new(&dec.sub("ln"), d)?;
        let out = Linear::new(&dec.sub("out"), d, c)?;
        Ok(Self {
            joints: c / 3,
            store,
            config,
            coord_stats,
            conv1,
            conv2,
            enc_blocks,
            enc_ln,
            to_z,
            query,
            z_in,
            dec_blocks,
            dec_ln,
            out,
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// Normalised, padded (L4, C) rows for one motion.
    pub fn input_rows(&self, m: &MotionSequence) -> Array2<f64> {
        pad_rows(&self.coord_stats.normalize(&flatten_frames(m.frames()).view()))
    }

    /// (B, L4, C) normalised frames → (B, L4/4, d_z).
    pub fn encode_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let (_, l4, _) = x.dims3()?;
        if l4 % DOWNSAMPLE != 0 {
            return Err(Error::shape(format!("length {l4} is not a multiple of {DOWNSAMPLE}")));
        }
        let h = self.conv1.forward(&x.transpose(1, 2)?)?.gelu_erf()?;
        let h = self.conv2.forward(&h)?.transpose(1, 2)?;
        let tz = l4 / DOWNSAMPLE;
        let mut h = h.broadcast_add(&sinusoidal(tz, self.config.model_dim, self.dtype(), &Device::Cpu)?)?;
        for blk in &self.enc_blocks {
            h = blk.forward(&h, None, None)?;
        }
        self.to_z.forward(&self.enc_ln.forward(&h)?)
    }

    /// (B, T_z, d_z) → (B, frames, C) normalised frames; `frames` ≤ 4·T_z.
    pub fn decode_tensor(&self, z: &Tensor, frames: usize) -> Result<Tensor> {
        let (b, tz, _) = z.dims3()?;
        let dtype = self.dtype();
        let dev = Device::Cpu;
        let d = self.config.model_dim;
        let centers: Vec<f64> = (0..tz).map(|j| (DOWNSAMPLE * j) as f64 + 1.5).collect();
        let mem = self
            .z_in
            .forward(z)?
            .broadcast_add(&sinusoidal_at(&centers, d, dtype, &dev)?)?;
        let q = self.query.forward(&sinusoidal(frames, d, dtype, &dev)?)?;
        let mut h = q.unsqueeze(0)?.broadcast_as((b, frames, d))?.contiguous()?;
        let s = self.config.self_window;
        let w = self.config.cross_window;
        let self_bias = attention_bias(frames, frames, dtype, &dev, |i, j| i.abs_diff(j) <= s)?;
        let cross_bias = attention_bias(frames, tz, dtype, &dev, |i, j| (i / DOWNSAMPLE).abs_diff(j) <= w)?;
        for blk in &self.dec_blocks {
            h = blk.forward(&h, Some(&self_bias), Some((&mem, Some(&cross_bias))))?;
        }
        self.out.forward(&self.dec_ln.forward(&h)?)
    }

    /// Frames a change of latent step `t` may reach when decoding `frames` frames.
    pub fn influence_range(&self, t: usize, frames: usize) -> (usize, usize) {
        let w = self.config.cross_window;
        let s = self.config.self_window * self.config.dec_layers.saturating_sub(1);
        let lo = (DOWNSAMPLE * t.saturating_sub(w)).saturating_sub(s);
        let hi = (DOWNSAMPLE * (t + w) + DOWNSAMPLE - 1 + s).min(frames.saturating_sub(1));
        (lo, hi)
    }

    pub fn ae_encode(&self, m: &MotionSequence) -> Result<LatentSequence> {
        let x = batch_tensor(&[self.input_rows(m)], self.dtype())?;
        LatentSequence::new(tensor_row(&self.encode_tensor(&x)?, 0)?)
    }

    /// Decodes to `frames` frames (default 4·T_z); `like` supplies fps and joint map.
    pub fn ae_decode(&self, z: &LatentSequence, frames: Option<usize>, fps: f64) -> Result<MotionSequence> {
        let frames = frames.unwrap_or(z.len() * DOWNSAMPLE);
        let zt = batch_tensor(&[z.codes.clone()], self.dtype())?;
        let rows = tensor_row(&self.decode_tensor(&zt, frames)?, 0)?;
        self.rows_to_motion(rows, fps)
    }

    pub fn rows_to_motion(&self, rows: Array2<f64>, fps: f64) -> Result<MotionSequence> {
        let rows = self.coord_stats.denormalize(&rows.view());
        MotionSequence::new(unflatten_frames(rows, self.joints), fps, Default::default())
    }

    /// Mean squared error in normalised coordinates over a batch of equal-length motions.
    pub fn recon_loss(&self, motions: &[&MotionSequence]) -> Result<Tensor> {
        let rows: Vec<Array2<f64>> = motions.iter().map(|m| self.input_rows(m)).collect();
        let x = batch_tensor(&rows, self.dtype())?;
        let l4 = x.dim(1)?;
        let y = self.decode_tensor(&self.encode_tensor(&x)?, l4)?;
        Ok((y - x)?.sqr()?.mean_all()?)
    }

    /// Trains on `data`; returns the mean loss of every epoch.
    pub fn train(
        &self,
        data: &[MotionSequence],
        opts: TrainOptions,
        mut on_epoch: impl FnMut(usize, f64),
    ) -> Result<Vec<f64>> {
        if data.len() < MIN_AE_SEQUENCES {
            return Err(Error::TooFewItems {
                n: data.len(),
                min: MIN_AE_SEQUENCES,
            });
        }
        let mut opt = Adam::new(self.store.vars(), AdamConfig { lr: opts.lr, ..Default::default() });
        let keys: Vec<usize> = data.iter().map(|m| padded_len(m.len())).collect();
        let mut history = Vec::with_capacity(opts.epochs);
        for epoch in 0..opts.epochs {
            let mut rng = stage_rng(opts.seed, "ae", epoch);
            let (mut sum, mut n) = (0.0, 0usize);
            for batch in epoch_batches(&keys, opts.batch, &mut rng) {
                let ms: Vec<&MotionSequence> = batch.iter().map(|&i| &data[i]).collect();
                let loss = self.recon_loss(&ms)?;
                let v = scalar(&loss)?;
                if !v.is_finite() {
                    return Err(Error::DivergenceDetected(format!("autoencoder epoch {epoch}")));
                }
                opt.step(&loss.backward()?)?;
                sum += v * ms.len() as f64;
                n += ms.len();
            }
            let mean = sum / n.max(1) as f64;
            on_epoch(epoch, mean);
            history.push(mean);
        }
        Ok(history)
    }

    pub fn reconstruct(&self, m: &MotionSequence) -> Result<MotionSequence> {
        let z = self.ae_encode(m)?;
        self.ae_decode(&z, Some(m.len()), m.fps)
    }

    /// Time-averaged latent of a motion resampled to `len` frames; a fixed-size
    /// feature vector for distribution metrics.
    pub fn feature_vector(&self, m: &MotionSequence, len: usize) -> Result<Vec<f64>> {
        let z = self.ae_encode(&m.resample(len)?)?;
        Ok(z.codes.mean_axis(Axis(0)).expect("non-empty").to_vec())
    }

    pub fn to_checkpoint(&self, seed: u64) -> Result<Checkpoint> {
        let meta = AeMeta {
            config: self.config.clone(),
            coord_stats: self.coord_stats.clone(),
            joints: self.joints,
            seed,
        };
        Ok(Checkpoint::new(AE_KIND, serde_json::to_value(meta)?).with_tensors("", self.store.tensors()?))
    }

    pub fn from_checkpoint(ck: &Checkpoint, dtype: DType) -> Result<Self> {
        let meta: AeMeta = serde_json::from_value(ck.meta.clone())?;
        let ae = Self::new(meta.config, meta.coord_stats, meta.seed, dtype)?;
        ae.store.load_tensors(&ck.tensor_map(), "")?;
        Ok(ae)
    }

    pub fn save(&self, path: impl AsRef<Path>, seed: u64) -> Result<String> {
        self.to_checkpoint(seed)?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ck = Checkpoint::load(path)?.expect_kind(AE_KIND)?;
        Self::from_checkpoint(&ck, DType::F32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::{JointMap, NUM_JOINTS};
    use crate::nn::gradient_check;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_motion(rng: &mut ChaCha8Rng, len: usize) -> MotionSequence {
        let f = Array3::from_shape_fn((len, NUM_JOINTS, 3), |_| rng.gen_range(-50.0..50.0));
        MotionSequence::new(f, 30.0, JointMap::default()).unwrap()
    }

    fn small(dtype: DType) -> Autoencoder {
        let cfg = AeConfig {
            model_dim: 8,
            latent_dim: 4,
            heads: 2,
            ..Default::default()
        };
        Autoencoder::new(cfg, ChannelStats::identity(NUM_JOINTS * 3), 3, dtype).unwrap()
    }

    #[test]
    fn shapes_follow_downsampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ae = small(DType::F32);
        let m = random_motion(&mut rng, 32);
        let z = ae.ae_encode(&m).unwrap();
        assert_eq!(z.codes.dim(), (8, 4));
        assert_eq!(ae.ae_decode(&z, None, 30.0).unwrap().len(), 32);
        let odd = random_motion(&mut rng, 30);
        assert_eq!(ae.ae_encode(&odd).unwrap().len(), 8);
        assert_eq!(ae.reconstruct(&odd).unwrap().len(), 30);
        assert_eq!(ae.ae_encode(&m).unwrap(), z);
    }

    #[test]
    fn zero_latent_decodes_finite() {
        let ae = small(DType::F32);
        let z = LatentSequence::new(Array2::zeros((5, 4))).unwrap();
        let m = ae.ae_decode(&z, None, 30.0).unwrap();
        assert!(m.frames().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn decoder_is_local() {
        let ae = small(DType::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let codes = Array2::from_shape_fn((16, 4), |_| rng.gen_range(-1.0..1.0));
        let mut bumped = codes.clone();
        let t = 8;
        for v in bumped.row_mut(t) {
            *v += 3.0;
        }
        let a = ae.ae_decode(&LatentSequence::new(codes).unwrap(), None, 30.0).unwrap();
        let b = ae.ae_decode(&LatentSequence::new(bumped).unwrap(), None, 30.0).unwrap();
        let (lo, hi) = ae.influence_range(t, 64);
        for k in 0..64 {
            let diff = (&a.frames().index_axis(Axis(0), k) - &b.frames().index_axis(Axis(0), k))
                .iter()
                .map(|v| v.abs())
                .fold(0.0, f64::max);
            if k < lo || k > hi {
                assert!(diff < 1e-9, "frame {k} changed by {diff}");
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let ae = small(DType::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ms = [random_motion(&mut rng, 8), random_motion(&mut rng, 8)];
        let flat = flatten_frames(ms[0].frames());
        let stats = ChannelStats::from_rows([flat.view()], 1e-6).unwrap();
        let ae = Autoencoder::new(ae.config.clone(), stats, 3, DType::F64).unwrap();
        let refs: Vec<&MotionSequence> = ms.iter().collect();
        let err = gradient_check(&ae.store, || ae.recon_loss(&refs), 3, 1e-5).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn zero_epochs_leave_initialisation() {
        let ae = small(DType::F32);
        let before = ae.store.tensors().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<_> = (0..32).map(|_| random_motion(&mut rng, 8)).collect();
        let opts = TrainOptions { epochs: 0, batch: 8, lr: 1e-3, seed: 0 };
        assert!(ae.train(&data, opts, |_, _| {}).unwrap().is_empty());
        let after = ae.store.tensors().unwrap();
        for (k, v) in before {
            let d = (v - &after[&k]).unwrap().abs().unwrap().sum_all().unwrap();
            assert_eq!(scalar(&d).unwrap(), 0.0);
        }
    }

    #[test]
    fn too_few_sequences_rejected() {
        let ae = small(DType::F32);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let data: Vec<_> = (0..4).map(|_| random_motion(&mut rng, 8)).collect();
        let opts = TrainOptions { epochs: 1, batch: 2, lr: 1e-3, seed: 0 };
        assert!(matches!(ae.train(&data, opts, |_, _| {}), Err(Error::TooFewItems { .. })));
    }
}

//! Audio-driven rhythm offsets.
//!
//! Three 1-D convolutions over normalised audio feature frames. The default
//! is deliberately small (8 channels, ±70 ms receptive field at a 10 ms hop):
//! wider or larger generators memorise training sentences. The last
//! convolution projects to J×3 channels in units of the per-channel
//! coordinate std; the result is linearly resampled to the motion length.

use std::path::Path;

use candle_core::{DType, Tensor};
use ndarray::{Array2, Array3, Zip};
use serde::{Deserialize, Serialize};

use crate::audio::AudioFeatures;
use crate::error::{Error, Result};
use crate::motion::{MeanMotion, MotionSequence};
use crate::nn::{interp_matrix, Checkpoint, Conv1d, ParamStore};
use crate::stats::{batch_tensor, tensor_row, unflatten_frames, ChannelStats};

pub const RHYTHM_KIND: &str = "rhythm";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhythmConfig {
    pub hidden: usize,
    pub kernel: usize,
    pub dilations: [usize; 3],
    /// Start from a generator that outputs zero offsets.
    pub zero_init: bool,
}

impl Default for RhythmConfig {
    fn default() -> Self {
        Self {
            hidden: 8,
            kernel: 3,
            dilations: [1, 2, 4],
            zero_init: true,
        }
    }
}

/// Per-frame offsets in mm, L × J × 3.
#[derive(Debug, Clone, PartialEq)]
pub struct RhythmOffset {
    pub offsets: Array3<f64>,
}

impl RhythmOffset {
    pub fn zeros(len: usize, joints: usize) -> Self {
        Self {
            offsets: Array3::zeros((len, joints, 3)),
        }
    }

    pub fn len(&self) -> usize {
        self.offsets.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Mean per-joint offset norm for every frame.
    pub fn magnitude(&self) -> Vec<f64> {
        self.offsets
            .outer_iter()
            .map(|f| {
                let j = f.nrows() as f64;
                f.rows().into_iter().map(|r| r.dot(&r).sqrt()).sum::<f64>() / j
            })
            .collect()
    }
}

pub struct RhythmGenerator {
    pub store: ParamStore,
    pub config: RhythmConfig,
    pub feature_stats: ChannelStats,
    /// Coordinate std per channel; the network predicts offsets in these units.
    pub coord_scale: Vec<f64>,
    convs: [Conv1d; 3],
}

#[derive(Serialize, Deserialize)]
struct RhythmMeta {
    config: RhythmConfig,
    feature_stats: ChannelStats,
    coord_scale: Vec<f64>,
    seed: u64,
}

impl RhythmGenerator {
    pub fn new(
        config: RhythmConfig,
        feature_stats: ChannelStats,
        coord_scale: Vec<f64>,
        seed: u64,
        dtype: DType,
    ) -> Result<Self> {
        let c = coord_scale.len();
        if c == 0 || c % 3 != 0 {
            return Err(Error::shape(format!("{c} output channels is not 3 × joints")));
        }
        let (h, k) = (config.hidden, config.kernel);
        let store = ParamStore::new(seed, dtype);
        let s = store.root();
        let [d1, d2, d3] = config.dilations;
        let pad = |d: usize| d * (k - 1) / 2;
        let c1 = Conv1d::new(&s.sub("conv1"), feature_stats.dim(), h, k, 1, pad(d1))?.with_dilation(d1);
        let c2 = Conv1d::new(&s.sub("conv2"), h, h, k, 1, pad(d2))?.with_dilation(d2);
        let c3 = if config.zero_init {
            Conv1d::zeros(&s.sub("conv3"), h, c, k, 1, pad(d3))?
        } else {
            Conv1d::new(&s.sub("conv3"), h, c, k, 1, pad(d3))?
        }
        .with_dilation(d3);
        Ok(Self {
            store,
            config,
            feature_stats,
            coord_scale,
            convs: [c1, c2, c3],
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn channels(&self) -> usize {
        self.coord_scale.len()
    }

    pub fn feature_rows(&self, f: &AudioFeatures) -> Result<Array2<f64>> {
        if f.dim() != self.feature_stats.dim() {
            return Err(Error::shape(format!(
                "{} feature channels, generator expects {}",
                f.dim(),
                self.feature_stats.dim()
            )));
        }
        Ok(self.feature_stats.normalize(&f.frames.view()))
    }

    /// (B, T_a, d_a) normalised features → (B, L, 3J) offsets in mm.
    pub fn forward(&self, x: &Tensor, len: usize) -> Result<Tensor> {
        let (_, t_a, _) = x.dims3()?;
        let mut h = x.transpose(1, 2)?;
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(&h)?;
            if i < 2 {
                h = h.gelu_erf()?;
            }
        }
        let scale = Tensor::from_vec(self.coord_scale.clone(), (1, self.channels(), 1), &candle_core::Device::Cpu)?
            .to_dtype(self.dtype())?;
        let h = h.broadcast_mul(&scale)?;
        let interp = interp_matrix(t_a, len, self.dtype(), &candle_core::Device::Cpu)?;
        // (B, C, T_a) × (T_a, L) → (B, C, L)
        Ok(h.broadcast_matmul(&interp.t()?)?.transpose(1, 2)?)
    }

    pub fn rhythm_generate(&self, features: &AudioFeatures, len: usize) -> Result<RhythmOffset> {
        let x = batch_tensor(&[self.feature_rows(features)?], self.dtype())?;
        let rows = tensor_row(&self.forward(&x, len)?, 0)?;
        Ok(RhythmOffset {
            offsets: unflatten_frames(rows, self.channels() / 3),
        })
    }

    /// Mean L1 loss of a batch: predicted offsets against (L, 3J) centred targets.
    /// Items with identical feature and target lengths are evaluated together.
    pub fn batch_loss(&self, features: &[Array2<f64>], targets: &[Array2<f64>]) -> Result<Tensor> {
        if features.len() != targets.len() || features.is_empty() {
            return Err(Error::shape("features and targets must pair up"));
        }
        let same = features.iter().all(|f| f.dim() == features[0].dim())
            && targets.iter().all(|t| t.dim() == targets[0].dim());
        if same {
            let x = batch_tensor(features, self.dtype())?;
            let y = batch_tensor(targets, self.dtype())?;
            let pred = self.forward(&x, targets[0].nrows())?;
            return rhythm_loss_tensor(&pred, &y);
        }
        let mut total: Option<Tensor> = None;
        for (f, t) in features.iter().zip(targets) {
            let l = self.batch_loss(std::slice::from_ref(f), std::slice::from_ref(t))?;
            total = Some(match total {
                None => l,
                Some(acc) => (acc + l)?,
            });
        }
        Ok((total.expect("non-empty") / features.len() as f64)?)
    }

    pub fn to_checkpoint(&self, seed: u64) -> Result<Checkpoint> {
        let meta = RhythmMeta {
            config: self.config.clone(),
            feature_stats: self.feature_stats.clone(),
            coord_scale: self.coord_scale.clone(),
            seed,
        };
        Ok(Checkpoint::new(RHYTHM_KIND, serde_json::to_value(meta)?).with_tensors("", self.store.tensors()?))
    }

    pub fn from_checkpoint(ck: &Checkpoint, dtype: DType) -> Result<Self> {
        let meta: RhythmMeta = serde_json::from_value(ck.meta.clone())?;
        let g = Self::new(meta.config, meta.feature_stats, meta.coord_scale, meta.seed, dtype)?;
        g.store.load_tensors(&ck.tensor_map(), "")?;
        Ok(g)
    }

    pub fn save(&self, path: impl AsRef<Path>, seed: u64) -> Result<String> {
        self.to_checkpoint(seed)?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ck = Checkpoint::load(path)?.expect_kind(RHYTHM_KIND)?;
        Self::from_checkpoint(&ck, DType::F32)
    }
}

/// Mean |pred − target| over all elements.
pub fn rhythm_loss_tensor(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.dims() != target.dims() {
        return Err(Error::shape(format!("{:?} vs {:?}", pred.dims(), target.dims())));
    }
    Ok((pred - target)?.abs()?.mean_all()?)
}

/// Ground-truth offset from the mean motion (resampled to M's length).
pub fn centered_target(m: &MotionSequence, mean: &MeanMotion) -> Result<Array3<f64>> {
    if mean.frames.dim().1 != m.joints() {
        return Err(Error::shape(format!("{} vs {} joints", mean.frames.dim().1, m.joints())));
    }
    Ok(m.frames() - &mean.resampled(m.len()))
}

/// Mean L1 norm of M̃ − (M − M̄) over all elements.
pub fn rhythm_loss(offset: &RhythmOffset, m: &MotionSequence, mean: &MeanMotion) -> Result<f64> {
    if offset.offsets.dim() != m.frames().dim() {
        return Err(Error::shape(format!(
            "offsets {:?} vs motion {:?}",
            offset.offsets.dim(),
            m.frames().dim()
        )));
    }
    let target = centered_target(m, mean)?;
    let mut acc = 0.0;
    Zip::from(&offset.offsets).and(&target).for_each(|a, b| acc += (a - b).abs());
    Ok(acc / target.len() as f64)
}

/// M* = M̂ + M̃.
pub fn compose(semantic: &MotionSequence, offset: &RhythmOffset) -> Result<MotionSequence> {
    if offset.offsets.dim() != semantic.frames().dim() {
        return Err(Error::shape(format!(
            "offsets {:?} vs motion {:?}",
            offset.offsets.dim(),
            semantic.frames().dim()
        )));
    }
    semantic.with_frames(semantic.frames() + &offset.offsets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::FeatureBackend;
    use crate::motion::{mean_motion, JointMap, NUM_JOINTS};
    use crate::nn::to_vec_f64;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_motion(rng: &mut ChaCha8Rng, len: usize) -> MotionSequence {
        let f = Array3::from_shape_fn((len, NUM_JOINTS, 3), |_| rng.gen_range(-20.0..20.0));
        MotionSequence::new(f, 30.0, JointMap::default()).unwrap()
    }

    fn features(rng: &mut ChaCha8Rng, t: usize) -> AudioFeatures {
        let f = Array2::from_shape_fn((t, 6), |_| rng.gen_range(-1.0..1.0));
        AudioFeatures::new(f, 0.01, FeatureBackend::Mfcc).unwrap()
    }

    fn generator(zero: bool) -> RhythmGenerator {
        let cfg = RhythmConfig {
            hidden: 8,
            zero_init: zero,
            ..Default::default()
        };
        RhythmGenerator::new(cfg, ChannelStats::identity(6), vec![2.0; NUM_JOINTS * 3], 1, DType::F64).unwrap()
    }

    #[test]
    fn zero_generator_gives_zero_offsets() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = generator(true);
        let out = g.rhythm_generate(&features(&mut rng, 40), 13).unwrap();
        assert_eq!(out.offsets.dim(), (13, NUM_JOINTS, 3));
        assert!(out.offsets.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn generation_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = features(&mut rng, 50);
        let a = generator(false).rhythm_generate(&f, 15).unwrap();
        let b = generator(false).rhythm_generate(&f, 15).unwrap();
        assert_eq!(a, b);
        assert!(a.offsets.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn wrong_feature_width_is_rejected() {
        let f = AudioFeatures::new(Array2::zeros((10, 4)), 0.01, FeatureBackend::Mfcc).unwrap();
        assert!(matches!(generator(true).rhythm_generate(&f, 5), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn exact_centred_offset_has_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let set: Vec<_> = (0..4).map(|_| random_motion(&mut rng, 12)).collect();
        let mean = mean_motion(&set, Some(12)).unwrap();
        let m = &set[1];
        let exact = RhythmOffset {
            offsets: centered_target(m, &mean).unwrap(),
        };
        assert_eq!(rhythm_loss(&exact, m, &mean).unwrap(), 0.0);
        let zero = RhythmOffset::zeros(12, NUM_JOINTS);
        let dev = centered_target(m, &mean).unwrap().mapv(f64::abs).mean().unwrap();
        assert!((rhythm_loss(&zero, m, &mean).unwrap() - dev).abs() < 1e-12);
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = random_motion(&mut rng, 10);
        let mean = mean_motion(std::slice::from_ref(&m), None).unwrap();
        let off = RhythmOffset::zeros(9, NUM_JOINTS);
        assert!(matches!(rhythm_loss(&off, &m, &mean), Err(Error::ShapeMismatch(_))));
        assert!(matches!(compose(&m, &off), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn compose_adds_offsets() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = random_motion(&mut rng, 8);
        assert_eq!(compose(&m, &RhythmOffset::zeros(8, NUM_JOINTS)).unwrap(), m);
        let off = RhythmOffset {
            offsets: Array3::from_shape_fn((8, NUM_JOINTS, 3), |_| rng.gen_range(-3.0..3.0)),
        };
        let out = compose(&m, &off).unwrap();
        let diff = out.frames() - m.frames() - &off.offsets;
        assert!(diff.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn tensor_loss_matches_array_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let set: Vec<_> = (0..3).map(|_| random_motion(&mut rng, 10)).collect();
        let mean = mean_motion(&set, Some(10)).unwrap();
        let off = RhythmOffset {
            offsets: Array3::from_shape_fn((10, NUM_JOINTS, 3), |_| rng.gen_range(-3.0..3.0)),
        };
        let flat = |a: &Array3<f64>| crate::stats::flatten_frames(a);
        let p = batch_tensor(&[flat(&off.offsets)], DType::F64).unwrap();
        let t = batch_tensor(&[flat(&centered_target(&set[0], &mean).unwrap())], DType::F64).unwrap();
        let a = to_vec_f64(&rhythm_loss_tensor(&p, &t).unwrap()).unwrap()[0];
        let b = rhythm_loss(&off, &set[0], &mean).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn loss_matches_naive_loop(seed in 0u64..1000, len in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let set: Vec<_> = (0..3).map(|_| random_motion(&mut rng, len)).collect();
            let mean = mean_motion(&set, Some(len)).unwrap();
            let off = RhythmOffset {
                offsets: Array3::from_shape_fn((len, NUM_JOINTS, 3), |_| rng.gen_range(-30.0..30.0)),
            };
            let m = &set[0];
            let mut acc = 0.0;
            for k in 0..len {
                for j in 0..NUM_JOINTS {
                    for c in 0..3 {
                        acc += (off.offsets[[k, j, c]] - (m.frames()[[k, j, c]] - mean.frames[[k, j, c]])).abs();
                    }
                }
            }
            let naive = acc / (len * NUM_JOINTS * 3) as f64;
            let got = rhythm_loss(&off, m, &mean).unwrap();
            prop_assert!(got >= 0.0);
            prop_assert!((got - naive).abs() < 1e-9);
        }
    }
}

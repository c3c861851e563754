//! Gloss-prompted latent diffusion.
//!
//! Latents are standardised per channel before noising. The noise predictor
//! is a small transformer over latent tokens. Gloss conditioning enters twice:
//! through AdaIN driven by the pooled gloss embedding z^g, and through
//! cross-attention to per-clause gloss features. Audio features pooled to
//! the latent rate are always part of the cross-attention context. The null
//! condition ∅ swaps the gloss tokens for a learned null token and uses
//! identity AdaIN modulation.

use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    attention_bias, scalar, sinusoidal, sinusoidal_at, Block, Checkpoint, Init, LayerNorm, Linear, Mlp, ParamStore, MASKED,
};
use crate::stats::ChannelStats;

pub const DIFFUSION_KIND: &str = "diffusion";
const ADAIN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    /// Betas spaced linearly from `beta_start` (step 1) to `beta_end` (step N).
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidConfig("diffusion needs at least one step".into()));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::InvalidConfig("betas must lie in (0, 1)".into()));
        }
        if betas.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidConfig("betas must not decrease".into()));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, n: usize) -> Result<usize> {
        if n == 0 || n > self.steps() {
            return Err(Error::StepOutOfRange {
                step: n,
                max: self.steps(),
            });
        }
        Ok(n - 1)
    }

    pub fn beta(&self, n: usize) -> Result<f64> {
        Ok(self.betas[self.check(n)?])
    }

    pub fn alpha(&self, n: usize) -> Result<f64> {
        Ok(self.alphas[self.check(n)?])
    }

    pub fn alpha_bar(&self, n: usize) -> Result<f64> {
        Ok(self.alpha_bars[self.check(n)?])
    }

    /// ᾱ_{n-1}, with ᾱ_0 = 1.
    pub fn alpha_bar_prev(&self, n: usize) -> Result<f64> {
        let i = self.check(n)?;
        Ok(if i == 0 { 1.0 } else { self.alpha_bars[i - 1] })
    }

    /// β̃_n = (1 − ᾱ_{n−1}) / (1 − ᾱ_n) · β_n.
    pub fn posterior_variance(&self, n: usize) -> Result<f64> {
        Ok((1.0 - self.alpha_bar_prev(n)?) / (1.0 - self.alpha_bar(n)?) * self.beta(n)?)
    }
}

/// Z_n = √ᾱ_n Z₀ + √(1−ᾱ_n) ε.
pub fn forward_noise(schedule: &DiffusionSchedule, z0: &Tensor, n: usize, eps: &Tensor) -> Result<Tensor> {
    let ab = schedule.alpha_bar(n)?;
    Ok(((z0 * ab.sqrt())? + (eps * (1.0 - ab).sqrt())?)?)
}

/// Per-row version of [`forward_noise`]; `steps[b]` is the step of row b.
pub fn forward_noise_rows(
    schedule: &DiffusionSchedule,
    z0: &Tensor,
    steps: &[usize],
    eps: &Tensor,
) -> Result<Tensor> {
    let (a, b) = row_coefficients(schedule, steps, z0.dtype(), |ab| (ab.sqrt(), (1.0 - ab).sqrt()))?;
    Ok((z0.broadcast_mul(&a)? + eps.broadcast_mul(&b)?)?)
}

/// Inverts the forward process given a noise estimate: (Z_n − √(1−ᾱ)ε̂)/√ᾱ.
pub fn predict_z0(schedule: &DiffusionSchedule, zn: &Tensor, steps: &[usize], eps_hat: &Tensor) -> Result<Tensor> {
    let (a, b) = row_coefficients(schedule, steps, zn.dtype(), |ab| (1.0 / ab.sqrt(), (1.0 - ab).sqrt() / ab.sqrt()))?;
    Ok((zn.broadcast_mul(&a)? - eps_hat.broadcast_mul(&b)?)?)
}

fn row_coefficients(
    schedule: &DiffusionSchedule,
    steps: &[usize],
    dtype: DType,
    f: impl Fn(f64) -> (f64, f64),
) -> Result<(Tensor, Tensor)> {
    let mut a = Vec::with_capacity(steps.len());
    let mut b = Vec::with_capacity(steps.len());
    for &n in steps {
        let (x, y) = f(schedule.alpha_bar(n)?);
        a.push(x);
        b.push(y);
    }
    let shape = (steps.len(), 1, 1);
    Ok((
        Tensor::from_vec(a, shape, &Device::Cpu)?.to_dtype(dtype)?,
        Tensor::from_vec(b, shape, &Device::Cpu)?.to_dtype(dtype)?,
    ))
}

pub fn standard_normal(shape: &[usize], rng: &mut ChaCha8Rng, dtype: DType) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

/// Instance normalisation over time followed by per-channel modulation.
/// `h`: (B, T, C); `scale`, `shift`: (B, C).
pub fn adain_apply(h: &Tensor, scale: &Tensor, shift: &Tensor) -> Result<Tensor> {
    let mean = h.mean_keepdim(1)?;
    let hc = h.broadcast_sub(&mean)?;
    let var = hc.sqr()?.mean_keepdim(1)?;
    let hn = hc.broadcast_div(&(var + ADAIN_EPS)?.sqrt()?)?;
    Ok(hn.broadcast_mul(&scale.unsqueeze(1)?)?.broadcast_add(&shift.unsqueeze(1)?)?)
}

/// Returns `None` (the null condition) with probability `p_drop`.
pub fn train_dropout_condition<T>(g: T, p_drop: f64, rng: &mut impl Rng) -> Option<T> {
    if rng.gen::<f64>() < p_drop {
        None
    } else {
        Some(g)
    }
}

/// Gloss side of the condition for a batch.
#[derive(Clone)]
pub struct GlossCondition {
    /// (B, E) pooled gloss embedding z^g.
    pub embedding: Tensor,
    /// (B, C, D_g) per-clause gloss features.
    pub clauses: Tensor,
    pub clause_counts: Vec<usize>,
    /// Rows set to false use the null condition.
    pub keep: Vec<bool>,
}

#[derive(Clone)]
pub struct Condition {
    pub gloss: Option<GlossCondition>,
    /// (B, T_z, d_a) audio features pooled to the latent rate and normalised.
    pub audio: Tensor,
}

impl Condition {
    pub fn null(&self) -> Condition {
        Condition {
            gloss: None,
            audio: self.audio.clone(),
        }
    }

    pub fn batch(&self) -> Result<usize> {
        Ok(self.audio.dim(0)?)
    }
}

/// Averages feature rows into `t_out` equal-width bins.
pub fn pool_rows(rows: &Array2<f64>, t_out: usize) -> Array2<f64> {
    let t_in = rows.nrows();
    let mut out = Array2::zeros((t_out, rows.ncols()));
    for k in 0..t_out {
        let lo = k * t_in / t_out;
        let hi = ((k + 1) * t_in / t_out).max(lo + 1).min(t_in);
        let lo = lo.min(hi - 1);
        for j in lo..hi {
            let r = rows.row(j).to_owned() / (hi - lo) as f64;
            out.row_mut(k).scaled_add(1.0, &r);
        }
    }
    out
}

/// Anything that predicts the noise in Z_n; `steps` holds one step per row.
pub trait EpsModel {
    fn predict(&self, zn: &Tensor, steps: &[usize], cond: &Condition) -> Result<Tensor>;
}

/// ε* = s·ε(g) + (1−s)·ε(∅); s = 1 and s = 0 call one pathway only.
pub fn guided_noise<M: EpsModel + ?Sized>(
    model: &M,
    zn: &Tensor,
    steps: &[usize],
    cond: &Condition,
    s: f64,
) -> Result<Tensor> {
    if s == 1.0 {
        return model.predict(zn, steps, cond);
    }
    let uncond = model.predict(zn, steps, &cond.null())?;
    if s == 0.0 {
        return Ok(uncond);
    }
    let c = model.predict(zn, steps, cond)?;
    Ok(((c * s)? + (uncond * (1.0 - s))?)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleOptions {
    pub guidance: f64,
    pub seed: u64,
    /// false: noise-free updates (posterior mean only).
    pub stochastic: bool,
}

/// DDPM ancestral sampling from Z_N ~ N(0, I) down to Z₀. `shape` is (B, T_z, d_z).
pub fn sample<M: EpsModel + ?Sized>(
    model: &M,
    schedule: &DiffusionSchedule,
    cond: &Condition,
    shape: (usize, usize, usize),
    opts: SampleOptions,
    dtype: DType,
) -> Result<Tensor> {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let dims = [shape.0, shape.1, shape.2];
    let mut z = standard_normal(&dims, &mut rng, dtype)?;
    for n in (1..=schedule.steps()).rev() {
        let steps = vec![n; shape.0];
        let eps = guided_noise(model, &z, &steps, cond, opts.guidance)?;
        let (a, b) = (schedule.alpha(n)?, schedule.beta(n)?);
        let coef = b / (1.0 - schedule.alpha_bar(n)?).sqrt();
        let mut next = ((z - (eps * coef)?)? * (1.0 / a.sqrt()))?;
        if opts.stochastic && n > 1 {
            let sigma = schedule.posterior_variance(n)?.sqrt();
            next = (next + (standard_normal(&dims, &mut rng, dtype)? * sigma)?)?;
        }
        let total = scalar(&next.abs()?.sum_all()?)?;
        if !total.is_finite() {
            return Err(Error::NonFiniteState { step: n });
        }
        z = next.detach();
    }
    Ok(z)
}

pub struct NoiseLossParts {
    pub loss: Tensor,
    pub steps: Vec<usize>,
    pub eps: Tensor,
    pub eps_hat: Tensor,
    pub zn: Tensor,
}

/// Mean squared error between fresh noise and its prediction; one random step per row.
pub fn noise_loss_parts<M: EpsModel + ?Sized>(
    model: &M,
    schedule: &DiffusionSchedule,
    z0: &Tensor,
    cond: &Condition,
    rng: &mut ChaCha8Rng,
) -> Result<NoiseLossParts> {
    let b = z0.dim(0)?;
    let steps: Vec<usize> = (0..b).map(|_| rng.gen_range(1..=schedule.steps())).collect();
    let eps = standard_normal(z0.dims(), rng, z0.dtype())?;
    let zn = forward_noise_rows(schedule, z0, &steps, &eps)?;
    let eps_hat = model.predict(&zn, &steps, cond)?;
    let loss = (&eps - &eps_hat)?.sqr()?.mean_all()?;
    Ok(NoiseLossParts {
        loss,
        steps,
        eps,
        eps_hat,
        zn,
    })
}

pub fn noise_loss<M: EpsModel + ?Sized>(
    model: &M,
    schedule: &DiffusionSchedule,
    z0: &Tensor,
    cond: &Condition,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    Ok(noise_loss_parts(model, schedule, z0, cond, rng)?.loss)
}

/// What the network's output layer estimates. Either way the model answers
/// with a noise estimate:
/// `Sample`: ε̂ = (Z_n − √ᾱ_n Ẑ₀) / √(1−ᾱ_n);
/// `Velocity`: v = √ᾱ_n ε − √(1−ᾱ_n) Z₀, so ε̂ = √ᾱ_n v̂ + √(1−ᾱ_n) Z_n.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prediction {
    Noise,
    Sample,
    #[default]
    Velocity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionConfig {
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub latent_dim: usize,
    pub audio_dim: usize,
    pub gloss_embed_dim: usize,
    pub gloss_model_dim: usize,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    #[serde(default)]
    pub prediction: Prediction,
    /// Latent step t attends to audio tokens within ±window of t.
    #[serde(default = "default_audio_window")]
    pub audio_window: usize,
}

fn default_audio_window() -> usize {
    3
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            model_dim: 64,
            layers: 3,
            heads: 4,
            latent_dim: 32,
            audio_dim: 39,
            gloss_embed_dim: 64,
            gloss_model_dim: 64,
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            prediction: Prediction::Velocity,
            audio_window: default_audio_window(),
        }
    }
}

impl DiffusionConfig {
    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

struct DenoiseLayer {
    adain: Mlp,
    block: Block,
}

pub struct NoisePredictor {
    pub store: ParamStore,
    pub config: DiffusionConfig,
    pub schedule: DiffusionSchedule,
    /// Per-channel statistics used to standardise latents.
    pub latent_stats: ChannelStats,
    /// Statistics used to normalise audio features.
    pub audio_stats: ChannelStats,
    z_in: Linear,
    time_mlp: Mlp,
    audio_in: Linear,
    clause_in: Linear,
    gloss_type: Tensor,
    null_token: Tensor,
    ctx_ln: LayerNorm,
    layers: Vec<DenoiseLayer>,
    out_ln: LayerNorm,
    out: Linear,
}

#[derive(Serialize, Deserialize)]
struct DiffusionMeta {
    config: DiffusionConfig,
    latent_stats: ChannelStats,
    audio_stats: ChannelStats,
    seed: u64,
}

impl NoisePredictor {
    pub fn new(
        config: DiffusionConfig,
        latent_stats: ChannelStats,
        audio_stats: ChannelStats,
        seed: u64,
        dtype: DType,
    ) -> Result<Self> {
        if latent_stats.dim() != config.latent_dim || audio_stats.dim() != config.audio_dim {
            return Err(Error::shape("statistics do not match the configured dimensions"));
        }
        let d = config.model_dim;
        let store = ParamStore::new(seed, dtype);
        let s = store.root();
        let layers = (0..config.layers)
            .map(|i| {
                let l = s.sub(&format!("layer{i}"));
                Ok(DenoiseLayer {
                    adain: Mlp::new(&l.sub("adain"), config.gloss_embed_dim, d, 2 * d)?,
                    block: Block::new(&l.sub("block"), d, config.heads, true)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            z_in: Linear::new(&s.sub("z_in"), config.latent_dim, d)?,
            time_mlp: Mlp::new(&s.sub("time"), d, d, d)?,
            audio_in: Linear::new(&s.sub("audio_in"), config.audio_dim, d)?,
            clause_in: Linear::new(&s.sub("clause_in"), config.gloss_model_dim, d)?,
            gloss_type: s.param("gloss_type", &[1, 1, d], Init::Normal(0.1))?,
            null_token: s.param("null_token", &[1, 1, d], Init::Normal(0.1))?,
            ctx_ln: LayerNorm::new(&s.sub("ctx_ln"), d)?,
            layers,
            out_ln: LayerNorm::new(&s.sub("out_ln"), d)?,
            out: Linear::zeros(&s.sub("out"), d, config.latent_dim)?,
            schedule: config.schedule()?,
            store,
            config,
            latent_stats,
            audio_stats,
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// Normalised, pooled (T_z, d_a) audio rows for one sentence.
    pub fn audio_rows(&self, features: &Array2<f64>, tz: usize) -> Array2<f64> {
        pool_rows(&self.audio_stats.normalize(&features.view()), tz)
    }

    fn context(&self, cond: &Condition) -> Result<(Tensor, Tensor)> {
        let dtype = self.dtype();
        let dev = Device::Cpu;
        let d = self.config.model_dim;
        let (b, tz, _) = cond.audio.dims3()?;
        let audio = self
            .audio_in
            .forward(&cond.audio)?
            .broadcast_add(&sinusoidal(tz, d, dtype, &dev)?)?;
        let null = self.null_token.broadcast_as((b, 1, d))?;
        let (ctx, bias) = match &cond.gloss {
            None => {
                let ctx = Tensor::cat(&[&null, &audio], 1)?;
                let bias = Tensor::zeros((b, 1, 1, 1 + tz), dtype, &dev)?;
                (ctx, bias)
            }
            Some(g) => {
                let c = g.clauses.dim(1)?;
                // clause order lines up with the unit order on the audio timeline
                let clauses = self
                    .clause_in
                    .forward(&g.clauses)?
                    .broadcast_add(&self.gloss_type)?
                    .broadcast_add(&sinusoidal(c, d, dtype, &dev)?)?;
                let ctx = Tensor::cat(&[&null, &clauses, &audio], 1)?;
                let tk = 1 + c + tz;
                let mut bias = vec![0.0; b * tk];
                for r in 0..b {
                    let row = &mut bias[r * tk..(r + 1) * tk];
                    if g.keep[r] {
                        row[0] = MASKED;
                        for v in &mut row[1 + g.clause_counts[r].min(c)..1 + c] {
                            *v = MASKED;
                        }
                    } else {
                        for v in &mut row[1..1 + c] {
                            *v = MASKED;
                        }
                    }
                }
                let bias = Tensor::from_vec(bias, (b, 1, 1, tk), &dev)?.to_dtype(dtype)?;
                (ctx, bias)
            }
        };
        let tk = ctx.dim(1)?;
        let first_audio = tk - tz;
        let w = self.config.audio_window;
        let band = attention_bias(tz, tk, dtype, &dev, |i, j| j < first_audio || (j - first_audio).abs_diff(i) <= w)?
            .reshape((1, 1, tz, tk))?;
        Ok((self.ctx_ln.forward(&ctx)?, bias.broadcast_add(&band)?))
    }

    /// (B, 1) mask: 1 where the row's gloss condition is active.
    fn keep_mask(&self, cond: &Condition, b: usize) -> Result<Tensor> {
        let v: Vec<f64> = match &cond.gloss {
            None => vec![0.0; b],
            Some(g) => g.keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect(),
        };
        Ok(Tensor::from_vec(v, (b, 1), &Device::Cpu)?.to_dtype(self.dtype())?)
    }

    /// Per-layer AdaIN (scale, shift); identity for null rows.
    pub fn adain_params(&self, cond: &Condition, b: usize) -> Result<Vec<(Tensor, Tensor)>> {
        let d = self.config.model_dim;
        let mask = self.keep_mask(cond, b)?;
        let zg = match &cond.gloss {
            Some(g) => g.embedding.clone(),
            None => Tensor::zeros((b, self.config.gloss_embed_dim), self.dtype(), &Device::Cpu)?,
        };
        self.layers
            .iter()
            .map(|l| {
                let p = l.adain.forward(&zg)?;
                let delta = p.narrow(D::Minus1, 0, d)?.broadcast_mul(&mask)?;
                let shift = p.narrow(D::Minus1, d, d)?.broadcast_mul(&mask)?;
                Ok(((delta + 1.0)?, shift))
            })
            .collect()
    }

    pub fn forward(&self, zn: &Tensor, steps: &[usize], cond: &Condition) -> Result<Tensor> {
        let (b, tz, _) = zn.dims3()?;
        if steps.len() != b || cond.batch()? != b || cond.audio.dim(1)? != tz {
            return Err(Error::shape("condition does not match the latent batch"));
        }
        let dtype = self.dtype();
        let dev = Device::Cpu;
        let d = self.config.model_dim;
        let positions: Vec<f64> = steps.iter().map(|&n| n as f64).collect();
        let temb = self
            .time_mlp
            .forward(&sinusoidal_at(&positions, d, dtype, &dev)?)?
            .unsqueeze(1)?;
        let mut h = self
            .z_in
            .forward(zn)?
            .broadcast_add(&sinusoidal(tz, d, dtype, &dev)?)?
            .broadcast_add(&temb)?;
        let (ctx, ctx_bias) = self.context(cond)?;
        let params = self.adain_params(cond, b)?;
        for (layer, (scale, shift)) in self.layers.iter().zip(&params) {
            let a = adain_apply(&h, scale, shift)?;
            let delta = (layer.block.forward(&a, None, Some((&ctx, Some(&ctx_bias))))? - &a)?;
            h = (h + delta)?;
        }
        let raw = self.out.forward(&self.out_ln.forward(&h)?)?;
        match self.config.prediction {
            Prediction::Noise => Ok(raw),
            Prediction::Sample => {
                let (a, c) = row_coefficients(&self.schedule, steps, dtype, |ab| {
                    let s = (1.0 - ab).sqrt();
                    (1.0 / s, ab.sqrt() / s)
                })?;
                Ok((zn.broadcast_mul(&a)? - raw.broadcast_mul(&c)?)?)
            }
            Prediction::Velocity => {
                let (a, c) = row_coefficients(&self.schedule, steps, dtype, |ab| (ab.sqrt(), (1.0 - ab).sqrt()))?;
                Ok((raw.broadcast_mul(&a)? + zn.broadcast_mul(&c)?)?)
            }
        }
    }

    pub fn to_checkpoint(&self, seed: u64) -> Result<Checkpoint> {
        let meta = DiffusionMeta {
            config: self.config.clone(),
            latent_stats: self.latent_stats.clone(),
            audio_stats: self.audio_stats.clone(),
            seed,
        };
        Ok(Checkpoint::new(DIFFUSION_KIND, serde_json::to_value(meta)?).with_tensors("", self.store.tensors()?))
    }

    pub fn from_checkpoint(ck: &Checkpoint, dtype: DType) -> Result<Self> {
        let meta: DiffusionMeta = serde_json::from_value(ck.meta.clone())?;
        let m = Self::new(meta.config, meta.latent_stats, meta.audio_stats, meta.seed, dtype)?;
        m.store.load_tensors(&ck.tensor_map(), "")?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>, seed: u64) -> Result<String> {
        self.to_checkpoint(seed)?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ck = Checkpoint::load(path)?.expect_kind(DIFFUSION_KIND)?;
        Self::from_checkpoint(&ck, DType::F32)
    }
}

impl EpsModel for NoisePredictor {
    fn predict(&self, zn: &Tensor, steps: &[usize], cond: &Condition) -> Result<Tensor> {
        self.forward(zn, steps, cond)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{gradient_check, to_vec_f64};
    use rand::SeedableRng;

    struct Constant(f64, f64);

    impl EpsModel for Constant {
        fn predict(&self, zn: &Tensor, _: &[usize], cond: &Condition) -> Result<Tensor> {
            let v = if cond.gloss.is_some() { self.0 } else { self.1 };
            Ok(zn.ones_like()?.affine(v, 0.0)?)
        }
    }

    struct Oracle {
        schedule: DiffusionSchedule,
        z0: Tensor,
    }

    impl EpsModel for Oracle {
        fn predict(&self, zn: &Tensor, steps: &[usize], _: &Condition) -> Result<Tensor> {
            let ab = self.schedule.alpha_bar(steps[0])?;
            Ok(((zn - (&self.z0 * ab.sqrt())?)? / (1.0 - ab).sqrt())?)
        }
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn cond(b: usize, tz: usize, gloss: bool, dtype: DType) -> Condition {
        let mut r = rng(9);
        let audio = standard_normal(&[b, tz, 3], &mut r, dtype).unwrap();
        let gloss = gloss.then(|| GlossCondition {
            embedding: standard_normal(&[b, 4], &mut r, dtype).unwrap(),
            clauses: standard_normal(&[b, 2, 4], &mut r, dtype).unwrap(),
            clause_counts: vec![2; b],
            keep: vec![true; b],
        });
        Condition { gloss, audio }
    }

    fn tiny(dtype: DType) -> NoisePredictor {
        let cfg = DiffusionConfig {
            model_dim: 8,
            layers: 2,
            heads: 2,
            latent_dim: 4,
            audio_dim: 3,
            gloss_embed_dim: 4,
            gloss_model_dim: 4,
            steps: 50,
            ..Default::default()
        };
        NoisePredictor::new(cfg, ChannelStats::identity(4), ChannelStats::identity(3), 5, dtype).unwrap()
    }

    #[test]
    fn default_schedule_is_sane() {
        let s = DiffusionConfig::default().schedule().unwrap();
        assert_eq!(s.steps(), 1000);
        assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bar(1000).unwrap() < 0.01);
        assert!(matches!(s.alpha_bar(0), Err(Error::StepOutOfRange { step: 0, max: 1000 })));
        assert!(matches!(s.alpha_bar(1001), Err(Error::StepOutOfRange { .. })));
    }

    #[test]
    fn forward_noise_with_zero_eps_scales() {
        let s = DiffusionConfig::default().schedule().unwrap();
        let z0 = Tensor::new(&[1.0f64, -2.0, 3.0], &Device::Cpu).unwrap();
        let zn = forward_noise(&s, &z0, 500, &z0.zeros_like().unwrap()).unwrap();
        let k = s.alpha_bar(500).unwrap().sqrt();
        assert_eq!(to_vec_f64(&zn).unwrap(), vec![k, -2.0 * k, 3.0 * k]);
    }

    #[test]
    fn forward_noise_tiny_beta_keeps_z0() {
        let s = DiffusionSchedule::from_betas(vec![1e-14]).unwrap();
        let z0 = Tensor::new(&[1.0f64, -2.0], &Device::Cpu).unwrap();
        let eps = Tensor::new(&[0.5f64, 0.5], &Device::Cpu).unwrap();
        let zn = to_vec_f64(&forward_noise(&s, &z0, 1, &eps).unwrap()).unwrap();
        assert!((zn[0] - 1.0).abs() < 1e-6 && (zn[1] + 2.0).abs() < 1e-6);
    }

    #[test]
    fn forward_noise_marginals_at_last_step() {
        let s = DiffusionConfig::default().schedule().unwrap();
        let z0 = Tensor::full(0.8f64, 10_000, &Device::Cpu).unwrap();
        let eps = standard_normal(&[10_000], &mut rng(1), DType::F64).unwrap();
        let v = to_vec_f64(&forward_noise(&s, &z0, 1000, &eps).unwrap()).unwrap();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
        let ab = s.alpha_bar(1000).unwrap();
        assert!((mean - ab.sqrt() * 0.8).abs() < 0.05, "{mean}");
        assert!((var / (1.0 - ab) - 1.0).abs() < 0.05, "{var}");
    }

    #[test]
    fn guidance_is_affine_in_scale() {
        let c = cond(1, 2, true, DType::F64);
        let zn = Tensor::zeros((1, 2, 3), DType::F64, &Device::Cpu).unwrap();
        let m = Constant(0.7, -0.3);
        let at = |s| to_vec_f64(&guided_noise(&m, &zn, &[1], &c, s).unwrap()).unwrap()[0];
        assert_eq!(at(1.0), 0.7);
        assert_eq!(at(0.0), -0.3);
        assert!((at(2.5) - (2.5 * 0.7 - 1.5 * -0.3)).abs() < 1e-12);
    }

    #[test]
    fn guidance_one_is_bit_exact_for_the_network() {
        let m = tiny(DType::F32);
        let c = cond(2, 3, true, DType::F32);
        let zn = standard_normal(&[2, 3, 4], &mut rng(2), DType::F32).unwrap();
        let a = to_vec_f64(&m.predict(&zn, &[4, 9], &c).unwrap()).unwrap();
        let b = to_vec_f64(&guided_noise(&m, &zn, &[4, 9], &c, 1.0).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn oracle_sampler_recovers_planted_latent() {
        let s = DiffusionConfig::default().schedule().unwrap();
        let z0 = standard_normal(&[1, 4, 3], &mut rng(3), DType::F64).unwrap();
        let oracle = Oracle { schedule: s.clone(), z0: z0.clone() };
        let c = cond(1, 4, false, DType::F64);
        let opts = SampleOptions { guidance: 1.0, seed: 7, stochastic: false };
        let out = sample(&oracle, &s, &c, (1, 4, 3), opts, DType::F64).unwrap();
        let err = scalar(&(out - &z0).unwrap().abs().unwrap().max_all().unwrap()).unwrap();
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn single_step_schedule_recovers_in_one_update() {
        let s = DiffusionSchedule::linear(1, 0.3, 0.3).unwrap();
        let z0 = standard_normal(&[1, 2, 3], &mut rng(4), DType::F64).unwrap();
        let oracle = Oracle { schedule: s.clone(), z0: z0.clone() };
        let c = cond(1, 2, false, DType::F64);
        let opts = SampleOptions { guidance: 1.0, seed: 1, stochastic: true };
        let out = sample(&oracle, &s, &c, (1, 2, 3), opts, DType::F64).unwrap();
        let err = scalar(&(out - &z0).unwrap().abs().unwrap().max_all().unwrap()).unwrap();
        assert!(err < 1e-12, "{err}");
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let m = tiny(DType::F32);
        let c = cond(1, 3, true, DType::F32);
        let opts = SampleOptions { guidance: 2.5, seed: 11, stochastic: true };
        let a = to_vec_f64(&sample(&m, &m.schedule, &c, (1, 3, 4), opts, DType::F32).unwrap()).unwrap();
        let b = to_vec_f64(&sample(&m, &m.schedule, &c, (1, 3, 4), opts, DType::F32).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn non_finite_state_reports_step() {
        struct Bad;
        impl EpsModel for Bad {
            fn predict(&self, zn: &Tensor, _: &[usize], _: &Condition) -> Result<Tensor> {
                Ok(zn.affine(0.0, f64::NAN)?)
            }
        }
        let s = DiffusionSchedule::linear(5, 1e-3, 0.02).unwrap();
        let c = cond(1, 2, false, DType::F64);
        let opts = SampleOptions { guidance: 1.0, seed: 1, stochastic: true };
        assert!(matches!(
            sample(&Bad, &s, &c, (1, 2, 3), opts, DType::F64),
            Err(Error::NonFiniteState { step: 5 })
        ));
    }

    #[test]
    fn zero_predictor_loss_is_noise_energy() {
        let s = DiffusionConfig::default().schedule().unwrap();
        let z0 = Tensor::zeros((64, 16, 8), DType::F64, &Device::Cpu).unwrap();
        let c = cond(64, 16, false, DType::F64);
        let loss = scalar(&noise_loss(&Constant(0.0, 0.0), &s, &z0, &c, &mut rng(5)).unwrap()).unwrap();
        assert!((loss - 1.0).abs() < 0.05, "{loss}");
    }

    #[test]
    fn true_noise_predictor_gives_zero_loss() {
        struct Truth(DiffusionSchedule, Tensor);
        impl EpsModel for Truth {
            fn predict(&self, zn: &Tensor, steps: &[usize], _: &Condition) -> Result<Tensor> {
                let (a, b) = row_coefficients(&self.0, steps, zn.dtype(), |ab| (ab.sqrt(), (1.0 - ab).sqrt()))?;
                Ok((zn - self.1.broadcast_mul(&a)?)?.broadcast_div(&b)?)
            }
        }
        let s = DiffusionConfig::default().schedule().unwrap();
        let z0 = standard_normal(&[4, 3, 2], &mut rng(6), DType::F64).unwrap();
        let c = cond(4, 3, false, DType::F64);
        let loss = scalar(&noise_loss(&Truth(s.clone(), z0.clone()), &s, &z0, &c, &mut rng(6)).unwrap()).unwrap();
        assert!(loss < 1e-20, "{loss}");
    }

    #[test]
    fn noise_loss_gradients_match_finite_differences() {
        let mut m = tiny(DType::F64);
        // a non-zero output head so every parameter receives gradient
        let head = m.store.get("out.w").unwrap();
        head.set(&standard_normal(&[4, 8], &mut rng(8), DType::F64).unwrap().affine(0.3, 0.0).unwrap())
            .unwrap();
        m.config.steps = 50;
        let z0 = standard_normal(&[2, 2, 4], &mut rng(7), DType::F64).unwrap();
        let c = cond(2, 2, true, DType::F64);
        let err = gradient_check(&m.store, || noise_loss(&m, &m.schedule, &z0, &c, &mut rng(3)), 3, 1e-5).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn adain_sets_channel_moments() {
        let mut r = rng(10);
        let h = standard_normal(&[3, 40, 5], &mut r, DType::F64).unwrap().affine(4.0, 2.0).unwrap();
        let scale = Tensor::rand(0.5f64, 2.0, (3, 5), &Device::Cpu).unwrap();
        let shift = standard_normal(&[3, 5], &mut r, DType::F64).unwrap();
        let out = adain_apply(&h, &scale, &shift).unwrap();
        let mean = out.mean_keepdim(1).unwrap();
        let std = out.broadcast_sub(&mean).unwrap().sqr().unwrap().mean_keepdim(1).unwrap().sqrt().unwrap();
        let dm = scalar(&(mean.squeeze(1).unwrap() - &shift).unwrap().abs().unwrap().max_all().unwrap()).unwrap();
        let ds = scalar(&(std.squeeze(1).unwrap() - &scale).unwrap().abs().unwrap().max_all().unwrap()).unwrap();
        assert!(dm < 1e-5 && ds < 1e-5, "{dm} {ds}");
    }

    #[test]
    fn adain_constant_channel_is_finite() {
        let h = Tensor::full(3.0f64, (1, 6, 2), &Device::Cpu).unwrap();
        let one = Tensor::ones((1, 2), DType::F64, &Device::Cpu).unwrap();
        let out = adain_apply(&h, &one, &one.zeros_like().unwrap()).unwrap();
        assert!(to_vec_f64(&out).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn null_rows_get_identity_modulation() {
        let m = tiny(DType::F64);
        let mut c = cond(2, 3, true, DType::F64);
        c.gloss.as_mut().unwrap().keep = vec![true, false];
        let params = m.adain_params(&c, 2).unwrap();
        for (scale, shift) in params {
            let scale = to_vec_f64(&scale.get(1).unwrap()).unwrap();
            let shift = to_vec_f64(&shift.get(1).unwrap()).unwrap();
            assert!(scale.iter().all(|v| *v == 1.0) && shift.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn dropped_rows_ignore_the_gloss() {
        let m = tiny(DType::F64);
        let head = m.store.get("out.w").unwrap();
        head.set(&standard_normal(&[4, 8], &mut rng(8), DType::F64).unwrap()).unwrap();
        let mut c = cond(1, 3, true, DType::F64);
        c.gloss.as_mut().unwrap().keep = vec![false];
        let zn = standard_normal(&[1, 3, 4], &mut rng(2), DType::F64).unwrap();
        let dropped = to_vec_f64(&m.predict(&zn, &[3], &c).unwrap()).unwrap();
        let null = to_vec_f64(&m.predict(&zn, &[3], &c.null()).unwrap()).unwrap();
        for (a, b) in dropped.iter().zip(&null) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_frequencies() {
        let mut r = rng(12);
        assert!((0..1000).all(|_| train_dropout_condition((), 0.0, &mut r).is_some()));
        assert!((0..1000).all(|_| train_dropout_condition((), 1.0, &mut r).is_none()));
        let dropped = (0..100_000).filter(|_| train_dropout_condition((), 0.1, &mut r).is_none()).count();
        assert!((dropped as f64 / 1e5 - 0.1).abs() < 0.005);
    }

    #[test]
    fn pool_rows_averages_bins() {
        let rows = Array2::from_shape_fn((8, 1), |(i, _)| i as f64);
        let p = pool_rows(&rows, 4);
        assert_eq!(p.column(0).to_vec(), vec![0.5, 2.5, 4.5, 6.5]);
        assert_eq!(pool_rows(&rows, 16).nrows(), 16);
    }
}

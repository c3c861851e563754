use candle_core::{DType, Device, Tensor, D};

use super::{Init, Scope};
use crate::error::Result;

/// Additive attention bias for disallowed positions.
pub const MASKED: f64 = -1e9;

pub struct Linear {
    pub w: Tensor,
    pub b: Option<Tensor>,
}

impl Linear {
    pub fn new(s: &Scope, inp: usize, out: usize) -> Result<Self> {
        let bound = 1.0 / (inp as f64).sqrt();
        Ok(Self {
            w: s.param("w", &[out, inp], Init::Uniform(bound))?,
            b: Some(s.param("b", &[out], Init::Uniform(bound))?),
        })
    }

    pub fn no_bias(s: &Scope, inp: usize, out: usize) -> Result<Self> {
        let bound = 1.0 / (inp as f64).sqrt();
        Ok(Self {
            w: s.param("w", &[out, inp], Init::Uniform(bound))?,
            b: None,
        })
    }

    /// Zero weights and bias; the layer initially outputs zeros.
    pub fn zeros(s: &Scope, inp: usize, out: usize) -> Result<Self> {
        Ok(Self {
            w: s.param("w", &[out, inp], Init::Zeros)?,
            b: Some(s.param("b", &[out], Init::Zeros)?),
        })
    }

    pub fn out_dim(&self) -> usize {
        self.w.dims()[0]
    }

    /// Applies to the last dimension of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let inp = dims[dims.len() - 1];
        let lead: usize = dims[..dims.len() - 1].iter().product();
        let mut y = x.reshape((lead, inp))?.matmul(&self.w.t()?)?;
        if let Some(b) = &self.b {
            y = y.broadcast_add(b)?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.out_dim();
        Ok(y.reshape(out_dims)?)
    }
}

pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(s: &Scope, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: s.param("gamma", &[dim], Init::Ones)?,
            beta: s.param("beta", &[dim], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let xn = normalize_last(x, self.eps)?;
        Ok(xn.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Zero-mean, unit-variance over the last dimension.
pub fn normalize_last(x: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let xc = x.broadcast_sub(&mean)?;
    let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(xc.broadcast_div(&(var + eps)?.sqrt()?)?)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let xs = x.broadcast_sub(&m)?;
    let lse = xs.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(xs.broadcast_sub(&lse)?)
}

/// Divides by the L2 norm of the last dimension.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let n = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    Ok(x.broadcast_div(&(n + 1e-12)?)?)
}

pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(s: &Scope, dim: usize, heads: usize) -> Result<Self> {
        assert!(dim % heads == 0, "model dim must divide into heads");
        Ok(Self {
            q: Linear::new(&s.sub("q"), dim, dim)?,
            k: Linear::new(&s.sub("k"), dim, dim)?,
            v: Linear::new(&s.sub("v"), dim, dim)?,
            o: Linear::new(&s.sub("o"), dim, dim)?,
            heads,
        })
    }

    /// `xq`: (B, Tq, D); `xkv`: (B, Tk, D); `bias` broadcasts to (B, H, Tq, Tk).
    pub fn forward(&self, xq: &Tensor, xkv: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let (b, tq, dim) = xq.dims3()?;
        let tk = xkv.dim(1)?;
        let dh = dim / self.heads;
        let split = |t: Tensor, len: usize| -> Result<Tensor> {
            Ok(t.reshape((b, len, self.heads, dh))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(self.q.forward(xq)?, tq)?;
        let k = split(self.k.forward(xkv)?, tk)?;
        let v = split(self.v.forward(xkv)?, tk)?;
        let mut att = (q.matmul(&k.t()?.contiguous()?)? * (1.0 / (dh as f64).sqrt()))?;
        if let Some(bias) = bias {
            att = att.broadcast_add(bias)?;
        }
        let y = softmax_last(&att)?.matmul(&v)?;
        let y = y.transpose(1, 2)?.reshape((b, tq, dim))?;
        self.o.forward(&y)
    }
}

pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(s: &Scope, inp: usize, hidden: usize, out: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&s.sub("fc1"), inp, hidden)?,
            fc2: Linear::new(&s.sub("fc2"), hidden, out)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu_erf()?)
    }
}

/// Pre-norm transformer block with optional cross-attention.
pub struct Block {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    cross: Option<(LayerNorm, MultiHeadAttention)>,
    ln2: LayerNorm,
    mlp: Mlp,
}

impl Block {
    pub fn new(s: &Scope, dim: usize, heads: usize, cross: bool) -> Result<Self> {
        let cross = if cross {
            Some((
                LayerNorm::new(&s.sub("ln_x"), dim)?,
                MultiHeadAttention::new(&s.sub("xattn"), dim, heads)?,
            ))
        } else {
            None
        };
        Ok(Self {
            ln1: LayerNorm::new(&s.sub("ln1"), dim)?,
            attn: MultiHeadAttention::new(&s.sub("attn"), dim, heads)?,
            cross,
            ln2: LayerNorm::new(&s.sub("ln2"), dim)?,
            mlp: Mlp::new(&s.sub("mlp"), dim, 4 * dim, dim)?,
        })
    }

    pub fn forward(
        &self,
        x: &Tensor,
        self_bias: Option<&Tensor>,
        ctx: Option<(&Tensor, Option<&Tensor>)>,
    ) -> Result<Tensor> {
        let h = self.ln1.forward(x)?;
        let mut x = (x + self.attn.forward(&h, &h, self_bias)?)?;
        if let (Some((ln, xattn)), Some((c, cb))) = (&self.cross, ctx) {
            let h = ln.forward(&x)?;
            x = (&x + xattn.forward(&h, c, cb)?)?;
        }
        let h = self.ln2.forward(&x)?;
        Ok((&x + self.mlp.forward(&h)?)?)
    }
}

pub struct Conv1d {
    pub w: Tensor,
    pub b: Tensor,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Conv1d {
    pub fn new(s: &Scope, cin: usize, cout: usize, k: usize, stride: usize, padding: usize) -> Result<Self> {
        let bound = 1.0 / ((cin * k) as f64).sqrt();
        Ok(Self {
            w: s.param("w", &[cout, cin, k], Init::Uniform(bound))?,
            b: s.param("b", &[cout], Init::Uniform(bound))?,
            stride,
            padding,
            dilation: 1,
        })
    }

    pub fn zeros(s: &Scope, cin: usize, cout: usize, k: usize, stride: usize, padding: usize) -> Result<Self> {
        Ok(Self {
            w: s.param("w", &[cout, cin, k], Init::Zeros)?,
            b: s.param("b", &[cout], Init::Zeros)?,
            stride,
            padding,
            dilation: 1,
        })
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation.max(1);
        self
    }

    pub fn out_len(&self, t: usize) -> usize {
        let k = self.w.dim(2).unwrap_or(1);
        let span = self.dilation * (k - 1) + 1;
        (t + 2 * self.padding).saturating_sub(span) / self.stride + 1
    }

    /// `x`: (B, C_in, T) → (B, C_out, T').
    ///
    /// Written as gather + matmul; candle's native strided conv1d backward
    /// gives wrong weight gradients.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, cin, t) = x.dims3()?;
        let (cout, _, k) = self.w.dims3()?;
        let x = x.contiguous()?.pad_with_zeros(2, self.padding, self.padding)?.contiguous()?;
        let tp = t + 2 * self.padding;
        if tp < self.dilation * (k - 1) + 1 {
            return Err(crate::Error::shape(format!("conv input of length {t} is too short")));
        }
        let tout = self.out_len(t);
        let mut taps = Vec::with_capacity(k);
        for tap in 0..k {
            let idx: Vec<u32> = (0..tout)
                .map(|o| (o * self.stride + tap * self.dilation) as u32)
                .collect();
            let idx = Tensor::new(idx.as_slice(), x.device())?;
            taps.push(x.index_select(&idx, 2)?);
        }
        let cols = Tensor::stack(&taps, 2)?.reshape((b, cin * k, tout))?;
        let w = self.w.reshape((1, cout, cin * k))?.broadcast_as((b, cout, cin * k))?;
        let y = w.contiguous()?.matmul(&cols)?;
        Ok(y.broadcast_add(&self.b.reshape((1, cout, 1))?)?)
    }
}

/// Sinusoidal position table, (T, D).
pub fn sinusoidal(len: usize, dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let positions: Vec<f64> = (0..len).map(|t| t as f64).collect();
    sinusoidal_at(&positions, dim, dtype, device)
}

/// Sinusoidal features of arbitrary (possibly fractional) positions, (N, D).
pub fn sinusoidal_at(positions: &[f64], dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut data = vec![0.0; positions.len() * dim];
    for (t, &p) in positions.iter().enumerate() {
        for i in 0..dim / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            data[t * dim + 2 * i] = (p * freq).sin();
            data[t * dim + 2 * i + 1] = (p * freq).cos();
        }
    }
    Ok(Tensor::from_vec(data, (positions.len(), dim), device)?.to_dtype(dtype)?)
}

/// (Tq, Tk) additive bias: 0 where `allowed(i, j)`, [`MASKED`] elsewhere.
pub fn attention_bias(
    tq: usize,
    tk: usize,
    dtype: DType,
    device: &Device,
    allowed: impl Fn(usize, usize) -> bool,
) -> Result<Tensor> {
    let mut data = vec![0.0; tq * tk];
    for i in 0..tq {
        for j in 0..tk {
            if !allowed(i, j) {
                data[i * tk + j] = MASKED;
            }
        }
    }
    Ok(Tensor::from_vec(data, (tq, tk), device)?.to_dtype(dtype)?)
}

/// (B, 1, 1, T) key-padding bias from per-row valid lengths.
pub fn key_padding_bias(lens: &[usize], t: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut data = vec![0.0; lens.len() * t];
    for (b, &len) in lens.iter().enumerate() {
        for j in len..t {
            data[b * t + j] = MASKED;
        }
    }
    Ok(Tensor::from_vec(data, (lens.len(), 1, 1, t), device)?.to_dtype(dtype)?)
}

/// (T_out, T_in) linear time-interpolation matrix with endpoint preservation.
pub fn interp_matrix(t_in: usize, t_out: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut data = vec![0.0; t_out * t_in];
    for k in 0..t_out {
        let (i0, i1, w) = crate::motion::resample_position(k, t_in, t_out);
        data[k * t_in + i0] += 1.0 - w;
        data[k * t_in + i1] += w;
    }
    Ok(Tensor::from_vec(data, (t_out, t_in), device)?.to_dtype(dtype)?)
}

/// (T_out, T_in) matrix averaging input frames into `t_out` equal-width bins.
pub fn pool_matrix(t_in: usize, t_out: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut data = vec![0.0; t_out * t_in];
    for k in 0..t_out {
        let lo = k * t_in / t_out;
        let hi = ((k + 1) * t_in / t_out).max(lo + 1).min(t_in);
        let lo = lo.min(hi - 1);
        for j in lo..hi {
            data[k * t_in + j] = 1.0 / (hi - lo) as f64;
        }
    }
    Ok(Tensor::from_vec(data, (t_out, t_in), device)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{to_vec_f64, ParamStore};

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0], [0.0, MASKED, 0.0]], &Device::Cpu).unwrap();
        let p = to_vec_f64(&softmax_last(&x).unwrap()).unwrap();
        assert!((p[0] + p[1] + p[2] - 1.0).abs() < 1e-12);
        assert_eq!(p[4], 0.0);
        assert!((p[3] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_standardizes() {
        let store = ParamStore::new(0, DType::F64);
        let ln = LayerNorm::new(&store.root(), 4).unwrap();
        let x = Tensor::new(&[[1.0f64, 5.0, -2.0, 8.0]], &Device::Cpu).unwrap();
        let y = to_vec_f64(&ln.forward(&x).unwrap()).unwrap();
        let mean: f64 = y.iter().sum::<f64>() / 4.0;
        let var: f64 = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn interp_matrix_matches_resample() {
        let m = interp_matrix(5, 9, DType::F64, &Device::Cpu).unwrap();
        let x = Tensor::new(&[0.0f64, 2.0, 4.0, 6.0, 8.0], &Device::Cpu).unwrap().reshape((5, 1)).unwrap();
        let y = to_vec_f64(&m.matmul(&x).unwrap()).unwrap();
        for (k, v) in y.iter().enumerate() {
            assert!((v - k as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_rows_average() {
        let m = to_vec_f64(&pool_matrix(10, 3, DType::F64, &Device::Cpu).unwrap()).unwrap();
        for r in m.chunks(10) {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_handles_rank3() {
        let store = ParamStore::new(0, DType::F32);
        let l = Linear::new(&store.root(), 3, 5).unwrap();
        let x = Tensor::zeros((2, 4, 3), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(l.forward(&x).unwrap().dims(), &[2, 4, 5]);
    }
}


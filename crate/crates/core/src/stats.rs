//! Per-channel normalisation statistics and array ↔ tensor helpers.

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    /// Mean and standard deviation of every column over all rows; std is
    /// clamped below by `floor`.
    pub fn from_rows<'a>(rows: impl IntoIterator<Item = ArrayView2<'a, f64>>, floor: f64) -> Result<Self> {
        let mut n = 0usize;
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        for a in rows {
            if sum.is_empty() {
                sum = vec![0.0; a.ncols()];
                sq = vec![0.0; a.ncols()];
            }
            if a.ncols() != sum.len() {
                return Err(Error::shape(format!("{} vs {} channels", a.ncols(), sum.len())));
            }
            for row in a.rows() {
                for (c, &v) in row.iter().enumerate() {
                    sum[c] += v;
                    sq[c] += v * v;
                }
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::EmptySet);
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n as f64 - m * m).max(0.0).sqrt().max(floor))
            .collect();
        Ok(Self { mean, std })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, a: &ArrayView2<f64>) -> Array2<f64> {
        let mut out = a.to_owned();
        for mut row in out.rows_mut() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[c]) / self.std[c];
            }
        }
        out
    }

    pub fn denormalize(&self, a: &ArrayView2<f64>) -> Array2<f64> {
        let mut out = a.to_owned();
        for mut row in out.rows_mut() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = *v * self.std[c] + self.mean[c];
            }
        }
        out
    }

    pub fn mean_tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(Tensor::new(self.mean.as_slice(), &Device::Cpu)?.to_dtype(dtype)?)
    }

    pub fn std_tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(Tensor::new(self.std.as_slice(), &Device::Cpu)?.to_dtype(dtype)?)
    }
}

/// L × J × 3 frames flattened to L × 3J rows.
pub fn flatten_frames(frames: &Array3<f64>) -> Array2<f64> {
    let (l, j, c) = frames.dim();
    frames
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((l, j * c))
        .expect("contiguous")
}

pub fn unflatten_frames(rows: Array2<f64>, joints: usize) -> Array3<f64> {
    let l = rows.nrows();
    rows.as_standard_layout()
        .into_owned()
        .into_shape_with_order((l, joints, 3))
        .expect("row width is 3 × joints")
}

/// Stacks equally shaped 2-D arrays into a (B, T, C) tensor.
pub fn batch_tensor(items: &[Array2<f64>], dtype: DType) -> Result<Tensor> {
    let first = items.first().ok_or(Error::EmptySet)?;
    let (t, c) = first.dim();
    let mut data = Vec::with_capacity(items.len() * t * c);
    for a in items {
        if a.dim() != (t, c) {
            return Err(Error::shape(format!("{:?} vs {:?}", a.dim(), (t, c))));
        }
        data.extend(a.iter().copied());
    }
    Ok(Tensor::from_vec(data, (items.len(), t, c), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Stacks 2-D arrays of different lengths, zero-padding to the longest; also
/// returns the valid lengths.
pub fn padded_batch(items: &[Array2<f64>], dtype: DType) -> Result<(Tensor, Vec<usize>)> {
    let c = items.first().ok_or(Error::EmptySet)?.ncols();
    let t = items.iter().map(|a| a.nrows()).max().unwrap_or(0);
    let mut data = vec![0.0; items.len() * t * c];
    for (b, a) in items.iter().enumerate() {
        if a.ncols() != c {
            return Err(Error::shape(format!("{} vs {c} channels", a.ncols())));
        }
        for (i, row) in a.rows().into_iter().enumerate() {
            let base = (b * t + i) * c;
            for (k, &v) in row.iter().enumerate() {
                data[base + k] = v;
            }
        }
    }
    let lens = items.iter().map(|a| a.nrows()).collect();
    Ok((Tensor::from_vec(data, (items.len(), t, c), &Device::Cpu)?.to_dtype(dtype)?, lens))
}

/// Row `b` of a (B, T, C) tensor as an f64 array.
pub fn tensor_row(t: &Tensor, b: usize) -> Result<Array2<f64>> {
    let (_, n, c) = t.dims3()?;
    let v = t.get(b)?.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    Ok(Array2::from_shape_vec((n, c), v).map_err(|e| Error::shape(e.to_string()))?)
}

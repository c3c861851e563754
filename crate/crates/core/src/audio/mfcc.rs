//! Mel-frequency cepstral coefficients with first and second deltas.

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{AudioFeatures, AudioTrack, FeatureBackend};
use crate::error::Result;

pub const MFCC_DIM: usize = 39;

#[derive(Debug, Clone, PartialEq)]
pub struct MfccConfig {
    pub window: f64,
    pub hop: f64,
    pub pre_emphasis: f32,
    pub n_mels: usize,
    pub n_coeffs: usize,
    /// Half-width of the delta regression window.
    pub delta_width: usize,
    pub log_floor: f64,
}

impl Default for MfccConfig {
    fn default() -> Self {
        Self {
            window: 0.025,
            hop: 0.010,
            pre_emphasis: 0.97,
            n_mels: 26,
            n_coeffs: 13,
            delta_width: 2,
            log_floor: 1e-10,
        }
    }
}

impl MfccConfig {
    pub fn dim(&self) -> usize {
        3 * self.n_coeffs
    }

    /// (window samples, hop samples, frame count) for `n` samples.
    pub fn framing(&self, n: usize, sample_rate: u32) -> (usize, usize, usize) {
        let win = (self.window * sample_rate as f64).round().max(1.0) as usize;
        let hop = (self.hop * sample_rate as f64).round().max(1.0) as usize;
        let frames = if n <= win { 1 } else { 1 + (n - win) / hop };
        (win, hop, frames)
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters over the `nfft/2 + 1` power bins.
fn mel_filterbank(n_mels: usize, nfft: usize, sample_rate: u32) -> Array2<f64> {
    let bins = nfft / 2 + 1;
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64) * nfft as f64 / sample_rate as f64)
        .collect();
    let mut fb = Array2::zeros((n_mels, bins));
    for m in 0..n_mels {
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..bins {
            let x = k as f64;
            let w = if x > lo && x <= mid {
                (x - lo) / (mid - lo)
            } else if x > mid && x < hi {
                (hi - x) / (hi - mid)
            } else {
                0.0
            };
            fb[[m, k]] = w;
        }
    }
    fb
}

fn deltas(c: &Array2<f64>, width: usize) -> Array2<f64> {
    let (t, d) = c.dim();
    let denom: f64 = 2.0 * (1..=width).map(|n| (n * n) as f64).sum::<f64>();
    let mut out = Array2::zeros((t, d));
    for i in 0..t {
        for n in 1..=width {
            let ahead = (i + n).min(t - 1);
            let behind = i.saturating_sub(n);
            for k in 0..d {
                out[[i, k]] += n as f64 * (c[[ahead, k]] - c[[behind, k]]);
            }
        }
    }
    out / denom
}

pub fn mfcc(track: &AudioTrack, cfg: &MfccConfig) -> Result<AudioFeatures> {
    let sr = track.sample_rate;
    let x = &track.samples;
    let (win, hop, n_frames) = cfg.framing(x.len(), sr);
    let nfft = win.next_power_of_two();

    let mut emph = Vec::with_capacity(x.len());
    for (i, &s) in x.iter().enumerate() {
        let prev = if i == 0 { 0.0 } else { x[i - 1] };
        emph.push((s - cfg.pre_emphasis * prev) as f64);
    }
    let hamming: Vec<f64> = (0..win)
        .map(|n| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (win as f64 - 1.0).max(1.0)).cos())
        .collect();
    let fb = mel_filterbank(cfg.n_mels, nfft, sr);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(nfft);

    // orthonormal DCT-II basis
    let m = cfg.n_mels as f64;
    let dct = Array2::from_shape_fn((cfg.n_coeffs, cfg.n_mels), |(k, n)| {
        let scale = if k == 0 { (1.0 / m).sqrt() } else { (2.0 / m).sqrt() };
        scale * (std::f64::consts::PI * k as f64 * (n as f64 + 0.5) / m).cos()
    });

    let mut ceps = Array2::zeros((n_frames, cfg.n_coeffs));
    let mut buf = vec![Complex::new(0.0, 0.0); nfft];
    let mut logmel = vec![0.0; cfg.n_mels];
    for t in 0..n_frames {
        let start = t * hop;
        for (n, b) in buf.iter_mut().enumerate() {
            let v = if n < win { emph.get(start + n).copied().unwrap_or(0.0) * hamming[n] } else { 0.0 };
            *b = Complex::new(v, 0.0);
        }
        fft.process(&mut buf);
        for (mi, lm) in logmel.iter_mut().enumerate() {
            let mut e = 0.0;
            for k in 0..fb.ncols() {
                let w = fb[[mi, k]];
                if w != 0.0 {
                    e += w * buf[k].norm_sqr() / nfft as f64;
                }
            }
            *lm = e.max(cfg.log_floor).ln();
        }
        for k in 0..cfg.n_coeffs {
            ceps[[t, k]] = (0..cfg.n_mels).map(|n| dct[[k, n]] * logmel[n]).sum();
        }
    }

    let d1 = deltas(&ceps, cfg.delta_width);
    let d2 = deltas(&d1, cfg.delta_width);
    let frames = ndarray::concatenate(ndarray::Axis(1), &[ceps.view(), d1.view(), d2.view()])
        .expect("equal row counts");
    AudioFeatures::new(frames, hop as f64 / sr as f64, FeatureBackend::Mfcc)
}

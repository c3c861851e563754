//! Audio tracks and frame-level audio features.

pub mod mfcc;
pub mod service;

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use mfcc::{mfcc, MfccConfig, MFCC_DIM};
pub use service::{FeatureServiceClient, FEATURE_URL_ENV};

/// Mono PCM samples in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioTrack {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioTrack {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::format("sample_rate", "must be positive"));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Reads a WAV file. Multi-channel input is averaged down to mono.
    pub fn read_wav(path: impl AsRef<Path>) -> Result<Self> {
        let reader = hound::WavReader::open(path)?;
        Self::from_wav_reader(reader)
    }

    pub fn from_wav_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_wav_reader(hound::WavReader::new(std::io::Cursor::new(bytes))?)
    }

    fn from_wav_reader<R: std::io::Read>(reader: hound::WavReader<R>) -> Result<Self> {
        let spec = reader.spec();
        let interleaved: Vec<f32> = match spec.sample_format {
            hound::SampleFormat::Float => reader.into_samples::<f32>().collect::<Result<_, _>>()?,
            hound::SampleFormat::Int => {
                let scale = (1i64 << (spec.bits_per_sample - 1)) as f32;
                reader
                    .into_samples::<i32>()
                    .map(|s| s.map(|v| v as f32 / scale))
                    .collect::<Result<_, _>>()?
            }
        };
        let ch = spec.channels.max(1) as usize;
        let samples = interleaved
            .chunks(ch)
            .map(|c| c.iter().sum::<f32>() / ch as f32)
            .collect();
        Self::new(samples, spec.sample_rate)
    }

    /// 16-bit PCM mono WAV bytes.
    pub fn to_wav_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = std::io::Cursor::new(Vec::new());
        {
            let mut w = hound::WavWriter::new(&mut buf, self.wav_spec())?;
            for &s in &self.samples {
                w.write_sample((s.clamp(-1.0, 1.0) * i16::MAX as f32).round() as i16)?;
            }
            w.finalize()?;
        }
        Ok(buf.into_inner())
    }

    pub fn write_wav(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_wav_bytes()?)?;
        Ok(())
    }

    fn wav_spec(&self) -> hound::WavSpec {
        hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureBackend {
    Mfcc,
    Pretrained,
}

/// T_a × d_a feature frames with a fixed hop.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioFeatures {
    pub frames: Array2<f64>,
    /// Seconds per frame.
    pub hop: f64,
    pub backend: FeatureBackend,
}

impl AudioFeatures {
    pub fn new(frames: Array2<f64>, hop: f64, backend: FeatureBackend) -> Result<Self> {
        if frames.nrows() == 0 || frames.ncols() == 0 {
            return Err(Error::shape(format!("empty feature matrix {:?}", frames.dim())));
        }
        if !(hop.is_finite() && hop > 0.0) {
            return Err(Error::shape(format!("hop must be positive, got {hop}")));
        }
        if let Some(((t, d), _)) = frames.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::shape(format!("non-finite feature at frame {t} dim {d}")));
        }
        Ok(Self { frames, hop, backend })
    }

    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }
}

pub enum FeatureExtractor {
    Mfcc(MfccConfig),
    Service(FeatureServiceClient),
}

impl Default for FeatureExtractor {
    fn default() -> Self {
        Self::Mfcc(MfccConfig::default())
    }
}

impl FeatureExtractor {
    pub fn dim(&self) -> Option<usize> {
        match self {
            Self::Mfcc(c) => Some(c.dim()),
            Self::Service(s) => s.expected_dim,
        }
    }
}

pub fn extract_audio_features(track: &AudioTrack, backend: &FeatureExtractor) -> Result<AudioFeatures> {
    match backend {
        FeatureExtractor::Mfcc(cfg) => mfcc(track, cfg),
        FeatureExtractor::Service(client) => client.extract(track),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wav_round_trip() {
        let samples: Vec<f32> = (0..800).map(|i| (i as f32 * 0.05).sin() * 0.5).collect();
        let t = AudioTrack::new(samples.clone(), 16_000).unwrap();
        let back = AudioTrack::from_wav_bytes(&t.to_wav_bytes().unwrap()).unwrap();
        assert_eq!(back.sample_rate, 16_000);
        for (a, b) in back.samples.iter().zip(&samples) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn features_reject_bad_input() {
        assert!(AudioFeatures::new(Array2::zeros((0, 3)), 0.01, FeatureBackend::Mfcc).is_err());
        assert!(AudioFeatures::new(Array2::zeros((2, 3)), 0.0, FeatureBackend::Mfcc).is_err());
        let mut f = Array2::zeros((2, 3));
        f[[1, 2]] = f64::NAN;
        assert!(AudioFeatures::new(f, 0.01, FeatureBackend::Mfcc).is_err());
    }
}

//! Client for an external frame-level audio feature service.
//!
//! `POST <url>` with the track as 16-bit mono WAV (`Content-Type: audio/wav`);
//! the reply is `{"frames": [[f64; d_a]; T_a], "hop": seconds}`.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use ndarray::Array2;
use serde::Deserialize;

use super::{AudioFeatures, AudioTrack, FeatureBackend};
use crate::error::{Error, Result};

pub const FEATURE_URL_ENV: &str = "CUEDGEN_FEATURE_URL";

#[derive(Deserialize)]
struct FeatureReply {
    frames: Vec<Vec<f64>>,
    hop: f64,
}

/// Counting semaphore bounding concurrent requests.
struct Slots {
    free: Mutex<usize>,
    cv: Condvar,
}

struct SlotGuard<'a>(&'a Slots);

impl Slots {
    fn acquire(&self) -> SlotGuard<'_> {
        let mut free = self.free.lock().unwrap_or_else(|p| p.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|p| p.into_inner());
        }
        *free -= 1;
        SlotGuard(self)
    }
}

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|p| p.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

pub struct FeatureServiceClient {
    url: String,
    agent: ureq::Agent,
    slots: Slots,
    /// Feature width the caller expects; replies of another width are rejected.
    pub expected_dim: Option<usize>,
}

impl FeatureServiceClient {
    pub fn new(url: impl Into<String>, max_in_flight: usize, expected_dim: Option<usize>) -> Self {
        Self {
            url: url.into(),
            agent: ureq::AgentBuilder::new().timeout(Duration::from_secs(120)).build(),
            slots: Slots {
                free: Mutex::new(max_in_flight.max(1)),
                cv: Condvar::new(),
            },
            expected_dim,
        }
    }

    pub fn from_env(max_in_flight: usize, expected_dim: Option<usize>) -> Result<Self> {
        let url = std::env::var(FEATURE_URL_ENV)
            .map_err(|_| Error::BackendUnavailable(format!("{FEATURE_URL_ENV} is not set")))?;
        Ok(Self::new(url, max_in_flight, expected_dim))
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    pub fn extract(&self, track: &AudioTrack) -> Result<AudioFeatures> {
        let body = track.to_wav_bytes()?;
        let reply: FeatureReply = {
            let _slot = self.slots.acquire();
            self.agent
                .post(&self.url)
                .set("Content-Type", "audio/wav")
                .send_bytes(&body)
                .map_err(|e| Error::BackendUnavailable(format!("{}: {e}", self.url)))?
                .into_json()
                .map_err(|e| Error::shape(format!("unreadable feature reply: {e}")))?
        };
        let rows = reply.frames.len();
        let cols = reply.frames.first().map_or(0, Vec::len);
        if let Some(i) = reply.frames.iter().position(|r| r.len() != cols) {
            return Err(Error::shape(format!(
                "row {i} has {} values, row 0 has {cols}",
                reply.frames[i].len()
            )));
        }
        if let Some(d) = self.expected_dim {
            if cols != d {
                return Err(Error::shape(format!("expected {d}-dim features, got {cols}")));
            }
        }
        let flat: Vec<f64> = reply.frames.into_iter().flatten().collect();
        let frames = Array2::from_shape_vec((rows, cols), flat)
            .map_err(|e| Error::shape(e.to_string()))?;
        AudioFeatures::new(frames, reply.hop, FeatureBackend::Pretrained)
    }
}

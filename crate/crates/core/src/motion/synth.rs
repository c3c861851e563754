//! Synthetic landmark oracle.
//!
//! Each unit is rendered as its canonical hand pose (finger template at the
//! position anchor) held for the unit duration, with linear transitions between
//! holds and to/from the rest pose. Lips follow the audio timeline, which lags
//! the gesture timeline by `offset`. An optional stress-weighted beat moves the
//! hand along `beat_direction` during each audio segment; the audio track marks
//! each segment with a tone burst whose loudness follows the same envelope.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::pose::{Point, PoseTable};
use super::{JointMap, MotionSequence, Segment, SegmentAnnotation, Stream, DEFAULT_FPS};
use crate::audio::AudioTrack;
use crate::error::{Error, Result};
use crate::rules::CsUnit;

/// Carrier frequencies alternate per unit so neighbouring segments are distinguishable.
pub const CARRIERS_HZ: [f64; 3] = [400.0, 800.0, 1600.0];

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub units: Vec<CsUnit>,
    /// Hold duration per unit, seconds.
    pub unit_durations: Vec<f64>,
    pub transition: f64,
    /// How far the hand precedes the audio, seconds.
    pub offset: f64,
    /// Uniform jitter half-width, mm.
    pub noise: f64,
    pub seed: u64,
    pub fps: f64,
    /// Rest time before the first transition.
    pub lead: f64,
    /// Rest time after the audio ends.
    pub tail: f64,
    /// Per-unit stress in [0, 1]; empty means all 1.
    pub stresses: Vec<f64>,
    /// Peak beat displacement of the hand, mm.
    pub beat: f64,
    pub sample_rate: u32,
}

impl SyntheticSpec {
    pub fn new(units: Vec<CsUnit>, unit_duration: f64) -> Self {
        let n = units.len();
        Self {
            units,
            unit_durations: vec![unit_duration; n],
            transition: 0.1,
            offset: 0.2,
            noise: 0.0,
            seed: 0,
            fps: DEFAULT_FPS,
            lead: 0.05,
            tail: 0.1,
            stresses: Vec::new(),
            beat: 0.0,
            sample_rate: 16_000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.units.is_empty() {
            return bad("at least one unit is required".into());
        }
        if self.unit_durations.len() != self.units.len() {
            return bad(format!(
                "{} durations for {} units",
                self.unit_durations.len(),
                self.units.len()
            ));
        }
        if self.unit_durations.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return bad("durations must be > 0".into());
        }
        if !self.stresses.is_empty() && self.stresses.len() != self.units.len() {
            return bad("stresses must be empty or one per unit".into());
        }
        if self.stresses.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return bad("stresses must lie in [0, 1]".into());
        }
        let nonneg = [
            ("offset", self.offset),
            ("transition", self.transition),
            ("noise", self.noise),
            ("lead", self.lead),
            ("tail", self.tail),
            ("beat", self.beat),
        ];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be ≥ 0, got {v}"));
            }
        }
        if !(self.fps.is_finite() && self.fps > 0.0) || self.sample_rate == 0 {
            return bad("fps and sample rate must be positive".into());
        }
        Ok(())
    }

    fn stress(&self, i: usize) -> f64 {
        self.stresses.get(i).copied().unwrap_or(1.0)
    }

    /// Hold intervals on the gesture timeline.
    pub fn gesture_intervals(&self) -> Vec<(f64, f64)> {
        let mut t = self.lead + self.transition;
        self.unit_durations
            .iter()
            .map(|d| {
                let iv = (t, t + d);
                t += d + self.transition;
                iv
            })
            .collect()
    }

    pub fn total_duration(&self) -> f64 {
        let last = self.gesture_intervals().last().map_or(0.0, |iv| iv.1);
        last + self.transition + self.offset + self.tail
    }

    pub fn frame_count(&self) -> usize {
        (self.total_duration() * self.fps).round().max(1.0) as usize
    }
}

#[derive(Debug, Clone)]
pub struct SynthSample {
    pub motion: MotionSequence,
    pub gesture_segments: SegmentAnnotation,
    pub audio_segments: SegmentAnnotation,
    pub audio: AudioTrack,
    /// Beat envelope sampled at each motion frame, in [0, 1].
    pub envelope: Vec<f64>,
}

/// Piecewise-linear interpolation through keyframes; clamps outside the range.
fn keyframe_at(keys: &[(f64, Vec<Point>)], t: f64) -> Vec<Point> {
    if t <= keys[0].0 {
        return keys[0].1.clone();
    }
    for w in keys.windows(2) {
        let ((t0, a), (t1, b)) = (&w[0], &w[1]);
        if t <= *t1 {
            let u = if t1 > t0 { (t - t0) / (t1 - t0) } else { 1.0 };
            if u >= 1.0 {
                return b.clone();
            }
            return a
                .iter()
                .zip(b)
                .map(|(p, q)| [0, 1, 2].map(|c| p[c] + u * (q[c] - p[c])))
                .collect();
        }
    }
    keys[keys.len() - 1].1.clone()
}

fn hann_bump(t: f64, start: f64, end: f64) -> f64 {
    if t < start || t > end {
        return 0.0;
    }
    0.5 * (1.0 - (2.0 * std::f64::consts::PI * (t - start) / (end - start)).cos())
}

/// Stress-weighted sum of raised-cosine bumps over the audio segments.
pub fn beat_envelope(spec: &SyntheticSpec, audio: &SegmentAnnotation, t: f64) -> f64 {
    audio
        .segments()
        .iter()
        .enumerate()
        .map(|(i, s)| spec.stress(i) * hann_bump(t, s.start, s.end))
        .sum()
}

pub fn synth_generate(spec: &SyntheticSpec, poses: &PoseTable) -> Result<SynthSample> {
    spec.validate()?;
    let intervals = spec.gesture_intervals();

    let gesture_segments = SegmentAnnotation::new(
        Stream::Gesture,
        intervals
            .iter()
            .enumerate()
            .map(|(i, &(start, end))| Segment { unit_index: i, start, end })
            .collect(),
    )?;
    let audio_segments = gesture_segments.shifted(Stream::Audio, spec.offset)?;

    let lips_of = |u: &CsUnit| poses.lip_pose(u.vowel_group).to_vec();
    let mut hand_keys = vec![(spec.lead, poses.rest_hand())];
    let mut lip_keys = vec![(spec.lead + spec.offset, poses.rest_lips.clone())];
    for (u, &(s, e)) in spec.units.iter().zip(&intervals) {
        let hand = poses.hand_pose(u.finger_shape_id, u.hand_position_id);
        hand_keys.push((s, hand.clone()));
        hand_keys.push((e, hand));
        lip_keys.push((s + spec.offset, lips_of(u)));
        lip_keys.push((e + spec.offset, lips_of(u)));
    }
    let back = intervals.last().map_or(0.0, |iv| iv.1) + spec.transition;
    hand_keys.push((back, poses.rest_hand()));
    lip_keys.push((back + spec.offset, poses.rest_lips.clone()));

    let joint_map = JointMap::default();
    let hand_joints = joint_map.hand_joints();
    let len = spec.frame_count();
    let mut frames = Array3::<f64>::zeros((len, joint_map.hand_root.end, 3));
    let mut envelope = Vec::with_capacity(len);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for k in 0..len {
        let t = k as f64 / spec.fps;
        let env = beat_envelope(spec, &audio_segments, t);
        envelope.push(env);
        let lips = keyframe_at(&lip_keys, t);
        let hand = keyframe_at(&hand_keys, t);
        for (j, p) in joint_map.lips.indices().zip(&lips) {
            for c in 0..3 {
                frames[[k, j, c]] = p[c];
            }
        }
        for (&j, p) in hand_joints.iter().zip(&hand) {
            for c in 0..3 {
                frames[[k, j, c]] = p[c];
                if spec.beat > 0.0 {
                    frames[[k, j, c]] += spec.beat * env * poses.beat_direction[c];
                }
            }
        }
    }
    if spec.noise > 0.0 {
        for v in frames.iter_mut() {
            *v += rng.gen_range(-spec.noise..=spec.noise);
        }
    }
    let motion = MotionSequence::new(frames, spec.fps, joint_map)?.with_units(spec.units.clone());

    let audio = render_audio(spec, &audio_segments)?;
    Ok(SynthSample {
        motion,
        gesture_segments,
        audio_segments,
        audio,
        envelope,
    })
}

fn render_audio(spec: &SyntheticSpec, segs: &SegmentAnnotation) -> Result<AudioTrack> {
    let sr = spec.sample_rate as f64;
    let n = (spec.total_duration() * sr).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);
    let mut samples: Vec<f32> = (0..n).map(|_| rng.gen_range(-1e-3f32..1e-3)).collect();
    for (i, s) in segs.segments().iter().enumerate() {
        let f = CARRIERS_HZ[i % CARRIERS_HZ.len()];
        let amp = 0.5 * (0.2 + 0.8 * spec.stress(i));
        let first = (s.start * sr).ceil() as usize;
        let last = ((s.end * sr).floor() as usize).min(n.saturating_sub(1));
        for (k, out) in samples.iter_mut().enumerate().take(last + 1).skip(first) {
            let t = k as f64 / sr;
            let v = amp
                * hann_bump(t, s.start, s.end)
                * (2.0 * std::f64::consts::PI * f * (t - s.start)).sin();
            *out += v as f32;
        }
    }
    AudioTrack::new(samples, spec.sample_rate)
}

//! Landmark sequences, segment annotations and the synthetic oracle.

pub mod io;
pub mod pose;
pub mod segment;
pub mod synth;

use ndarray::{Array, Array3, ArrayView, Axis, Dimension, RemoveAxis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rules::CsUnit;

pub use io::{load_motion, load_segments, save_motion, save_motion_binary, save_segments};
pub use pose::PoseTable;
pub use segment::segment_gestures;
pub use synth::{synth_generate, SynthSample, SyntheticSpec};

pub const DEFAULT_FPS: f64 = 30.0;
pub const NUM_LIP_JOINTS: usize = 20;
pub const NUM_FINGER_JOINTS: usize = 9;
pub const NUM_JOINTS: usize = NUM_LIP_JOINTS + NUM_FINGER_JOINTS + 1;

/// Half-open joint index range `[start, end)`, serialized as `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct JointRange {
    pub start: usize,
    pub end: usize,
}

impl From<[usize; 2]> for JointRange {
    fn from(v: [usize; 2]) -> Self {
        Self { start: v[0], end: v[1] }
    }
}

impl From<JointRange> for [usize; 2] {
    fn from(r: JointRange) -> Self {
        [r.start, r.end]
    }
}

impl JointRange {
    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn indices(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct JointMap {
    pub lips: JointRange,
    pub fingers: JointRange,
    pub hand_root: JointRange,
}

impl Default for JointMap {
    fn default() -> Self {
        Self {
            lips: JointRange { start: 0, end: NUM_LIP_JOINTS },
            fingers: JointRange {
                start: NUM_LIP_JOINTS,
                end: NUM_LIP_JOINTS + NUM_FINGER_JOINTS,
            },
            hand_root: JointRange {
                start: NUM_LIP_JOINTS + NUM_FINGER_JOINTS,
                end: NUM_JOINTS,
            },
        }
    }
}

impl JointMap {
    /// Checks the three slices are disjoint and together cover `0..joints`.
    pub fn validate(&self, joints: usize) -> Result<()> {
        let mut ranges = [self.lips, self.fingers, self.hand_root];
        ranges.sort_by_key(|r| r.start);
        let mut next = 0;
        for r in ranges {
            if r.start > r.end || r.start != next {
                return Err(Error::format(
                    "joint_map",
                    format!("slices must be disjoint and contiguous over 0..{joints}"),
                ));
            }
            next = r.end;
        }
        if next != joints {
            return Err(Error::format(
                "joint_map",
                format!("slices cover 0..{next} but sequence has {joints} joints"),
            ));
        }
        Ok(())
    }

    /// Finger and hand-root joints.
    pub fn hand_joints(&self) -> Vec<usize> {
        self.fingers.indices().chain(self.hand_root.indices()).collect()
    }
}

/// L × J × 3 landmark coordinates in millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    frames: Array3<f64>,
    pub fps: f64,
    pub joint_map: JointMap,
    /// Cue units performed in the sequence, when known.
    pub units: Vec<CsUnit>,
}

impl MotionSequence {
    pub fn new(frames: Array3<f64>, fps: f64, joint_map: JointMap) -> Result<Self> {
        let (len, joints, dims) = frames.dim();
        if len == 0 {
            return Err(Error::format("frames", "sequence must have at least one frame"));
        }
        if dims != 3 {
            return Err(Error::format("frames", format!("expected 3 coordinates, got {dims}")));
        }
        if !(fps.is_finite() && fps > 0.0) {
            return Err(Error::format("fps", format!("fps must be positive, got {fps}")));
        }
        joint_map.validate(joints)?;
        if let Some(((f, j, _), _)) = frames.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::format(
                format!("frame {f} joint {j}"),
                "non-finite coordinate",
            ));
        }
        Ok(Self {
            frames,
            fps,
            joint_map,
            units: Vec::new(),
        })
    }

    pub fn with_units(mut self, units: Vec<CsUnit>) -> Self {
        self.units = units;
        self
    }

    pub fn frames(&self) -> &Array3<f64> {
        &self.frames
    }

    pub fn into_frames(self) -> Array3<f64> {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn joints(&self) -> usize {
        self.frames.dim().1
    }

    pub fn duration(&self) -> f64 {
        self.len() as f64 / self.fps
    }

    /// Linear time resampling to `len` frames; the first and last frames are kept.
    pub fn resample(&self, len: usize) -> Result<Self> {
        let frames = resample_time(&self.frames.view(), len);
        Ok(Self::new(frames, self.fps, self.joint_map)?.with_units(self.units.clone()))
    }

    /// Same shape, fps and joint map, different coordinates.
    pub fn with_frames(&self, frames: Array3<f64>) -> Result<Self> {
        if frames.dim() != self.frames.dim() {
            return Err(Error::shape(format!(
                "{:?} vs {:?}",
                frames.dim(),
                self.frames.dim()
            )));
        }
        Ok(Self::new(frames, self.fps, self.joint_map)?.with_units(self.units.clone()))
    }
}

/// Source position for output frame `k` when resampling `from` → `to` frames.
pub fn resample_position(k: usize, from: usize, to: usize) -> (usize, usize, f64) {
    if from <= 1 || to <= 1 {
        return (0, 0, 0.0);
    }
    let pos = k as f64 * (from - 1) as f64 / (to - 1) as f64;
    let i0 = (pos.floor() as usize).min(from - 1);
    let i1 = (i0 + 1).min(from - 1);
    (i0, i1, pos - i0 as f64)
}

/// Linear interpolation along axis 0, preserving the endpoints.
pub fn resample_time<D>(a: &ArrayView<f64, D>, len: usize) -> Array<f64, D>
where
    D: Dimension + RemoveAxis,
{
    let from = a.len_of(Axis(0));
    let mut shape = a.raw_dim();
    shape[0] = len;
    let mut out = Array::zeros(shape);
    for k in 0..len {
        let (i0, i1, w) = resample_position(k, from, len);
        let mut row = out.index_axis_mut(Axis(0), k);
        row.assign(&a.index_axis(Axis(0), i0));
        if w > 0.0 {
            row *= 1.0 - w;
            row.scaled_add(w, &a.index_axis(Axis(0), i1));
        }
    }
    out
}

/// Frame-wise average of a reference set of sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanMotion {
    pub frames: Array3<f64>,
    pub fps: f64,
    pub joint_map: JointMap,
    /// Number of sequences averaged.
    pub count: usize,
}

impl MeanMotion {
    pub fn len(&self) -> usize {
        self.frames.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Mean frames resampled to `len` frames.
    pub fn resampled(&self, len: usize) -> Array3<f64> {
        if len == self.len() {
            self.frames.clone()
        } else {
            resample_time(&self.frames.view(), len)
        }
    }

    pub fn as_motion(&self) -> Result<MotionSequence> {
        MotionSequence::new(self.frames.clone(), self.fps, self.joint_map)
    }
}

/// Elementwise mean after resampling every sequence to `len` frames
/// (default: the first sequence's length).
pub fn mean_motion(sequences: &[MotionSequence], len: Option<usize>) -> Result<MeanMotion> {
    let first = sequences.first().ok_or(Error::EmptySet)?;
    let len = len.unwrap_or(first.len());
    let mut acc = Array3::<f64>::zeros((len, first.joints(), 3));
    for s in sequences {
        if s.joints() != first.joints() {
            return Err(Error::shape(format!(
                "joint count {} vs {}",
                s.joints(),
                first.joints()
            )));
        }
        if s.len() == len {
            acc += s.frames();
        } else {
            acc += &resample_time(&s.frames().view(), len);
        }
    }
    acc /= sequences.len() as f64;
    Ok(MeanMotion {
        frames: acc,
        fps: first.fps,
        joint_map: first.joint_map,
        count: sequences.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stream {
    Gesture,
    Audio,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub unit_index: usize,
    pub start: f64,
    pub end: f64,
}

impl Segment {
    pub fn midpoint(&self) -> f64 {
        0.5 * (self.start + self.end)
    }
}

/// Ordered, non-overlapping temporal segments (seconds), one per unit.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentAnnotation {
    pub stream: Stream,
    segments: Vec<Segment>,
}

impl SegmentAnnotation {
    pub fn new(stream: Stream, segments: Vec<Segment>) -> Result<Self> {
        for (i, s) in segments.iter().enumerate() {
            if !(s.start.is_finite() && s.end.is_finite() && s.start < s.end) {
                return Err(Error::format(
                    format!("segment {i}"),
                    format!("need start < end, got {}..{}", s.start, s.end),
                ));
            }
            if i > 0 && segments[i - 1].end > s.start {
                return Err(Error::format(
                    format!("segment {i}"),
                    "segments must be ordered and non-overlapping",
                ));
            }
        }
        Ok(Self { stream, segments })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn midpoints(&self) -> Vec<f64> {
        self.segments.iter().map(Segment::midpoint).collect()
    }

    /// Same segments shifted by `dt` seconds.
    pub fn shifted(&self, stream: Stream, dt: f64) -> Result<Self> {
        let segs = self
            .segments
            .iter()
            .map(|s| Segment {
                unit_index: s.unit_index,
                start: s.start + dt,
                end: s.end + dt,
            })
            .collect();
        Self::new(stream, segs)
    }
}

//! Recovers per-unit gesture segments from a motion by template alignment.
//!
//! Frames are assigned left to right to the states `O H0 O H1 ... H(n-1) O`.
//! A hold state `Hi` costs the mean squared distance (mm²) between the frame's
//! hand joints and unit i's canonical hand pose; the in-between states `O` cost
//! a constant, so a frame is labelled as a hold only when it is within roughly
//! `other_radius` of the template. Every hold gets at least one frame.

use super::pose::PoseTable;
use super::{MotionSequence, Segment, SegmentAnnotation, Stream};
use crate::error::{Error, Result};

pub const DEFAULT_OTHER_RADIUS_MM: f64 = 20.0;

pub fn segment_gestures(
    motion: &MotionSequence,
    poses: &PoseTable,
    other_radius: f64,
) -> Result<SegmentAnnotation> {
    let units = &motion.units;
    let n = units.len();
    if n == 0 {
        return Err(Error::EmptySet);
    }
    let len = motion.len();
    if len < n {
        return Err(Error::TooShort { len, min: n });
    }
    let hand_joints = motion.joint_map.hand_joints();
    let frames = motion.frames();
    let templates: Vec<_> = units
        .iter()
        .map(|u| poses.hand_pose(u.finger_shape_id, u.hand_position_id))
        .collect();
    let hold_cost = |k: usize, i: usize| -> f64 {
        let mut acc = 0.0;
        for (p, &j) in templates[i].iter().zip(&hand_joints) {
            for c in 0..3 {
                let d = frames[[k, j, c]] - p[c];
                acc += d * d;
            }
        }
        acc / hand_joints.len() as f64
    };
    let other = other_radius * other_radius;

    let states = 2 * n + 1;
    let cost_of = |k: usize, s: usize| if s % 2 == 0 { other } else { hold_cost(k, s / 2) };
    let mut cost = vec![f64::INFINITY; len * states];
    let mut back = vec![0usize; len * states];
    cost[0] = cost_of(0, 0);
    cost[1] = cost_of(0, 1);
    for k in 1..len {
        for s in 0..states {
            let mut best = (cost[(k - 1) * states + s], s);
            if s >= 1 && cost[(k - 1) * states + s - 1] < best.0 {
                best = (cost[(k - 1) * states + s - 1], s - 1);
            }
            // an O state may be skipped between two holds
            if s >= 2 && s % 2 == 1 && cost[(k - 1) * states + s - 2] < best.0 {
                best = (cost[(k - 1) * states + s - 2], s - 2);
            }
            if best.0.is_finite() {
                cost[k * states + s] = best.0 + cost_of(k, s);
                back[k * states + s] = best.1;
            }
        }
    }
    let last = (len - 1) * states;
    let mut s = if cost[last + states - 1] <= cost[last + states - 2] {
        states - 1
    } else {
        states - 2
    };
    let mut labels = vec![0usize; len];
    for k in (0..len).rev() {
        labels[k] = s;
        s = back[k * states + s];
    }

    let mut segments = Vec::with_capacity(n);
    for i in 0..n {
        let state = 2 * i + 1;
        let first = labels.iter().position(|&l| l == state);
        let last = labels.iter().rposition(|&l| l == state);
        let (Some(a), Some(b)) = (first, last) else {
            return Err(Error::TooShort { len, min: n });
        };
        segments.push(Segment {
            unit_index: i,
            start: a as f64 / motion.fps,
            end: (b + 1) as f64 / motion.fps,
        });
    }
    SegmentAnnotation::new(Stream::Gesture, segments)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::synth::{synth_generate, SyntheticSpec};
    use crate::rules::{text_to_units, MappingTable};

    #[test]
    fn recovers_oracle_holds() {
        let units = text_to_units("shu ma ni", &MappingTable::default()).unwrap();
        let mut spec = SyntheticSpec::new(units, 0.4);
        spec.noise = 1.0;
        let poses = PoseTable::default();
        let out = synth_generate(&spec, &poses).unwrap();
        let found = segment_gestures(&out.motion, &poses, DEFAULT_OTHER_RADIUS_MM).unwrap();
        for (f, g) in found.midpoints().iter().zip(out.gesture_segments.midpoints()) {
            assert!((f - g).abs() < 0.06, "{f} vs {g}");
        }
    }

    #[test]
    fn every_hold_gets_a_frame_even_when_far() {
        let units = text_to_units("shu ma", &MappingTable::default()).unwrap();
        let poses = PoseTable::default();
        let out = synth_generate(&SyntheticSpec::new(units, 0.3), &poses).unwrap();
        let far = out.motion.with_frames(out.motion.frames() + 500.0).unwrap();
        let found = segment_gestures(&far, &poses, DEFAULT_OTHER_RADIUS_MM).unwrap();
        assert_eq!(found.len(), 2);
    }
}

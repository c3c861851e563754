//! Canonical poses used by the synthetic oracle.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{JointMap, NUM_FINGER_JOINTS, NUM_JOINTS, NUM_LIP_JOINTS};
use crate::error::{Error, Result};
use crate::rules::table::{CsUnit, MAX_POSITION_ID, MAX_SHAPE_ID};

const DEFAULT_POSE_JSON: &str = include_str!("../../data/pose_table.json");

pub type Point = [f64; 3];

/// Finger templates (relative to the hand root), hand-position anchors and lip
/// shapes. Lip shapes are keyed by vowel group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseTable {
    pub schema_version: u32,
    #[serde(default)]
    pub notes: String,
    pub shape_offsets: BTreeMap<u8, Vec<Point>>,
    pub neutral_shape_offsets: Vec<Point>,
    pub position_anchors: BTreeMap<u8, Point>,
    pub rest_anchor: Point,
    pub lip_shapes: BTreeMap<u8, Vec<Point>>,
    pub rest_lips: Vec<Point>,
    pub beat_direction: Point,
}

impl Default for PoseTable {
    fn default() -> Self {
        Self::from_json(DEFAULT_POSE_JSON).expect("shipped pose table is valid")
    }
}

impl PoseTable {
    pub fn from_json(text: &str) -> Result<Self> {
        let t: PoseTable = serde_json::from_str(text).map_err(|e| {
            Error::format(format!("line {} column {}", e.line(), e.column()), e.to_string())
        })?;
        t.validate()?;
        Ok(t)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidTable(m));
        for s in 1..=MAX_SHAPE_ID {
            match self.shape_offsets.get(&s) {
                Some(o) if o.len() == NUM_FINGER_JOINTS => {}
                _ => return bad(format!("shape {s} needs {NUM_FINGER_JOINTS} finger offsets")),
            }
        }
        if self.neutral_shape_offsets.len() != NUM_FINGER_JOINTS {
            return bad("neutral_shape_offsets has the wrong joint count".into());
        }
        for p in 1..=MAX_POSITION_ID {
            if !self.position_anchors.contains_key(&p) {
                return bad(format!("missing anchor for position {p}"));
            }
        }
        if self.lip_shapes.values().chain([&self.rest_lips]).any(|l| l.len() != NUM_LIP_JOINTS) {
            return bad(format!("lip shapes need {NUM_LIP_JOINTS} points"));
        }
        let all_finite = self
            .shape_offsets
            .values()
            .chain(self.lip_shapes.values())
            .flatten()
            .chain(self.position_anchors.values())
            .chain(&self.neutral_shape_offsets)
            .chain(&self.rest_lips)
            .chain([&self.rest_anchor, &self.beat_direction])
            .all(|p| p.iter().all(|v| v.is_finite()));
        if !all_finite {
            return bad("non-finite coordinate in pose table".into());
        }
        Ok(())
    }

    pub fn joint_map(&self) -> JointMap {
        JointMap::default()
    }

    fn offsets(&self, shape: Option<u8>) -> &[Point] {
        shape
            .and_then(|s| self.shape_offsets.get(&s))
            .unwrap_or(&self.neutral_shape_offsets)
    }

    /// Finger joints followed by the hand root, in absolute coordinates.
    pub fn hand_pose(&self, shape: Option<u8>, position: u8) -> Vec<Point> {
        let anchor = self.position_anchors.get(&position).copied().unwrap_or(self.rest_anchor);
        self.hand_at(shape, anchor)
    }

    pub fn rest_hand(&self) -> Vec<Point> {
        self.hand_at(None, self.rest_anchor)
    }

    fn hand_at(&self, shape: Option<u8>, anchor: Point) -> Vec<Point> {
        let mut out: Vec<Point> = self
            .offsets(shape)
            .iter()
            .map(|o| [anchor[0] + o[0], anchor[1] + o[1], anchor[2] + o[2]])
            .collect();
        out.push(anchor);
        out
    }

    pub fn lip_pose(&self, vowel_group: u8) -> &[Point] {
        self.lip_shapes.get(&vowel_group).unwrap_or(&self.rest_lips)
    }

    /// Full J × 3 held pose for one unit.
    pub fn unit_pose(&self, unit: &CsUnit) -> Array2<f64> {
        let lips = self.lip_pose(unit.vowel_group);
        let hand = self.hand_pose(unit.finger_shape_id, unit.hand_position_id);
        stack_pose(lips, &hand)
    }

    pub fn rest_pose(&self) -> Array2<f64> {
        stack_pose(&self.rest_lips, &self.rest_hand())
    }
}

fn stack_pose(lips: &[Point], hand: &[Point]) -> Array2<f64> {
    let mut out = Array2::zeros((NUM_JOINTS, 3));
    for (j, p) in lips.iter().chain(hand).enumerate() {
        for c in 0..3 {
            out[[j, c]] = p[c];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_table_validates() {
        let t = PoseTable::default();
        assert_eq!(t.rest_pose().dim(), (NUM_JOINTS, 3));
    }

    #[test]
    fn hand_pose_is_template_plus_anchor() {
        let t = PoseTable::default();
        let h = t.hand_pose(Some(2), 2);
        let a = t.position_anchors[&2];
        assert_eq!(h[NUM_FINGER_JOINTS], a);
        for (p, o) in h.iter().zip(&t.shape_offsets[&2]) {
            for c in 0..3 {
                assert_eq!(p[c], a[c] + o[c]);
            }
        }
    }

    #[test]
    fn distinct_units_have_distinct_poses() {
        let t = PoseTable::default();
        let u = |s, p| CsUnit {
            consonant_group: Some(s),
            vowel_group: p,
            finger_shape_id: Some(s),
            hand_position_id: p,
        };
        assert_ne!(t.unit_pose(&u(1, 1)), t.unit_pose(&u(2, 1)));
        assert_ne!(t.unit_pose(&u(1, 1)), t.unit_pose(&u(1, 2)));
    }
}

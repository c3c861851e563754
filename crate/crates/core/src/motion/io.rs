//! Landmark and segment file formats.
//!
//! JSON landmarks:
//! `{"fps": 30.0, "joint_map": {"lips": [0, 20], ...}, "units": [...], "frames": [[[x, y, z], ...], ...]}`
//!
//! Binary landmarks (all little-endian):
//!
//! | bytes | field |
//! |-------|-------|
//! | 4 | magic `CSLM` |
//! | 4 | version, u32 = 1 |
//! | 4 | frame count L, u32 |
//! | 4 | joint count J, u32 |
//! | 4 | fps, f32 |
//! | 4 | header length H, u32 |
//! | H | UTF-8 JSON `{"joint_map": ..., "units": ...}` |
//! | 12·L·J | coordinates, f32, frame-major then joint then xyz |

use std::io::Write;
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::{JointMap, MotionSequence, Segment, SegmentAnnotation, Stream};
use crate::error::{Error, Result};
use crate::rules::CsUnit;

pub const BINARY_MAGIC: &[u8; 4] = b"CSLM";
pub const BINARY_VERSION: u32 = 1;

#[derive(Serialize)]
struct MotionFileOut<'a> {
    fps: f64,
    joint_map: JointMap,
    units: &'a [CsUnit],
    frames: Vec<Vec<[f64; 3]>>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Coord {
    Num(f64),
    Text(String),
}

#[derive(Deserialize)]
struct MotionFileIn {
    fps: f64,
    #[serde(default)]
    joint_map: Option<JointMap>,
    #[serde(default)]
    units: Vec<CsUnit>,
    frames: Vec<Vec<Vec<Coord>>>,
}

#[derive(Serialize, Deserialize)]
struct BinaryHeader {
    joint_map: JointMap,
    #[serde(default)]
    units: Vec<CsUnit>,
}

/// Quotes bare `NaN` / `Infinity` / `-Infinity` tokens outside strings so the
/// parser accepts them and validation can say where they are.
fn quote_nonfinite(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut in_str = false;
    let mut escaped = false;
    let mut rest = text;
    while let Some(c) = rest.chars().next() {
        if in_str {
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_str = false;
            }
        } else if c == '"' {
            in_str = true;
        } else {
            let tok = ["-Infinity", "Infinity", "NaN"]
                .into_iter()
                .find(|t| rest.starts_with(t));
            if let Some(t) = tok {
                out.push('"');
                out.push_str(t);
                out.push('"');
                rest = &rest[t.len()..];
                continue;
            }
        }
        out.push(c);
        rest = &rest[c.len_utf8()..];
    }
    out
}

fn json_error(e: serde_json::Error) -> Error {
    Error::format(format!("line {} column {}", e.line(), e.column()), e.to_string())
}

pub fn motion_from_json(text: &str) -> Result<MotionSequence> {
    let file: MotionFileIn = serde_json::from_str(&quote_nonfinite(text)).map_err(json_error)?;
    let len = file.frames.len();
    let joints = file.frames.first().map_or(0, Vec::len);
    let mut frames = Array3::<f64>::zeros((len, joints, 3));
    for (f, frame) in file.frames.iter().enumerate() {
        if frame.len() != joints {
            return Err(Error::format(
                format!("frame {f}"),
                format!("expected {joints} joints, got {}", frame.len()),
            ));
        }
        for (j, joint) in frame.iter().enumerate() {
            if joint.len() != 3 {
                return Err(Error::format(
                    format!("frame {f} joint {j}"),
                    format!("expected 3 coordinates, got {}", joint.len()),
                ));
            }
            for (c, v) in joint.iter().enumerate() {
                match v {
                    Coord::Num(x) => frames[[f, j, c]] = *x,
                    Coord::Text(t) => {
                        return Err(Error::format(
                            format!("frame {f} joint {j}"),
                            format!("non-finite coordinate `{t}`"),
                        ))
                    }
                }
            }
        }
    }
    let joint_map = file.joint_map.unwrap_or_default();
    Ok(MotionSequence::new(frames, file.fps, joint_map)?.with_units(file.units))
}

pub fn motion_to_json(m: &MotionSequence) -> Result<String> {
    let frames = m
        .frames()
        .outer_iter()
        .map(|f| f.outer_iter().map(|j| [j[0], j[1], j[2]]).collect())
        .collect();
    let out = MotionFileOut {
        fps: m.fps,
        joint_map: m.joint_map,
        units: &m.units,
        frames,
    };
    Ok(serde_json::to_string(&out)?)
}

pub fn motion_to_binary(m: &MotionSequence) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&BinaryHeader {
        joint_map: m.joint_map,
        units: m.units.clone(),
    })?;
    let mut out = Vec::with_capacity(24 + header.len() + m.frames().len() * 4);
    out.extend_from_slice(BINARY_MAGIC);
    out.extend_from_slice(&BINARY_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.len() as u32).to_le_bytes());
    out.extend_from_slice(&(m.joints() as u32).to_le_bytes());
    out.extend_from_slice(&(m.fps as f32).to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for v in m.frames().iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn motion_from_binary(bytes: &[u8]) -> Result<MotionSequence> {
    let mut pos = 0usize;
    let mut take = |n: usize, field: &str| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| {
            Error::format(format!("byte {pos}"), format!("file truncated while reading {field}"))
        })?;
        pos += n;
        Ok(s)
    };
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
    if take(4, "magic")? != BINARY_MAGIC {
        return Err(Error::format("byte 0", "bad magic, expected CSLM"));
    }
    let version = u32_at(take(4, "version")?);
    if version != BINARY_VERSION {
        return Err(Error::format("byte 4", format!("unsupported version {version}")));
    }
    let len = u32_at(take(4, "frame count")?) as usize;
    let joints = u32_at(take(4, "joint count")?) as usize;
    let fps = f32::from_le_bytes(take(4, "fps")?.try_into().unwrap()) as f64;
    let hlen = u32_at(take(4, "header length")?) as usize;
    let header: BinaryHeader = serde_json::from_slice(take(hlen, "header")?)
        .map_err(|e| Error::format("header", e.to_string()))?;
    let data = take(len * joints * 12, "coordinates")?;
    let mut frames = Array3::<f64>::zeros((len, joints, 3));
    for (i, (dst, chunk)) in frames.iter_mut().zip(data.chunks_exact(4)).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::format(
                format!("frame {} joint {}", i / (joints * 3), (i / 3) % joints),
                format!("non-finite coordinate `{v}`"),
            ));
        }
        *dst = v as f64;
    }
    Ok(MotionSequence::new(frames, fps, header.joint_map)?.with_units(header.units))
}

/// Loads either format; binary files are recognised by their magic.
pub fn load_motion(path: impl AsRef<Path>) -> Result<MotionSequence> {
    let bytes = std::fs::read(path.as_ref())?;
    if bytes.starts_with(BINARY_MAGIC) {
        motion_from_binary(&bytes)
    } else {
        let text = String::from_utf8(bytes)
            .map_err(|e| Error::format("file", format!("not UTF-8: {e}")))?;
        motion_from_json(&text)
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    let mut f = std::fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_motion(m: &MotionSequence, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), motion_to_json(m)?.as_bytes())
}

pub fn save_motion_binary(m: &MotionSequence, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &motion_to_binary(m)?)
}

pub fn save_segments(ann: &SegmentAnnotation, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(
        path.as_ref(),
        serde_json::to_string_pretty(ann.segments())?.as_bytes(),
    )
}

pub fn load_segments(path: impl AsRef<Path>, stream: Stream) -> Result<SegmentAnnotation> {
    let text = std::fs::read_to_string(path)?;
    let segs: Vec<Segment> = serde_json::from_str(&text).map_err(json_error)?;
    SegmentAnnotation::new(stream, segs)
}

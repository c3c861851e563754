//! Paired corpora: synthetic generation and the on-disk dataset layout.
//!
//! A dataset directory holds `corpus.json` (one entry per item) and, per item,
//! `<id>.motion.json`, `<id>.wav`, `<id>.gesture.json` and `<id>.audio.json`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{extract_audio_features, AudioFeatures, AudioTrack, FeatureExtractor};
use crate::error::{Error, Result};
use crate::motion::{
    load_motion, load_segments, save_motion, save_segments, synth_generate, MotionSequence, PoseTable,
    SegmentAnnotation, Stream, SyntheticSpec,
};
use crate::rules::pinyin::syllable_inventory;
use crate::rules::{compile_gloss, CsUnit, MappingTable};

pub const CORPUS_FILE: &str = "corpus.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub sentences: usize,
    pub syllables: usize,
    /// Hold durations are drawn from this range, then rescaled to `total_hold`.
    pub min_duration: f64,
    pub max_duration: f64,
    pub total_hold: f64,
    pub transition: f64,
    pub offset: f64,
    pub noise_mm: f64,
    pub beat_mm: (f64, f64),
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            sentences: 200,
            syllables: 3,
            min_duration: 0.25,
            max_duration: 0.45,
            total_hold: 1.05,
            transition: 0.1,
            offset: 0.2,
            noise_mm: 1.0,
            beat_mm: (6.0, 8.0),
            seed: 7,
        }
    }
}

/// One paired sentence.
#[derive(Debug, Clone)]
pub struct Item {
    pub id: String,
    pub text: String,
    pub gloss: String,
    pub units: Vec<CsUnit>,
    pub motion: MotionSequence,
    pub audio: AudioTrack,
    pub features: AudioFeatures,
    pub gesture_segments: SegmentAnnotation,
    pub audio_segments: SegmentAnnotation,
    /// Beat envelope of the synthetic oracle, when known.
    pub envelope: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    id: String,
    text: String,
    gloss: String,
    #[serde(default)]
    envelope: Option<Vec<f64>>,
}

pub fn synth_corpus(
    cfg: &CorpusConfig,
    table: &MappingTable,
    poses: &PoseTable,
    features: &FeatureExtractor,
) -> Result<Vec<Item>> {
    if cfg.syllables == 0 || cfg.sentences == 0 {
        return Err(Error::InvalidConfig("corpus needs at least one sentence and syllable".into()));
    }
    if !(cfg.min_duration > 0.0 && cfg.max_duration >= cfg.min_duration) {
        return Err(Error::InvalidConfig("invalid duration range".into()));
    }
    let vocab: Vec<&str> = syllable_inventory()
        .filter(|s| compile_gloss(s, table).is_ok())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut items = Vec::with_capacity(cfg.sentences);
    for i in 0..cfg.sentences {
        let words: Vec<&str> = (0..cfg.syllables)
            .map(|_| *vocab.choose(&mut rng).expect("non-empty inventory"))
            .collect();
        let text = words.join(" ");
        let gloss = compile_gloss(&text, table)?;
        let raw: Vec<f64> = (0..cfg.syllables)
            .map(|_| rng.gen_range(cfg.min_duration..=cfg.max_duration))
            .collect();
        let scale = cfg.total_hold / raw.iter().sum::<f64>();
        let mut spec = SyntheticSpec::new(gloss.units.clone(), 0.3);
        spec.unit_durations = raw.iter().map(|d| d * scale).collect();
        spec.transition = cfg.transition;
        spec.offset = cfg.offset;
        spec.noise = cfg.noise_mm;
        spec.beat = rng.gen_range(cfg.beat_mm.0..=cfg.beat_mm.1);
        spec.stresses = (0..cfg.syllables).map(|_| rng.gen_range(0.3..=1.0)).collect();
        spec.seed = rng.gen();
        let s = synth_generate(&spec, poses)?;
        let feats = extract_audio_features(&s.audio, features)?;
        items.push(Item {
            id: format!("s{i:04}"),
            text,
            gloss: gloss.text,
            units: gloss.units,
            motion: s.motion,
            audio: s.audio,
            features: feats,
            gesture_segments: s.gesture_segments,
            audio_segments: s.audio_segments,
            envelope: Some(s.envelope),
        });
    }
    Ok(items)
}

pub fn save_dataset(items: &[Item], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(items.len());
    for it in items {
        save_motion(&it.motion, dir.join(format!("{}.motion.json", it.id)))?;
        it.audio.write_wav(dir.join(format!("{}.wav", it.id)))?;
        save_segments(&it.gesture_segments, dir.join(format!("{}.gesture.json", it.id)))?;
        save_segments(&it.audio_segments, dir.join(format!("{}.audio.json", it.id)))?;
        entries.push(Entry {
            id: it.id.clone(),
            text: it.text.clone(),
            gloss: it.gloss.clone(),
            envelope: it.envelope.clone(),
        });
    }
    std::fs::write(dir.join(CORPUS_FILE), serde_json::to_string(&entries)?)?;
    Ok(())
}

/// Audio features are recomputed with `features` on load.
pub fn load_dataset(dir: impl AsRef<Path>, features: &FeatureExtractor) -> Result<Vec<Item>> {
    let dir = dir.as_ref();
    let index = dir.join(CORPUS_FILE);
    let entries: Vec<Entry> = serde_json::from_str(&std::fs::read_to_string(&index)?).map_err(|e| Error::Format {
        location: format!("{} line {}", index.display(), e.line()),
        message: e.to_string(),
    })?;
    entries
        .into_iter()
        .map(|e| {
            let motion = load_motion(dir.join(format!("{}.motion.json", e.id)))?;
            let audio = AudioTrack::read_wav(dir.join(format!("{}.wav", e.id)))?;
            let feats = extract_audio_features(&audio, features)?;
            Ok(Item {
                units: motion.units.clone(),
                gesture_segments: load_segments(dir.join(format!("{}.gesture.json", e.id)), Stream::Gesture)?,
                audio_segments: load_segments(dir.join(format!("{}.audio.json", e.id)), Stream::Audio)?,
                id: e.id,
                text: e.text,
                gloss: e.gloss,
                motion,
                audio,
                features: feats,
                envelope: e.envelope,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusConfig {
        CorpusConfig {
            sentences: 3,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn synthetic_items_share_length_and_hold_budget() {
        let items = synth_corpus(&small(), &MappingTable::default(), &PoseTable::default(), &Default::default()).unwrap();
        assert_eq!(items.len(), 3);
        for it in &items {
            assert_eq!(it.motion.len(), items[0].motion.len());
            assert_eq!(it.units.len(), 3);
            assert_eq!(it.gesture_segments.len(), 3);
            let hold: f64 = it.gesture_segments.segments().iter().map(|s| s.end - s.start).sum();
            assert!((hold - 1.05).abs() < 1e-9);
        }
    }

    #[test]
    fn dataset_round_trips() {
        let items = synth_corpus(&small(), &MappingTable::default(), &PoseTable::default(), &Default::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&items, dir.path()).unwrap();
        let back = load_dataset(dir.path(), &Default::default()).unwrap();
        assert_eq!(back.len(), items.len());
        for (a, b) in items.iter().zip(&back) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.gloss, b.gloss);
            assert_eq!(a.units, b.units);
            assert_eq!(a.gesture_segments, b.gesture_segments);
            assert_eq!(a.features.dim(), b.features.dim());
            let diff = (a.motion.frames() - b.motion.frames()).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(diff < 1e-9);
        }
    }
}

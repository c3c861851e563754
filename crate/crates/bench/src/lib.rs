//! Shared fixtures for the benchmarks.

use cuedgen_core::motion::synth::{synth_generate, SynthSample, SyntheticSpec};
use cuedgen_core::rules::gloss::text_to_units;
use cuedgen_core::{MappingTable, PoseTable};

pub const SENTENCE: &str = "wo men ming tian qu shang hai kan peng you";

/// Synthetic utterance of [`SENTENCE`] with the given onset offset.
pub fn utterance(seed: u64, offset: f64) -> SynthSample {
    let units = text_to_units(SENTENCE, &MappingTable::default()).expect("sentence parses");
    let mut spec = SyntheticSpec::new(units, 0.3);
    spec.seed = seed;
    spec.offset = offset;
    synth_generate(&spec, &PoseTable::default()).expect("synthesis")
}

//! Rule-based compiler from pinyin text to cue units and instructional gloss.

pub mod gloss;
pub mod llm;
pub mod pinyin;
pub mod table;

pub use gloss::{
    compile_gloss, syllable_to_unit, text_to_units, unit_clause, units_to_gloss, Gloss,
    GlossBackend, GLOSS_SEPARATOR,
};
pub use llm::{rule_prompt, LlmClient};
pub use pinyin::{parse_pinyin, Syllable};
pub use table::{CsUnit, MappingTable};

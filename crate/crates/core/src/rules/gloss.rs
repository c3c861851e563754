use serde::{Deserialize, Serialize};

use super::pinyin::{parse_pinyin, Syllable};
use super::table::{CsUnit, MappingTable};
use crate::error::Result;

/// Joins per-unit clauses. Each clause already ends with a period.
pub const GLOSS_SEPARATOR: &str = " ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GlossBackend {
    Rules,
    Llm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gloss {
    pub text: String,
    /// Units the text describes; empty when produced by the LLM backend.
    pub units: Vec<CsUnit>,
    pub backend: GlossBackend,
}

pub fn syllable_to_unit(s: &Syllable, table: &MappingTable) -> Result<CsUnit> {
    table.unit_for(s.initial.as_deref(), &s.final_)
}

/// Instruction for a single unit:
/// `"<shape> and place the hand <position>."`, with
/// `" while <lip>"` inserted before the period when the table has a lip template.
pub fn unit_clause(unit: &CsUnit, table: &MappingTable) -> String {
    let shape = table.shape_template(unit.finger_shape_id);
    let position = table
        .position_templates
        .get(&unit.hand_position_id)
        .map(String::as_str)
        .unwrap_or_default();
    match table.lip_templates.get(&unit.vowel_group) {
        Some(lip) => format!("{shape} and place the hand {position} while {lip}."),
        None => format!("{shape} and place the hand {position}."),
    }
}

pub fn units_to_gloss(units: &[CsUnit], table: &MappingTable) -> Gloss {
    let text = units
        .iter()
        .map(|u| unit_clause(u, table))
        .collect::<Vec<_>>()
        .join(GLOSS_SEPARATOR);
    Gloss {
        text,
        units: units.to_vec(),
        backend: GlossBackend::Rules,
    }
}

/// Pinyin text → units, using the rule backend.
pub fn text_to_units(text: &str, table: &MappingTable) -> Result<Vec<CsUnit>> {
    parse_pinyin(text)?
        .iter()
        .map(|s| syllable_to_unit(s, table))
        .collect()
}

/// Pinyin text → gloss, using the rule backend.
pub fn compile_gloss(text: &str, table: &MappingTable) -> Result<Gloss> {
    Ok(units_to_gloss(&text_to_units(text, table)?, table))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rules::pinyin::syllable_inventory;

    #[test]
    fn shu_gloss_matches_reference_wording() {
        let table = MappingTable::default();
        let g = compile_gloss("shu", &table).unwrap();
        assert_eq!(
            g.text,
            "Stretch out two fingers apart without closing them and place the hand near the neck."
        );
        assert_eq!(g.units.len(), 1);
    }

    #[test]
    fn zero_initial_has_no_shape() {
        let table = MappingTable::default();
        let s = &parse_pinyin("a").unwrap()[0];
        let u = syllable_to_unit(s, &table).unwrap();
        assert_eq!(u.finger_shape_id, None);
        assert_eq!(u.consonant_group, None);
        assert_eq!(u.hand_position_id, table.position_of_group(table.vowel_to_group["a"]));
    }

    #[test]
    fn empty_units_give_empty_text() {
        let g = units_to_gloss(&[], &MappingTable::default());
        assert_eq!(g.text, "");
    }

    #[test]
    fn every_inventory_syllable_maps() {
        let table = MappingTable::default();
        for syl in syllable_inventory() {
            let s = &parse_pinyin(syl).unwrap()[0];
            syllable_to_unit(s, &table).unwrap_or_else(|e| panic!("{syl}: {e}"));
        }
    }

    #[test]
    fn sentence_gloss_composes_from_single_units() {
        let table = MappingTable::default();
        let units = text_to_units("wo3 ai4 ni3", &table).unwrap();
        let whole = units_to_gloss(&units, &table).text;
        let parts: Vec<String> = units
            .iter()
            .map(|u| units_to_gloss(std::slice::from_ref(u), &table).text)
            .collect();
        assert_eq!(whole, parts.join(GLOSS_SEPARATOR));
    }

    #[test]
    fn unmapped_phoneme_is_named() {
        let mut table = MappingTable::default();
        table.consonant_to_group.remove("ʂ");
        let s = &parse_pinyin("shu").unwrap()[0];
        let err = syllable_to_unit(s, &table).unwrap_err();
        assert!(matches!(err, crate::Error::UnmappedPhoneme(ref p) if p == "ʂ"));
    }

    #[test]
    fn lip_template_is_inserted() {
        let mut table = MappingTable::default();
        table.lip_templates.insert(table.vowel_to_group["u"], "rounding the lips".into());
        let g = compile_gloss("shu", &table).unwrap();
        assert!(g.text.ends_with("near the neck while rounding the lips."));
    }
}

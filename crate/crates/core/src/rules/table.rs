//! Phoneme → cue group mapping table and its JSON file format.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::marker::PhantomData;
use std::path::Path;
use std::str::FromStr;

use serde::de::{self, Deserializer, MapAccess, Visitor};
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};

pub const TABLE_SCHEMA_VERSION: u32 = 1;
pub const MAX_SHAPE_ID: u8 = 8;
pub const MAX_POSITION_ID: u8 = 5;

const DEFAULT_TABLE_JSON: &str = include_str!("../../data/mapping_table.json");

/// Cued-speech code for one syllable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CsUnit {
    pub consonant_group: Option<u8>,
    pub vowel_group: u8,
    pub finger_shape_id: Option<u8>,
    pub hand_position_id: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingTable {
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub notes: String,
    #[serde(deserialize_with = "unique_map")]
    pub consonant_to_group: BTreeMap<String, u8>,
    #[serde(deserialize_with = "unique_map")]
    pub vowel_to_group: BTreeMap<String, u8>,
    /// Consonant group → finger shape. Identity when absent from the file.
    #[serde(
        default,
        deserialize_with = "unique_map",
        serialize_with = "string_keys",
        skip_serializing_if = "BTreeMap::is_empty"
    )]
    pub shape_for_group: BTreeMap<u8, u8>,
    /// Vowel group → hand position. Identity when absent from the file.
    #[serde(
        default,
        deserialize_with = "unique_map",
        serialize_with = "string_keys",
        skip_serializing_if = "BTreeMap::is_empty"
    )]
    pub position_for_group: BTreeMap<u8, u8>,
    #[serde(deserialize_with = "unique_map", serialize_with = "string_keys")]
    pub shape_templates: BTreeMap<u8, String>,
    #[serde(deserialize_with = "unique_map", serialize_with = "string_keys")]
    pub position_templates: BTreeMap<u8, String>,
    /// Hand-shape wording for syllables without a consonant.
    pub default_shape_template: String,
    /// Optional lip-movement wording keyed by vowel group; empty by default.
    #[serde(default, deserialize_with = "unique_map", serialize_with = "string_keys")]
    pub lip_templates: BTreeMap<u8, String>,
}

fn string_keys<S, V>(map: &BTreeMap<u8, V>, s: S) -> std::result::Result<S::Ok, S::Error>
where
    S: Serializer,
    V: Serialize,
{
    use serde::ser::SerializeMap;
    let mut m = s.serialize_map(Some(map.len()))?;
    for (k, v) in map {
        m.serialize_entry(&k.to_string(), v)?;
    }
    m.end()
}

/// Deserializes a JSON object into a map, rejecting duplicate keys.
fn unique_map<'de, D, K, V>(d: D) -> std::result::Result<BTreeMap<K, V>, D::Error>
where
    D: Deserializer<'de>,
    K: FromStr + Ord + Display,
    K::Err: Display,
    V: Deserialize<'de>,
{
    struct UniqueVisitor<K, V>(PhantomData<(K, V)>);

    impl<'de, K, V> Visitor<'de> for UniqueVisitor<K, V>
    where
        K: FromStr + Ord + Display,
        K::Err: Display,
        V: Deserialize<'de>,
    {
        type Value = BTreeMap<K, V>;

        fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
            f.write_str("a map without duplicate keys")
        }

        fn visit_map<A: MapAccess<'de>>(self, mut access: A) -> std::result::Result<Self::Value, A::Error> {
            let mut out = BTreeMap::new();
            while let Some(raw) = access.next_key::<String>()? {
                let key = raw
                    .parse::<K>()
                    .map_err(|e| de::Error::custom(format!("bad key `{raw}`: {e}")))?;
                let value = access.next_value::<V>()?;
                if out.contains_key(&key) {
                    return Err(de::Error::custom(format!("duplicate key `{key}`")));
                }
                out.insert(key, value);
            }
            Ok(out)
        }
    }

    d.deserialize_map(UniqueVisitor(PhantomData))
}

impl Default for MappingTable {
    fn default() -> Self {
        Self::from_json(DEFAULT_TABLE_JSON).expect("shipped mapping table is valid")
    }
}

impl MappingTable {
    pub fn from_json(text: &str) -> Result<Self> {
        let table: MappingTable = serde_json::from_str(text).map_err(|e| {
            Error::format(
                format!("line {} column {}", e.line(), e.column()),
                e.to_string(),
            )
        })?;
        table.validate()?;
        Ok(table)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn shape_of_group(&self, group: u8) -> u8 {
        self.shape_for_group.get(&group).copied().unwrap_or(group)
    }

    pub fn position_of_group(&self, group: u8) -> u8 {
        self.position_for_group.get(&group).copied().unwrap_or(group)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidTable(m));
        if self.schema_version != TABLE_SCHEMA_VERSION {
            return bad(format!("unsupported schema_version {}", self.schema_version));
        }
        if self.consonant_to_group.is_empty() || self.vowel_to_group.is_empty() {
            return bad("phoneme maps must not be empty".into());
        }
        for (ph, &g) in &self.consonant_to_group {
            let shape = self.shape_of_group(g);
            if !(1..=MAX_SHAPE_ID).contains(&shape) {
                return bad(format!("consonant `{ph}` maps to shape {shape}, outside 1..=8"));
            }
            if !self.shape_templates.contains_key(&shape) {
                return bad(format!("no shape template for shape {shape} (consonant `{ph}`)"));
            }
        }
        for (ph, &g) in &self.vowel_to_group {
            let pos = self.position_of_group(g);
            if !(1..=MAX_POSITION_ID).contains(&pos) {
                return bad(format!("vowel `{ph}` maps to position {pos}, outside 1..=5"));
            }
            if !self.position_templates.contains_key(&pos) {
                return bad(format!("no position template for position {pos} (vowel `{ph}`)"));
            }
        }
        let empty = self
            .shape_templates
            .values()
            .chain(self.position_templates.values())
            .chain(std::iter::once(&self.default_shape_template))
            .any(|t| t.trim().is_empty());
        if empty {
            return bad("templates must be non-empty".into());
        }
        Ok(())
    }

    /// Maps a syllable's phonemes to its cue unit.
    pub fn unit_for(&self, initial: Option<&str>, final_: &str) -> Result<CsUnit> {
        let consonant_group = match initial {
            Some(c) => Some(
                *self
                    .consonant_to_group
                    .get(c)
                    .ok_or_else(|| Error::UnmappedPhoneme(c.to_string()))?,
            ),
            None => None,
        };
        let vowel_group = *self
            .vowel_to_group
            .get(final_)
            .ok_or_else(|| Error::UnmappedPhoneme(final_.to_string()))?;
        Ok(CsUnit {
            consonant_group,
            vowel_group,
            finger_shape_id: consonant_group.map(|g| self.shape_of_group(g)),
            hand_position_id: self.position_of_group(vowel_group),
        })
    }

    pub fn shape_template(&self, shape: Option<u8>) -> &str {
        match shape {
            Some(s) => self
                .shape_templates
                .get(&s)
                .map(String::as_str)
                .unwrap_or(&self.default_shape_template),
            None => &self.default_shape_template,
        }
    }
}

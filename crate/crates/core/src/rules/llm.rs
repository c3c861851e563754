//! Optional client for an external gloss-writing language model.
//!
//! Wire format: `POST <endpoint>` with JSON `{"text": ..., "prompt": ...}` and
//! an optional `Authorization: Bearer <token>` header; the reply must be a
//! JSON object with a non-empty string field `gloss`.

use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::gloss::{Gloss, GlossBackend};
use super::table::MappingTable;
use crate::error::{Error, Result};

pub const LLM_URL_ENV: &str = "CUEDGEN_LLM_URL";
pub const LLM_TOKEN_ENV: &str = "CUEDGEN_LLM_TOKEN";

#[derive(Debug, Serialize)]
struct GlossRequest<'a> {
    text: &'a str,
    prompt: &'a str,
}

#[derive(Debug, Deserialize)]
struct GlossResponse {
    gloss: serde_json::Value,
}

pub struct LlmClient {
    endpoint: String,
    token: Option<String>,
    agent: ureq::Agent,
    // one request at a time per endpoint
    in_flight: Mutex<()>,
}

impl LlmClient {
    pub fn new(endpoint: impl Into<String>, token: Option<String>) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs(60))
            .build();
        Self {
            endpoint: endpoint.into(),
            token,
            agent,
            in_flight: Mutex::new(()),
        }
    }

    /// Reads the endpoint and token from `CUEDGEN_LLM_URL` / `CUEDGEN_LLM_TOKEN`.
    pub fn from_env() -> Result<Self> {
        let url = std::env::var(LLM_URL_ENV)
            .map_err(|_| Error::EndpointUnavailable(format!("{LLM_URL_ENV} is not set")))?;
        Ok(Self::new(url, std::env::var(LLM_TOKEN_ENV).ok()))
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    pub fn gloss_via_llm(&self, text: &str, prompt: &str) -> Result<Gloss> {
        let _guard = self.in_flight.lock().unwrap_or_else(|p| p.into_inner());
        let mut req = self.agent.post(&self.endpoint);
        if let Some(token) = &self.token {
            req = req.set("Authorization", &format!("Bearer {token}"));
        }
        let resp = req
            .send_json(GlossRequest { text, prompt })
            .map_err(|e| Error::EndpointUnavailable(format!("{}: {e}", self.endpoint)))?;
        let body: GlossResponse = resp
            .into_json()
            .map_err(|e| Error::MalformedResponse(e.to_string()))?;
        match body.gloss {
            serde_json::Value::String(s) if !s.trim().is_empty() => Ok(Gloss {
                text: s,
                units: Vec::new(),
                backend: GlossBackend::Llm,
            }),
            other => Err(Error::MalformedResponse(format!(
                "`gloss` must be a non-empty string, got {other}"
            ))),
        }
    }
}

/// Prompt describing the cueing rules of `table` for a language model.
pub fn rule_prompt(table: &MappingTable) -> String {
    let mut p = String::from(
        "You convert Mandarin sentences into Cued Speech hand instructions. \
         Romanize the sentence into pinyin syllables. For each syllable write one sentence \
         of the form '<finger shape> and place the hand <position>.' using exactly the \
         wording below, then join the sentences with single spaces.\n\nFinger shapes by consonant:\n",
    );
    for (shape, text) in &table.shape_templates {
        let consonants: Vec<&str> = table
            .consonant_to_group
            .iter()
            .filter(|(_, &g)| table.shape_of_group(g) == *shape)
            .map(|(c, _)| c.as_str())
            .collect();
        p.push_str(&format!("- /{}/: {text}\n", consonants.join("/, /")));
    }
    p.push_str(&format!(
        "- no consonant: {}\n\nHand positions by final:\n",
        table.default_shape_template
    ));
    for (pos, text) in &table.position_templates {
        let vowels: Vec<&str> = table
            .vowel_to_group
            .iter()
            .filter(|(_, &g)| table.position_of_group(g) == *pos)
            .map(|(v, _)| v.as_str())
            .collect();
        p.push_str(&format!("- /{}/: {text}\n", vowels.join("/, /")));
    }
    p
}

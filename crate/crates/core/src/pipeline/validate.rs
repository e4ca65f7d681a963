//! Parsing and gating of backend replies.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::sequence::{ConversationSample, SampleType, Split, Turn};

/// Why a reply or sample was not accepted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RejectReason {
    /// Not JSON at all.
    Parse,
    /// JSON, but not the turn schema.
    Schema,
    TurnCount,
    EmptyTurn,
    TooShort,
    /// The backend call itself failed.
    Backend,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::Parse => "parse",
            RejectReason::Schema => "schema",
            RejectReason::TurnCount => "turn-count",
            RejectReason::EmptyTurn => "empty-turn",
            RejectReason::TooShort => "too-short",
            RejectReason::Backend => "backend",
        }
    }
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValidationRules {
    /// Minimum response length, in characters, of a complex-reasoning turn.
    pub min_complex_chars: usize,
}

impl Default for ValidationRules {
    fn default() -> Self {
        ValidationRules { min_complex_chars: 40 }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Reply {
    turns: Vec<Turn>,
}

/// Applies the per-type rules to an already structured sample.
pub fn validate_sample(sample: &ConversationSample, rules: &ValidationRules) -> Result<(), RejectReason> {
    let turns = &sample.turns;
    let count_ok = match sample.kind {
        SampleType::Detailed | SampleType::Complex => turns.len() == 1,
        SampleType::Conversation => turns.len() >= 2,
    };
    if !count_ok {
        return Err(RejectReason::TurnCount);
    }
    if turns
        .iter()
        .any(|t| t.question.trim().is_empty() || t.response.trim().is_empty())
    {
        return Err(RejectReason::EmptyTurn);
    }
    if sample.kind == SampleType::Complex && turns[0].response.trim().chars().count() < rules.min_complex_chars {
        return Err(RejectReason::TooShort);
    }
    Ok(())
}

/// Reads the first JSON value of a reply, tolerating a surrounding
/// markdown code fence.
fn strip_fence(text: &str) -> &str {
    let t = text.trim();
    let Some(rest) = t.strip_prefix("```") else {
        return t;
    };
    let rest = rest.strip_prefix("json").unwrap_or(rest);
    rest.strip_suffix("```").unwrap_or(rest).trim()
}

/// Turns a backend reply into a sample for `image`, or says why not.
pub fn parse_and_validate(
    text: &str,
    kind: SampleType,
    id: &str,
    image: Option<&str>,
    rules: &ValidationRules,
) -> Result<ConversationSample, RejectReason> {
    let value: serde_json::Value = serde_json::from_str(strip_fence(text)).map_err(|_| RejectReason::Parse)?;
    let reply: Reply = serde_json::from_value(value).map_err(|_| RejectReason::Schema)?;
    let sample = ConversationSample {
        id: id.to_string(),
        image: image.map(str::to_string),
        kind,
        turns: reply
            .turns
            .into_iter()
            .map(|t| Turn::new(t.question.trim(), t.response.trim()))
            .collect(),
        split: Split::Train,
    };
    validate_sample(&sample, rules)?;
    Ok(sample)
}

/// The reply text that [`parse_and_validate`] maps back to `turns`.
pub fn reply_json(turns: &[Turn]) -> String {
    serde_json::to_string(&Reply { turns: turns.to_vec() }).expect("turns serialize")
}

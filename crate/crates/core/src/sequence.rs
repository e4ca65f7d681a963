//! Conversation samples and their serialization into a single token stream
//! with role markers, stop delimiters and a response-only loss mask.
//!
//! Layout of a serialized sample:
//!
//! ```text
//! <system> prompt <stop>
//! <human> instruction¹ <stop> <assistant> response¹ <stop>
//! <human> instruction² <stop> <assistant> response² <stop>
//! ...
//! ```
//!
//! The first instruction carries the image placeholder either before or
//! after the question; later instructions are the bare question.

use std::fmt;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::tokenizer::{self, TokenId, IMAGE, PAD, ROLE_ASSISTANT, ROLE_HUMAN, ROLE_SYSTEM, STOP};

pub const DEFAULT_SYSTEM_PROMPT: &str = "You are a power line inspection assistant.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleType {
    Detailed,
    Conversation,
    Complex,
}

impl SampleType {
    pub const ALL: [SampleType; 3] = [SampleType::Detailed, SampleType::Conversation, SampleType::Complex];

    pub fn as_str(self) -> &'static str {
        match self {
            SampleType::Detailed => "detailed",
            SampleType::Conversation => "conversation",
            SampleType::Complex => "complex",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        SampleType::ALL.into_iter().find(|t| t.as_str() == s)
    }
}

impl fmt::Display for SampleType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub question: String,
    pub response: String,
}

impl Turn {
    pub fn new(question: impl Into<String>, response: impl Into<String>) -> Self {
        Turn {
            question: question.into(),
            response: response.into(),
        }
    }
}

/// One image reference plus its question/response rounds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversationSample {
    pub id: String,
    pub image: Option<String>,
    #[serde(rename = "type")]
    pub kind: SampleType,
    pub turns: Vec<Turn>,
    #[serde(default)]
    pub split: Split,
}

impl ConversationSample {
    pub fn validate(&self) -> Result<()> {
        if self.turns.is_empty() {
            return Err(Error::Input(format!("sample {} has no turns", self.id)));
        }
        if self.kind == SampleType::Detailed && self.turns.len() != 1 {
            return Err(Error::Input(format!(
                "detailed sample {} must have exactly one turn, has {}",
                self.id,
                self.turns.len()
            )));
        }
        for (t, turn) in self.turns.iter().enumerate() {
            if turn.question.trim().is_empty() || turn.response.trim().is_empty() {
                return Err(Error::Input(format!("sample {} turn {} is empty", self.id, t + 1)));
            }
        }
        Ok(())
    }
}

/// A piece of a marked-up instruction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment {
    Text(String),
    Image,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instruction(pub Vec<Segment>);

impl Instruction {
    pub fn tokens(&self) -> Vec<TokenId> {
        let mut out = Vec::new();
        for seg in &self.0 {
            match seg {
                Segment::Text(s) => out.extend(tokenizer::tokenize(s.as_bytes())),
                Segment::Image => out.push(IMAGE),
            }
        }
        out
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for seg in &self.0 {
            match seg {
                Segment::Text(s) => f.write_str(s)?,
                Segment::Image => f.write_str("<image>")?,
            }
        }
        Ok(())
    }
}

/// Instruction for round `round` (1-based). Only the first round carries the
/// image: before the question when `image_after` is false, after it otherwise.
pub fn build_instruction(round: usize, question: &str, has_image: bool, image_after: bool) -> Instruction {
    let q = Segment::Text(question.to_string());
    if round == 1 && has_image {
        if image_after {
            Instruction(vec![q, Segment::Text("\n".into()), Segment::Image])
        } else {
            Instruction(vec![Segment::Image, Segment::Text("\n".into()), q])
        }
    } else {
        Instruction(vec![q])
    }
}

/// Token stream ready for training.
///
/// `loss_mask[i]` tells whether the prediction made at position `i` (whose
/// target is `targets[i] = tokens[i + 1]`) is supervised. It is set exactly
/// when the target is a response byte or the stop closing a response.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SerializedSequence {
    pub tokens: Vec<TokenId>,
    pub targets: Vec<TokenId>,
    pub loss_mask: Vec<bool>,
    pub image_slot: Option<usize>,
}

impl SerializedSequence {
    fn from_stream(tokens: Vec<TokenId>, supervised: Vec<bool>) -> Self {
        let len = tokens.len();
        let mut targets = Vec::with_capacity(len);
        let mut loss_mask = Vec::with_capacity(len);
        for i in 0..len {
            if i + 1 < len {
                targets.push(tokens[i + 1]);
                loss_mask.push(supervised[i + 1]);
            } else {
                targets.push(PAD);
                loss_mask.push(false);
            }
        }
        let image_slot = tokens.iter().position(|&t| t == IMAGE);
        SerializedSequence {
            tokens,
            targets,
            loss_mask,
            image_slot,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn supervised_count(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }

    /// Decoder positions once the image slot expands to `image_tokens` rows.
    pub fn model_len(&self, image_tokens: usize) -> usize {
        match self.image_slot {
            Some(_) => self.len() - 1 + image_tokens,
            None => self.len(),
        }
    }

    /// Copy that supervises every prediction except the final one. Used to
    /// show that the mask changes the objective.
    pub fn with_full_supervision(&self) -> Self {
        let mut out = self.clone();
        let n = out.loss_mask.len();
        for (i, m) in out.loss_mask.iter_mut().enumerate() {
            *m = i + 1 < n;
        }
        out
    }

    /// Supervised target spans decoded back to bytes, one per response, each
    /// without its closing stop token.
    pub fn supervised_spans(&self) -> Vec<Vec<u8>> {
        let mut spans = Vec::new();
        let mut current = Vec::new();
        for (i, &m) in self.loss_mask.iter().enumerate() {
            if !m {
                continue;
            }
            if self.targets[i] == STOP {
                spans.push(tokenizer::detokenize(&current));
                current.clear();
            } else {
                current.push(self.targets[i]);
            }
        }
        spans
    }
}

/// Question/response rounds of a prompt under construction; the last round
/// may lack a response, in which case the stream ends after the assistant
/// marker.
pub(crate) fn build_stream(
    system_prompt: &str,
    rounds: &[(&str, Option<&str>)],
    has_image: bool,
    image_after: bool,
) -> (Vec<TokenId>, Vec<bool>) {
    let mut tokens = vec![ROLE_SYSTEM];
    tokens.extend(tokenizer::tokenize(system_prompt.as_bytes()));
    tokens.push(STOP);
    let mut supervised = vec![false; tokens.len()];
    for (t, (question, response)) in rounds.iter().enumerate() {
        let instr = build_instruction(t + 1, question, has_image, image_after);
        tokens.push(ROLE_HUMAN);
        tokens.extend(instr.tokens());
        tokens.push(STOP);
        tokens.push(ROLE_ASSISTANT);
        supervised.resize(tokens.len(), false);
        if let Some(r) = response {
            tokens.extend(tokenizer::tokenize(r.as_bytes()));
            tokens.push(STOP);
            supervised.resize(tokens.len(), true);
        }
    }
    (tokens, supervised)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Per-sample coin for the image placement, derived from the seed and id.
pub fn image_after_coin(seed: u64, sample_id: &str) -> bool {
    let mut z = seed ^ fnv1a(sample_id.as_bytes());
    // splitmix64 finaliser
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    z & 1 == 1
}

/// Serializes samples under a fixed system prompt and context budget.
#[derive(Debug, Clone)]
pub struct SequenceBuilder {
    pub system_prompt: String,
    /// Decoder context length; `None` disables the length check.
    pub context: Option<usize>,
    /// Rows the image placeholder expands to.
    pub image_tokens: usize,
}

impl SequenceBuilder {
    pub fn new(system_prompt: impl Into<String>, context: Option<usize>, image_tokens: usize) -> Self {
        SequenceBuilder {
            system_prompt: system_prompt.into(),
            context,
            image_tokens,
        }
    }

    pub fn serialize(&self, sample: &ConversationSample, seed: u64) -> Result<SerializedSequence> {
        sample.validate()?;
        let rounds: Vec<_> = sample
            .turns
            .iter()
            .map(|t| (t.question.as_str(), Some(t.response.as_str())))
            .collect();
        let image_after = image_after_coin(seed, &sample.id);
        let (tokens, supervised) = build_stream(&self.system_prompt, &rounds, sample.image.is_some(), image_after);
        let seq = SerializedSequence::from_stream(tokens, supervised);
        self.check_len(&seq, Some(&sample.id))?;
        Ok(seq)
    }

    /// Prompt ending at the assistant marker of the final round, for
    /// generation. `history` holds completed rounds.
    pub fn prompt(
        &self,
        history: &[Turn],
        question: &str,
        has_image: bool,
        image_after: bool,
    ) -> Result<SerializedSequence> {
        let mut rounds: Vec<_> = history
            .iter()
            .map(|t| (t.question.as_str(), Some(t.response.as_str())))
            .collect();
        rounds.push((question, None));
        let (tokens, supervised) = build_stream(&self.system_prompt, &rounds, has_image, image_after);
        let seq = SerializedSequence::from_stream(tokens, supervised);
        self.check_len(&seq, None)?;
        Ok(seq)
    }

    fn check_len(&self, seq: &SerializedSequence, id: Option<&str>) -> Result<()> {
        if let Some(context) = self.context {
            let len = seq.model_len(self.image_tokens);
            if len > context {
                return Err(Error::Length {
                    len,
                    context,
                    sample: id.map(str::to_string),
                });
            }
        }
        Ok(())
    }
}

/// Caption-soliciting questions used to turn image-caption pairs into
/// single-turn dialogues.
pub const BRIEF_QUESTIONS: &[&str] = &[
    "Describe the image briefly.",
    "What is shown in this picture?",
    "Give a short caption for this image.",
    "Summarize the scene in a few words.",
    "What do you see in this photo?",
    "Write a brief description of the image.",
    "Caption this inspection photo.",
    "Briefly describe what the image shows.",
];

/// Single-turn sample whose response is `caption` and whose question is a
/// seeded draw from `questions`.
pub fn make_single_turn(
    id: impl Into<String>,
    image: Option<String>,
    caption: &str,
    questions: &[&str],
    seed: u64,
) -> Result<ConversationSample> {
    if caption.trim().is_empty() {
        return Err(Error::Input("caption is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let question = questions
        .choose(&mut rng)
        .ok_or_else(|| Error::Input("question bank is empty".into()))?;
    Ok(ConversationSample {
        id: id.into(),
        image,
        kind: SampleType::Detailed,
        turns: vec![Turn::new(*question, caption)],
        split: Split::Train,
    })
}

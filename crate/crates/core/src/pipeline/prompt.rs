//! Generation requests built from seed templates and image context.

use std::fmt::Write as _;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::records::SeedTemplate;
use crate::sequence::SampleType;

/// One text-in/text-out request to a chat backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system: String,
    pub user: String,
    pub seed: u64,
    pub temperature: f64,
}

/// Marker line naming the requested type inside the user text.
pub const TYPE_LINE_PREFIX: &str = "Sample type: ";

const SHARED: &str = "You are shown text annotations of a power line inspection image: \
four captions written by different captioning models and the boxes found by an object \
detector. Write as if you are looking at the image itself and never mention the captions, \
the detector or the coordinates. Only state what the annotations support.";

fn contract(kind: SampleType) -> &'static str {
    match kind {
        SampleType::Detailed => {
            "Produce a detailed description: a single round of dialogue in which the \
             question asks for a description of the image and the response describes \
             it thoroughly."
        }
        SampleType::Conversation => {
            "Produce a conversation of several rounds (at least two) in which a person \
             asks about the contents of the image and the assistant answers each \
             question."
        }
        SampleType::Complex => {
            "Produce one question that requires reasoning beyond what is visible, such as \
             the cause of a defect or the risk it poses to the line, and a response that \
             works through the reasoning step by step."
        }
    }
}

fn format_instruction(kind: SampleType) -> &'static str {
    match kind {
        SampleType::Conversation => "The reply must contain at least two turns.",
        _ => "The reply must contain exactly one turn.",
    }
}

/// Draws `k` templates of one type without replacement.
pub fn sample_seeds(bank: &[SeedTemplate], k: usize, seed: u64) -> Result<Vec<&SeedTemplate>> {
    if k == 0 || k > bank.len() {
        return Err(Error::Input(format!(
            "cannot draw {k} seed templates from {}",
            bank.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(index::sample(&mut rng, bank.len(), k)
        .into_iter()
        .map(|i| &bank[i])
        .collect())
}

/// Request asking the backend for one sample of `kind` about the image
/// described by `context`, shaped by the exemplar `seeds`.
pub fn assemble_prompt(
    kind: SampleType,
    seeds: &[&SeedTemplate],
    context: &str,
    seed: u64,
    temperature: f64,
) -> Result<ChatRequest> {
    if seeds.is_empty() {
        return Err(Error::Input("at least one seed template is required".into()));
    }
    if let Some(bad) = seeds.iter().find(|s| s.kind != kind) {
        return Err(Error::Input(format!(
            "seed template of type {} given for a {kind} request",
            bad.kind
        )));
    }
    let system = format!("{SHARED} {}", contract(kind));
    let mut user = String::from("Examples:\n");
    for (i, s) in seeds.iter().enumerate() {
        let _ = writeln!(user, "--- example {} ---\n{}", i + 1, s.text.trim());
    }
    let _ = write!(
        user,
        "--- end of examples ---\n\
         Image annotations:\n{context}\
         {TYPE_LINE_PREFIX}{kind}\n\
         Reply with JSON only, in the form \
         {{\"turns\":[{{\"question\":\"...\",\"response\":\"...\"}}]}}. {}\n",
        format_instruction(kind)
    );
    Ok(ChatRequest {
        system,
        user,
        seed,
        temperature,
    })
}

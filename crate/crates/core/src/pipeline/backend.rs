//! Chat backends: a deterministic offline stub and an HTTP client for
//! OpenAI-compatible chat-completion endpoints.

use std::time::Duration;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{format_mcq_prompt, McqItem};
use crate::pipeline::prompt::{ChatRequest, TYPE_LINE_PREFIX};
use crate::pipeline::validate::reply_json;
use crate::sequence::{SampleType, Turn};

/// Text-in/text-out generation service.
pub trait ChatBackend: Send + Sync {
    /// Identity recorded in manifests.
    fn name(&self) -> String;

    fn complete(&self, request: &ChatRequest) -> Result<String>;
}

/// Offline backend that writes conversations from the facts it can read
/// out of the annotation block (the top non-line detection, the sky from
/// the captions and the side from the box centre). Some conversation turns
/// are posed as lettered multiple-choice questions.
///
/// A seeded fraction of requests gets a malformed reply instead, which
/// exercises the validation gate and retry logic.
#[derive(Debug, Clone)]
pub struct StubBackend {
    pub malformed_rate: f64,
    pub seed: u64,
}

impl StubBackend {
    pub fn new(seed: u64) -> Self {
        StubBackend {
            malformed_rate: 0.0,
            seed,
        }
    }

    pub fn with_malformed_rate(mut self, rate: f64) -> Self {
        self.malformed_rate = rate;
        self
    }

    fn request_hash(&self, req: &ChatRequest) -> u64 {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(req.seed.to_le_bytes());
        h.update(req.system.as_bytes());
        h.update([0]);
        h.update(req.user.as_bytes());
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
    }
}

const BROKEN_REPLIES: [&str; 3] = [
    "{\"turns\":[{\"question\":\"What is",
    "Sure! Here is a conversation about the image.",
    "{\"dialogue\":[]}",
];

impl ChatBackend for StubBackend {
    fn name(&self) -> String {
        format!("stub(seed={},malformed={})", self.seed, self.malformed_rate)
    }

    fn complete(&self, req: &ChatRequest) -> Result<String> {
        let h = self.request_hash(req);
        let u = (h >> 11) as f64 / (1u64 << 53) as f64;
        if u < self.malformed_rate {
            return Ok(BROKEN_REPLIES[(h % 3) as usize].to_string());
        }
        let facts = Facts::read(&req.user);
        let kind = facts
            .kind
            .ok_or_else(|| Error::Backend("request does not name a sample type".into()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        Ok(reply_json(&facts.turns(kind, &mut rng)))
    }
}

#[derive(Debug, Default)]
struct Facts {
    kind: Option<SampleType>,
    captions: Vec<String>,
    object: Option<String>,
    side: Option<&'static str>,
    sky: Option<&'static str>,
}

fn with_article(noun: &str) -> String {
    let vowel = noun.starts_with(['a', 'e', 'i', 'o', 'u']);
    format!("{} {noun}", if vowel { "an" } else { "a" })
}

impl Facts {
    fn read(user: &str) -> Facts {
        let mut f = Facts::default();
        let mut section = "";
        for line in user.lines() {
            if let Some(t) = line.strip_prefix(TYPE_LINE_PREFIX) {
                f.kind = SampleType::parse(t.trim());
                section = "";
                continue;
            }
            match line {
                "Captions:" | "Detections:" => {
                    section = if line == "Captions:" { "c" } else { "d" };
                    continue;
                }
                _ => {}
            }
            match section {
                "c" => {
                    if let Some((_, text)) = line.split_once(". ") {
                        f.captions.push(text.to_string());
                    }
                }
                "d" if f.object.is_none() => {
                    let Some((label, rest)) = line.split_once(" (") else {
                        continue;
                    };
                    if label == "power line" {
                        continue;
                    }
                    let coords: Vec<f64> = rest
                        .split(')')
                        .next()
                        .unwrap_or("")
                        .split(',')
                        .filter_map(|v| v.parse().ok())
                        .collect();
                    if coords.len() == 4 {
                        f.object = Some(label.to_string());
                        f.side = Some(if coords[0] + coords[2] / 2.0 < 0.5 {
                            "left"
                        } else {
                            "right"
                        });
                    }
                }
                _ => {}
            }
        }
        let all = f.captions.join(" ");
        f.sky = if all.contains("cloudy") {
            Some("cloudy")
        } else if all.contains("clear") {
            Some("clear")
        } else {
            None
        };
        f
    }

    fn description(&self) -> String {
        match (&self.object, self.side, self.sky) {
            (Some(o), Some(side), Some(sky)) => format!(
                "{} sits on the {side} side of the power line under a {sky} sky.",
                with_article(o)
            ),
            _ => self
                .captions
                .first()
                .cloned()
                .unwrap_or_else(|| "a power line crosses the image.".into()),
        }
    }

    fn assessment(&self) -> String {
        let side = self.side.unwrap_or("near");
        match self.object.as_deref() {
            Some("bird nest") => format!(
                "yes, the bird nest on the {side} side can touch the conductor and cause a short circuit, so it should be removed."
            ),
            Some("kite") => format!(
                "yes, the kite caught on the {side} side can blow against the conductor and cause a fault, so it should be removed."
            ),
            Some("insulator") => format!(
                "no, the insulator on the {side} side is normal equipment that keeps the conductor isolated, so no action is needed."
            ),
            Some("damper") => format!(
                "no, the damper on the {side} side is normal equipment that reduces vibration of the line, so no action is needed."
            ),
            Some(o) => format!(
                "the {o} on the {side} side should be checked during the next inspection because it sits on the line."
            ),
            None => "no, nothing unusual is attached to the line, so no action is needed beyond routine inspection."
                .into(),
        }
    }

    fn turns(&self, kind: SampleType, rng: &mut ChaCha8Rng) -> Vec<Turn> {
        match kind {
            SampleType::Detailed => vec![Turn::new("Describe the image in detail.", self.description())],
            SampleType::Complex => vec![Turn::new(
                "Does anything on this line need attention?",
                self.assessment(),
            )],
            SampleType::Conversation => {
                let mut pool = Vec::new();
                if let Some(o) = &self.object {
                    pool.push(fact_turn(
                        "What object is on the power line?",
                        &format!("{}.", with_article(o)),
                        o,
                        &KNOWN_OBJECTS,
                        rng,
                    ));
                }
                if let Some(sky) = self.sky {
                    pool.push(fact_turn(
                        "What is the sky like?",
                        &format!("the sky is {sky}."),
                        sky,
                        &["clear", "cloudy"],
                        rng,
                    ));
                }
                if let Some(side) = self.side {
                    pool.push(fact_turn(
                        "Which side of the image is the object on?",
                        &format!("the {side} side."),
                        side,
                        &["left", "right"],
                        rng,
                    ));
                }
                if pool.len() < 2 {
                    pool.push(Turn::new("What does the image show?", self.description()));
                    pool.push(Turn::new(
                        "Is a power line visible?",
                        "yes, a power line crosses the image.",
                    ));
                }
                pool.shuffle(rng);
                let n = rng.random_range(2..=pool.len().min(3));
                pool.truncate(n);
                // Keep the conversation short enough for a small context:
                // fall back to open questions while over budget.
                for i in 0..pool.len() {
                    if chars(&pool) <= TURN_CHAR_BUDGET {
                        break;
                    }
                    if let Some(open) = pool[i].question.lines().next().filter(|q| *q != pool[i].question) {
                        pool[i].question = open.to_string();
                    }
                }
                pool
            }
        }
    }
}

/// Upper bound on the question and response characters of one stub
/// conversation.
const TURN_CHAR_BUDGET: usize = 176;

fn chars(turns: &[Turn]) -> usize {
    turns.iter().map(|t| t.question.len() + t.response.len()).sum()
}

const KNOWN_OBJECTS: [&str; 4] = ["insulator", "bird nest", "kite", "damper"];

/// A question about one fact, asked openly or, half of the time, as a
/// multiple-choice question over `choices` (which must contain `answer`
/// for the lettered form to be used). The response is the same either way.
fn fact_turn(question: &str, response: &str, answer: &str, choices: &[&str], rng: &mut ChaCha8Rng) -> Turn {
    if !choices.contains(&answer) || rng.random_bool(0.5) {
        return Turn::new(question, response);
    }
    let mut options: Vec<String> = choices.iter().map(|c| c.to_string()).collect();
    options.shuffle(rng);
    let item = McqItem {
        id: String::new(),
        image: None,
        question: question.into(),
        answer_index: options.iter().position(|o| o == answer).expect("answer listed"),
        options,
    };
    Turn::new(format_mcq_prompt(&item), response)
}

/// Client for an OpenAI-compatible `chat/completions` endpoint.
#[derive(Debug, Clone)]
pub struct HttpBackend {
    pub endpoint: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
}

impl HttpBackend {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        HttpBackend {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key: None,
            timeout: Duration::from_secs(120),
        }
    }

    fn body(&self, req: &ChatRequest) -> String {
        serde_json::json!({
            "model": self.model,
            "messages": [
                {"role": "system", "content": req.system},
                {"role": "user", "content": req.user},
            ],
            "temperature": req.temperature,
            "seed": req.seed,
        })
        .to_string()
    }
}

impl ChatBackend for HttpBackend {
    fn name(&self) -> String {
        format!("http({}, model={})", self.endpoint, self.model)
    }

    fn complete(&self, req: &ChatRequest) -> Result<String> {
        let config = ureq::Agent::config_builder().timeout_global(Some(self.timeout)).build();
        let agent = ureq::Agent::new_with_config(config);
        let mut call = agent.post(&self.endpoint).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = call
            .send(&self.body(req))
            .map_err(|e| Error::Backend(format!("{}: {e}", self.endpoint)))?;
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Error::Backend(format!("{}: {e}", self.endpoint)))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::Backend(format!("bad response body: {e}")))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| Error::Backend("response has no choices[0].message.content".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::validate::{parse_and_validate, ValidationRules};

    fn request(kind: &str, seed: u64) -> ChatRequest {
        ChatRequest {
            system: "sys".into(),
            user: format!(
                "Image annotations:\nCaptions:\n1. a kite on a power line under a cloudy sky.\n\
                 2. b\n3. c\n4. d\nDetections:\nkite (0.625,0.400,0.250,0.300) 0.950\n\
                 power line (0.000,0.375,1.000,0.031) 0.800\n{TYPE_LINE_PREFIX}{kind}\n"
            ),
            seed,
            temperature: 0.7,
        }
    }

    #[test]
    fn stub_answers_from_annotations() {
        let stub = StubBackend::new(0);
        for kind in SampleType::ALL {
            for seed in 0..5 {
                let text = stub.complete(&request(kind.as_str(), seed)).unwrap();
                let s = parse_and_validate(&text, kind, "id", None, &ValidationRules::default()).unwrap();
                let all: String = s.turns.iter().map(|t| t.response.clone()).collect();
                assert!(
                    all.contains("kite") || all.contains("cloudy") || all.contains("right"),
                    "{all}"
                );
            }
        }
        let text = stub.complete(&request("detailed", 0)).unwrap();
        assert!(text.contains("a kite sits on the right side of the power line under a cloudy sky."));
    }

    #[test]
    fn stub_is_deterministic() {
        let stub = StubBackend::new(4).with_malformed_rate(0.5);
        for seed in 0..20 {
            let r = request("conversation", seed);
            assert_eq!(stub.complete(&r).unwrap(), stub.complete(&r).unwrap());
        }
    }

    #[test]
    fn malformed_rate_is_roughly_honoured() {
        let stub = StubBackend::new(1).with_malformed_rate(0.5);
        let bad = (0..400)
            .filter(|&s| {
                let text = stub.complete(&request("complex", s)).unwrap();
                parse_and_validate(&text, SampleType::Complex, "i", None, &ValidationRules::default()).is_err()
            })
            .count();
        assert!((150..250).contains(&bad), "{bad}");
    }

    #[test]
    fn article_choice() {
        assert_eq!(with_article("insulator"), "an insulator");
        assert_eq!(with_article("kite"), "a kite");
    }
}

//! Multiple-choice evaluation: prompt layout, answer matching, runners and
//! accuracy reports.

mod runner;

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use runner::{ConstantRunner, GenerativeRunner, ModelRunner, OracleRunner, TextOracleRunner};

pub const LETTERS: [char; 4] = ['A', 'B', 'C', 'D'];

/// Closing line of every prompt.
pub const ANSWER_DIRECTIVE: &str = "Answer with the letter of the correct option.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McqItem {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    pub question: String,
    pub options: Vec<String>,
    pub answer_index: usize,
}

impl McqItem {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Eval(format!("item {}: {m}", self.id)));
        if !(2..=4).contains(&self.options.len()) {
            return fail(format!("{} options, expected 2 to 4", self.options.len()));
        }
        if self.answer_index >= self.options.len() {
            return fail(format!("answer index {} out of range", self.answer_index));
        }
        if self.question.trim().is_empty() || self.options.iter().any(|o| o.trim().is_empty()) {
            return fail("empty question or option".into());
        }
        let mut norm: Vec<String> = self.options.iter().map(|o| o.trim().to_lowercase()).collect();
        norm.sort();
        norm.dedup();
        if norm.len() != self.options.len() {
            return fail("options are not distinct".into());
        }
        Ok(())
    }

    pub fn answer_letter(&self) -> char {
        LETTERS[self.answer_index]
    }
}

/// Question, lettered options, then the answer directive.
pub fn format_mcq_prompt(item: &McqItem) -> String {
    let mut s = format!("{}\n", item.question.trim());
    for (letter, option) in LETTERS.iter().zip(&item.options) {
        let _ = writeln!(s, "{letter}. {}", option.trim());
    }
    s.push_str(ANSWER_DIRECTIVE);
    s
}

/// Option chosen by `response`, if any.
///
/// First an uppercase letter A-D standing alone (not inside a word) that
/// names an existing option; failing that, the option whose full text
/// occurs earliest in the response, case-insensitively, preferring the
/// longer option when two start at the same place.
pub fn extract_choice(response: &str, options: &[String]) -> Option<usize> {
    let n = options.len().min(LETTERS.len());
    let chars: Vec<char> = response.chars().collect();
    for (i, &c) in chars.iter().enumerate() {
        let Some(idx) = LETTERS.iter().position(|&l| l == c) else {
            continue;
        };
        let alone_before = i == 0 || !chars[i - 1].is_alphanumeric();
        let alone_after = i + 1 == chars.len() || !chars[i + 1].is_alphanumeric();
        if alone_before && alone_after && idx < n {
            return Some(idx);
        }
    }
    let hay = response.to_lowercase();
    let mut best: Option<(usize, usize, usize)> = None;
    for (idx, option) in options.iter().enumerate().take(n) {
        let needle = option.trim().to_lowercase();
        if needle.is_empty() {
            continue;
        }
        if let Some(pos) = hay.find(&needle) {
            let better = match best {
                None => true,
                Some((p, len, _)) => pos < p || (pos == p && needle.len() > len),
            };
            if better {
                best = Some((pos, needle.len(), idx));
            }
        }
    }
    best.map(|(_, _, idx)| idx)
}

/// Same item with its options permuted and the answer index remapped.
pub fn shuffle_options(item: &McqItem, seed: u64) -> McqItem {
    let mut order: Vec<usize> = (0..item.options.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    McqItem {
        options: order.iter().map(|&i| item.options[i].clone()).collect(),
        answer_index: order.iter().position(|&i| i == item.answer_index).expect("answer kept"),
        ..item.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemVerdict {
    pub id: String,
    pub response: Option<String>,
    pub choice: Option<usize>,
    pub answer: usize,
    pub correct: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub runner: String,
    pub total: usize,
    pub answered: usize,
    pub correct: usize,
    pub unmatched: usize,
    pub accuracy: f64,
    #[serde(default)]
    pub config_hash: String,
    #[serde(default)]
    pub seed: u64,
    pub verdicts: Vec<ItemVerdict>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<12}{}", "runner", self.runner);
        for (k, v) in [
            ("total", self.total),
            ("answered", self.answered),
            ("correct", self.correct),
            ("unmatched", self.unmatched),
        ] {
            let _ = writeln!(s, "{k:<12}{v}");
        }
        let _ = writeln!(s, "{:<12}{:.4}", "accuracy", self.accuracy);
        let _ = writeln!(s, "\n{:<24}{:>7}{:>7}  ok", "item", "choice", "answer");
        for v in &self.verdicts {
            let choice = v.choice.map_or('-', |c| LETTERS[c]);
            let mark = if v.correct { "yes" } else { "no" };
            let _ = writeln!(s, "{:<24}{choice:>7}{:>7}  {mark}", v.id, LETTERS[v.answer]);
        }
        s
    }
}

/// Scores `runner` on `items`. A runner error on one item marks that item
/// unmatched and evaluation continues.
pub fn evaluate(runner: &dyn ModelRunner, items: &[McqItem]) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(Error::Eval("no items to evaluate".into()));
    }
    for item in items {
        item.validate()?;
    }
    let mut verdicts = Vec::with_capacity(items.len());
    for item in items {
        let prompt = format_mcq_prompt(item);
        let (response, error) = match runner.answer(item.image.as_deref(), &prompt) {
            Ok(text) => (Some(text), None),
            Err(e) => (None, Some(e.to_string())),
        };
        let choice = response.as_deref().and_then(|r| extract_choice(r, &item.options));
        verdicts.push(ItemVerdict {
            id: item.id.clone(),
            response,
            choice,
            answer: item.answer_index,
            correct: choice == Some(item.answer_index),
            error,
        });
    }
    let total = verdicts.len();
    let answered = verdicts.iter().filter(|v| v.choice.is_some()).count();
    let correct = verdicts.iter().filter(|v| v.correct).count();
    Ok(EvalReport {
        runner: runner.name(),
        total,
        answered,
        correct,
        unmatched: total - answered,
        accuracy: correct as f64 / total as f64,
        config_hash: String::new(),
        seed: 0,
        verdicts,
    })
}

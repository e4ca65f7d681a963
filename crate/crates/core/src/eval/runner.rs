use std::collections::HashMap;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::eval::{format_mcq_prompt, McqItem};
use crate::model::image::ImageRaster;
use crate::model::{GenerateOptions, Model};
use crate::sequence::SequenceBuilder;

/// Anything that answers an instruction about an optional image.
pub trait ModelRunner: Sync {
    fn name(&self) -> String;

    fn answer(&self, image: Option<&str>, prompt: &str) -> Result<String>;
}

/// Always replies with the same text.
#[derive(Debug, Clone)]
pub struct ConstantRunner(pub String);

impl ConstantRunner {
    pub fn new(reply: impl Into<String>) -> Self {
        ConstantRunner(reply.into())
    }
}

impl ModelRunner for ConstantRunner {
    fn name(&self) -> String {
        format!("constant({})", self.0)
    }

    fn answer(&self, _: Option<&str>, _: &str) -> Result<String> {
        Ok(self.0.clone())
    }
}

/// Oracle answers keyed by image and prompt; items sharing a question and
/// option order still differ by image.
type Table = HashMap<(Option<String>, String), String>;

fn by_prompt(items: &[McqItem], reply: impl Fn(&McqItem) -> String) -> Table {
    items
        .iter()
        .map(|i| ((i.image.clone(), format_mcq_prompt(i)), reply(i)))
        .collect()
}

fn lookup(table: &Table, image: Option<&str>, prompt: &str) -> Result<String> {
    table
        .get(&(image.map(str::to_string), prompt.to_string()))
        .cloned()
        .ok_or_else(|| Error::Eval("oracle has no answer for this prompt".into()))
}

/// Knows the reference letter of every item it was built from.
#[derive(Debug, Clone)]
pub struct OracleRunner(Table);

impl OracleRunner {
    pub fn new(items: &[McqItem]) -> Self {
        OracleRunner(by_prompt(items, |i| i.answer_letter().to_string()))
    }
}

impl ModelRunner for OracleRunner {
    fn name(&self) -> String {
        "oracle".into()
    }

    fn answer(&self, image: Option<&str>, prompt: &str) -> Result<String> {
        lookup(&self.0, image, prompt)
    }
}

/// Replies with the reference option's text rather than its letter.
#[derive(Debug, Clone)]
pub struct TextOracleRunner(Table);

impl TextOracleRunner {
    pub fn new(items: &[McqItem]) -> Self {
        TextOracleRunner(by_prompt(items, |i| {
            format!("it is {}", i.options[i.answer_index].to_lowercase())
        }))
    }
}

impl ModelRunner for TextOracleRunner {
    fn name(&self) -> String {
        "text-oracle".into()
    }

    fn answer(&self, image: Option<&str>, prompt: &str) -> Result<String> {
        lookup(&self.0, image, prompt)
    }
}

/// Answers with the trained model, loading images relative to `image_root`.
#[derive(Debug, Clone)]
pub struct GenerativeRunner {
    pub model: Model,
    pub builder: SequenceBuilder,
    pub image_root: PathBuf,
    pub options: GenerateOptions,
}

impl ModelRunner for GenerativeRunner {
    fn name(&self) -> String {
        "model".into()
    }

    fn answer(&self, image: Option<&str>, prompt: &str) -> Result<String> {
        let raster = image.map(|r| ImageRaster::load(&self.image_root.join(r))).transpose()?;
        self.model
            .generate(&self.builder, raster.as_ref(), &[], prompt, &self.options)
    }
}

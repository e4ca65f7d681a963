//! Per-image annotations and seed templates consumed by the pipeline.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sequence::SampleType;

/// Captions gathered for one image, one per captioning source.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub image: String,
    pub captions: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sources: Vec<String>,
}

pub const CAPTIONS_PER_IMAGE: usize = 4;

impl CaptionRecord {
    pub fn validate(&self) -> Result<()> {
        if self.captions.len() != CAPTIONS_PER_IMAGE {
            return Err(Error::Input(format!(
                "image {} has {} captions, expected {CAPTIONS_PER_IMAGE}",
                self.image,
                self.captions.len()
            )));
        }
        if self.captions.iter().any(|c| c.trim().is_empty()) {
            return Err(Error::Input(format!("image {} has an empty caption", self.image)));
        }
        if !self.sources.is_empty() && self.sources.len() != CAPTIONS_PER_IMAGE {
            return Err(Error::Input(format!(
                "image {} has {} caption sources",
                self.image,
                self.sources.len()
            )));
        }
        Ok(())
    }
}

/// One detector box in normalised image coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub label: String,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub conf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image: String,
    pub boxes: Vec<Detection>,
}

impl DetectionRecord {
    pub fn validate(&self) -> Result<()> {
        let unit = 0.0..=1.0;
        for b in &self.boxes {
            let ok = [b.x, b.y, b.w, b.h, b.conf].iter().all(|v| unit.contains(v))
                && b.w > 0.0
                && b.h > 0.0
                && !b.label.trim().is_empty();
            if !ok {
                return Err(Error::Input(format!(
                    "image {}: invalid box {:?} ({}, {}, {}, {}) conf {}",
                    self.image, b.label, b.x, b.y, b.w, b.h, b.conf
                )));
            }
        }
        Ok(())
    }
}

/// Exemplar conversation shown to the backend for one sample type.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedTemplate {
    #[serde(rename = "type")]
    pub kind: SampleType,
    pub text: String,
}

pub const MAX_TEMPLATES_PER_TYPE: usize = 100;
pub const MIN_TEMPLATES_PER_TYPE: usize = 3;

/// Seed templates grouped by type.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TemplateBank {
    by_type: BTreeMap<SampleType, Vec<SeedTemplate>>,
}

impl TemplateBank {
    pub fn new(templates: Vec<SeedTemplate>) -> Result<Self> {
        let mut by_type: BTreeMap<SampleType, Vec<SeedTemplate>> = BTreeMap::new();
        for t in templates {
            if t.text.trim().is_empty() {
                return Err(Error::Input(format!("empty {} template", t.kind)));
            }
            by_type.entry(t.kind).or_default().push(t);
        }
        for (kind, list) in &by_type {
            if list.len() > MAX_TEMPLATES_PER_TYPE {
                return Err(Error::Input(format!(
                    "{} {kind} templates, at most {MAX_TEMPLATES_PER_TYPE} allowed",
                    list.len()
                )));
            }
        }
        Ok(TemplateBank { by_type })
    }

    pub fn of(&self, kind: SampleType) -> &[SeedTemplate] {
        self.by_type.get(&kind).map_or(&[], Vec::as_slice)
    }

    /// Checks that `kind` has enough templates to drive generation.
    pub fn require(&self, kind: SampleType) -> Result<()> {
        let n = self.of(kind).len();
        if n < MIN_TEMPLATES_PER_TYPE {
            return Err(Error::Input(format!(
                "{n} {kind} templates, at least {MIN_TEMPLATES_PER_TYPE} required"
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn caption_record_needs_four() {
        let mut r = CaptionRecord {
            image: "a.ppm".into(),
            captions: vec!["x".into(); 4],
            sources: vec![],
        };
        r.validate().unwrap();
        r.captions.pop();
        assert!(r.validate().is_err());
        r.captions.push(" ".into());
        assert!(r.validate().is_err());
    }

    #[test]
    fn boxes_must_be_normalised() {
        let mut r = DetectionRecord {
            image: "a.ppm".into(),
            boxes: vec![Detection {
                label: "kite".into(),
                x: 0.1,
                y: 0.2,
                w: 0.3,
                h: 0.4,
                conf: 0.9,
            }],
        };
        r.validate().unwrap();
        r.boxes[0].w = 0.0;
        assert!(r.validate().is_err());
        r.boxes[0].w = 0.1;
        r.boxes[0].x = 1.5;
        assert!(r.validate().is_err());
    }

    #[test]
    fn bank_limits() {
        let mk = |n: usize| {
            (0..n)
                .map(|i| SeedTemplate {
                    kind: SampleType::Complex,
                    text: format!("t{i}"),
                })
                .collect::<Vec<_>>()
        };
        let bank = TemplateBank::new(mk(2)).unwrap();
        assert!(bank.require(SampleType::Complex).is_err());
        assert!(bank.require(SampleType::Detailed).is_err());
        assert!(TemplateBank::new(mk(3)).unwrap().require(SampleType::Complex).is_ok());
        assert!(TemplateBank::new(mk(101)).is_err());
    }
}

//! Canonical text rendering of an image's captions and detections.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::pipeline::records::{CaptionRecord, DetectionRecord};

/// Line used in place of box lines when the detector found nothing.
pub const NO_DETECTIONS: &str = "no detections";

/// Numbered captions followed by one `label (x,y,w,h) conf` line per box,
/// highest confidence first (ties by label, then x).
pub fn build_context(captions: &CaptionRecord, detections: &DetectionRecord) -> Result<String> {
    if captions.image != detections.image {
        return Err(Error::Join {
            captions: captions.image.clone(),
            detections: detections.image.clone(),
        });
    }
    captions.validate()?;
    detections.validate()?;
    let mut out = String::from("Captions:\n");
    for (i, c) in captions.captions.iter().enumerate() {
        let _ = writeln!(out, "{}. {}", i + 1, c.trim());
    }
    out.push_str("Detections:\n");
    if detections.boxes.is_empty() {
        out.push_str(NO_DETECTIONS);
        out.push('\n');
    }
    let mut boxes: Vec<_> = detections.boxes.iter().collect();
    boxes.sort_by(|a, b| {
        b.conf
            .total_cmp(&a.conf)
            .then_with(|| a.label.cmp(&b.label))
            .then_with(|| a.x.total_cmp(&b.x))
    });
    for b in boxes {
        let _ = writeln!(
            out,
            "{} ({:.3},{:.3},{:.3},{:.3}) {:.3}",
            b.label, b.x, b.y, b.w, b.h, b.conf
        );
    }
    Ok(out)
}

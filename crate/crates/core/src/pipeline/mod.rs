//! Instruction-data synthesis: image annotations and seed templates go in,
//! a chat backend writes conversations, and a validation gate decides what
//! reaches the dataset.

pub mod backend;
pub mod context;
pub mod prompt;
pub mod records;
pub mod run;
pub mod validate;

pub use backend::{ChatBackend, HttpBackend, StubBackend};
pub use context::build_context;
pub use prompt::{assemble_prompt, sample_seeds, ChatRequest};
pub use records::{CaptionRecord, Detection, DetectionRecord, SeedTemplate, TemplateBank};
pub use run::{export_review, import_review, run_pipeline, Manifest, PipelineConfig, PipelineOutput, ReviewImport};
pub use validate::{parse_and_validate, validate_sample, RejectReason, ValidationRules};

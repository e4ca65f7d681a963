//! The generation loop: bounded waves of concurrent requests, committed
//! in a fixed order until every per-type target is met or its attempt
//! budget runs out.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::jsonl;
use crate::pipeline::backend::ChatBackend;
use crate::pipeline::context::build_context;
use crate::pipeline::prompt::{assemble_prompt, sample_seeds, ChatRequest};
use crate::pipeline::records::{CaptionRecord, DetectionRecord, TemplateBank};
use crate::pipeline::validate::{parse_and_validate, validate_sample, RejectReason, ValidationRules};
use crate::sequence::{ConversationSample, SampleType};

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub targets: BTreeMap<SampleType, usize>,
    /// Seed templates shown per request.
    pub seeds_per_request: usize,
    /// Extra attempts allowed per target item.
    pub retry_budget: usize,
    /// Maximum requests in flight.
    pub concurrency: usize,
    pub temperature: f64,
    pub seed: u64,
    pub rules: ValidationRules,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            targets: BTreeMap::new(),
            seeds_per_request: 3,
            retry_budget: 3,
            concurrency: 8,
            temperature: 0.7,
            seed: 0,
            rules: ValidationRules::default(),
        }
    }
}

/// Summary written next to the generated dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub config_hash: String,
    pub backend: String,
    /// False when some target was missed because its budget ran out.
    pub complete: bool,
    pub targets: BTreeMap<SampleType, usize>,
    pub accepted: BTreeMap<SampleType, usize>,
    pub attempts: BTreeMap<SampleType, usize>,
    pub rejected: BTreeMap<SampleType, BTreeMap<RejectReason, usize>>,
    pub rejected_total: usize,
    /// Backend errors, in commit order.
    pub failures: Vec<String>,
}

impl Manifest {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }
}

/// Generated samples plus their manifest.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub samples: Vec<ConversationSample>,
    pub manifest: Manifest,
}

impl PipelineOutput {
    pub fn write(&self, dataset: &Path, manifest: &Path) -> Result<()> {
        jsonl::write_jsonl(dataset, &self.samples)?;
        std::fs::write(manifest, self.manifest.to_json()).map_err(|e| Error::io(manifest, e))
    }
}

fn derive_seed(seed: u64, kind: SampleType, attempt: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(kind.as_str().as_bytes());
    h.update((attempt as u64).to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

struct Job {
    kind: SampleType,
    attempt: usize,
    image: usize,
    request: ChatRequest,
}

/// Joins captions with detections by image reference, keeping caption order.
fn join<'a>(captions: &'a [CaptionRecord], detections: &'a [DetectionRecord]) -> Result<Vec<(&'a str, String)>> {
    let by_image: HashMap<&str, &DetectionRecord> = detections.iter().map(|d| (d.image.as_str(), d)).collect();
    captions
        .iter()
        .map(|c| {
            let d = by_image.get(c.image.as_str()).ok_or_else(|| Error::Join {
                captions: c.image.clone(),
                detections: "<none>".into(),
            })?;
            Ok((c.image.as_str(), build_context(c, d)?))
        })
        .collect()
}

/// Runs generation for every type with a positive target.
///
/// Requests are issued in waves of at most `concurrency`; the replies of a
/// wave are committed in the order the jobs were created, so the output is
/// a function of the inputs, the backend and the seed alone. Samples come
/// out grouped by type in attempt order, whatever the concurrency.
pub fn run_pipeline(
    captions: &[CaptionRecord],
    detections: &[DetectionRecord],
    bank: &TemplateBank,
    backend: &dyn ChatBackend,
    cfg: &PipelineConfig,
    config_hash: &str,
) -> Result<PipelineOutput> {
    if cfg.concurrency == 0 || cfg.seeds_per_request == 0 {
        return Err(Error::Config(
            "concurrency and seeds_per_request must be positive".into(),
        ));
    }
    let active: Vec<(SampleType, usize)> = SampleType::ALL
        .into_iter()
        .map(|k| (k, cfg.targets.get(&k).copied().unwrap_or(0)))
        .filter(|&(_, n)| n > 0)
        .collect();
    let contexts = join(captions, detections)?;
    if !active.is_empty() && contexts.is_empty() {
        return Err(Error::Input("no images to generate from".into()));
    }
    for &(kind, _) in &active {
        bank.require(kind)?;
    }

    let mut manifest = Manifest {
        seed: cfg.seed,
        config_hash: config_hash.to_string(),
        backend: backend.name(),
        complete: true,
        targets: active.iter().copied().collect(),
        accepted: active.iter().map(|&(k, _)| (k, 0)).collect(),
        attempts: active.iter().map(|&(k, _)| (k, 0)).collect(),
        rejected: BTreeMap::new(),
        rejected_total: 0,
        failures: Vec::new(),
    };
    let mut samples = Vec::new();
    let max_attempts = |target: usize| target * (1 + cfg.retry_budget);

    loop {
        // Fill the wave round-robin across types that still need samples.
        let mut quota: Vec<usize> = active
            .iter()
            .map(|&(k, target)| {
                let pending = target - manifest.accepted[&k];
                pending.min(max_attempts(target) - manifest.attempts[&k])
            })
            .collect();
        let mut jobs = Vec::new();
        while jobs.len() < cfg.concurrency && quota.iter().any(|&q| q > 0) {
            for (i, &(kind, _)) in active.iter().enumerate() {
                if quota[i] == 0 || jobs.len() == cfg.concurrency {
                    continue;
                }
                quota[i] -= 1;
                let attempt = manifest.attempts[&kind];
                *manifest.attempts.get_mut(&kind).expect("active type") += 1;
                let seed = derive_seed(cfg.seed, kind, attempt);
                let image = (seed % contexts.len() as u64) as usize;
                let seeds = sample_seeds(bank.of(kind), cfg.seeds_per_request, seed)?;
                let request = assemble_prompt(kind, &seeds, &contexts[image].1, seed, cfg.temperature)?;
                jobs.push(Job {
                    kind,
                    attempt,
                    image,
                    request,
                });
            }
        }
        if jobs.is_empty() {
            break;
        }
        let replies: Vec<Result<String>> = std::thread::scope(|s| {
            let handles: Vec<_> = jobs
                .iter()
                .map(|job| s.spawn(move || backend.complete(&job.request)))
                .collect();
            handles
                .into_iter()
                .map(|h| {
                    h.join()
                        .unwrap_or_else(|_| Err(Error::Backend("backend call panicked".into())))
                })
                .collect()
        });
        for (job, reply) in jobs.iter().zip(replies) {
            let id = format!("{}-{:05}", job.kind, job.attempt);
            let image = contexts[job.image].0;
            let verdict = match reply {
                Ok(text) => parse_and_validate(&text, job.kind, &id, Some(image), &cfg.rules),
                Err(e) => {
                    manifest.failures.push(format!("{id}: {e}"));
                    Err(RejectReason::Backend)
                }
            };
            match verdict {
                Ok(sample) => {
                    *manifest.accepted.get_mut(&job.kind).expect("active type") += 1;
                    samples.push(sample);
                }
                Err(reason) => {
                    *manifest
                        .rejected
                        .entry(job.kind)
                        .or_default()
                        .entry(reason)
                        .or_default() += 1;
                    manifest.rejected_total += 1;
                }
            }
        }
    }
    manifest.complete = active.iter().all(|&(k, target)| manifest.accepted[&k] == target);
    // Ids carry the zero-padded attempt number, so this is attempt order.
    samples.sort_by(|a, b| (a.kind, &a.id).cmp(&(b.kind, &b.id)));
    Ok(PipelineOutput { samples, manifest })
}

/// Samples read back from a hand-edited review file.
#[derive(Debug, Clone, Default)]
pub struct ReviewImport {
    pub accepted: Vec<ConversationSample>,
    pub rejected: Vec<(String, RejectReason)>,
}

/// Writes samples for manual review, one JSON object per line.
pub fn export_review(path: &Path, samples: &[ConversationSample]) -> Result<()> {
    jsonl::write_jsonl(path, samples)
}

/// Reads an edited review file and re-applies the validation gate, so
/// edits cannot smuggle invalid samples into training data.
pub fn import_review(path: &Path, rules: &ValidationRules) -> Result<ReviewImport> {
    let mut out = ReviewImport::default();
    for s in jsonl::read_jsonl::<ConversationSample>(path)? {
        match validate_sample(&s, rules) {
            Ok(()) => out.accepted.push(s),
            Err(r) => out.rejected.push((s.id, r)),
        }
    }
    Ok(out)
}

//! Data generation end to end against the stub backend.

use std::collections::BTreeMap;

use linesight_core::jsonl::to_jsonl;
use linesight_core::pipeline::{
    export_review, import_review, run_pipeline, CaptionRecord, DetectionRecord, PipelineConfig, RejectReason,
    StubBackend, TemplateBank,
};
use linesight_core::sequence::SampleType;
use linesight_core::synth::{seed_templates, Scene};

fn inputs() -> (Vec<CaptionRecord>, Vec<DetectionRecord>, TemplateBank) {
    let scenes = Scene::all(1);
    (
        scenes.iter().map(Scene::captions).collect(),
        scenes.iter().map(Scene::detections).collect(),
        TemplateBank::new(seed_templates()).unwrap(),
    )
}

fn config(d: usize, c: usize, x: usize, seed: u64) -> PipelineConfig {
    PipelineConfig {
        targets: BTreeMap::from([
            (SampleType::Detailed, d),
            (SampleType::Conversation, c),
            (SampleType::Complex, x),
        ]),
        seed,
        ..PipelineConfig::default()
    }
}

fn histogram(samples: &[linesight_core::sequence::ConversationSample]) -> BTreeMap<SampleType, usize> {
    let mut h = BTreeMap::new();
    for s in samples {
        *h.entry(s.kind).or_insert(0) += 1;
    }
    h
}

#[test]
fn reruns_are_byte_identical_and_hit_every_target() {
    let (caps, dets, bank) = inputs();
    let cfg = config(22, 45, 33, 7);
    let a = run_pipeline(&caps, &dets, &bank, &StubBackend::new(7), &cfg, "h").unwrap();
    let b = run_pipeline(&caps, &dets, &bank, &StubBackend::new(7), &cfg, "h").unwrap();
    assert_eq!(histogram(&a.samples), cfg.targets);
    assert!(a.manifest.complete);
    assert_eq!(to_jsonl(&a.samples), to_jsonl(&b.samples));
    assert_eq!(a.manifest.to_json(), b.manifest.to_json());

    let c = run_pipeline(&caps, &dets, &bank, &StubBackend::new(8), &config(22, 45, 33, 8), "h").unwrap();
    assert_ne!(to_jsonl(&a.samples), to_jsonl(&c.samples));
}

#[test]
fn concurrency_does_not_change_the_output() {
    let (caps, dets, bank) = inputs();
    let mut serial = config(4, 6, 5, 3);
    serial.concurrency = 1;
    let wide = config(4, 6, 5, 3);
    let backend = StubBackend::new(3).with_malformed_rate(0.3);
    let a = run_pipeline(&caps, &dets, &bank, &backend, &serial, "h").unwrap();
    let b = run_pipeline(&caps, &dets, &bank, &backend, &wide, "h").unwrap();
    assert_eq!(to_jsonl(&a.samples), to_jsonl(&b.samples));
}

#[test]
fn half_malformed_replies_still_meet_targets() {
    let (caps, dets, bank) = inputs();
    let cfg = config(22, 45, 33, 1);
    let backend = StubBackend::new(1).with_malformed_rate(0.5);
    let out = run_pipeline(&caps, &dets, &bank, &backend, &cfg, "h").unwrap();
    assert!(out.manifest.complete);
    assert_eq!(histogram(&out.samples), cfg.targets);
    assert!(out.manifest.rejected_total > 0);
    let logged: usize = out.manifest.rejected.values().flat_map(|r| r.values()).sum();
    assert_eq!(logged, out.manifest.rejected_total);
    let attempts: usize = out.manifest.attempts.values().sum();
    assert_eq!(attempts, 100 + out.manifest.rejected_total);
    let parse = out
        .manifest
        .rejected
        .values()
        .filter_map(|r| r.get(&RejectReason::Parse))
        .sum::<usize>();
    assert!(parse > 0);
}

#[test]
fn exhausted_budget_reports_an_incomplete_manifest() {
    let (caps, dets, bank) = inputs();
    let mut cfg = config(3, 0, 0, 1);
    cfg.retry_budget = 0;
    let backend = StubBackend::new(1).with_malformed_rate(1.0);
    let out = run_pipeline(&caps, &dets, &bank, &backend, &cfg, "h").unwrap();
    assert!(!out.manifest.complete);
    assert!(out.samples.is_empty());
    assert_eq!(out.manifest.attempts[&SampleType::Detailed], 3);
}

#[test]
fn review_round_trip_is_a_no_op() {
    let (caps, dets, bank) = inputs();
    let cfg = config(3, 4, 3, 2);
    let out = run_pipeline(&caps, &dets, &bank, &StubBackend::new(2), &cfg, "h").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("review.jsonl");
    export_review(&path, &out.samples).unwrap();
    let back = import_review(&path, &cfg.rules).unwrap();
    assert_eq!(back.accepted, out.samples);
    assert!(back.rejected.is_empty());

    let mut edited = out.samples.clone();
    edited[0].turns[0].response = "  ".into();
    export_review(&path, &edited).unwrap();
    let back = import_review(&path, &cfg.rules).unwrap();
    assert_eq!(back.rejected, vec![(edited[0].id.clone(), RejectReason::EmptyTurn)]);
}

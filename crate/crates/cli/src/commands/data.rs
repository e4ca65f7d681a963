use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use linesight_core::config::RunConfig;
use linesight_core::jsonl::read_jsonl;
use linesight_core::pipeline::{run_pipeline, CaptionRecord, DetectionRecord, SeedTemplate, TemplateBank};
use linesight_core::sequence::SampleType;
use linesight_core::synth::write_world;

use super::{prepare_out, set_flag, set_path};
use crate::settings::{self, existing_path};
use crate::{usage, GenerateArgs, SynthArgs};

pub fn synth(cfg: &mut RunConfig, out: Option<PathBuf>, args: SynthArgs) -> Result<ExitCode> {
    set_flag(cfg, "synth.variants", args.variants);
    set_flag(cfg, "synth.mcq", args.mcq);
    let variants = cfg.get_or("synth.variants", 2u32)?;
    let mcq = cfg.get_or("synth.mcq", 40usize)?;
    let dir = prepare_out(out, cfg)?;
    let scenes = write_world(&dir, variants, mcq, settings::seed(cfg)?)?;
    println!("wrote {} images and {mcq} MCQ items to {}", scenes.len(), dir.display());
    Ok(ExitCode::SUCCESS)
}

pub fn generate_data(cfg: &mut RunConfig, out: Option<PathBuf>, args: GenerateArgs) -> Result<ExitCode> {
    set_path(cfg, "data.captions", args.captions);
    set_path(cfg, "data.detections", args.detections);
    set_path(cfg, "data.templates", args.templates);
    set_flag(cfg, "pipeline.backend", args.backend);
    set_flag(cfg, "pipeline.malformed_rate", args.malformed_rate);
    if let Some(t) = args.targets {
        let parts: Vec<&str> = t.split(',').map(str::trim).collect();
        if parts.len() != 3 || parts.iter().any(|p| p.parse::<usize>().is_err()) {
            return Err(usage(format!("--targets {t:?}: expected three counts D,C,X")));
        }
        for (kind, n) in SampleType::ALL.iter().zip(parts) {
            cfg.set(format!("pipeline.targets.{kind}"), n);
        }
    }
    let captions_path = existing_path(cfg, "data.captions", "--captions")?;
    let detections_path = existing_path(cfg, "data.detections", "--detections")?;
    let templates_path = existing_path(cfg, "data.templates", "--templates")?;
    let pcfg = settings::pipeline_config(cfg)?;
    let backend = settings::backend(cfg)?;
    let dir = prepare_out(out, cfg)?;

    let captions: Vec<CaptionRecord> = read_jsonl(&captions_path)?;
    let detections: Vec<DetectionRecord> = read_jsonl(&detections_path)?;
    let bank = TemplateBank::new(read_jsonl::<SeedTemplate>(&templates_path)?)?;
    let output = run_pipeline(&captions, &detections, &bank, backend.as_ref(), &pcfg, &cfg.hash())?;
    output.write(&dir.join("dataset.jsonl"), &dir.join("manifest.json"))?;
    let m = &output.manifest;
    for (kind, target) in &m.targets {
        println!(
            "{kind:<14}{:>5} / {target:<5} attempts {}",
            m.accepted[kind], m.attempts[kind]
        );
    }
    println!(
        "rejected {}; wrote {}",
        m.rejected_total,
        dir.join("dataset.jsonl").display()
    );
    if !m.complete {
        eprintln!("error: retry budget exhausted before every target was met (partial manifest written)");
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

//! Typed views of the resolved run configuration.

use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::{Context, Result};
use linesight_core::config::RunConfig;
use linesight_core::model::config::ModelConfig;
use linesight_core::pipeline::{ChatBackend, HttpBackend, PipelineConfig, StubBackend, ValidationRules};
use linesight_core::sequence::{SampleType, SequenceBuilder, DEFAULT_SYSTEM_PROMPT};
use linesight_core::trainer::{Stage, StageConfig};

use crate::usage;

pub fn seed(c: &RunConfig) -> Result<u64> {
    Ok(c.get_or("seed", 0)?)
}

/// Path-valued key, or a usage error naming the flag that sets it.
pub fn required_path(c: &RunConfig, key: &str, flag: &str) -> Result<PathBuf> {
    let p = c
        .get_str(key)
        .filter(|v| !v.is_empty())
        .ok_or_else(|| usage(format!("{flag} is required (config key {key})")))?;
    Ok(PathBuf::from(p))
}

/// Like [`required_path`], and the file or directory must exist.
pub fn existing_path(c: &RunConfig, key: &str, flag: &str) -> Result<PathBuf> {
    let p = required_path(c, key, flag)?;
    if !p.exists() {
        return Err(usage(format!("{flag}: no such file or directory: {}", p.display())));
    }
    Ok(p)
}

pub fn model_config(c: &RunConfig) -> Result<ModelConfig> {
    let d = ModelConfig::default();
    let cfg = ModelConfig {
        image_width: c.get_or("model.image_width", d.image_width)?,
        image_height: c.get_or("model.image_height", d.image_height)?,
        patch_size: c.get_or("model.patch_size", d.patch_size)?,
        d_vision: c.get_or("model.d_vision", d.d_vision)?,
        vision_layers: c.get_or("model.vision_layers", d.vision_layers)?,
        vision_heads: c.get_or("model.vision_heads", d.vision_heads)?,
        d_model: c.get_or("model.d_model", d.d_model)?,
        layers: c.get_or("model.layers", d.layers)?,
        heads: c.get_or("model.heads", d.heads)?,
        context: c.get_or("model.context", d.context)?,
        vocab_size: d.vocab_size,
        proj_depth: c.get_or("model.proj_depth", d.proj_depth)?,
        mlp_ratio: c.get_or("model.mlp_ratio", d.mlp_ratio)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn stage_config(c: &RunConfig, stage: Stage) -> Result<StageConfig> {
    let p = format!("stage{}.", stage.number());
    let k = |name: &str| format!("{p}{name}");
    let d = StageConfig::new(stage);
    let cfg = StageConfig {
        stage,
        peak_lr: c.get_or(&k("lr"), d.peak_lr)?,
        min_lr: c.get_or(&k("min_lr"), d.min_lr)?,
        batch_size: c.get_or(&k("batch"), d.batch_size)?,
        grad_accum: c.get_or(&k("accum"), d.grad_accum)?,
        steps: c.get_or(&k("steps"), d.steps)?,
        warmup_steps: c.get_opt(&k("warmup"))?,
        weight_decay: c.get_or(&k("weight_decay"), d.weight_decay)?,
        max_grad_norm: c.get_opt(&k("max_grad_norm"))?,
        checkpoint_every: c.get_opt(&k("checkpoint_every"))?,
        seed: seed(c)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn builder(c: &RunConfig, model: &ModelConfig) -> SequenceBuilder {
    let prompt = c.get_str("system_prompt").unwrap_or(DEFAULT_SYSTEM_PROMPT);
    SequenceBuilder::new(prompt, Some(model.context), model.num_patches())
}

pub fn pipeline_config(c: &RunConfig) -> Result<PipelineConfig> {
    let d = PipelineConfig::default();
    let mut targets = BTreeMap::new();
    for kind in SampleType::ALL {
        targets.insert(kind, c.get_or(&format!("pipeline.targets.{kind}"), 0)?);
    }
    Ok(PipelineConfig {
        targets,
        seeds_per_request: c.get_or("pipeline.seeds_per_request", d.seeds_per_request)?,
        retry_budget: c.get_or("pipeline.retry_budget", d.retry_budget)?,
        concurrency: c.get_or("pipeline.concurrency", d.concurrency)?,
        temperature: c.get_or("pipeline.temperature", d.temperature)?,
        seed: seed(c)?,
        rules: ValidationRules {
            min_complex_chars: c.get_or("pipeline.min_complex_chars", d.rules.min_complex_chars)?,
        },
    })
}

pub fn backend(c: &RunConfig) -> Result<Box<dyn ChatBackend>> {
    match c.get_str("pipeline.backend").unwrap_or("stub") {
        "stub" => Ok(Box::new(
            StubBackend::new(seed(c)?).with_malformed_rate(c.get_or("pipeline.malformed_rate", 0.0)?),
        )),
        "http" => {
            let endpoint = c
                .get_str("pipeline.endpoint")
                .ok_or_else(|| usage("pipeline.endpoint is required for the http backend"))?;
            let mut b = HttpBackend::new(endpoint, c.get_str("pipeline.model").unwrap_or("gpt-4"));
            if let Some(var) = c.get_str("pipeline.api_key_env") {
                b.api_key = Some(std::env::var(var).with_context(|| format!("reading API key from ${var}"))?);
            }
            Ok(Box::new(b))
        }
        other => Err(usage(format!("unknown backend {other:?}, expected stub or http"))),
    }
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use linesight_core::config::RunConfig;
use linesight_core::jsonl::read_jsonl;
use linesight_core::model::checkpoint::{Checkpoint, CheckpointMeta};
use linesight_core::model::image::ImageRaster;
use linesight_core::model::Model;
use linesight_core::sequence::{ConversationSample, SampleType};
use linesight_core::trainer::{
    data_mix, require_stage_one, train_stage, write_loss_csv, LossRecord, MixSpec, Stage, TrainingSet,
};

use super::{prepare_out, set_flag, set_path};
use crate::settings::{self, existing_path};
use crate::{usage, FinetuneArgs, PretrainArgs};

pub fn pretrain(cfg: &mut RunConfig, out: Option<PathBuf>, args: PretrainArgs) -> Result<ExitCode> {
    set_path(cfg, "pretrain.data", args.data);
    set_path(cfg, "pretrain.general", args.general);
    set_path(cfg, "images", args.images);
    set_flag(cfg, "stage1.steps", args.steps);
    let data_path = existing_path(cfg, "pretrain.data", "--data")?;
    let mut samples: Vec<ConversationSample> = read_jsonl(&data_path)?;
    if cfg.get_str("pretrain.general").is_some_and(|g| !g.is_empty()) {
        let general: Vec<ConversationSample> = read_jsonl(&existing_path(cfg, "pretrain.general", "--general")?)?;
        let spec = mix_spec(cfg, samples.len(), general.len())?;
        samples = data_mix(&samples, &general, spec, settings::seed(cfg)?)?;
    }
    let model_cfg = settings::model_config(cfg)?;
    let model = Model::init(model_cfg, settings::seed(cfg)?)?;
    run_stage(cfg, out, Stage::Pretrain, model, &samples)
}

/// `stage1.mix = P:G` weights with `stage1.mix_total` samples in all;
/// without them every sample of both sources is used.
fn mix_spec(cfg: &RunConfig, primary: usize, general: usize) -> Result<MixSpec> {
    let Some(ratio) = cfg.get_str("stage1.mix") else {
        return Ok(MixSpec::Counts { primary, general });
    };
    let bad = || usage(format!("stage1.mix = {ratio:?}: expected two weights P:G"));
    let (p, g) = ratio.split_once(':').ok_or_else(bad)?;
    let p: u64 = p.trim().parse().map_err(|_| bad())?;
    let g: u64 = g.trim().parse().map_err(|_| bad())?;
    Ok(MixSpec::Ratio {
        primary: p,
        general: g,
        total: cfg.get_or("stage1.mix_total", primary)?,
    })
}

pub fn finetune(cfg: &mut RunConfig, out: Option<PathBuf>, args: FinetuneArgs) -> Result<ExitCode> {
    set_path(cfg, "finetune.checkpoint", args.checkpoint);
    set_path(cfg, "finetune.data", args.data);
    set_path(cfg, "images", args.images);
    set_flag(cfg, "finetune.ablate", args.ablate);
    set_flag(cfg, "stage2.steps", args.steps);
    let ckpt_path = existing_path(cfg, "finetune.checkpoint", "--checkpoint")?;
    let data_path = existing_path(cfg, "finetune.data", "--data")?;
    let ablate = match cfg.get_str("finetune.ablate").filter(|v| !v.is_empty() && *v != "none") {
        None => None,
        Some(v) => Some(
            SampleType::parse(v)
                .ok_or_else(|| usage(format!("--ablate {v:?}: expected detailed, conversation or complex")))?,
        ),
    };
    let ckpt = Checkpoint::load(&ckpt_path)?;
    require_stage_one(&ckpt.meta)?;
    let mut samples: Vec<ConversationSample> = read_jsonl(&data_path)?;
    if let Some(kind) = ablate {
        samples.retain(|s| s.kind != kind);
        println!("ablated {kind}: {} samples remain", samples.len());
    }
    run_stage(
        cfg,
        out,
        Stage::Finetune,
        Model::new(ckpt.config, ckpt.params),
        &samples,
    )
}

fn save(path: &Path, model: &Model, meta: CheckpointMeta) -> linesight_core::Result<()> {
    Checkpoint {
        config: model.config.clone(),
        params: model.params.clone(),
        meta,
    }
    .save(path)
}

fn run_stage(
    cfg: &mut RunConfig,
    out: Option<PathBuf>,
    stage: Stage,
    mut model: Model,
    samples: &[ConversationSample],
) -> Result<ExitCode> {
    let stage_cfg = settings::stage_config(cfg, stage)?;
    let builder = settings::builder(cfg, &model.config);
    let images = if samples.iter().any(|s| s.image.is_some()) {
        Some(existing_path(cfg, "images", "--images")?)
    } else {
        None
    };
    let dir = prepare_out(out, cfg)?;
    let n = stage.number();
    let set = TrainingSet::prepare(samples, &model, &builder, stage, stage_cfg.seed, |r| {
        let root = images.as_deref().unwrap_or(Path::new("."));
        ImageRaster::load(&root.join(r))
    })?;
    println!("stage {n}: {} samples, {} steps", set.len(), stage_cfg.steps);
    let meta = |step| CheckpointMeta {
        stage: n,
        step,
        seed: stage_cfg.seed,
        config_hash: cfg.hash(),
    };
    let log = train_stage(&mut model, &stage_cfg, &set, |step, m| {
        let name = if step == stage_cfg.steps {
            format!("stage{n}.ckpt")
        } else {
            format!("stage{n}-step{step}.ckpt")
        };
        save(&dir.join(name), m, meta(step))
    })?;
    write_loss_csv(&dir.join(format!("stage{n}_loss.csv")), &log)?;
    report(&log);
    println!("wrote {}", dir.join(format!("stage{n}.ckpt")).display());
    Ok(ExitCode::SUCCESS)
}

fn report(log: &[LossRecord]) {
    let every = (log.len() / 10).max(1);
    for r in log.iter().filter(|r| r.step == 1 || r.step % every == 0) {
        println!("step {:>6}  lr {:.3e}  loss {:.4}", r.step, r.lr, r.loss);
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use linesight_core::config::RunConfig;
use linesight_core::eval::{
    evaluate, ConstantRunner, GenerativeRunner, McqItem, ModelRunner, OracleRunner, TextOracleRunner,
};
use linesight_core::jsonl::read_jsonl;
use linesight_core::model::checkpoint::Checkpoint;
use linesight_core::model::{GenerateOptions, Model};

use super::{set_flag, set_path, write_text};
use crate::settings::{self, existing_path};
use crate::{usage, EvalArgs};

fn model_runner(cfg: &RunConfig) -> Result<GenerativeRunner> {
    let ckpt = Checkpoint::load(&existing_path(cfg, "eval.checkpoint", "--checkpoint")?)?;
    let model = Model::new(ckpt.config, ckpt.params);
    let builder = settings::builder(cfg, &model.config);
    let image_root = match cfg.get_str("images") {
        Some(_) => existing_path(cfg, "images", "--images")?,
        None => PathBuf::from("."),
    };
    Ok(GenerativeRunner {
        model,
        builder,
        image_root,
        options: GenerateOptions {
            max_new_tokens: cfg.get_or("eval.max_new_tokens", 24)?,
            ..GenerateOptions::default()
        },
    })
}

pub fn eval(cfg: &mut RunConfig, out: Option<PathBuf>, args: EvalArgs) -> Result<ExitCode> {
    set_path(cfg, "eval.checkpoint", args.checkpoint);
    set_path(cfg, "eval.items", args.items);
    set_path(cfg, "images", args.images);
    set_flag(cfg, "eval.runner", args.runner);
    set_flag(cfg, "eval.threshold", args.threshold);
    let items: Vec<McqItem> = read_jsonl(&existing_path(cfg, "eval.items", "--items")?)?;
    let threshold: Option<f64> = cfg.get_opt("eval.threshold")?;
    let spec = cfg.get_str("eval.runner").unwrap_or("model").to_string();
    let runner: Box<dyn ModelRunner> = match spec.as_str() {
        "model" => Box::new(model_runner(cfg)?),
        "oracle" => Box::new(OracleRunner::new(&items)),
        "text-oracle" => Box::new(TextOracleRunner::new(&items)),
        s => match s.strip_prefix("constant:") {
            Some(reply) => Box::new(ConstantRunner::new(reply)),
            None => {
                return Err(usage(format!(
                    "--runner {s:?}: expected model, oracle, text-oracle or constant:TEXT"
                )))
            }
        },
    };
    let dir = out.map(|d| super::prepare_out(Some(d), cfg)).transpose()?;
    let mut report = evaluate(runner.as_ref(), &items)?;
    report.config_hash = cfg.hash();
    report.seed = settings::seed(cfg)?;
    print!("{}", report.table());
    if let Some(dir) = dir {
        write_text(&dir.join("report.json"), &report.to_json())?;
    }
    match threshold {
        Some(t) if report.accuracy < t => {
            eprintln!("accuracy {:.4} is below the threshold {t}", report.accuracy);
            Ok(ExitCode::from(1))
        }
        _ => Ok(ExitCode::SUCCESS),
    }
}

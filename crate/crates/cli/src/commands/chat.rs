use std::io::{self, BufRead, Write};
use std::path::Path;
use std::process::ExitCode;

use anyhow::Result;
use linesight_core::config::RunConfig;
use linesight_core::model::checkpoint::Checkpoint;
use linesight_core::model::image::ImageRaster;
use linesight_core::model::{DecodeMode, GenerateOptions, Model};
use linesight_core::sequence::Turn;
use linesight_core::Error;

use super::{set_flag, set_path};
use crate::settings::{self, existing_path};
use crate::ChatArgs;

const HELP: &str = "commands: /image PATH, /reset, /quit";

pub fn chat(cfg: &mut RunConfig, args: ChatArgs) -> Result<ExitCode> {
    set_path(cfg, "chat.checkpoint", args.checkpoint);
    set_flag(cfg, "chat.temperature", args.temperature);
    let ckpt = Checkpoint::load(&existing_path(cfg, "chat.checkpoint", "--checkpoint")?)?;
    let model = Model::new(ckpt.config, ckpt.params);
    let builder = settings::builder(cfg, &model.config);
    let temperature: Option<f64> = cfg.get_opt("chat.temperature")?;
    let seed = settings::seed(cfg)?;
    let max_new_tokens = cfg.get_or("chat.max_new_tokens", 96)?;

    let stdin = io::stdin();
    let mut stdout = io::stdout();
    let mut image: Option<ImageRaster> = None;
    let mut history: Vec<Turn> = Vec::new();
    writeln!(stdout, "{HELP}")?;
    let mut lines = stdin.lock().lines();
    loop {
        write!(stdout, "> ")?;
        stdout.flush()?;
        let Some(line) = lines.next().transpose()? else {
            writeln!(stdout)?;
            break;
        };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if line == "/quit" {
            break;
        }
        if line == "/reset" {
            image = None;
            history.clear();
            writeln!(stdout, "(conversation cleared)")?;
            continue;
        }
        if let Some(rest) = line.strip_prefix("/image") {
            match ImageRaster::load(Path::new(rest.trim())) {
                Ok(img) => {
                    image = Some(img);
                    history.clear();
                    writeln!(stdout, "(image loaded, conversation cleared)")?;
                }
                Err(e) => writeln!(stdout, "(could not load image: {e})")?,
            }
            continue;
        }
        if line.starts_with('/') {
            writeln!(stdout, "(unknown command; {HELP})")?;
            continue;
        }
        let mode = match temperature {
            Some(tau) => DecodeMode::Temperature {
                tau,
                seed: seed.wrapping_add(history.len() as u64),
            },
            None => DecodeMode::Greedy,
        };
        let opts = GenerateOptions {
            max_new_tokens,
            mode,
            image_after: false,
        };
        match model.generate(&builder, image.as_ref(), &history, line, &opts) {
            Ok(reply) => {
                writeln!(stdout, "{reply}")?;
                history.push(Turn::new(line, reply));
            }
            Err(Error::Length { len, context, .. }) => writeln!(
                stdout,
                "(conversation is {len} positions, over the {context}-position context; use /reset)"
            )?,
            Err(e) => return Err(e.into()),
        }
    }
    Ok(ExitCode::SUCCESS)
}

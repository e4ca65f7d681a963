//! One function per subcommand.

mod chat;
mod data;
mod eval;
mod train;

use std::fmt::Display;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use linesight_core::config::RunConfig;

pub use chat::chat;
pub use data::{generate_data, synth};
pub use eval::eval;
pub use train::{finetune, pretrain};

use crate::usage;

/// Records a flag value under its config key; flags win over the file.
fn set_flag<T: Display>(cfg: &mut RunConfig, key: &str, value: Option<T>) {
    if let Some(v) = value {
        cfg.set(key, v.to_string());
    }
}

fn set_path(cfg: &mut RunConfig, key: &str, value: Option<PathBuf>) {
    set_flag(cfg, key, value.map(|p| p.display().to_string()));
}

/// Creates the output directory and stores the resolved config in it.
fn prepare_out(out: Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    let dir = out.ok_or_else(|| usage("--out is required"))?;
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    write_text(&dir.join("config.txt"), &cfg.canonical())?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

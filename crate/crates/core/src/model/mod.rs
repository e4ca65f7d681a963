//! The vision encoder → projector → decoder model and its generation loop.

pub mod checkpoint;
pub mod config;
pub mod image;
pub mod network;
pub mod params;
pub mod tokenizer;

use linesight_autodiff::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::sequence::{SequenceBuilder, SerializedSequence, Turn};
use config::ModelConfig;
use image::ImageRaster;
use params::{FreezeSet, ModelParameters, Module};
use tokenizer::{TokenId, STOP};

/// Decoding rule for [`Model::generate`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecodeMode {
    Greedy,
    Temperature { tau: f64, seed: u64 },
}

#[derive(Debug, Clone)]
pub struct GenerateOptions {
    pub max_new_tokens: usize,
    pub mode: DecodeMode,
    /// Place the image after the first question instead of before it.
    pub image_after: bool,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        GenerateOptions {
            max_new_tokens: 64,
            mode: DecodeMode::Greedy,
            image_after: false,
        }
    }
}

/// Parameters together with the config that shaped them.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParameters,
}

fn all_frozen() -> FreezeSet {
    Module::ALL.into_iter().collect()
}

impl Model {
    pub fn new(config: ModelConfig, params: ModelParameters) -> Self {
        Model { config, params }
    }

    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParameters::init(&config, seed)?;
        Ok(Model { config, params })
    }

    /// Visual embeddings for one image.
    pub fn encode_image(&self, image: &ImageRaster) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, &all_frozen());
        let zv = network::vision_encode(&mut tape, &p, &self.config, image)?;
        Ok(tape.value(zv).clone())
    }

    /// Image tokens (projected visual embeddings) for one image.
    pub fn image_tokens(&self, image: &ImageRaster) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, &all_frozen());
        let hv = network::image_tokens(&mut tape, &p, &self.config, image)?;
        Ok(tape.value(hv).clone())
    }

    /// Logits for every position of `seq`, given precomputed image tokens.
    pub fn logits(&self, seq: &SerializedSequence, image_tokens: Option<&Tensor>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, &all_frozen());
        let hv = image_tokens.map(|t| tape.constant(t.clone()));
        let asm = network::assemble_input(&mut tape, &p, seq, hv)?;
        let logits = network::decoder_forward(&mut tape, &p, &self.config, asm.embeddings)?;
        Ok(tape.value(logits).clone())
    }

    /// Mean supervised-token loss of one serialized sample.
    pub fn loss(&self, seq: &SerializedSequence, image: Option<&ImageRaster>) -> Result<f64> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, &all_frozen());
        let (loss, _) = network::sequence_loss(&mut tape, &p, &self.config, seq, image)?;
        Ok(tape.value(loss).item()?)
    }

    /// Answers `question` after the completed rounds in `history`.
    ///
    /// Decoding stops at the first control token (normally the stop token),
    /// after `max_new_tokens`, or when the context is full. The returned
    /// text never contains control markers.
    pub fn generate(
        &self,
        builder: &SequenceBuilder,
        image: Option<&ImageRaster>,
        history: &[Turn],
        question: &str,
        opts: &GenerateOptions,
    ) -> Result<String> {
        if question.trim().is_empty() {
            return Err(Error::Input("instruction is empty".into()));
        }
        let prompt = builder.prompt(history, question, image.is_some(), opts.image_after)?;
        let hv = image.map(|img| self.image_tokens(img)).transpose()?;
        let n_image = hv.as_ref().map_or(0, |t| t.dims()[0]);
        let mut rng = match opts.mode {
            DecodeMode::Temperature { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
            DecodeMode::Greedy => None,
        };
        let mut seq = prompt;
        let mut produced: Vec<TokenId> = Vec::new();
        for _ in 0..opts.max_new_tokens {
            if seq.model_len(n_image) >= self.config.context {
                break;
            }
            let logits = self.logits(&seq, hv.as_ref())?;
            let last = logits.row(logits.dims()[0] - 1);
            let next = match (opts.mode, rng.as_mut()) {
                (DecodeMode::Temperature { tau, .. }, Some(rng)) => sample(last, tau, rng),
                _ => argmax(last),
            };
            if next == STOP || tokenizer::is_special(next) {
                break;
            }
            produced.push(next);
            seq.tokens.push(next);
            seq.targets.push(tokenizer::PAD);
            seq.loss_mask.push(false);
        }
        Ok(tokenizer::detokenize_lossy(&produced))
    }
}

fn argmax(row: &[f64]) -> TokenId {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn sample(row: &[f64], tau: f64, rng: &mut ChaCha8Rng) -> TokenId {
    if tau <= 0.0 {
        return argmax(row);
    }
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = row.iter().map(|&v| ((v - max) / tau).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    row.len() - 1
}

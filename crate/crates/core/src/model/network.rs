//! Forward passes of the vision encoder, projector and causal decoder.
//!
//! Every function records onto a caller-supplied tape so the same code
//! serves training (with gradients) and inference (all constants).

use linesight_autodiff::{Tape, Var};

use crate::error::{Error, Result};
use crate::model::config::{ModelConfig, LN_EPS};
use crate::model::image::{patchify, ImageRaster};
use crate::model::params::Bound;
use crate::model::tokenizer::{TokenId, IMAGE, PAD};
use crate::sequence::SerializedSequence;

fn layer_norm(tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let g = p.var(&format!("{prefix}.g"));
    let b = p.var(&format!("{prefix}.b"));
    Ok(tape.layer_norm(x, g, b, LN_EPS)?)
}

fn linear(tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let h = tape.matmul(x, p.var(&format!("{prefix}.w")))?;
    Ok(tape.add_row(h, p.var(&format!("{prefix}.b")))?)
}

fn attention(tape: &mut Tape, p: &Bound, prefix: &str, x: Var, heads: usize, causal: bool) -> Result<Var> {
    let width = tape.value(x).dims()[1];
    let head_dim = width / heads;
    let qkv = linear(tape, p, &format!("{prefix}.qkv"), x)?;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = tape.slice_cols(qkv, h * head_dim, head_dim)?;
        let k = tape.slice_cols(qkv, width + h * head_dim, head_dim)?;
        let v = tape.slice_cols(qkv, 2 * width + h * head_dim, head_dim)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, scale);
        let weights = if causal {
            tape.causal_softmax(scores)?
        } else {
            tape.softmax(scores)
        };
        outs.push(tape.matmul(weights, v)?);
    }
    let merged = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    linear(tape, p, &format!("{prefix}.out"), merged)
}

/// Pre-norm transformer block: `x + attn(ln1(x))`, then `x + mlp(ln2(x))`.
fn block(tape: &mut Tape, p: &Bound, prefix: &str, x: Var, heads: usize, causal: bool) -> Result<Var> {
    let h = layer_norm(tape, p, &format!("{prefix}.ln1"), x)?;
    let h = attention(tape, p, &format!("{prefix}.attn"), h, heads, causal)?;
    let x = tape.add(x, h)?;
    let h = layer_norm(tape, p, &format!("{prefix}.ln2"), x)?;
    let h = linear(tape, p, &format!("{prefix}.mlp.fc"), h)?;
    let h = tape.gelu(h);
    let h = linear(tape, p, &format!("{prefix}.mlp.proj"), h)?;
    Ok(tape.add(x, h)?)
}

fn check_geometry(cfg: &ModelConfig, image: &ImageRaster) -> Result<()> {
    if image.width() != cfg.image_width || image.height() != cfg.image_height {
        return Err(Error::Geometry(format!(
            "model expects {}x{} images, got {}x{}",
            cfg.image_width,
            cfg.image_height,
            image.width(),
            image.height()
        )));
    }
    Ok(())
}

/// Visual embeddings `[N, d_vision]` from patch embedding, learned
/// positions and bidirectional encoder blocks.
pub fn vision_encode(tape: &mut Tape, p: &Bound, cfg: &ModelConfig, image: &ImageRaster) -> Result<Var> {
    check_geometry(cfg, image)?;
    let patches = tape.constant(patchify(image, cfg.patch_size)?);
    let x = linear(tape, p, "vision.patch", patches)?;
    let mut x = tape.add(x, p.var("vision.pos"))?;
    for i in 0..cfg.vision_layers {
        x = block(tape, p, &format!("vision.blocks.{i}"), x, cfg.vision_heads, false)?;
    }
    layer_norm(tape, p, "vision.ln_f", x)
}

/// Image tokens `[N, d_model]`: the affine projection of the visual
/// embeddings (GELU between layers when `proj_depth > 1`).
pub fn project(tape: &mut Tape, p: &Bound, cfg: &ModelConfig, visual: Var) -> Result<Var> {
    let mut h = visual;
    for i in 0..cfg.proj_depth {
        if i > 0 {
            h = tape.gelu(h);
        }
        h = linear(tape, p, &format!("projector.{i}"), h)?;
    }
    Ok(h)
}

/// Image tokens straight from pixels.
pub fn image_tokens(tape: &mut Tape, p: &Bound, cfg: &ModelConfig, image: &ImageRaster) -> Result<Var> {
    let zv = vision_encode(tape, p, cfg, image)?;
    project(tape, p, cfg, zv)
}

/// Next-token logits `[L, V]` for input embeddings `[L, d_model]`. Row `i`
/// of the output depends only on input rows `0..=i`.
pub fn decoder_forward(tape: &mut Tape, p: &Bound, cfg: &ModelConfig, embeddings: Var) -> Result<Var> {
    let len = tape.value(embeddings).dims()[0];
    if len > cfg.context {
        return Err(Error::Length {
            len,
            context: cfg.context,
            sample: None,
        });
    }
    if len == 0 {
        return Err(Error::Input("decoder input is empty".into()));
    }
    let positions: Vec<usize> = (0..len).collect();
    let pos = tape.embedding(p.var("lm.pos_emb"), &positions)?;
    let mut x = tape.add(embeddings, pos)?;
    for i in 0..cfg.layers {
        x = block(tape, p, &format!("lm.blocks.{i}"), x, cfg.heads, true)?;
    }
    let x = layer_norm(tape, p, "lm.ln_f", x)?;
    linear(tape, p, "lm.head", x)
}

/// Decoder input with the image spliced in, plus targets and mask expanded
/// to the same positions.
#[derive(Debug, Clone)]
pub struct Assembled {
    pub embeddings: Var,
    pub targets: Vec<TokenId>,
    pub mask: Vec<bool>,
}

/// Maps tokens through the word-embedding table and replaces the image slot
/// with the rows of `image_tokens`.
pub fn assemble_input(
    tape: &mut Tape,
    p: &Bound,
    seq: &SerializedSequence,
    image_tokens: Option<Var>,
) -> Result<Assembled> {
    let table = p.var("lm.tok_emb");
    let slots = seq.tokens.iter().filter(|&&t| t == IMAGE).count();
    if slots != usize::from(seq.image_slot.is_some()) {
        return Err(Error::Splice(format!(
            "sequence holds {slots} image tokens, expected {}",
            usize::from(seq.image_slot.is_some())
        )));
    }
    match (seq.image_slot, image_tokens) {
        (None, None) => {
            let embeddings = tape.embedding(table, &seq.tokens)?;
            Ok(Assembled {
                embeddings,
                targets: seq.targets.clone(),
                mask: seq.loss_mask.clone(),
            })
        }
        (Some(slot), Some(hv)) => {
            let n = tape.value(hv).dims()[0];
            let before = tape.embedding(table, &seq.tokens[..slot])?;
            let after = tape.embedding(table, &seq.tokens[slot + 1..])?;
            let embeddings = tape.concat_rows(&[before, hv, after])?;
            // The last image row inherits the slot's prediction target.
            let mut targets = Vec::with_capacity(seq.len() + n - 1);
            targets.extend_from_slice(&seq.targets[..slot]);
            targets.extend(std::iter::repeat_n(PAD, n - 1));
            targets.extend_from_slice(&seq.targets[slot..]);
            let mut mask = Vec::with_capacity(targets.len());
            mask.extend_from_slice(&seq.loss_mask[..slot]);
            mask.extend(std::iter::repeat_n(false, n));
            mask.extend_from_slice(&seq.loss_mask[slot + 1..]);
            Ok(Assembled {
                embeddings,
                targets,
                mask,
            })
        }
        (Some(_), None) => Err(Error::Splice(
            "sequence has an image slot but no image tokens were supplied".into(),
        )),
        (None, Some(_)) => Err(Error::Splice(
            "image tokens supplied but the sequence has no image slot".into(),
        )),
    }
}

/// Mean supervised-token cross entropy of one serialized sample, returning
/// the loss node and the number of supervised positions.
pub fn sequence_loss(
    tape: &mut Tape,
    p: &Bound,
    cfg: &ModelConfig,
    seq: &SerializedSequence,
    image: Option<&ImageRaster>,
) -> Result<(Var, usize)> {
    let hv = image.map(|img| image_tokens(tape, p, cfg, img)).transpose()?;
    let asm = assemble_input(tape, p, seq, hv)?;
    let logits = decoder_forward(tape, p, cfg, asm.embeddings)?;
    let loss = tape.masked_cross_entropy(logits, &asm.targets, &asm.mask)?;
    Ok((loss, asm.mask.iter().filter(|&&m| m).count()))
}

//! Two-stage optimisation: projector-only alignment, then instruction
//! tuning of projector and language model, both with the vision encoder
//! frozen.

pub mod adamw;
pub mod mix;
pub mod schedule;

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use linesight_autodiff::{Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::checkpoint::CheckpointMeta;
use crate::model::image::ImageRaster;
use crate::model::network;
use crate::model::params::{FreezeSet, Module};
use crate::model::Model;
use crate::sequence::{ConversationSample, SequenceBuilder, SerializedSequence};

pub use adamw::{adamw_step, AdamWConfig, OptimizerState};
pub use mix::{apportion, data_mix, mix_sources, select_by_type, MixSpec};
pub use schedule::cosine_lr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    /// Feature alignment: only the projector learns.
    Pretrain,
    /// Instruction tuning: projector and language model learn.
    Finetune,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::Pretrain => 1,
            Stage::Finetune => 2,
        }
    }

    pub fn frozen_modules(self) -> FreezeSet {
        match self {
            Stage::Pretrain => [Module::Vision, Module::Language].into(),
            Stage::Finetune => [Module::Vision].into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageConfig {
    pub stage: Stage,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub batch_size: usize,
    /// Micro-batches accumulated into one optimizer step.
    pub grad_accum: usize,
    pub steps: usize,
    /// `None` means 3% of `steps`, rounded.
    pub warmup_steps: Option<usize>,
    pub weight_decay: f64,
    pub max_grad_norm: Option<f64>,
    pub checkpoint_every: Option<usize>,
    pub seed: u64,
}

impl StageConfig {
    pub fn new(stage: Stage) -> Self {
        let (peak_lr, batch_size) = match stage {
            Stage::Pretrain => (2e-4, 4),
            Stage::Finetune => (2e-5, 2),
        };
        StageConfig {
            stage,
            peak_lr,
            min_lr: 0.0,
            batch_size,
            grad_accum: 1,
            steps: 200,
            warmup_steps: None,
            weight_decay: 0.0,
            max_grad_norm: None,
            checkpoint_every: None,
            seed: 0,
        }
    }

    pub fn frozen_modules(&self) -> FreezeSet {
        self.stage.frozen_modules()
    }

    pub fn warmup(&self) -> usize {
        self.warmup_steps
            .unwrap_or_else(|| (self.steps as f64 * 0.03).round() as usize)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.steps == 0 {
            return fail("steps must be positive".into());
        }
        if self.warmup() >= self.steps {
            return fail(format!("warmup {} must be below steps {}", self.warmup(), self.steps));
        }
        if self.batch_size == 0 || self.grad_accum == 0 {
            return fail("batch size and accumulation must be positive".into());
        }
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) || !(0.0..=self.peak_lr).contains(&self.min_lr) {
            return fail(format!(
                "learning rates peak={} floor={} are invalid",
                self.peak_lr, self.min_lr
            ));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return fail(format!("weight decay {} is invalid", self.weight_decay));
        }
        if self.max_grad_norm.is_some_and(|c| !(c > 0.0)) || self.checkpoint_every == Some(0) {
            return fail("max_grad_norm and checkpoint_every must be positive when set".into());
        }
        Ok(())
    }
}

/// Fails unless `meta` comes from a finished or intermediate stage-1 run.
pub fn require_stage_one(meta: &CheckpointMeta) -> Result<()> {
    if meta.stage != Stage::Pretrain.number() {
        return Err(Error::Checkpoint(format!(
            "instruction tuning starts from a stage-1 checkpoint, this one is stage {}",
            meta.stage
        )));
    }
    Ok(())
}

/// A serialized sample and the index of its image in [`TrainingSet::images`].
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub id: String,
    pub seq: SerializedSequence,
    pub image: Option<usize>,
}

/// Serialized, length-checked training data with decoded images.
#[derive(Debug, Clone, Default)]
pub struct TrainingSet {
    pub samples: Vec<TrainSample>,
    pub images: Vec<ImageRaster>,
}

impl TrainingSet {
    /// Serializes every sample and loads its image through `load_image`
    /// (once per distinct reference). Stage-1 data must be single-turn and
    /// no sample may exceed the model context; both are checked up front.
    pub fn prepare(
        samples: &[ConversationSample],
        model: &Model,
        builder: &SequenceBuilder,
        stage: Stage,
        seed: u64,
        mut load_image: impl FnMut(&str) -> Result<ImageRaster>,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Input("training dataset is empty".into()));
        }
        let cfg = &model.config;
        let mut set = TrainingSet::default();
        let mut by_ref: HashMap<String, usize> = HashMap::new();
        for s in samples {
            if stage == Stage::Pretrain && s.turns.len() != 1 {
                return Err(Error::Input(format!(
                    "stage-1 data must be single-turn, sample {} has {} turns",
                    s.id,
                    s.turns.len()
                )));
            }
            let seq = builder.serialize(s, seed)?;
            let len = seq.model_len(cfg.num_patches());
            if len > cfg.context {
                return Err(Error::Length {
                    len,
                    context: cfg.context,
                    sample: Some(s.id.clone()),
                });
            }
            let image = match &s.image {
                None => None,
                Some(r) => Some(match by_ref.get(r) {
                    Some(&i) => i,
                    None => {
                        let img = load_image(r)?;
                        if img.width() != cfg.image_width || img.height() != cfg.image_height {
                            return Err(Error::Geometry(format!(
                                "image {r} is {}x{}, model expects {}x{}",
                                img.width(),
                                img.height(),
                                cfg.image_width,
                                cfg.image_height
                            )));
                        }
                        set.images.push(img);
                        by_ref.insert(r.clone(), set.images.len() - 1);
                        set.images.len() - 1
                    }
                }),
            };
            set.samples.push(TrainSample {
                id: s.id.clone(),
                seq,
                image,
            });
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Vision-encoder outputs for every image, for reuse while the encoder
    /// is frozen.
    pub fn visual_features(&self, model: &Model) -> Result<Vec<Tensor>> {
        self.images.iter().map(|img| model.encode_image(img)).collect()
    }
}

/// Loss and accumulated gradients of one effective batch.
#[derive(Debug, Clone)]
pub struct BatchResult {
    /// Mean cross entropy over every supervised token in the batch.
    pub loss: f64,
    pub tokens: usize,
    pub grads: BTreeMap<String, Tensor>,
}

/// Forward and backward over `batch` (indices into `set.samples`). Each
/// sample's mean loss is weighted by its share of the batch's supervised
/// tokens, so the result is the token-level mean. `visual`, when given,
/// replaces the vision encoder with cached outputs and requires the
/// encoder to be frozen.
pub fn batch_gradients(
    model: &Model,
    frozen: &FreezeSet,
    set: &TrainingSet,
    batch: &[usize],
    visual: Option<&[Tensor]>,
) -> Result<BatchResult> {
    if visual.is_some() && !frozen.contains(&Module::Vision) {
        return Err(Error::Input("cached visual features need a frozen encoder".into()));
    }
    let tokens: usize = batch.iter().map(|&i| set.samples[i].seq.supervised_count()).sum();
    if tokens == 0 {
        return Err(Error::Input("batch has no supervised tokens".into()));
    }
    let trainable: Vec<&str> = model
        .params
        .iter()
        .map(|(n, _)| n)
        .filter(|n| Module::of(n).is_some_and(|m| !frozen.contains(&m)))
        .collect();
    let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut loss = 0.0;
    for &i in batch {
        let sample = &set.samples[i];
        let n = sample.seq.supervised_count();
        if n == 0 {
            continue;
        }
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape, frozen);
        let cfg = &model.config;
        let hv = match (sample.image, visual) {
            (None, _) => None,
            (Some(k), Some(zv)) => {
                let zv = tape.constant(zv[k].clone());
                Some(network::project(&mut tape, &p, cfg, zv)?)
            }
            (Some(k), None) => Some(network::image_tokens(&mut tape, &p, cfg, &set.images[k])?),
        };
        let asm = network::assemble_input(&mut tape, &p, &sample.seq, hv)?;
        let logits = network::decoder_forward(&mut tape, &p, cfg, asm.embeddings)?;
        let l = tape.masked_cross_entropy(logits, &asm.targets, &asm.mask)?;
        let w = n as f64 / tokens as f64;
        loss += w * tape.value(l).item()?;
        let weighted = tape.scale(l, w);
        let grads = tape.backward(weighted)?;
        for name in &trainable {
            if let Some(g) = grads.get(p.var(name)) {
                let slot = acc.entry(name.to_string()).or_insert_with(|| vec![0.0; g.numel()]);
                for (a, v) in slot.iter_mut().zip(g.data()) {
                    *a += v;
                }
            }
        }
    }
    let mut grads = BTreeMap::new();
    for (name, data) in acc {
        let dims = model.params.get(&name)?.dims().to_vec();
        grads.insert(name, Tensor::new(&dims, data)?);
    }
    Ok(BatchResult { loss, tokens, grads })
}

fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) {
    let norm = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for g in grads.values_mut() {
            *g = g.map(|v| v * k);
        }
    }
}

/// One row of the loss log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub tokens: usize,
}

pub fn loss_csv(records: &[LossRecord]) -> String {
    let mut out = String::from("step,lr,loss,tokens\n");
    for r in records {
        let _ = writeln!(out, "{},{},{},{}", r.step, r.lr, r.loss, r.tokens);
    }
    out
}

pub fn write_loss_csv(path: &Path, records: &[LossRecord]) -> Result<()> {
    std::fs::write(path, loss_csv(records)).map_err(|e| Error::io(path, e))
}

/// Seeded endless stream of sample indices, reshuffled every epoch.
struct Sampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl Sampler {
    fn new(n: usize, seed: u64) -> Self {
        Sampler {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..n).collect(),
            cursor: n,
        }
    }

    fn next(&mut self) -> usize {
        if self.cursor == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }
}

/// Runs one stage in place on `model` and returns the per-step loss log.
/// `on_checkpoint` fires every `checkpoint_every` steps and after the last.
pub fn train_stage(
    model: &mut Model,
    cfg: &StageConfig,
    data: &TrainingSet,
    mut on_checkpoint: impl FnMut(usize, &Model) -> Result<()>,
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Input("training dataset is empty".into()));
    }
    let frozen = cfg.frozen_modules();
    let trainable: Vec<String> = model
        .params
        .iter()
        .map(|(n, _)| n)
        .filter(|n| Module::of(n).is_some_and(|m| !frozen.contains(&m)))
        .map(str::to_string)
        .collect();
    let mut state = OptimizerState::new(&model.params, trainable.iter().map(String::as_str))?;
    let visual = data.visual_features(model)?;
    let hyper = AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    };
    let warmup = cfg.warmup();
    let mut sampler = Sampler::new(data.len(), cfg.seed);
    let per_step = cfg.batch_size * cfg.grad_accum;
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let batch: Vec<usize> = (0..per_step).map(|_| sampler.next()).collect();
        let mut res = batch_gradients(model, &frozen, data, &batch, Some(&visual))?;
        if let Some(c) = cfg.max_grad_norm {
            clip_global_norm(&mut res.grads, c);
        }
        let lr = cosine_lr(step, warmup, cfg.steps, cfg.peak_lr, cfg.min_lr);
        adamw_step(&mut model.params, &res.grads, &mut state, lr, &hyper)?;
        log.push(LossRecord {
            step,
            lr,
            loss: res.loss,
            tokens: res.tokens,
        });
        let periodic = cfg.checkpoint_every.is_some_and(|n| step % n == 0);
        if periodic || step == cfg.steps {
            on_checkpoint(step, model)?;
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_defaults() {
        let s1 = StageConfig::new(Stage::Pretrain);
        assert_eq!((s1.peak_lr, s1.batch_size), (2e-4, 4));
        assert_eq!(s1.frozen_modules(), [Module::Vision, Module::Language].into());
        let s2 = StageConfig::new(Stage::Finetune);
        assert_eq!((s2.peak_lr, s2.batch_size), (2e-5, 2));
        assert_eq!(s2.frozen_modules(), [Module::Vision].into());
        assert_eq!(s2.warmup(), 6);
    }

    #[test]
    fn validate_rejects_bad_warmup() {
        let cfg = StageConfig {
            steps: 10,
            warmup_steps: Some(10),
            ..StageConfig::new(Stage::Finetune)
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn stage_two_requires_stage_one_checkpoint() {
        let mut meta = CheckpointMeta::default();
        meta.stage = 2;
        assert!(require_stage_one(&meta).is_err());
        meta.stage = 1;
        assert!(require_stage_one(&meta).is_ok());
    }

    #[test]
    fn sampler_visits_every_index_per_epoch() {
        let mut s = Sampler::new(5, 1);
        let mut first: Vec<usize> = (0..5).map(|_| s.next()).collect();
        first.sort();
        assert_eq!(first, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn csv_layout() {
        let rec = [LossRecord {
            step: 1,
            lr: 0.5,
            loss: 2.25,
            tokens: 7,
        }];
        assert_eq!(loss_csv(&rec), "step,lr,loss,tokens\n1,0.5,2.25,7\n");
    }
}

//! Stage-level behaviour: freeze sets, gradient accumulation and the
//! cached-feature shortcut.

use linesight_core::model::config::ModelConfig;
use linesight_core::model::image::ImageRaster;
use linesight_core::model::params::Module;
use linesight_core::model::Model;
use linesight_core::sequence::{ConversationSample, SequenceBuilder, DEFAULT_SYSTEM_PROMPT};
use linesight_core::synth::{caption_pairs, Scene};
use linesight_core::trainer::{batch_gradients, train_stage, Stage, StageConfig, TrainingSet};

fn world() -> (Vec<ConversationSample>, Vec<Scene>) {
    let scenes = Scene::all(1);
    (caption_pairs(&scenes, 0).unwrap(), scenes)
}

fn loader(scenes: &[Scene]) -> impl FnMut(&str) -> linesight_core::Result<ImageRaster> + '_ {
    |r| {
        let s = scenes.iter().find(|s| s.file_name() == r).expect("known scene");
        Ok(s.render())
    }
}

fn builder() -> SequenceBuilder {
    SequenceBuilder::new(DEFAULT_SYSTEM_PROMPT, Some(256), 16)
}

#[test]
fn each_stage_moves_only_its_trainable_modules() {
    let (pairs, scenes) = world();
    let mut model = Model::init(ModelConfig::default(), 0).unwrap();
    let init = model.clone();
    let set = TrainingSet::prepare(&pairs, &model, &builder(), Stage::Pretrain, 0, loader(&scenes)).unwrap();
    let digest = |m: &Model, module| m.params.module_digest(module);

    let cfg = StageConfig {
        steps: 100,
        ..StageConfig::new(Stage::Pretrain)
    };
    train_stage(&mut model, &cfg, &set, |_, _| Ok(())).unwrap();
    assert_eq!(digest(&model, Module::Vision), digest(&init, Module::Vision));
    assert_eq!(digest(&model, Module::Language), digest(&init, Module::Language));
    assert_ne!(digest(&model, Module::Projection), digest(&init, Module::Projection));

    let after_one = model.clone();
    let cfg = StageConfig {
        steps: 100,
        ..StageConfig::new(Stage::Finetune)
    };
    train_stage(&mut model, &cfg, &set, |_, _| Ok(())).unwrap();
    assert_eq!(digest(&model, Module::Vision), digest(&init, Module::Vision));
    assert_ne!(digest(&model, Module::Language), digest(&after_one, Module::Language));
    assert_ne!(
        digest(&model, Module::Projection),
        digest(&after_one, Module::Projection)
    );
}

#[test]
fn batch_gradient_does_not_depend_on_sample_order() {
    let (pairs, scenes) = world();
    let model = Model::init(ModelConfig::default(), 1).unwrap();
    let set = TrainingSet::prepare(&pairs[..6], &model, &builder(), Stage::Finetune, 0, loader(&scenes)).unwrap();
    let frozen = Stage::Finetune.frozen_modules();
    let a = batch_gradients(&model, &frozen, &set, &[0, 1, 2, 3], None).unwrap();
    let b = batch_gradients(&model, &frozen, &set, &[3, 1, 0, 2], None).unwrap();
    assert!((a.loss - b.loss).abs() < 1e-12);
    assert_eq!(a.grads.keys().collect::<Vec<_>>(), b.grads.keys().collect::<Vec<_>>());
    for (name, g) in &a.grads {
        for (x, y) in g.data().iter().zip(b.grads[name].data()) {
            assert!((x - y).abs() < 1e-12, "{name}");
        }
    }
}

#[test]
fn batch_loss_is_the_token_mean_over_the_batch() {
    let (pairs, scenes) = world();
    let model = Model::init(ModelConfig::default(), 2).unwrap();
    let set = TrainingSet::prepare(&pairs[..3], &model, &builder(), Stage::Finetune, 0, loader(&scenes)).unwrap();
    let frozen = Stage::Finetune.frozen_modules();
    let r = batch_gradients(&model, &frozen, &set, &[0, 1, 2], None).unwrap();
    let mut total = 0.0;
    let mut tokens = 0;
    for s in &set.samples {
        let n = s.seq.supervised_count();
        let img = &set.images[s.image.unwrap()];
        total += model.loss(&s.seq, Some(img)).unwrap() * n as f64;
        tokens += n;
    }
    assert_eq!(r.tokens, tokens);
    assert!((r.loss - total / tokens as f64).abs() < 1e-12);
}

#[test]
fn cached_visual_features_reproduce_the_full_forward() {
    let (pairs, scenes) = world();
    let model = Model::init(ModelConfig::default(), 3).unwrap();
    let set = TrainingSet::prepare(&pairs[..4], &model, &builder(), Stage::Pretrain, 0, loader(&scenes)).unwrap();
    let frozen = Stage::Pretrain.frozen_modules();
    let visual = set.visual_features(&model).unwrap();
    let cached = batch_gradients(&model, &frozen, &set, &[0, 1, 2, 3], Some(&visual)).unwrap();
    let fresh = batch_gradients(&model, &frozen, &set, &[0, 1, 2, 3], None).unwrap();
    assert_eq!(cached.loss.to_bits(), fresh.loss.to_bits());
    assert_eq!(cached.grads, fresh.grads);
    assert!(batch_gradients(&model, &Default::default(), &set, &[0], Some(&visual)).is_err());
}

#[test]
fn stage_one_rejects_multi_turn_data() {
    let (mut pairs, scenes) = world();
    let extra = pairs[0].turns[0].clone();
    pairs[0].turns.push(extra);
    let model = Model::init(ModelConfig::default(), 0).unwrap();
    let err = TrainingSet::prepare(&pairs, &model, &builder(), Stage::Pretrain, 0, loader(&scenes)).unwrap_err();
    assert!(err.to_string().contains(&pairs[0].id), "{err}");
}

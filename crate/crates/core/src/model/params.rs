//! Named parameter tensors for the three model modules.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use linesight_autodiff::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;

/// Top-level model component a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Module {
    Vision,
    Projection,
    Language,
}

impl Module {
    pub const ALL: [Module; 3] = [Module::Vision, Module::Projection, Module::Language];

    pub fn prefix(self) -> &'static str {
        match self {
            Module::Vision => "vision.",
            Module::Projection => "projector.",
            Module::Language => "lm.",
        }
    }

    pub fn of(name: &str) -> Option<Module> {
        Module::ALL.into_iter().find(|m| name.starts_with(m.prefix()))
    }

    pub fn parse(s: &str) -> Option<Module> {
        match s {
            "vision" => Some(Module::Vision),
            "projection" | "projector" => Some(Module::Projection),
            "lm" | "language" => Some(Module::Language),
            _ => None,
        }
    }
}

impl fmt::Display for Module {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Module::Vision => "vision",
            Module::Projection => "projection",
            Module::Language => "lm",
        })
    }
}

/// Parameter subset excluded from optimisation.
pub type FreezeSet = BTreeSet<Module>;

#[derive(Debug, Clone, Copy)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

const INIT_STD: f64 = 0.02;

fn block_specs(out: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str, width: usize, ratio: usize) {
    let mut add = |n: &str, dims: Vec<usize>, init| out.push((format!("{prefix}.{n}"), dims, init));
    add("ln1.g", vec![width], Init::Ones);
    add("ln1.b", vec![width], Init::Zeros);
    add("attn.qkv.w", vec![width, 3 * width], Init::Normal);
    add("attn.qkv.b", vec![3 * width], Init::Zeros);
    add("attn.out.w", vec![width, width], Init::Normal);
    add("attn.out.b", vec![width], Init::Zeros);
    add("ln2.g", vec![width], Init::Ones);
    add("ln2.b", vec![width], Init::Zeros);
    add("mlp.fc.w", vec![width, ratio * width], Init::Normal);
    add("mlp.fc.b", vec![ratio * width], Init::Zeros);
    add("mlp.proj.w", vec![ratio * width, width], Init::Normal);
    add("mlp.proj.b", vec![width], Init::Zeros);
}

/// Every parameter of a model built from `cfg`, in initialisation order.
fn specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut s = Vec::new();
    let (dv, dm) = (cfg.d_vision, cfg.d_model);
    s.push(("vision.patch.w".into(), vec![cfg.patch_dim(), dv], Init::Normal));
    s.push(("vision.patch.b".into(), vec![dv], Init::Zeros));
    s.push(("vision.pos".into(), vec![cfg.num_patches(), dv], Init::Normal));
    for i in 0..cfg.vision_layers {
        block_specs(&mut s, &format!("vision.blocks.{i}"), dv, cfg.mlp_ratio);
    }
    s.push(("vision.ln_f.g".into(), vec![dv], Init::Ones));
    s.push(("vision.ln_f.b".into(), vec![dv], Init::Zeros));
    for i in 0..cfg.proj_depth {
        let fan_in = if i == 0 { dv } else { dm };
        s.push((format!("projector.{i}.w"), vec![fan_in, dm], Init::Normal));
        s.push((format!("projector.{i}.b"), vec![dm], Init::Zeros));
    }
    s.push(("lm.tok_emb".into(), vec![cfg.vocab_size, dm], Init::Normal));
    s.push(("lm.pos_emb".into(), vec![cfg.context, dm], Init::Normal));
    for i in 0..cfg.layers {
        block_specs(&mut s, &format!("lm.blocks.{i}"), dm, cfg.mlp_ratio);
    }
    s.push(("lm.ln_f.g".into(), vec![dm], Init::Ones));
    s.push(("lm.ln_f.b".into(), vec![dm], Init::Zeros));
    s.push(("lm.head.w".into(), vec![dm, cfg.vocab_size], Init::Normal));
    s.push(("lm.head.b".into(), vec![cfg.vocab_size], Init::Zeros));
    s
}

/// All weights of the model keyed by dotted name.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParameters {
    /// Seeded random initialisation: N(0, 0.02) weights, zero biases, unit
    /// layer-norm gains.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut tensors = BTreeMap::new();
        for (name, dims, init) in specs(cfg) {
            let n: usize = dims.iter().product();
            let data = match init {
                Init::Normal => (0..n).map(|_| normal.sample(&mut rng)).collect(),
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
            };
            tensors.insert(name, Tensor::new(&dims, data)?);
        }
        Ok(ModelParameters { tensors })
    }

    /// Builds a store from explicit tensors, checking names and shapes
    /// against `cfg`.
    pub fn from_tensors(cfg: &ModelConfig, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        let expected: BTreeMap<_, _> = specs(cfg).into_iter().map(|(n, d, _)| (n, d)).collect();
        for (name, dims) in &expected {
            match tensors.get(name) {
                None => return Err(Error::Checkpoint(format!("missing parameter {name}"))),
                Some(t) if t.dims() != dims.as_slice() => {
                    return Err(Error::Checkpoint(format!(
                        "parameter {name} has shape {:?}, expected {dims:?}",
                        t.dims()
                    )))
                }
                _ => {}
            }
        }
        if let Some(extra) = tensors.keys().find(|k| !expected.contains_key(*k)) {
            return Err(Error::Checkpoint(format!("unexpected parameter {extra}")));
        }
        Ok(ModelParameters { tensors })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Input(format!("unknown parameter {name}")))
    }

    /// Replaces a tensor, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::Input(format!("unknown parameter {name}")))?;
        if slot.dims() != value.dims() {
            return Err(Error::Input(format!(
                "parameter {name}: shape {:?} does not match {:?}",
                value.dims(),
                slot.dims()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self, module: Module) -> impl Iterator<Item = &str> {
        self.tensors
            .keys()
            .map(String::as_str)
            .filter(move |n| n.starts_with(module.prefix()))
    }

    pub fn count(&self, module: Module) -> usize {
        self.names(module).map(|n| self.tensors[n].numel()).sum()
    }

    /// SHA-256 over the names and little-endian bytes of one module's blobs.
    pub fn module_digest(&self, module: Module) -> String {
        let mut h = Sha256::new();
        for name in self.names(module) {
            h.update(name.as_bytes());
            for v in self.tensors[name].data() {
                h.update(v.to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }

    /// Records every parameter on `tape`. Parameters of frozen modules
    /// become constants so no gradient is ever computed for them.
    pub fn bind(&self, tape: &mut Tape, frozen: &FreezeSet) -> Bound {
        let mut vars = HashMap::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let trainable = Module::of(name).is_some_and(|m| !frozen.contains(&m));
            vars.insert(name.clone(), tape.leaf(t.clone(), trainable));
        }
        Bound { vars }
    }
}

/// Tape handles for a bound [`ModelParameters`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} was not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded() {
        let cfg = ModelConfig::default();
        let a = ModelParameters::init(&cfg, 1).unwrap();
        let b = ModelParameters::init(&cfg, 1).unwrap();
        let c = ModelParameters::init(&cfg, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.module_digest(Module::Language), c.module_digest(Module::Language));
    }

    #[test]
    fn every_parameter_belongs_to_a_module() {
        let p = ModelParameters::init(&ModelConfig::default(), 0).unwrap();
        for (name, _) in p.iter() {
            assert!(Module::of(name).is_some(), "{name}");
        }
        assert_eq!(p.count(Module::Projection), 64 * 64 + 64);
    }

    #[test]
    fn set_checks_shape() {
        let mut p = ModelParameters::init(&ModelConfig::default(), 0).unwrap();
        assert!(p.set("projector.0.b", Tensor::zeros(&[3]).unwrap()).is_err());
        p.set("projector.0.b", Tensor::ones(&[64]).unwrap()).unwrap();
        assert_eq!(p.get("projector.0.b").unwrap().data()[0], 1.0);
    }

    #[test]
    fn from_tensors_rejects_missing_names() {
        let cfg = ModelConfig::default();
        let p = ModelParameters::init(&cfg, 0).unwrap();
        let mut map: BTreeMap<_, _> = p.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
        assert!(ModelParameters::from_tensors(&cfg, map.clone()).is_ok());
        map.remove("lm.head.b");
        assert!(ModelParameters::from_tensors(&cfg, map).is_err());
    }
}

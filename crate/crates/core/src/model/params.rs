use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::tape::{Scalar, Tensor};
use super::ModelConfig;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParamsError {
    #[error("missing parameter {0}")]
    Missing(String),
    #[error("unexpected parameter {0}")]
    Unexpected(String),
    #[error("parameter {name} has shape {found:?}, expected {expected:?}")]
    Shape { name: String, expected: (usize, usize), found: (usize, usize) },
    #[error("parameter {0} has a non-finite value")]
    NonFinite(String),
}

/// Named weight matrices addressed by dotted paths.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<S> {
    pub arrays: BTreeMap<String, Tensor<S>>,
}

pub type ModelParameters = Params<f32>;

#[derive(Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    /// Uniform in `±1/√fan_in`.
    Fan(usize),
    Unit,
}

fn layout(cfg: &ModelConfig) -> Vec<(String, (usize, usize), Init)> {
    let mut out = Vec::new();
    let mut add = |name: String, shape: (usize, usize), init: Init| out.push((name, shape, init));
    let mut cin = 1;
    for (i, l) in cfg.encoder_layers.iter().enumerate() {
        let fan = l.kernel * cin;
        add(format!("encoder.conv{i}.weight"), (fan, l.channels), Init::Fan(fan));
        add(format!("encoder.conv{i}.bias"), (1, l.channels), Init::Zeros);
        add(format!("encoder.norm{i}.gamma"), (1, l.channels), Init::Ones);
        add(format!("encoder.norm{i}.beta"), (1, l.channels), Init::Zeros);
        cin = l.channels;
    }
    let (e, d, f) = (cfg.encoder_dim(), cfg.model_dim, cfg.ffn_dim);
    let linear = |add: &mut dyn FnMut(String, (usize, usize), Init), name: &str, i: usize, o: usize| {
        add(format!("{name}.weight"), (i, o), Init::Fan(i));
        add(format!("{name}.bias"), (1, o), Init::Zeros);
    };
    let norm = |add: &mut dyn FnMut(String, (usize, usize), Init), name: &str, n: usize| {
        add(format!("{name}.gamma"), (1, n), Init::Ones);
        add(format!("{name}.beta"), (1, n), Init::Zeros);
    };
    norm(&mut add, "proj.norm", e);
    linear(&mut add, "proj", e, d);
    add("mask_emb".into(), (1, d), Init::Unit);
    for l in 0..cfg.num_transformer_layers {
        norm(&mut add, &format!("layers.{l}.attn_norm"), d);
        linear(&mut add, &format!("layers.{l}.attn.qkv"), d, 3 * d);
        linear(&mut add, &format!("layers.{l}.attn.out"), d, d);
        norm(&mut add, &format!("layers.{l}.ffn_norm"), d);
        linear(&mut add, &format!("layers.{l}.ffn.in"), d, f);
        linear(&mut add, &format!("layers.{l}.ffn.out"), f, d);
    }
    norm(&mut add, "final_norm", d);
    let (g, v, q) = (cfg.quantizer_groups, cfg.entries_per_group, cfg.codevector_dim);
    linear(&mut add, "quantizer.logits", e, g * v);
    add("quantizer.codebook".into(), (g * v, q / g), Init::Unit);
    linear(&mut add, "final_proj", d, q);
    if let Some(n) = cfg.vocab_size {
        linear(&mut add, "ctc_head", d, n);
    }
    out
}

fn draw<S: Scalar>(rng: &mut ChaCha8Rng, shape: (usize, usize), init: Init) -> Tensor<S> {
    let n = shape.0 * shape.1;
    let data = match init {
        Init::Zeros => (0..n).map(|_| S::zero()).collect(),
        Init::Ones => (0..n).map(|_| S::one()).collect(),
        Init::Fan(fan) => {
            let a = 1.0 / libm::sqrt(fan as f64);
            (0..n).map(|_| S::of(rng.gen_range(-a..a))).collect()
        }
        Init::Unit => (0..n).map(|_| S::of(rng.gen_range(-1.0..1.0))).collect(),
    };
    Tensor::from_vec(shape.0, shape.1, data)
}

/// Derives an independent stream for each array so that adding or removing
/// arrays leaves the others untouched.
fn array_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h)
}

impl<S: Scalar> Params<S> {
    /// Names and shapes of every array `cfg` calls for.
    pub fn shapes(cfg: &ModelConfig) -> BTreeMap<String, (usize, usize)> {
        layout(cfg).into_iter().map(|(n, s, _)| (n, s)).collect()
    }

    /// Weights uniform in `±1/√fan_in`, zero biases, unit layer-norm gains,
    /// and codebook and mask embedding uniform in `±1`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let arrays = layout(cfg).into_iter().map(|(name, shape, init)| {
            let t = draw(&mut array_rng(seed, &name), shape, init);
            (name, t)
        });
        Self { arrays: arrays.collect() }
    }

    /// Adds any arrays `cfg` needs that are missing, such as a fresh CTC head.
    pub fn complete(&mut self, cfg: &ModelConfig, seed: u64) {
        for (name, shape, init) in layout(cfg) {
            if !self.arrays.contains_key(&name) {
                let t = draw(&mut array_rng(seed, &name), shape, init);
                self.arrays.insert(name, t);
            }
        }
    }

    /// Checks that the names and shapes are exactly those of `cfg`.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<(), ParamsError> {
        let shapes = Self::shapes(cfg);
        for (name, &expected) in &shapes {
            let t = self.arrays.get(name).ok_or_else(|| ParamsError::Missing(name.clone()))?;
            if t.shape() != expected {
                return Err(ParamsError::Shape { name: name.clone(), expected, found: t.shape() });
            }
            if !t.is_finite() {
                return Err(ParamsError::NonFinite(name.clone()));
            }
        }
        if let Some(name) = self.arrays.keys().find(|n| !shapes.contains_key(*n)) {
            return Err(ParamsError::Unexpected(name.clone()));
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> &Tensor<S> {
        self.arrays.get(name).unwrap_or_else(|| panic!("no parameter named {name}"))
    }

    pub fn cast<T: Scalar>(&self) -> Params<T> {
        Params { arrays: self.arrays.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    pub fn count(&self) -> usize {
        self.arrays.values().map(|t| t.data.len()).sum()
    }
}

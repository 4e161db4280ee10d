use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::Rng;
use thiserror::Error;

use super::params::{Params, ParamsError};
use super::tape::{Scalar, Tape, Tensor, Var};
use super::ModelConfig;
use crate::corpus::AudioClip;
use crate::ctc::{ctc_loss, min_frames, CtcError, LogProbLattice};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(&'static str),
    #[error("input of {samples} samples is shorter than the {needed}-sample receptive field")]
    TooShort { samples: usize, needed: usize },
    #[error("CTC head has {head} outputs but the vocabulary has {vocab}")]
    VocabMismatch { head: usize, vocab: usize },
    #[error("model has no CTC head")]
    NoCtcHead,
    #[error("input must be mono at {expected} Hz, got {channels} channel(s) at {rate} Hz")]
    Format { expected: u32, rate: u32, channels: u16 },
    #[error(transparent)]
    Params(#[from] ParamsError),
    #[error(transparent)]
    Ctc(#[from] CtcError),
}

/// Encoder output length for `samples` input samples, or `None` when the
/// input is shorter than the receptive field.
pub fn frame_count(cfg: &ModelConfig, samples: usize) -> Option<usize> {
    cfg.encoder_layers.iter().try_fold(samples, |len, l| (len >= l.kernel).then(|| (len - l.kernel) / l.stride + 1))
}

/// A tape plus the parameter leaves registered on it so far.
#[derive(Debug)]
pub struct Graph<'p, S> {
    pub tape: Tape<S>,
    params: &'p Params<S>,
    vars: BTreeMap<String, Var>,
    trainable: bool,
    freeze_encoder: bool,
}

impl<'p, S: Scalar> Graph<'p, S> {
    /// A graph whose parameters receive gradients, except encoder arrays
    /// when `freeze_encoder` is set.
    pub fn training(params: &'p Params<S>, freeze_encoder: bool) -> Self {
        Self { tape: Tape::new(), params, vars: BTreeMap::new(), trainable: true, freeze_encoder }
    }

    pub fn inference(params: &'p Params<S>) -> Self {
        Self { tape: Tape::new(), params, vars: BTreeMap::new(), trainable: false, freeze_encoder: false }
    }

    pub fn param(&mut self, name: &str) -> Var {
        if let Some(&v) = self.vars.get(name) {
            return v;
        }
        let grad = self.trainable && !(self.freeze_encoder && name.starts_with("encoder."));
        let v = self.tape.leaf(self.params.get(name).clone(), grad);
        self.vars.insert(name.into(), v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        self.tape.value(v)
    }

    /// Gradients of `output` for every parameter that took part and is
    /// trainable.
    pub fn gradients(&self, output: Var) -> BTreeMap<String, Tensor<S>> {
        let mut grads = self.tape.backward(output);
        self.vars.iter().filter_map(|(name, &v)| grads.take(v).map(|g| (name.clone(), g))).collect()
    }

    fn linear(&mut self, x: Var, name: &str) -> Var {
        let w = self.param(&format!("{name}.weight"));
        let b = self.param(&format!("{name}.bias"));
        self.tape.linear(x, w, b)
    }

    fn norm(&mut self, x: Var, name: &str) -> Var {
        let g = self.param(&format!("{name}.gamma"));
        let b = self.param(&format!("{name}.beta"));
        self.tape.layer_norm(x, g, b)
    }

    /// Convolutional encoder over raw samples; each layer is conv, layer
    /// norm over channels, GELU. Returns `T × C`.
    pub fn encode(&mut self, cfg: &ModelConfig, audio: &[S]) -> Result<Var, ModelError> {
        let needed = cfg.receptive_field();
        if frame_count(cfg, audio.len()).is_none() {
            return Err(ModelError::TooShort { samples: audio.len(), needed });
        }
        let mut h = self.tape.constant(Tensor::from_vec(audio.len(), 1, audio.to_vec()));
        for (i, l) in cfg.encoder_layers.iter().enumerate() {
            let w = self.param(&format!("encoder.conv{i}.weight"));
            let b = self.param(&format!("encoder.conv{i}.bias"));
            h = self.tape.conv1d(h, w, b, l.kernel, l.stride);
            h = self.norm(h, &format!("encoder.norm{i}"));
            h = self.tape.gelu(h);
        }
        Ok(h)
    }

    /// Normalized encoder output (the quantizer input) and its projection to
    /// the model width.
    pub fn project(&mut self, z: Var) -> (Var, Var) {
        let y = self.norm(z, "proj.norm");
        let x = self.linear(y, "proj");
        (y, x)
    }

    /// Masking, sinusoidal positions and the pre-norm transformer stack.
    pub fn context(&mut self, cfg: &ModelConfig, x: Var, mask: Option<&[bool]>) -> Var {
        let mut x = x;
        if let Some(mask) = mask {
            let emb = self.param("mask_emb");
            x = self.tape.mask_rows(x, emb, mask);
        }
        let (frames, d) = self.value(x).shape();
        let pos = self.tape.constant(sinusoidal_positions(frames, d));
        x = self.tape.add(x, pos);
        let heads = cfg.num_heads;
        let dh = d / heads;
        let scale = S::of(1.0 / libm::sqrt(dh as f64));
        for l in 0..cfg.num_transformer_layers {
            let a = self.norm(x, &format!("layers.{l}.attn_norm"));
            let qkv = self.linear(a, &format!("layers.{l}.attn.qkv"));
            let mut outs = Vec::with_capacity(heads);
            for h in 0..heads {
                let q = self.tape.slice_cols(qkv, h * dh, dh);
                let k = self.tape.slice_cols(qkv, d + h * dh, dh);
                let v = self.tape.slice_cols(qkv, 2 * d + h * dh, dh);
                let s = self.tape.matmul_t(q, k);
                let s = self.tape.scale(s, scale);
                let p = self.tape.softmax_rows(s);
                outs.push(self.tape.matmul(p, v));
            }
            let o = if heads == 1 { outs[0] } else { self.tape.concat_cols(&outs) };
            let o = self.linear(o, &format!("layers.{l}.attn.out"));
            x = self.tape.add(x, o);
            let f = self.norm(x, &format!("layers.{l}.ffn_norm"));
            let f = self.linear(f, &format!("layers.{l}.ffn.in"));
            let f = self.tape.gelu(f);
            let f = self.linear(f, &format!("layers.{l}.ffn.out"));
            x = self.tape.add(x, f);
        }
        self.norm(x, "final_norm")
    }

    /// Log-probabilities of the CTC head, `T × vocab_size`, optionally with
    /// masked frames.
    pub fn ctc_log_probs(&mut self, cfg: &ModelConfig, audio: &[S], mask: Option<&[bool]>) -> Result<Var, ModelError> {
        if cfg.vocab_size.is_none() {
            return Err(ModelError::NoCtcHead);
        }
        let z = self.encode(cfg, audio)?;
        let (_, x) = self.project(z);
        let c = self.context(cfg, x, mask);
        let logits = self.linear(c, "ctc_head");
        Ok(self.tape.log_softmax_rows(logits))
    }
}

/// `T × d` table with `sin` on even and `cos` on odd columns.
pub fn sinusoidal_positions<S: Scalar>(frames: usize, dim: usize) -> Tensor<S> {
    let mut t = Tensor::zeros(frames, dim);
    for p in 0..frames {
        for i in 0..dim {
            let rate = libm::pow(10_000.0f64, (2 * (i / 2)) as f64 / dim as f64);
            let angle = p as f64 / rate;
            t.data[p * dim + i] = S::of(if i % 2 == 0 { libm::sin(angle) } else { libm::cos(angle) });
        }
    }
    t
}

/// Quantizer output on a graph.
#[derive(Debug, Clone)]
pub struct Quantized {
    /// `T × codevector_dim`, the concatenated group codewords.
    pub vectors: Var,
    /// Per group, the `1 × V` mean over frames of the code probabilities.
    pub mean_probs: Vec<Var>,
    /// `1 × 1` sum over groups of `exp(entropy)` of the mean probabilities.
    pub perplexity: Var,
}

/// Product quantization of `features` (`T × C`). With `gumbel` set to
/// per-group noise the selection is a Gumbel-softmax sample at temperature
/// `tau`, hard (straight-through) or soft; without it the selection is the
/// argmax of the logits.
pub fn quantize<S: Scalar>(
    g: &mut Graph<'_, S>,
    cfg: &ModelConfig,
    features: Var,
    gumbel: Option<&[Tensor<S>]>,
    tau: S,
    hard: bool,
) -> Quantized {
    let (groups, entries) = (cfg.quantizer_groups, cfg.entries_per_group);
    let logits = g.linear(features, "quantizer.logits");
    let frames = g.value(logits).rows;
    let codebook = g.param("quantizer.codebook");
    let mut vectors = Vec::with_capacity(groups);
    let mut mean_probs = Vec::with_capacity(groups);
    let mut perplexities = Vec::with_capacity(groups);
    for k in 0..groups {
        let lg = g.tape.slice_cols(logits, k * entries, entries);
        let select = match gumbel {
            Some(noise) => g.tape.gumbel_softmax(lg, &noise[k], tau, hard),
            None => g.tape.gumbel_softmax(lg, &Tensor::zeros(frames, entries), S::one(), true),
        };
        let book = g.tape.slice_rows(codebook, k * entries, entries);
        vectors.push(g.tape.matmul(select, book));
        let probs = g.tape.softmax_rows(lg);
        let mean = g.tape.mean_rows(probs);
        let safe = g.tape.add_scalar(mean, S::of(1e-7));
        let log = g.tape.ln(safe);
        let plogp = g.tape.mul(mean, log);
        let neg_entropy = g.tape.sum(plogp);
        let entropy = g.tape.scale(neg_entropy, -S::one());
        perplexities.push(g.tape.exp(entropy));
        mean_probs.push(mean);
    }
    let vectors = if groups == 1 { vectors[0] } else { g.tape.concat_cols(&vectors) };
    let stacked = if groups == 1 { perplexities[0] } else { g.tape.concat_cols(&perplexities) };
    let perplexity = g.tape.sum(stacked);
    Quantized { vectors, mean_probs, perplexity }
}

/// InfoNCE over cosine similarity: for each masked frame `t`, the
/// candidates are `q_t` followed by `q_d` for each distractor `d`. Returns
/// the mean over masked frames of the negative log-probability of `q_t`.
pub fn contrastive_loss<S: Scalar>(
    tape: &mut Tape<S>,
    context: Var,
    targets: Var,
    masked: &[usize],
    negatives: &[Vec<usize>],
    kappa: S,
) -> Var {
    assert_eq!(masked.len(), negatives.len());
    assert!(!masked.is_empty(), "contrastive loss needs a masked frame");
    let width = negatives[0].len() + 1;
    let mut rows_c = Vec::with_capacity(masked.len() * width);
    let mut rows_q = Vec::with_capacity(masked.len() * width);
    for (&t, negs) in masked.iter().zip(negatives) {
        assert_eq!(negs.len() + 1, width);
        rows_c.extend(core::iter::repeat(t).take(width));
        rows_q.push(t);
        rows_q.extend_from_slice(negs);
    }
    let cn = tape.l2_normalize_rows(context);
    let qn = tape.l2_normalize_rows(targets);
    let c = tape.gather_rows(cn, &rows_c);
    let q = tape.gather_rows(qn, &rows_q);
    let prod = tape.mul(c, q);
    let sims = tape.row_sum(prod);
    let sims = tape.reshape(sims, masked.len(), width);
    let logits = tape.scale(sims, S::one() / kappa);
    let logp = tape.log_softmax_rows(logits);
    let picked = tape.pick_cols(logp, &vec![0; masked.len()]);
    let total = tape.sum(picked);
    tape.scale(total, -S::one() / S::of(masked.len() as f64))
}

/// Draws span-mask starts without replacement from the `frames − span + 1`
/// valid positions. The number of starts is `p · (frames − span + 1)`
/// rounded stochastically, and at least `min_starts`.
pub fn sample_mask(frames: usize, p: f64, span: usize, min_starts: usize, rng: &mut impl Rng) -> Vec<bool> {
    let mut mask = vec![false; frames];
    if frames < span || span == 0 {
        return mask;
    }
    let candidates = frames - span + 1;
    let expected = p * candidates as f64;
    let mut starts = libm::floor(expected) as usize;
    if rng.gen::<f64>() < expected - starts as f64 {
        starts += 1;
    }
    let starts = starts.max(min_starts).min(candidates);
    let mut chosen = sample(rng, candidates, starts).into_vec();
    chosen.sort_unstable();
    for s in chosen {
        mask[s..s + span].iter_mut().for_each(|m| *m = true);
    }
    mask
}

/// Replaces sampled spans of `frames` with `mask_emb`; returns the masked
/// frames and the sorted masked indices.
pub fn apply_masking(
    frames: &Tensor<f32>,
    mask_emb: &[f32],
    p: f64,
    span: usize,
    rng: &mut impl Rng,
) -> (Tensor<f32>, Vec<usize>) {
    let mask = sample_mask(frames.rows, p, span, 0, rng);
    let mut out = frames.clone();
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        out.row_mut(i).copy_from_slice(mask_emb);
    }
    (out, mask_indices(&mask))
}

fn mask_indices(mask: &[bool]) -> Vec<usize> {
    mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
}

/// All random choices of one pretraining step.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainNoise<S> {
    pub mask: Vec<bool>,
    /// Distractor frames for each masked frame, in mask order.
    pub negatives: Vec<Vec<usize>>,
    /// Standard Gumbel noise, one `T × V` matrix per group.
    pub gumbel: Vec<Tensor<S>>,
    /// Set when too few masked frames forced sampling with replacement.
    pub with_replacement: bool,
}

impl<S: Scalar> PretrainNoise<S> {
    /// Masks at least one span. Distractors come from the other masked
    /// frames, without replacement when there are at least `K` of them; with
    /// a single masked frame they come from the unmasked frames instead.
    pub fn sample(cfg: &ModelConfig, frames: usize, rng: &mut impl Rng) -> Self {
        let span = cfg.mask_span.min(frames);
        let mask = sample_mask(frames, cfg.mask_prob, span, 1, rng);
        let masked = mask_indices(&mask);
        let k = cfg.num_negatives;
        let mut with_replacement = false;
        let negatives = masked
            .iter()
            .map(|&t| {
                let mut pool: Vec<usize> = masked.iter().copied().filter(|&i| i != t).collect();
                if pool.is_empty() {
                    pool = (0..frames).filter(|&i| i != t).collect();
                }
                if pool.is_empty() {
                    pool.push(t);
                }
                if pool.len() >= k {
                    sample(rng, pool.len(), k).into_iter().map(|i| pool[i]).collect()
                } else {
                    with_replacement = true;
                    (0..k).map(|_| pool[rng.gen_range(0..pool.len())]).collect()
                }
            })
            .collect();
        let entries = cfg.entries_per_group;
        let gumbel = (0..cfg.quantizer_groups)
            .map(|_| {
                let data = (0..frames * entries)
                    .map(|_| {
                        let u: f64 = rng.gen_range(f64::EPSILON..1.0);
                        S::of(-libm::log(-libm::log(u)))
                    })
                    .collect();
                Tensor::from_vec(frames, entries, data)
            })
            .collect();
        Self { mask, negatives, gumbel, with_replacement }
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        mask_indices(&self.mask)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainStepOutput {
    pub contrastive_loss: f64,
    pub diversity_loss: f64,
    /// Sum over groups of the per-group perplexity.
    pub codebook_perplexity: f64,
    pub masked_indices: Vec<usize>,
    /// `contrastive_loss + diversity_weight · diversity_loss`.
    pub total: f64,
    pub negatives_with_replacement: bool,
}

/// Builds the self-supervised objective on `g` and returns the total loss
/// node with its components.
pub fn pretrain_loss<S: Scalar>(
    g: &mut Graph<'_, S>,
    cfg: &ModelConfig,
    audio: &[S],
    noise: &PretrainNoise<S>,
    tau: S,
    hard: bool,
) -> Result<(Var, PretrainStepOutput), ModelError> {
    let z = g.encode(cfg, audio)?;
    let (y, x) = g.project(z);
    assert_eq!(noise.mask.len(), g.value(x).rows, "noise sampled for a different length");
    let c = g.context(cfg, x, Some(&noise.mask));
    let c = g.linear(c, "final_proj");
    let q = quantize(g, cfg, y, Some(&noise.gumbel), tau, hard);
    let masked = noise.masked_indices();
    let contrastive = contrastive_loss(&mut g.tape, c, q.vectors, &masked, &noise.negatives, S::of(cfg.temperature));
    let codes = (cfg.quantizer_groups * cfg.entries_per_group) as f64;
    let scaled = g.tape.scale(q.perplexity, S::of(-1.0 / codes));
    let diversity = g.tape.add_scalar(scaled, S::one());
    let weighted = g.tape.scale(diversity, S::of(cfg.diversity_weight));
    let total = g.tape.add(contrastive, weighted);
    let out = PretrainStepOutput {
        contrastive_loss: g.value(contrastive).item().f64(),
        diversity_loss: g.value(diversity).item().f64(),
        codebook_perplexity: g.value(q.perplexity).item().f64(),
        masked_indices: masked,
        total: g.value(total).item().f64(),
        negatives_with_replacement: noise.with_replacement,
    };
    Ok((total, out))
}

/// CTC objective on a graph.
#[derive(Debug, Clone, Copy)]
pub struct CtcStep {
    pub loss: Var,
    /// Negative natural-log likelihood of the target.
    pub value: f64,
}

impl CtcStep {
    pub fn build<S: Scalar>(
        g: &mut Graph<'_, S>,
        cfg: &ModelConfig,
        audio: &[S],
        target: &[usize],
        mask: Option<&[bool]>,
    ) -> Result<Self, ModelError> {
        let lp = g.ctc_log_probs(cfg, audio, mask)?;
        let t = g.value(lp);
        let (frames, width) = t.shape();
        if frames < min_frames(target) {
            return Err(CtcError::Infeasible { required: min_frames(target), frames }.into());
        }
        let lattice = LogProbLattice::new_unchecked(frames, width, t.data.iter().map(|v| v.f64()).collect())?;
        let out = ctc_loss(&lattice, target)?;
        let grad = Tensor::from_vec(frames, width, out.gradient.iter().map(|&v| S::of(v)).collect());
        let loss = g.tape.custom_loss(lp, S::of(out.loss), grad);
        Ok(Self { loss, value: out.loss })
    }
}

fn check_format(audio: &AudioClip) -> Result<(), ModelError> {
    let expected = crate::corpus::CANONICAL_RATE;
    if audio.channels() != 1 || audio.sample_rate() != expected {
        return Err(ModelError::Format { expected, rate: audio.sample_rate(), channels: audio.channels() });
    }
    Ok(())
}

/// Encoder output for a mono 16 kHz clip, `T × C`.
pub fn encode_features(audio: &AudioClip, params: &Params<f32>, cfg: &ModelConfig) -> Result<Tensor<f32>, ModelError> {
    check_format(audio)?;
    let mut g = Graph::inference(params);
    let z = g.encode(cfg, audio.samples())?;
    Ok(g.value(z).clone())
}

/// Inference-mode CTC lattice for a mono 16 kHz clip.
pub fn forward_ctc(
    audio: &AudioClip,
    params: &Params<f32>,
    cfg: &ModelConfig,
    vocab_size: usize,
) -> Result<LogProbLattice, ModelError> {
    check_format(audio)?;
    let head = cfg.vocab_size.ok_or(ModelError::NoCtcHead)?;
    if head != vocab_size {
        return Err(ModelError::VocabMismatch { head, vocab: vocab_size });
    }
    let mut g = Graph::inference(params);
    let lp = g.ctc_log_probs(cfg, audio.samples(), None)?;
    let t = g.value(lp);
    Ok(LogProbLattice::new_unchecked(t.rows, t.cols, t.data.iter().map(|&v| v as f64).collect())?)
}

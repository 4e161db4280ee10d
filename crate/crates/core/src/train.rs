//! Training arithmetic: data mixtures, sample-budget batching, gradient
//! accumulation, Adam, learning-rate and temperature schedules, and
//! checkpoint selection. The loop that ties these to files lives in the
//! `lrasr` crate.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::tape::Tensor;
use crate::model::{
    sample_mask, CtcStep, Graph, ModelConfig, ModelError, ModelParameters, PretrainNoise, PretrainStepOutput,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("mixture source {0} is empty")]
    EmptySource(usize),
    #[error("mixture source {0} has factor 0")]
    ZeroFactor(usize),
    #[error("target fraction {0} is outside (0, 1)")]
    BadFraction(f64),
    #[error("at most one mixture source may use a target fraction")]
    SeveralFractions,
    #[error("invalid training configuration: {0}")]
    Config(&'static str),
    #[error("non-finite {what} at update {step}")]
    NonFinite { what: &'static str, step: u64 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// How much of a source goes into a mixture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Share {
    /// Every record appears exactly this many times.
    Factor(usize),
    /// The source is replicated to make up this fraction of the result.
    Fraction(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixSource<T> {
    pub records: Vec<T>,
    pub share: Share,
}

/// Record count a fraction source needs so that it makes up `fraction` of a
/// mixture whose other sources contribute `others` records.
pub fn fraction_count(fraction: f64, others: usize) -> usize {
    libm::round(fraction * others as f64 / (1.0 - fraction)) as usize
}

/// Concatenates the sources with replication, then shuffles with `seed`.
///
/// A factor-`k` source contributes `k` copies of each record. A fraction
/// source contributes the rounded exact count: whole copies, then a uniform
/// sample without replacement for the remainder, so record multiplicities
/// differ by at most one and the share is within one record of the request. A fraction source with no
/// other sources contributes one copy.
pub fn build_mixture<T: Clone>(sources: &[MixSource<T>], seed: u64) -> Result<Vec<T>, TrainError> {
    let mut fraction_source = None;
    let mut others = 0usize;
    for (i, s) in sources.iter().enumerate() {
        if s.records.is_empty() {
            return Err(TrainError::EmptySource(i));
        }
        match s.share {
            Share::Factor(0) => return Err(TrainError::ZeroFactor(i)),
            Share::Factor(k) => others += k * s.records.len(),
            Share::Fraction(f) if !(f > 0.0 && f < 1.0) => return Err(TrainError::BadFraction(f)),
            Share::Fraction(_) if fraction_source.is_some() => return Err(TrainError::SeveralFractions),
            Share::Fraction(_) => fraction_source = Some(i),
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for s in sources {
        match s.share {
            Share::Factor(k) => {
                for _ in 0..k {
                    out.extend(s.records.iter().cloned());
                }
            }
            Share::Fraction(f) => {
                let n = s.records.len();
                let wanted = if others == 0 { n } else { fraction_count(f, others).max(1) };
                for _ in 0..wanted / n {
                    out.extend(s.records.iter().cloned());
                }
                let mut extra = sample(&mut rng, n, wanted % n).into_vec();
                extra.sort_unstable();
                out.extend(extra.into_iter().map(|i| s.records[i].clone()));
            }
        }
    }
    out.shuffle(&mut rng);
    Ok(out)
}

/// FNV-1a, 64-bit.
pub fn stable_hash(text: &str) -> u64 {
    text.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// The reproducible 1 % validation split: `hash(audio_path) mod 100 < 1`.
pub fn is_validation(audio_path: &str) -> bool {
    stable_hash(audio_path) % 100 < 1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_updates: u64,
    /// Samples per micro-batch; a micro-batch always holds at least one clip.
    pub batch_budget: usize,
    /// Micro-batches accumulated into one update.
    pub accumulation: usize,
    pub warmup_fraction: f64,
    pub seed: u64,
    pub validate_every: u64,
    pub freeze_encoder: bool,
    pub gumbel_start: f64,
    pub gumbel_end: f64,
    /// Span-mask rate applied to the context network input during CTC
    /// fine-tuning; 0 disables it.
    pub finetune_mask_prob: f64,
}

impl Default for TrainConfig {
    /// Desk scale: 2k updates of 4 × 480k samples (two minutes of audio).
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            max_updates: 2000,
            batch_budget: 480_000,
            accumulation: 4,
            warmup_fraction: 0.1,
            seed: 1,
            validate_every: 200,
            freeze_encoder: false,
            gumbel_start: 2.0,
            gumbel_end: 0.5,
            finetune_mask_prob: 0.05,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config("learning_rate must be finite and nonnegative"));
        }
        if self.batch_budget == 0 || self.accumulation == 0 || self.validate_every == 0 {
            return Err(TrainError::Config("batch_budget, accumulation and validate_every must be positive"));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(TrainError::Config("warmup_fraction must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.finetune_mask_prob) {
            return Err(TrainError::Config("finetune_mask_prob must lie in [0, 1)"));
        }
        if !(self.gumbel_start > 0.0 && self.gumbel_end > 0.0) {
            return Err(TrainError::Config("Gumbel temperatures must be positive"));
        }
        Ok(())
    }

    /// Learning rate for update `step` (1-based): linear warmup over the
    /// first `warmup_fraction` of updates, then linear decay towards zero.
    pub fn learning_rate_at(&self, step: u64) -> f64 {
        let total = self.max_updates.max(1) as f64;
        let warmup = libm::round(self.warmup_fraction * total);
        let s = step as f64;
        if s <= warmup {
            self.learning_rate * s / warmup
        } else {
            self.learning_rate * (total - s + 1.0).max(0.0) / (total - warmup)
        }
    }

    /// Gumbel-softmax temperature, annealed geometrically over training.
    pub fn gumbel_temperature_at(&self, step: u64) -> f64 {
        let progress = (step as f64 / self.max_updates.max(1) as f64).min(1.0);
        self.gumbel_start * libm::pow(self.gumbel_end / self.gumbel_start, progress)
    }
}

/// Endless, epoch-shuffled stream of micro-batches.
#[derive(Debug, Clone)]
pub struct BatchStream {
    lengths: Vec<usize>,
    budget: usize,
    order: Vec<usize>,
    position: usize,
    rng: ChaCha8Rng,
    pub epoch: u64,
}

impl BatchStream {
    /// `lengths` holds the sample count of every record.
    pub fn new(lengths: Vec<usize>, budget: usize, seed: u64) -> Self {
        let mut s =
            Self { order: Vec::new(), lengths, budget, position: 0, rng: ChaCha8Rng::seed_from_u64(seed), epoch: 0 };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.lengths.len()).collect();
        self.order.shuffle(&mut self.rng);
        self.position = 0;
    }

    /// Next record indices whose lengths sum to at most the budget, or a
    /// single record when it alone exceeds the budget. Micro-batches do not
    /// straddle epochs.
    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.lengths.is_empty() {
            return Vec::new();
        }
        if self.position == self.order.len() {
            self.reshuffle();
            self.epoch += 1;
        }
        let mut batch = Vec::new();
        let mut total = 0;
        while let Some(&i) = self.order.get(self.position) {
            if !batch.is_empty() && total + self.lengths[i] > self.budget {
                break;
            }
            total += self.lengths[i];
            batch.push(i);
            self.position += 1;
        }
        batch
    }
}

/// Greedy partition of `lengths`, in order, into sample-budget micro-batches.
pub fn micro_batches(lengths: &[usize], budget: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = Vec::new();
    let mut total = 0;
    for (i, &len) in lengths.iter().enumerate() {
        match out.last_mut() {
            Some(batch) if total + len <= budget => {
                batch.push(i);
                total += len;
            }
            _ => {
                out.push(alloc::vec![i]);
                total = len;
            }
        }
    }
    out
}

/// Sums per-sample gradients across micro-batches in a fixed order.
#[derive(Debug, Clone, Default)]
pub struct GradAccumulator {
    sum: BTreeMap<String, Tensor<f32>>,
    pub samples: usize,
}

impl GradAccumulator {
    pub fn add(&mut self, grads: BTreeMap<String, Tensor<f32>>) {
        self.samples += 1;
        for (name, g) in grads {
            match self.sum.get_mut(&name) {
                Some(acc) => acc.data.iter_mut().zip(&g.data).for_each(|(a, &b)| *a += b),
                None => {
                    self.sum.insert(name, g);
                }
            }
        }
    }

    /// Mean gradient per sample.
    pub fn average(self) -> BTreeMap<String, Tensor<f32>> {
        let scale = 1.0 / self.samples.max(1) as f32;
        self.sum
            .into_iter()
            .map(|(name, mut g)| {
                g.data.iter_mut().for_each(|v| *v *= scale);
                (name, g)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.98, eps: 1e-6 }
    }
}

/// Adam with bias correction. Arrays without a gradient are left untouched.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    moments: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, moments: BTreeMap::new() }
    }

    pub fn update(&mut self, params: &mut ModelParameters, grads: &BTreeMap<String, Tensor<f32>>, lr: f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - libm::pow(beta1, self.step as f64);
        let c2 = 1.0 - libm::pow(beta2, self.step as f64);
        for (name, g) in grads {
            let Some(p) = params.arrays.get_mut(name) else { continue };
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (alloc::vec![0.0; g.data.len()], alloc::vec![0.0; g.data.len()]));
            for i in 0..g.data.len() {
                let gi = g.data[i] as f64;
                let mi = beta1 * m[i] as f64 + (1.0 - beta1) * gi;
                let vi = beta2 * v[i] as f64 + (1.0 - beta2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let delta = lr * (mi / c1) / (libm::sqrt(vi / c2) + eps);
                p.data[i] = (p.data[i] as f64 - delta) as f32;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub update_step: u64,
    pub validation_wer: f64,
    pub validation_cer: f64,
    pub path: String,
}

/// Lowest validation WER; ties go to the earliest update.
pub fn select_best(series: &[CheckpointMeta]) -> Option<&CheckpointMeta> {
    series.iter().min_by(|a, b| a.validation_wer.total_cmp(&b.validation_wer).then(a.update_step.cmp(&b.update_step)))
}

/// Per-update random stream, independent of how many draws earlier updates
/// made.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// One labelled clip.
#[derive(Debug, Clone, Copy)]
pub struct LabelledClip<'a> {
    pub audio: &'a [f32],
    pub target: &'a [usize],
}

/// Adds the CTC gradient of every clip to `acc`; returns the summed loss.
/// With `mask_prob > 0` spans of `cfg.mask_span` frames are replaced by the
/// mask embedding, drawn from `rng`.
pub fn finetune_micro_batch(
    params: &ModelParameters,
    cfg: &ModelConfig,
    clips: &[LabelledClip<'_>],
    freeze_encoder: bool,
    mask_prob: f64,
    rng: &mut ChaCha8Rng,
    acc: &mut GradAccumulator,
) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for clip in clips {
        let mut g = Graph::training(params, freeze_encoder);
        let frames = crate::model::frame_count(cfg, clip.audio.len()).unwrap_or(0);
        let mask = (mask_prob > 0.0).then(|| sample_mask(frames, mask_prob, cfg.mask_span, 0, rng));
        let step = CtcStep::build(&mut g, cfg, clip.audio, clip.target, mask.as_deref())?;
        total += step.value;
        acc.add(g.gradients(step.loss));
    }
    Ok(total)
}

/// Summed self-supervised statistics over a micro-batch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PretrainTotals {
    pub total: f64,
    pub contrastive: f64,
    pub diversity: f64,
    pub perplexity: f64,
    pub clips: usize,
}

impl PretrainTotals {
    pub fn add(&mut self, out: &PretrainStepOutput) {
        self.total += out.total;
        self.contrastive += out.contrastive_loss;
        self.diversity += out.diversity_loss;
        self.perplexity += out.codebook_perplexity;
        self.clips += 1;
    }

    pub fn merge(&mut self, other: &PretrainTotals) {
        self.total += other.total;
        self.contrastive += other.contrastive;
        self.diversity += other.diversity;
        self.perplexity += other.perplexity;
        self.clips += other.clips;
    }

    pub fn mean(&self) -> PretrainTotals {
        let n = self.clips.max(1) as f64;
        PretrainTotals {
            total: self.total / n,
            contrastive: self.contrastive / n,
            diversity: self.diversity / n,
            perplexity: self.perplexity / n,
            clips: self.clips,
        }
    }
}

/// Adds the self-supervised gradient of every clip to `acc`, drawing masks,
/// distractors and Gumbel noise from `rng`.
pub fn pretrain_micro_batch(
    params: &ModelParameters,
    cfg: &ModelConfig,
    clips: &[&[f32]],
    tau: f64,
    freeze_encoder: bool,
    rng: &mut ChaCha8Rng,
    acc: &mut GradAccumulator,
) -> Result<PretrainTotals, TrainError> {
    let mut totals = PretrainTotals::default();
    for audio in clips {
        let frames = crate::model::frame_count(cfg, audio.len())
            .ok_or(ModelError::TooShort { samples: audio.len(), needed: cfg.receptive_field() })?;
        let noise = PretrainNoise::sample(cfg, frames, rng);
        let mut g = Graph::training(params, freeze_encoder);
        let (loss, out) = crate::model::pretrain_loss(&mut g, cfg, audio, &noise, tau as f32, true)?;
        totals.add(&out);
        acc.add(g.gradients(loss));
    }
    Ok(totals)
}

/// Mean contrastive loss on held-out clips with masks drawn from `seed`, so
/// that repeated evaluations see the same masks.
pub fn pretrain_validation(
    params: &ModelParameters,
    cfg: &ModelConfig,
    clips: &[&[f32]],
    tau: f64,
    seed: u64,
) -> Result<PretrainTotals, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut totals = PretrainTotals::default();
    for audio in clips {
        let frames = crate::model::frame_count(cfg, audio.len())
            .ok_or(ModelError::TooShort { samples: audio.len(), needed: cfg.receptive_field() })?;
        let noise = PretrainNoise::sample(cfg, frames, &mut rng);
        let mut g = Graph::inference(params);
        let (_, out) = crate::model::pretrain_loss(&mut g, cfg, audio, &noise, tau as f32, true)?;
        totals.add(&out);
    }
    Ok(totals.mean())
}

//! Training loops and batch decoding over manifests.
//!
//! Both loops draw `accumulation` micro-batches of at most `batch_budget`
//! samples per update, average per-clip gradients, and step Adam with the
//! warmup-then-decay schedule. Every `validate_every` updates they write a
//! checkpoint and a validation record to the output directory.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use lrasr_core::beam::{prefix_beam_search, DecoderWeights};
use lrasr_core::corpus::{AudioClip, CANONICAL_RATE};
use lrasr_core::ctc::{greedy_labels, min_frames, LogProbLattice};
use lrasr_core::eval::{score, EvalReport, ScoreOptions};
use lrasr_core::model::{forward_ctc, frame_count, ModelConfig, ModelError, ModelParameters};
use lrasr_core::ngram::NGramModel;
use lrasr_core::text::vocab::CharVocabulary;
use lrasr_core::text::TransliterationTable;
use lrasr_core::train::{
    finetune_micro_batch, is_validation, pretrain_micro_batch, pretrain_validation, select_best, step_rng, Adam,
    AdamConfig, BatchStream, CheckpointMeta, GradAccumulator, LabelledClip, PretrainTotals, TrainConfig, TrainError,
};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::manifest::{read_manifest, resolve, ManifestError};
use crate::wav::{read_wav, WavError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Wav(#[from] WavError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{0}")]
    Data(String),
    #[error("non-finite {what} at update {step}; parameters before the update saved to {snapshot}")]
    NonFinite { what: &'static str, step: u64, snapshot: String },
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

pub fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.display().to_string(), source }
}

/// A manifest record with its audio loaded. `id` is the manifest's
/// `audio_path`.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub audio: Vec<f32>,
    pub text: String,
}

/// Loads every clip of a manifest; clips must already be mono at 16 kHz.
pub fn load_utterances(manifest: &Path) -> Result<Vec<Utterance>> {
    let records = read_manifest(manifest)?;
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let clip = read_wav(&resolve(manifest, &r.audio_path))?;
        if clip.channels() != 1 || clip.sample_rate() != CANONICAL_RATE {
            return Err(PipelineError::Data(format!(
                "{}: {} channel(s) at {} Hz; run `prepare` to convert to mono {CANONICAL_RATE} Hz",
                r.audio_path,
                clip.channels(),
                clip.sample_rate()
            )));
        }
        out.push(Utterance { id: r.audio_path, audio: clip.into_samples(), text: r.text });
    }
    Ok(out)
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path).map_err(io_error(path))?))
}

fn write_line(w: &mut impl Write, path: &Path, value: &serde_json::Value) -> Result<()> {
    writeln!(w, "{value}").and_then(|_| w.flush()).map_err(io_error(path))
}

fn all_finite(grads: &std::collections::BTreeMap<String, lrasr_core::model::tape::Tensor<f32>>) -> bool {
    grads.values().all(|g| g.is_finite())
}

struct Run<'a> {
    out_dir: &'a Path,
    config: &'a ModelConfig,
    vocab: Option<Vec<String>>,
}

impl Run<'_> {
    fn save(&self, params: &ModelParameters, step: u64, name: &str) -> Result<PathBuf> {
        let path = self.out_dir.join(name);
        let ck = Checkpoint {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            update_step: step,
            params: params.clone(),
        };
        ck.save(&path)?;
        Ok(path)
    }

    fn abort(&self, params: &ModelParameters, step: u64, what: &'static str) -> PipelineError {
        let snapshot = self.out_dir.join(format!("abort-step-{step:06}.ckpt"));
        let name = match self.save(params, step, &format!("abort-step-{step:06}.ckpt")) {
            Ok(_) => snapshot.display().to_string(),
            Err(e) => format!("(snapshot failed: {e})"),
        };
        PipelineError::NonFinite { what, step, snapshot: name }
    }
}

pub fn checkpoint_name(step: u64) -> String {
    format!("step-{step:06}.ckpt")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skipped {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub params: ModelParameters,
    pub series: Vec<CheckpointMeta>,
    pub best: CheckpointMeta,
    pub skipped: Vec<Skipped>,
}

/// Greedy transcripts as `(id, text)`.
pub fn greedy_transcripts(
    params: &ModelParameters,
    cfg: &ModelConfig,
    vocab: &CharVocabulary,
    utts: &[Utterance],
) -> Result<Vec<(String, String)>> {
    utts.iter()
        .map(|u| {
            let lattice = lattice(params, cfg, vocab, &u.audio)?;
            let text =
                vocab.decode_transcript(&greedy_labels(&lattice)).map_err(|e| PipelineError::Data(e.to_string()))?;
            Ok((u.id.clone(), text))
        })
        .collect()
}

fn lattice(
    params: &ModelParameters,
    cfg: &ModelConfig,
    vocab: &CharVocabulary,
    audio: &[f32],
) -> Result<LogProbLattice> {
    let clip = AudioClip::mono(audio.to_vec(), CANONICAL_RATE).expect("nonzero rate");
    Ok(forward_ctc(&clip, params, cfg, vocab.len())?)
}

pub fn score_pairs(refs: &[(String, String)], hyps: &[(String, String)]) -> Result<EvalReport> {
    score(refs, hyps, &ScoreOptions::default(), &TransliterationTable::hepburn())
        .map_err(|e| PipelineError::Data(e.to_string()))
}

/// CTC fine-tuning. Transcripts must already be in the vocabulary's form.
/// Utterances too short for their target are skipped and reported. With
/// no validation utterances, the 1 % hash split of the training set is
/// used, or the first ten training utterances if that split is empty.
pub fn finetune(
    init: ModelParameters,
    cfg: &ModelConfig,
    vocab: &CharVocabulary,
    train: &[Utterance],
    valid: &[Utterance],
    tc: &TrainConfig,
    out_dir: &Path,
) -> Result<FinetuneOutcome> {
    tc.validate()?;
    cfg.validate()?;
    if cfg.vocab_size != Some(vocab.len()) {
        return Err(ModelError::VocabMismatch { head: cfg.vocab_size.unwrap_or(0), vocab: vocab.len() }.into());
    }
    init.validate(cfg).map_err(ModelError::from)?;
    fs::create_dir_all(out_dir).map_err(io_error(out_dir))?;

    let mut uncovered = Vec::new();
    let mut kept: Vec<(&Utterance, Vec<usize>)> = Vec::new();
    let mut skipped = Vec::new();
    for u in train {
        let target = match vocab.encode(&u.text) {
            Ok(t) => t,
            Err(e) => {
                uncovered.push(format!("{}: {e}", u.id));
                continue;
            }
        };
        let frames = frame_count(cfg, u.audio.len()).unwrap_or(0);
        if frames < min_frames(&target).max(1) {
            let reason = format!("{frames} frames cannot carry {} labels", target.len());
            skipped.push(Skipped { id: u.id.clone(), reason });
            continue;
        }
        kept.push((u, target));
    }
    if !uncovered.is_empty() {
        return Err(PipelineError::Data(format!(
            "transcripts not covered by the vocabulary:\n  {}",
            uncovered.join("\n  ")
        )));
    }
    let skipped_path = out_dir.join("skipped.jsonl");
    let mut w = create(&skipped_path)?;
    for s in &skipped {
        write_line(&mut w, &skipped_path, &serde_json::to_value(s).expect("serializable"))?;
    }
    if kept.is_empty() {
        return Err(PipelineError::Data("no training utterance is long enough for its transcript".into()));
    }

    let mut valid_set: Vec<Utterance> = valid.to_vec();
    if valid_set.is_empty() {
        valid_set = kept.iter().filter(|(u, _)| is_validation(&u.id)).map(|(u, _)| (*u).clone()).collect();
        if valid_set.is_empty() {
            valid_set = kept.iter().take(10).map(|(u, _)| (*u).clone()).collect();
        } else {
            kept.retain(|(u, _)| !is_validation(&u.id));
        }
    }
    let valid_refs: Vec<(String, String)> = valid_set.iter().map(|u| (u.id.clone(), u.text.clone())).collect();

    let run = Run { out_dir, config: cfg, vocab: Some(vocab.symbols().to_vec()) };
    let log_path = out_dir.join("train_log.jsonl");
    let mut log = create(&log_path)?;
    let val_path = out_dir.join("validation.jsonl");
    let mut val_log = create(&val_path)?;
    let mut params = init;
    let mut adam = Adam::new(AdamConfig::default());
    let mut stream = BatchStream::new(kept.iter().map(|(u, _)| u.audio.len()).collect(), tc.batch_budget, tc.seed);
    let mut series = Vec::new();
    let start = Instant::now();

    let mut validate = |params: &ModelParameters, step: u64, series: &mut Vec<CheckpointMeta>| -> Result<()> {
        let hyps = greedy_transcripts(params, cfg, vocab, &valid_set)?;
        let report = score_pairs(&valid_refs, &hyps)?;
        let name = checkpoint_name(step);
        run.save(params, step, &name)?;
        let meta =
            CheckpointMeta { update_step: step, validation_wer: report.wer, validation_cer: report.cer, path: name };
        write_line(&mut val_log, &val_path, &serde_json::to_value(&meta).expect("serializable"))?;
        series.push(meta);
        Ok(())
    };

    if tc.max_updates == 0 {
        validate(&params, 0, &mut series)?;
    }
    for step in 1..=tc.max_updates {
        let mut acc = GradAccumulator::default();
        let mut rng = step_rng(tc.seed, step);
        let mut loss = 0.0;
        for _ in 0..tc.accumulation {
            let batch = stream.next_batch();
            let clips: Vec<LabelledClip> =
                batch.iter().map(|&i| LabelledClip { audio: &kept[i].0.audio, target: &kept[i].1 }).collect();
            loss += finetune_micro_batch(
                &params,
                cfg,
                &clips,
                tc.freeze_encoder,
                tc.finetune_mask_prob,
                &mut rng,
                &mut acc,
            )?;
        }
        let loss = loss / acc.samples.max(1) as f64;
        if !loss.is_finite() {
            return Err(run.abort(&params, step, "loss"));
        }
        let grads = acc.average();
        if !all_finite(&grads) {
            return Err(run.abort(&params, step, "gradient"));
        }
        let lr = tc.learning_rate_at(step);
        adam.update(&mut params, &grads, lr);
        let line = json!({"step": step, "ctc_loss": loss, "lr": lr, "wall_ms": start.elapsed().as_millis() as u64});
        write_line(&mut log, &log_path, &line)?;
        if step % tc.validate_every == 0 || step == tc.max_updates {
            validate(&params, step, &mut series)?;
        }
    }
    let best = select_best(&series).expect("at least one validation").clone();
    fs::copy(out_dir.join(&best.path), out_dir.join("best.ckpt")).map_err(io_error(out_dir))?;
    let series_path = out_dir.join("checkpoints.json");
    fs::write(
        &series_path,
        serde_json::to_string_pretty(&json!({"series": series, "best": best})).expect("serializable"),
    )
    .map_err(io_error(&series_path))?;
    Ok(FinetuneOutcome { params, series, best, skipped })
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub params: ModelParameters,
    /// `(update, validation statistics)`, update 0 first.
    pub validation: Vec<(u64, PretrainTotals)>,
    pub skipped: Vec<Skipped>,
}

/// Continued self-supervised pretraining. Validation uses the 1 % hash split
/// of the clips, or the first eight clips if that split is empty; it runs at
/// the final Gumbel temperature with fixed masks so values are comparable
/// across updates.
pub fn pretrain(
    init: ModelParameters,
    cfg: &ModelConfig,
    clips: &[Utterance],
    tc: &TrainConfig,
    out_dir: &Path,
) -> Result<PretrainOutcome> {
    tc.validate()?;
    cfg.validate()?;
    init.validate(cfg).map_err(ModelError::from)?;
    fs::create_dir_all(out_dir).map_err(io_error(out_dir))?;

    let mut skipped = Vec::new();
    let mut usable: Vec<&Utterance> = Vec::new();
    for u in clips {
        match frame_count(cfg, u.audio.len()) {
            Some(f) if f > cfg.mask_span => usable.push(u),
            f => skipped
                .push(Skipped { id: u.id.clone(), reason: format!("{} frames is too short to mask", f.unwrap_or(0)) }),
        }
    }
    let skipped_path = out_dir.join("skipped.jsonl");
    let mut w = create(&skipped_path)?;
    for s in &skipped {
        write_line(&mut w, &skipped_path, &serde_json::to_value(s).expect("serializable"))?;
    }
    let (mut valid, mut train): (Vec<&Utterance>, Vec<&Utterance>) = usable.iter().partition(|u| is_validation(&u.id));
    if train.is_empty() {
        std::mem::swap(&mut valid, &mut train);
    }
    if train.is_empty() {
        return Err(PipelineError::Data("no clip is long enough for pretraining".into()));
    }
    if valid.is_empty() {
        valid = train.iter().take(8).copied().collect();
    }
    let valid_audio: Vec<&[f32]> = valid.iter().map(|u| u.audio.as_slice()).collect();

    let run = Run { out_dir, config: cfg, vocab: None };
    let log_path = out_dir.join("train_log.jsonl");
    let mut log = create(&log_path)?;
    let val_path = out_dir.join("validation.jsonl");
    let mut val_log = create(&val_path)?;
    let mut params = init;
    let mut adam = Adam::new(AdamConfig::default());
    let mut stream = BatchStream::new(train.iter().map(|u| u.audio.len()).collect(), tc.batch_budget, tc.seed);
    let mut validation = Vec::new();
    let start = Instant::now();
    let val_seed = tc.seed ^ 0x7661_6c69_6461_7465;

    let mut validate =
        |params: &ModelParameters, step: u64, validation: &mut Vec<(u64, PretrainTotals)>| -> Result<()> {
            let v = pretrain_validation(params, cfg, &valid_audio, tc.gumbel_end, val_seed)?;
            let line = json!({
                "step": step, "contrastive_loss": v.contrastive, "diversity_loss": v.diversity,
                "codebook_perplexity": v.perplexity, "loss": v.total, "clips": v.clips,
            });
            write_line(&mut val_log, &val_path, &line)?;
            if step > 0 {
                run.save(params, step, &checkpoint_name(step))?;
            }
            validation.push((step, v));
            Ok(())
        };

    validate(&params, 0, &mut validation)?;
    for step in 1..=tc.max_updates {
        let tau = tc.gumbel_temperature_at(step);
        let mut acc = GradAccumulator::default();
        let mut rng = step_rng(tc.seed, step);
        let mut totals = PretrainTotals::default();
        for _ in 0..tc.accumulation {
            let batch: Vec<&[f32]> = stream.next_batch().iter().map(|&i| train[i].audio.as_slice()).collect();
            totals.merge(&pretrain_micro_batch(&params, cfg, &batch, tau, tc.freeze_encoder, &mut rng, &mut acc)?);
        }
        let mean = totals.mean();
        if !mean.total.is_finite() {
            return Err(run.abort(&params, step, "loss"));
        }
        let grads = acc.average();
        if !all_finite(&grads) {
            return Err(run.abort(&params, step, "gradient"));
        }
        let lr = tc.learning_rate_at(step);
        adam.update(&mut params, &grads, lr);
        let line = json!({
            "step": step, "loss": mean.total, "contrastive_loss": mean.contrastive, "diversity_loss": mean.diversity,
            "codebook_perplexity": mean.perplexity, "gumbel_tau": tau, "lr": lr, "wall_ms": start.elapsed().as_millis() as u64,
        });
        write_line(&mut log, &log_path, &line)?;
        if step % tc.validate_every == 0 || step == tc.max_updates {
            validate(&params, step, &mut validation)?;
        }
    }
    run.save(&params, tc.max_updates, "last.ckpt")?;
    Ok(PretrainOutcome { params, validation, skipped })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decoder {
    /// Per-frame argmax, then collapse.
    Greedy,
    Beam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NBestEntry {
    pub utt_id: String,
    pub rank: usize,
    pub score: f64,
    pub text: String,
}

/// Greedy output has one entry per utterance scored by its best-path log
/// probability; beam output has up to `nbest` ranked entries.
pub fn decode(
    params: &ModelParameters,
    cfg: &ModelConfig,
    vocab: &CharVocabulary,
    utts: &[Utterance],
    decoder: Decoder,
    lm: Option<&NGramModel>,
    weights: &DecoderWeights,
    nbest: usize,
) -> Result<Vec<NBestEntry>> {
    let mut out = Vec::new();
    for u in utts {
        let lat = lattice(params, cfg, vocab, &u.audio)?;
        match decoder {
            Decoder::Greedy => {
                let score =
                    (0..lat.frames()).map(|t| lat.row(t).iter().copied().fold(f64::NEG_INFINITY, f64::max)).sum();
                let text =
                    vocab.decode_transcript(&greedy_labels(&lat)).map_err(|e| PipelineError::Data(e.to_string()))?;
                out.push(NBestEntry { utt_id: u.id.clone(), rank: 1, score, text });
            }
            Decoder::Beam => {
                let hyps = prefix_beam_search(&lat, vocab, lm, weights);
                for (i, h) in hyps.into_iter().take(nbest.max(1)).enumerate() {
                    out.push(NBestEntry { utt_id: u.id.clone(), rank: i + 1, score: h.score, text: h.text });
                }
            }
        }
    }
    Ok(out)
}

pub fn nbest_string(entries: &[NBestEntry]) -> String {
    entries.iter().map(|e| serde_json::to_string(e).expect("serializable") + "\n").collect()
}

/// Rank-1 entries of an n-best file as `(utt_id, text)`.
pub fn parse_nbest(text: &str) -> std::result::Result<Vec<(String, String)>, (usize, String)> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let e: NBestEntry = serde_json::from_str(line).map_err(|e| (i + 1, e.to_string()))?;
        if e.rank == 1 {
            out.push((e.utt_id, e.text));
        }
    }
    Ok(out)
}

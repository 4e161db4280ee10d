//! The `lrasr` command line. Every setting is a config key, given as a
//! `--kebab-case` flag, a `snake_case = value` line in the `--config` file,
//! or an `LRASR_UPPER_CASE` variable, in that order of precedence.
//!
//! Exit codes: 0 success, 1 usage, 2 data, 3 numerical abort, 4 score above
//! a requested threshold.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Arg, ArgMatches, Command};
use lrasr_core::beam::DecoderWeights;
use lrasr_core::corpus::{resample_mono, segment, SegmentationParams, UtteranceRecord, CANONICAL_RATE};
use lrasr_core::eval::{score, RelaxationPolicy, ScoreOptions};
use lrasr_core::model::{ConvLayer, ModelConfig, ModelParameters};
use lrasr_core::ngram::{perplexity, train_ngram, Smoothing};
use lrasr_core::synth::{ToyLanguage, LETTERS, SYNTH_RATE};
use lrasr_core::text::normalize::{normalize, CaseFold, NormalizationPolicy};
use lrasr_core::text::translit::{transliterate, TransliterationTable};
use lrasr_core::text::vocab::{build_vocabulary, CharVocabulary, SharingPolicy};
use lrasr_core::train::{build_mixture, MixSource, Share, TrainConfig, TrainError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::arpa::{read_arpa, write_arpa};
use crate::checkpoint::Checkpoint;
use crate::config::{parse_config_file, ConfigError, Key, RunConfig};
use crate::manifest::{build_manifest, parse_manifest, read_manifest, resolve, write_manifest, ManifestError};
use crate::pipeline::{self, load_utterances, Decoder, PipelineError};
use crate::wav::{read_wav, write_wav};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numerical(String),
    Threshold(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Threshold(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numerical(m) | CliError::Threshold(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::NonFinite { .. } | PipelineError::Train(TrainError::NonFinite { .. }) => {
                CliError::Numerical(e.to_string())
            }
            PipelineError::Train(TrainError::Config(_)) => CliError::Usage(e.to_string()),
            PipelineError::Model(lrasr_core::model::ModelError::Config(_)) => CliError::Usage(e.to_string()),
            e => CliError::Data(e.to_string()),
        }
    }
}

impl From<ManifestError> for CliError {
    fn from(e: ManifestError) -> Self {
        CliError::Data(e.to_string())
    }
}

fn data(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

type Result<T, E = CliError> = std::result::Result<T, E>;

const fn key(name: &'static str, default: &'static str, help: &'static str) -> Key {
    Key { name, default, help }
}

pub const KEYS: &[Key] = &[
    key("input", "", "WAV file, or directory whose *.wav files are read in name order"),
    key("output_dir", "", "Directory for the command's outputs"),
    key("output", "", "Output file"),
    key("manifest", "", "Manifest path (prepare: defaults to <output_dir>/manifest.jsonl)"),
    key("transcripts", "", "TSV of <file stem><TAB><transcript>; listed recordings are kept whole as labelled clips"),
    key("lang", "und", "Language tag written to manifest records"),
    key("source", "", "Source tag written to manifest records"),
    key("silence_threshold_db", "-40", "Frame RMS level below which a 20 ms frame is silent, dBFS"),
    key("min_silence_ms", "300", "Shortest silence that splits a recording, ms"),
    key("min_clip_s", "2", "Shortest clip kept, s"),
    key("max_clip_s", "15", "Longest clip; longer regions are split, s"),
    key("min_keep_s", "1", "Pieces shorter than this are excluded outright, s"),
    key("strip_punctuation", "true", "Remove punctuation from transcripts (apostrophes are kept)"),
    key("strip_metadata", "true", "Remove bracketed annotations from transcripts"),
    key("case_fold", "lower", "Transcript case: lower, upper or none"),
    key("romanize_kana", "false", "Transliterate kana in transcripts to Hepburn romaji"),
    key("translit_table", "", "Extra kana<TAB>romaji TSV merged over the built-in table"),
    key("manifests", "", "Comma-separated manifests"),
    key("policy", "shared_folded", "Vocabulary sharing: shared_folded, separate_by_case or separate_by_script"),
    key("sources", "", "Comma-separated <manifest>:<share>; an integer share is an oversampling factor, a decimal in (0,1) a target fraction"),
    key("seed", "1", "Random seed"),
    key("train_manifest", "", "Training manifest"),
    key("valid_manifest", "", "Validation manifest; default is the 1% hash split of the training set"),
    key("vocab", "", "Vocabulary file (decode: defaults to the one stored in the checkpoint)"),
    key("init", "", "Checkpoint to start from; its architecture overrides the model keys"),
    key("encoder_layers", "16:10:5,32:8:8,64:8:8", "Convolutions as channels:kernel:stride, comma-separated"),
    key("model_dim", "64", "Transformer width"),
    key("ffn_dim", "128", "Feed-forward width"),
    key("num_heads", "4", "Attention heads"),
    key("num_transformer_layers", "2", "Transformer layers"),
    key("quantizer_groups", "2", "Codebook groups G"),
    key("entries_per_group", "16", "Entries per codebook group V"),
    key("codevector_dim", "32", "Quantized vector width"),
    key("mask_prob", "0.15", "Probability that a frame starts a masked span"),
    key("mask_span", "4", "Masked span length M, frames"),
    key("num_negatives", "10", "Distractors K per masked frame"),
    key("temperature", "0.1", "Contrastive temperature"),
    key("diversity_weight", "0.1", "Weight of the codebook diversity loss"),
    key("learning_rate", "1e-4", "Peak learning rate"),
    key("max_updates", "2000", "Parameter updates"),
    key("batch_budget", "480000", "Audio samples per micro-batch"),
    key("accumulation", "4", "Micro-batches per update"),
    key("warmup_fraction", "0.1", "Share of updates with linear warmup; the rest decays linearly"),
    key("validate_every", "200", "Updates between validations and checkpoints"),
    key("freeze_encoder", "false", "Keep the convolutional encoder fixed"),
    key("gumbel_start", "2.0", "Initial Gumbel-softmax temperature"),
    key("gumbel_end", "0.5", "Final Gumbel-softmax temperature"),
    key("finetune_mask_prob", "0.05", "Span-mask rate during fine-tuning; 0 disables"),
    key("corpus", "", "Text file with one sentence per line, or a manifest"),
    key("order", "4", "n-gram order"),
    key("smoothing", "kn", "kn (modified Kneser-Ney) or addk:<k>"),
    key("lm", "", "ARPA language model"),
    key("checkpoint", "", "Model checkpoint"),
    key("decoder", "auto", "greedy, beam, or auto (beam when --lm is given)"),
    key("beam_width", "50", "Prefixes kept per frame"),
    key("lm_weight", "0.5", "LM weight alpha"),
    key("word_bonus", "1.0", "Word insertion bonus beta"),
    key("nbest", "1", "Hypotheses written per utterance"),
    key("refs", "", "References: a manifest or an n-best file"),
    key("hyps", "", "Hypotheses: an n-best file or a manifest"),
    key("relax_kana", "false", "Romanize kana on both sides before scoring"),
    key("relax_case", "true", "Lower-case both sides before scoring"),
    key("cer_includes_spaces", "false", "Count inter-word spaces in CER"),
    key("max_cer", "", "Exit with code 4 if CER exceeds this percentage"),
    key("max_wer", "", "Exit with code 4 if WER exceeds this percentage"),
    key("lexicon_size", "12", "Words in the toy lexicon"),
    key("max_words", "2", "Most words per toy utterance"),
    key("train_count", "50", "Labelled training utterances"),
    key("valid_count", "10", "Labelled validation utterances"),
    key("test_count", "20", "Labelled test utterances"),
    key("unlabeled_count", "500", "Unlabelled utterances"),
];

const MODEL_KEYS: &[&str] = &[
    "encoder_layers",
    "model_dim",
    "ffn_dim",
    "num_heads",
    "num_transformer_layers",
    "quantizer_groups",
    "entries_per_group",
    "codevector_dim",
    "mask_prob",
    "mask_span",
    "num_negatives",
    "temperature",
    "diversity_weight",
];
const TRAIN_KEYS: &[&str] = &[
    "learning_rate",
    "max_updates",
    "batch_budget",
    "accumulation",
    "warmup_fraction",
    "seed",
    "validate_every",
    "freeze_encoder",
];

struct Sub {
    name: &'static str,
    about: &'static str,
    keys: &'static [&'static str],
    extra: &'static [&'static [&'static str]],
}

const SUBCOMMANDS: &[Sub] = &[
    Sub {
        name: "prepare",
        about: "Convert recordings to 16 kHz mono, split on silence, write clips and a manifest",
        keys: &[
            "input",
            "output_dir",
            "manifest",
            "transcripts",
            "lang",
            "source",
            "silence_threshold_db",
            "min_silence_ms",
            "min_clip_s",
            "max_clip_s",
            "min_keep_s",
            "strip_punctuation",
            "strip_metadata",
            "case_fold",
            "romanize_kana",
            "translit_table",
        ],
        extra: &[],
    },
    Sub {
        name: "vocab",
        about: "Build a character vocabulary from manifests",
        keys: &["manifests", "policy", "output"],
        extra: &[],
    },
    Sub {
        name: "mix",
        about: "Oversample and shuffle manifests into one",
        keys: &["sources", "seed", "output"],
        extra: &[],
    },
    Sub {
        name: "pretrain",
        about: "Continue self-supervised pretraining",
        keys: &["train_manifest", "init", "output_dir", "gumbel_start", "gumbel_end"],
        extra: &[MODEL_KEYS, TRAIN_KEYS],
    },
    Sub {
        name: "finetune",
        about: "CTC fine-tuning with checkpoint selection by validation WER",
        keys: &["train_manifest", "valid_manifest", "vocab", "policy", "init", "output_dir", "finetune_mask_prob"],
        extra: &[MODEL_KEYS, TRAIN_KEYS],
    },
    Sub {
        name: "lm-train",
        about: "Train an n-gram model and write it as ARPA",
        keys: &["corpus", "order", "smoothing", "output"],
        extra: &[],
    },
    Sub {
        name: "lm-ppl",
        about: "Perplexity and OOV rate of a corpus under an ARPA model",
        keys: &["lm", "corpus", "output"],
        extra: &[],
    },
    Sub {
        name: "decode",
        about: "Transcribe a manifest; writes n-best JSON lines",
        keys: &[
            "checkpoint",
            "manifest",
            "vocab",
            "lm",
            "decoder",
            "beam_width",
            "lm_weight",
            "word_bonus",
            "nbest",
            "output",
        ],
        extra: &[],
    },
    Sub {
        name: "score",
        about: "CER and WER of hypotheses against references",
        keys: &[
            "refs",
            "hyps",
            "relax_kana",
            "relax_case",
            "cer_includes_spaces",
            "translit_table",
            "max_cer",
            "max_wer",
            "output",
        ],
        extra: &[],
    },
    Sub {
        name: "synth-fixture",
        about: "Write a seeded toy-language dataset: WAV clips, manifests, vocabulary and LM text",
        keys: &[
            "seed",
            "output_dir",
            "lexicon_size",
            "max_words",
            "train_count",
            "valid_count",
            "test_count",
            "unlabeled_count",
        ],
        extra: &[],
    },
];

fn lookup(name: &str) -> Key {
    *KEYS.iter().find(|k| k.name == name).unwrap_or_else(|| panic!("unregistered key {name}"))
}

fn sub_keys(sub: &Sub) -> Vec<Key> {
    let mut names: Vec<&str> = sub.keys.to_vec();
    for group in sub.extra {
        names.extend_from_slice(group);
    }
    names.into_iter().map(lookup).collect()
}

pub fn command() -> Command {
    let mut app = Command::new("lrasr")
        .about("Low-resource speech recognition: corpus preparation, training, decoding and scoring")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for sub in SUBCOMMANDS {
        let mut c = Command::new(sub.name).about(sub.about).arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .help("key = value file; flags override it, it overrides LRASR_* variables"),
        );
        for k in sub_keys(sub) {
            let default = if k.default.is_empty() { "unset".to_string() } else { k.default.to_string() };
            let help = format!("{} [key: {}] [default: {default}] [env: {}]", k.help, k.name, k.env());
            c = c.arg(Arg::new(k.name).long(k.flag()).value_name("VALUE").help(help));
        }
        app = app.subcommand(c);
    }
    app
}

fn resolve_config(sub: &Sub, m: &ArgMatches) -> Result<RunConfig> {
    let keys = sub_keys(sub);
    let flags: BTreeMap<String, String> =
        keys.iter().filter_map(|k| m.get_one::<String>(k.name).map(|v| (k.name.to_string(), v.clone()))).collect();
    let file = match m.get_one::<String>("config") {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{path}: {e}")))?;
            parse_config_file(&text)?
        }
        None => Vec::new(),
    };
    let env: BTreeMap<String, String> =
        std::env::vars().filter(|(k, _)| k.starts_with(crate::config::ENV_PREFIX)).collect();
    Ok(RunConfig::resolve(&keys, KEYS, &flags, &file, &env)?)
}

/// Parses `args` (program name first), runs the subcommand, and returns the
/// exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let (name, m) = matches.subcommand().expect("subcommand required");
    let sub = SUBCOMMANDS.iter().find(|s| s.name == name).expect("registered subcommand");
    let result = resolve_config(sub, m).and_then(|cfg| {
        eprint!("# effective config for {name}\n{}", cfg.echo());
        dispatch(name, &cfg)
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.code()
        }
    }
}

fn dispatch(name: &str, cfg: &RunConfig) -> Result<()> {
    match name {
        "prepare" => prepare(cfg),
        "vocab" => vocab(cfg),
        "mix" => mix(cfg),
        "pretrain" => pretrain(cfg),
        "finetune" => finetune(cfg),
        "lm-train" => lm_train(cfg),
        "lm-ppl" => lm_ppl(cfg),
        "decode" => decode(cfg),
        "score" => score_cmd(cfg),
        "synth-fixture" => synth_fixture(cfg),
        _ => unreachable!("unknown subcommand {name}"),
    }
}

fn path(cfg: &RunConfig, key: &str) -> Result<PathBuf> {
    Ok(PathBuf::from(cfg.required(key)?))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| data(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, contents).map_err(|e| data(format!("{}: {e}", path.display())))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| data(format!("{}: {e}", path.display())))
}

fn translit_table(cfg: &RunConfig) -> Result<TransliterationTable> {
    let mut table = TransliterationTable::hepburn();
    if let Some(p) = cfg.opt("translit_table") {
        table.extend_from_tsv(&read_text(Path::new(p))?).map_err(|e| data(format!("{p}: {e}")))?;
    }
    Ok(table)
}

fn sharing_policy(cfg: &RunConfig) -> Result<SharingPolicy> {
    match cfg.str("policy") {
        "shared_folded" => Ok(SharingPolicy::SharedFolded),
        "separate_by_case" => Ok(SharingPolicy::SeparateByCase),
        "separate_by_script" => Ok(SharingPolicy::SeparateByScript),
        _ => Err(cfg.bad("policy", "expected shared_folded, separate_by_case or separate_by_script").into()),
    }
}

fn prepare(cfg: &RunConfig) -> Result<()> {
    let input = path(cfg, "input")?;
    let out_dir = path(cfg, "output_dir")?;
    let manifest = cfg.opt("manifest").map(PathBuf::from).unwrap_or_else(|| out_dir.join("manifest.jsonl"));
    let params = SegmentationParams {
        silence_threshold_db: cfg.get("silence_threshold_db")?,
        min_silence_ms: cfg.get("min_silence_ms")?,
        min_clip_s: cfg.get("min_clip_s")?,
        max_clip_s: cfg.get("max_clip_s")?,
        min_keep_s: cfg.get("min_keep_s")?,
    };
    params.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let policy = NormalizationPolicy {
        strip_punctuation: cfg.get("strip_punctuation")?,
        strip_metadata: cfg.get("strip_metadata")?,
        case_fold: match cfg.str("case_fold") {
            "lower" => CaseFold::Lower,
            "upper" => CaseFold::Upper,
            "none" => CaseFold::None,
            _ => return Err(cfg.bad("case_fold", "expected lower, upper or none").into()),
        },
        collapse_whitespace: true,
    };
    let romanize: bool = cfg.get("romanize_kana")?;
    let table = translit_table(cfg)?;
    let transcripts: BTreeMap<String, String> = match cfg.opt("transcripts") {
        Some(p) => read_text(Path::new(p))?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.split_once('\t')
                    .map(|(a, b)| (a.to_string(), b.to_string()))
                    .ok_or_else(|| data(format!("{p}: expected <stem><TAB><text>: {l:?}")))
            })
            .collect::<Result<_>>()?,
        None => BTreeMap::new(),
    };
    let mut inputs: Vec<PathBuf> = if input.is_dir() {
        fs::read_dir(&input)
            .map_err(|e| data(format!("{}: {e}", input.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
            .collect()
    } else {
        vec![input.clone()]
    };
    inputs.sort();
    fs::create_dir_all(&out_dir).map_err(|e| data(format!("{}: {e}", out_dir.display())))?;
    let manifest_dir = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    let (mut records, mut dropped, mut excluded) = (Vec::new(), 0usize, 0usize);
    for file in &inputs {
        let clip = resample_mono(&read_wav(file).map_err(data)?, CANONICAL_RATE).map_err(data)?;
        let stem = file.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let mut emit = |name: String, piece: &lrasr_core::corpus::AudioClip, text: String| -> Result<()> {
            let wav_path = out_dir.join(&name);
            write_wav(&wav_path, piece).map_err(data)?;
            let rel = wav_path
                .strip_prefix(&manifest_dir)
                .map(Path::to_path_buf)
                .unwrap_or_else(|_| std::path::absolute(&wav_path).unwrap_or(wav_path.clone()));
            records.push(UtteranceRecord {
                audio_path: rel.to_string_lossy().into_owned(),
                duration_s: piece.duration_seconds(),
                text,
                lang: cfg.str("lang").to_string(),
                source: cfg.str("source").to_string(),
            });
            Ok(())
        };
        if let Some(raw) = transcripts.get(&stem) {
            let d = clip.duration_seconds();
            if d < params.min_clip_s || d > params.max_clip_s {
                eprintln!(
                    "{}: {d:.2} s is outside [{}, {}] s; a transcribed recording cannot be split, dropped",
                    file.display(),
                    params.min_clip_s,
                    params.max_clip_s
                );
                dropped += 1;
                continue;
            }
            let mut text = normalize(raw, &policy);
            if romanize {
                text = transliterate(&text, &table);
            }
            emit(format!("{stem}.wav"), &clip, text)?;
        } else {
            let seg = segment(clip.samples(), clip.sample_rate(), &params).map_err(data)?;
            dropped += seg.discarded.iter().filter(|d| !d.1).count();
            excluded += seg.discarded.iter().filter(|d| d.1).count();
            for (i, r) in seg.clips.into_iter().enumerate() {
                emit(format!("{stem}-{i:04}.wav"), &clip.slice(r), String::new())?;
            }
        }
    }
    build_manifest(&records, &manifest)?;
    eprintln!(
        "prepare: {} recordings -> {} clips; {dropped} pieces below {} s dropped, {excluded} below {} s excluded",
        inputs.len(),
        records.len(),
        params.min_clip_s,
        params.min_keep_s
    );
    Ok(())
}

fn vocab(cfg: &RunConfig) -> Result<()> {
    let policy = sharing_policy(cfg)?;
    let mut texts = Vec::new();
    for m in cfg.required("manifests")?.split(',').map(str::trim).filter(|m| !m.is_empty()) {
        texts.extend(read_manifest(Path::new(m))?.into_iter().map(|r| r.text));
    }
    let v = build_vocabulary(texts.iter().map(String::as_str), policy).map_err(data)?;
    write_file(&path(cfg, "output")?, v.to_file_string())
}

fn parse_sources(cfg: &RunConfig) -> Result<Vec<(PathBuf, Share)>> {
    cfg.required("sources")?
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            let (p, share) = s.rsplit_once(':').ok_or_else(|| cfg.bad("sources", format!("{s:?} has no :<share>")))?;
            let share = if share.contains('.') {
                Share::Fraction(share.parse().map_err(|_| cfg.bad("sources", format!("bad fraction in {s:?}")))?)
            } else {
                Share::Factor(share.parse().map_err(|_| cfg.bad("sources", format!("bad factor in {s:?}")))?)
            };
            Ok((PathBuf::from(p), share))
        })
        .collect()
}

fn mix(cfg: &RunConfig) -> Result<()> {
    let output = path(cfg, "output")?;
    let out_dir = output.parent().map(Path::to_path_buf).unwrap_or_default();
    let out_abs = std::path::absolute(&out_dir).unwrap_or(out_dir.clone());
    let mut sources = Vec::new();
    for (p, share) in parse_sources(cfg)? {
        let records = read_manifest(&p)?
            .into_iter()
            .map(|mut r| {
                let audio = resolve(&p, &r.audio_path);
                let audio = std::path::absolute(&audio).unwrap_or(audio);
                r.audio_path =
                    audio.strip_prefix(&out_abs).map(Path::to_path_buf).unwrap_or(audio).to_string_lossy().into_owned();
                r
            })
            .collect();
        sources.push(MixSource { records, share });
    }
    let mixed = build_mixture(&sources, cfg.get("seed")?).map_err(|e| match e {
        TrainError::EmptySource(_) => data(e),
        e => CliError::Usage(e.to_string()),
    })?;
    if !out_dir.as_os_str().is_empty() {
        fs::create_dir_all(&out_dir).map_err(data)?;
    }
    write_manifest(&output, &mixed)?;
    eprintln!("mix: {} records", mixed.len());
    Ok(())
}

fn model_config(cfg: &RunConfig) -> Result<ModelConfig> {
    let layers = cfg
        .str("encoder_layers")
        .split(',')
        .map(|l| {
            let parts: Vec<usize> = l
                .trim()
                .split(':')
                .map(|x| x.parse())
                .collect::<Result<_, _>>()
                .map_err(|_| cfg.bad("encoder_layers", "expected channels:kernel:stride"))?;
            match parts[..] {
                [channels, kernel, stride] => Ok(ConvLayer { channels, kernel, stride }),
                _ => Err(cfg.bad("encoder_layers", "expected channels:kernel:stride")),
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mc = ModelConfig {
        encoder_layers: layers,
        model_dim: cfg.get("model_dim")?,
        ffn_dim: cfg.get("ffn_dim")?,
        num_heads: cfg.get("num_heads")?,
        num_transformer_layers: cfg.get("num_transformer_layers")?,
        quantizer_groups: cfg.get("quantizer_groups")?,
        entries_per_group: cfg.get("entries_per_group")?,
        codevector_dim: cfg.get("codevector_dim")?,
        mask_prob: cfg.get("mask_prob")?,
        mask_span: cfg.get("mask_span")?,
        num_negatives: cfg.get("num_negatives")?,
        temperature: cfg.get("temperature")?,
        diversity_weight: cfg.get("diversity_weight")?,
        vocab_size: None,
    };
    mc.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(mc)
}

/// Model and parameters from `--init` or fresh. With a checkpoint its
/// architecture wins; masking and loss settings come from the run config.
fn initial_model(cfg: &RunConfig) -> Result<(ModelConfig, ModelParameters)> {
    let fresh = model_config(cfg)?;
    match cfg.opt("init") {
        None => {
            let p = ModelParameters::init(&fresh, cfg.get("seed")?);
            Ok((fresh, p))
        }
        Some(p) => {
            let ck = Checkpoint::load(Path::new(p)).map_err(data)?;
            let mc = ModelConfig {
                mask_prob: fresh.mask_prob,
                mask_span: fresh.mask_span,
                num_negatives: fresh.num_negatives,
                temperature: fresh.temperature,
                diversity_weight: fresh.diversity_weight,
                ..ck.config
            };
            Ok((mc, ck.params))
        }
    }
}

fn train_config(cfg: &RunConfig, finetune: bool) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let tc = TrainConfig {
        learning_rate: cfg.get("learning_rate")?,
        max_updates: cfg.get("max_updates")?,
        batch_budget: cfg.get("batch_budget")?,
        accumulation: cfg.get("accumulation")?,
        warmup_fraction: cfg.get("warmup_fraction")?,
        seed: cfg.get("seed")?,
        validate_every: cfg.get("validate_every")?,
        freeze_encoder: cfg.get("freeze_encoder")?,
        gumbel_start: if finetune { d.gumbel_start } else { cfg.get("gumbel_start")? },
        gumbel_end: if finetune { d.gumbel_end } else { cfg.get("gumbel_end")? },
        finetune_mask_prob: if finetune { cfg.get("finetune_mask_prob")? } else { d.finetune_mask_prob },
    };
    tc.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(tc)
}

fn write_run_config(out_dir: &Path, cfg: &RunConfig) -> Result<()> {
    write_file(&out_dir.join("config.txt"), cfg.echo())
}

fn pretrain(cfg: &RunConfig) -> Result<()> {
    let (mc, params) = initial_model(cfg)?;
    let tc = train_config(cfg, false)?;
    let out_dir = path(cfg, "output_dir")?;
    let clips = load_utterances(&path(cfg, "train_manifest")?)?;
    write_run_config(&out_dir, cfg)?;
    let out = pipeline::pretrain(params, &mc, &clips, &tc, &out_dir)?;
    let (first, last) = (out.validation.first().expect("update 0"), out.validation.last().expect("update 0"));
    eprintln!(
        "pretrain: {} clips ({} skipped); validation contrastive loss {:.4} at update {} -> {:.4} at update {}",
        clips.len() - out.skipped.len(),
        out.skipped.len(),
        first.1.contrastive,
        first.0,
        last.1.contrastive,
        last.0
    );
    Ok(())
}

fn finetune(cfg: &RunConfig) -> Result<()> {
    let vocab = CharVocabulary::parse(&read_text(&path(cfg, "vocab")?)?).map_err(data)?;
    let policy = sharing_policy(cfg)?;
    let (mut mc, mut params) = initial_model(cfg)?;
    match mc.vocab_size {
        Some(n) if n != vocab.len() => {
            return Err(data(format!("checkpoint CTC head has {n} outputs; the vocabulary has {}", vocab.len())))
        }
        _ => mc.vocab_size = Some(vocab.len()),
    }
    params.complete(&mc, cfg.get("seed")?);
    let tc = train_config(cfg, true)?;
    let out_dir = path(cfg, "output_dir")?;
    let fold = |mut u: pipeline::Utterance| {
        u.text = policy.apply(&u.text);
        u
    };
    let train: Vec<_> = load_utterances(&path(cfg, "train_manifest")?)?.into_iter().map(fold).collect();
    let valid: Vec<_> = match cfg.opt("valid_manifest") {
        Some(p) => load_utterances(Path::new(p))?.into_iter().map(fold).collect(),
        None => Vec::new(),
    };
    write_run_config(&out_dir, cfg)?;
    let out = pipeline::finetune(params, &mc, &vocab, &train, &valid, &tc, &out_dir)?;
    for s in &out.skipped {
        eprintln!("skipped {}: {}", s.id, s.reason);
    }
    eprintln!(
        "finetune: best checkpoint {} (update {}, validation WER {:.2}, CER {:.2})",
        out.best.path, out.best.update_step, out.best.validation_wer, out.best.validation_cer
    );
    Ok(())
}

fn corpus_sentences(p: &Path) -> Result<Vec<Vec<String>>> {
    let is_manifest = p.extension().is_some_and(|x| x == "jsonl");
    let lines: Vec<String> = if is_manifest {
        read_manifest(p)?.into_iter().map(|r| r.text).collect()
    } else {
        read_text(p)?.lines().map(str::to_string).collect()
    };
    Ok(lines
        .iter()
        .map(|l| l.split_whitespace().map(str::to_string).collect::<Vec<_>>())
        .filter(|s| !s.is_empty())
        .collect())
}

fn lm_train(cfg: &RunConfig) -> Result<()> {
    let order: usize = cfg.get("order")?;
    let smoothing = match cfg.str("smoothing") {
        "kn" => Smoothing::ModifiedKneserNey,
        s => match s.strip_prefix("addk:").and_then(|k| k.parse::<f64>().ok()) {
            Some(k) if k > 0.0 => Smoothing::AddK(k),
            _ => return Err(cfg.bad("smoothing", "expected kn or addk:<k> with k > 0").into()),
        },
    };
    let sentences = corpus_sentences(&path(cfg, "corpus")?)?;
    let (model, warnings) = train_ngram(&sentences, order, smoothing).map_err(|e| match e {
        lrasr_core::ngram::NGramError::ZeroOrder => CliError::Usage(e.to_string()),
        e => data(e),
    })?;
    for w in warnings {
        eprintln!("warning: {w:?}");
    }
    write_file(&path(cfg, "output")?, write_arpa(&model))
}

fn lm_ppl(cfg: &RunConfig) -> Result<()> {
    let lm_path = path(cfg, "lm")?;
    let model = read_arpa(&read_text(&lm_path)?).map_err(|e| data(format!("{}:{e}", lm_path.display())))?;
    let report = perplexity(&model, &corpus_sentences(&path(cfg, "corpus")?)?);
    let json = serde_json::json!({
        "ppl_including_oov": report.ppl_including_oov,
        "ppl_excluding_oov": report.ppl_excluding_oov,
        "oov_rate": report.oov_rate(),
        "oov_count": report.oov_count,
        "token_count": report.token_count,
        "sentence_count": report.sentence_count,
        "log10_prob_total": report.log10_prob_total,
    });
    let text = serde_json::to_string_pretty(&json).expect("serializable") + "\n";
    print!("{text}");
    if let Some(out) = cfg.opt("output") {
        write_file(Path::new(out), text)?;
    }
    Ok(())
}

fn decode(cfg: &RunConfig) -> Result<()> {
    let ck = Checkpoint::load(&path(cfg, "checkpoint")?).map_err(data)?;
    let vocab = match cfg.opt("vocab") {
        Some(p) => CharVocabulary::parse(&read_text(Path::new(p))?).map_err(data)?,
        None => {
            let symbols = ck
                .vocab
                .as_ref()
                .ok_or_else(|| CliError::Usage("checkpoint stores no vocabulary; pass --vocab".into()))?;
            CharVocabulary::parse(&(symbols.join("\n") + "\n")).map_err(data)?
        }
    };
    let lm = match cfg.opt("lm") {
        Some(p) => Some(read_arpa(&read_text(Path::new(p))?).map_err(|e| data(format!("{p}:{e}")))?),
        None => None,
    };
    let decoder = match (cfg.str("decoder"), lm.is_some()) {
        ("greedy", _) | ("auto", false) => Decoder::Greedy,
        ("beam", _) | ("auto", true) => Decoder::Beam,
        _ => return Err(cfg.bad("decoder", "expected greedy, beam or auto").into()),
    };
    let weights = DecoderWeights {
        beam_width: cfg.get("beam_width")?,
        lm_weight: cfg.get("lm_weight")?,
        word_bonus: cfg.get("word_bonus")?,
    };
    let utts = load_utterances(&path(cfg, "manifest")?)?;
    let entries =
        pipeline::decode(&ck.params, &ck.config, &vocab, &utts, decoder, lm.as_ref(), &weights, cfg.get("nbest")?)?;
    write_file(&path(cfg, "output")?, pipeline::nbest_string(&entries))
}

/// `(id, text)` pairs from a manifest (id = audio_path) or an n-best file
/// (rank-1 entries).
fn read_pairs(p: &Path) -> Result<Vec<(String, String)>> {
    let text = read_text(p)?;
    let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    let is_manifest = serde_json::from_str::<serde_json::Value>(first).is_ok_and(|v| v.get("version").is_some());
    if is_manifest {
        let records = parse_manifest(&text).map_err(|(line, m)| data(format!("{}:{line}: {m}", p.display())))?;
        Ok(records.into_iter().map(|r| (r.audio_path, r.text)).collect())
    } else {
        pipeline::parse_nbest(&text).map_err(|(line, m)| data(format!("{}:{line}: {m}", p.display())))
    }
}

fn score_cmd(cfg: &RunConfig) -> Result<()> {
    let refs = read_pairs(&path(cfg, "refs")?)?;
    let hyps = read_pairs(&path(cfg, "hyps")?)?;
    let options = ScoreOptions {
        relaxation: RelaxationPolicy { romanize_kana: cfg.get("relax_kana")?, case_fold: cfg.get("relax_case")? },
        cer_includes_spaces: cfg.get("cer_includes_spaces")?,
    };
    let report = score(&refs, &hyps, &options, &translit_table(cfg)?).map_err(data)?;
    println!("{:<12} {:>8} {:>6} {:>6} {:>6} {:>8} {:>8}", "level", "rate%", "sub", "ins", "del", "errors", "ref_len");
    for (level, rate, c, n) in [
        ("character", report.cer, &report.chars, report.ref_chars),
        ("word", report.wer, &report.words, report.ref_words),
    ] {
        println!(
            "{level:<12} {rate:>8.2} {:>6} {:>6} {:>6} {:>8} {n:>8}",
            c.substitutions, c.insertions, c.deletions, c.distance
        );
    }
    println!("utterances: {}", report.utterances.len());
    if let Some(out) = cfg.opt("output") {
        write_file(Path::new(out), serde_json::to_string_pretty(&report).expect("serializable") + "\n")?;
    }
    let mut over = Vec::new();
    if let Some(max) = cfg.get_opt::<f64>("max_cer")? {
        if report.cer > max {
            over.push(format!("CER {:.2} > {max}", report.cer));
        }
    }
    if let Some(max) = cfg.get_opt::<f64>("max_wer")? {
        if report.wer > max {
            over.push(format!("WER {:.2} > {max}", report.wer));
        }
    }
    if over.is_empty() {
        Ok(())
    } else {
        Err(CliError::Threshold(over.join("; ")))
    }
}

fn synth_fixture(cfg: &RunConfig) -> Result<()> {
    let seed: u64 = cfg.get("seed")?;
    let out_dir = path(cfg, "output_dir")?;
    let lang = ToyLanguage::new(seed, cfg.get("lexicon_size")?, cfg.get("max_words")?);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lm_text = String::new();
    for (split, count_key, labelled) in [
        ("train", "train_count", true),
        ("valid", "valid_count", true),
        ("test", "test_count", true),
        ("unlabeled", "unlabeled_count", false),
    ] {
        let count: usize = cfg.get(count_key)?;
        let dir = out_dir.join(split);
        fs::create_dir_all(&dir).map_err(|e| data(format!("{}: {e}", dir.display())))?;
        let mut records = Vec::with_capacity(count);
        for i in 0..count {
            let (text, audio) = lang.utterance(&mut rng);
            let rel = format!("{split}/{i:04}.wav");
            let clip = lrasr_core::corpus::AudioClip::mono(audio, SYNTH_RATE).expect("nonzero rate");
            write_wav(&out_dir.join(&rel), &clip).map_err(data)?;
            if split == "train" {
                lm_text.push_str(&text);
                lm_text.push('\n');
            }
            records.push(UtteranceRecord {
                audio_path: rel,
                duration_s: clip.duration_seconds(),
                text: if labelled { text } else { String::new() },
                lang: "toy".into(),
                source: "synth".into(),
            });
        }
        build_manifest(&records, &out_dir.join(format!("{split}.jsonl")))?;
    }
    write_file(&out_dir.join("vocab.txt"), CharVocabulary::from_chars(LETTERS).to_file_string())?;
    write_file(&out_dir.join("lm_corpus.txt"), lm_text)?;
    write_file(&out_dir.join("lexicon.txt"), lang.lexicon.join("\n") + "\n")?;
    Ok(())
}

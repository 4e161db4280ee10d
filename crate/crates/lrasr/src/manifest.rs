//! JSON-lines manifests: a `{"version":1}` header, then one
//! [`UtteranceRecord`] per line. Relative audio paths resolve against the
//! manifest's directory.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use lrasr_core::corpus::UtteranceRecord;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::wav::wav_duration;

pub const MANIFEST_VERSION: u32 = 1;
/// Allowed gap between a record's `duration_s` and its audio file.
pub const DURATION_TOLERANCE_S: f64 = 0.010;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordProblem {
    pub index: usize,
    pub audio_path: String,
    pub message: String,
}

impl fmt::Display for RecordProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "record {} ({}): {}", self.index, self.audio_path, self.message)
    }
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("{} invalid record(s); manifest not written:\n{}", .0.len(), report(.0))]
    Invalid(Vec<RecordProblem>),
}

fn report(problems: &[RecordProblem]) -> String {
    problems.iter().map(|p| format!("  {p}")).collect::<Vec<_>>().join("\n")
}

pub fn resolve(manifest: &Path, audio_path: &str) -> PathBuf {
    let p = Path::new(audio_path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest.parent().unwrap_or(Path::new("")).join(p)
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<UtteranceRecord>, ManifestError> {
    let text =
        fs::read_to_string(path).map_err(|source| ManifestError::Io { path: path.display().to_string(), source })?;
    parse_manifest(&text).map_err(|(line, message)| ManifestError::Parse {
        path: path.display().to_string(),
        line,
        message,
    })
}

/// Errors carry a 1-based line number.
pub fn parse_manifest(text: &str) -> Result<Vec<UtteranceRecord>, (usize, String)> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let Some((_, first)) = lines.next() else {
        return Err((1, "missing header line".into()));
    };
    let header: Header = serde_json::from_str(first).map_err(|e| (1, format!("bad header: {e}")))?;
    if header.version != MANIFEST_VERSION {
        return Err((1, format!("unsupported manifest version {}", header.version)));
    }
    lines.map(|(i, l)| serde_json::from_str::<UtteranceRecord>(l).map_err(|e| (i + 1, e.to_string()))).collect()
}

pub fn manifest_string(records: &[UtteranceRecord]) -> String {
    let mut out = serde_json::to_string(&Header { version: MANIFEST_VERSION }).expect("header serializes");
    out.push('\n');
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

/// Writes without checking the audio.
pub fn write_manifest(path: &Path, records: &[UtteranceRecord]) -> Result<(), ManifestError> {
    let io = |source| ManifestError::Io { path: path.display().to_string(), source };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(manifest_string(records).as_bytes()).map_err(io)
}

/// Every problem in `records`, in input order: missing or unreadable audio,
/// and durations more than 10 ms away from the file's.
pub fn check_records(manifest: &Path, records: &[UtteranceRecord]) -> Vec<RecordProblem> {
    let mut problems = Vec::new();
    for (index, r) in records.iter().enumerate() {
        let problem = |message: String| RecordProblem { index, audio_path: r.audio_path.clone(), message };
        let path = resolve(manifest, &r.audio_path);
        if !path.is_file() {
            problems.push(problem("audio file does not exist".into()));
            continue;
        }
        match wav_duration(&path) {
            Err(e) => problems.push(problem(e.to_string())),
            Ok(d) if !(r.duration_s.is_finite() && (d - r.duration_s).abs() <= DURATION_TOLERANCE_S) => {
                problems.push(problem(format!("duration_s {} but the audio lasts {d:.4} s", r.duration_s)))
            }
            Ok(_) => {}
        }
    }
    problems
}

/// Validates and writes. Nothing is written if any record fails.
pub fn build_manifest(records: &[UtteranceRecord], output: &Path) -> Result<(), ManifestError> {
    let problems = check_records(output, records);
    if !problems.is_empty() {
        return Err(ManifestError::Invalid(problems));
    }
    write_manifest(output, records)
}

//! 16-bit PCM WAV files. Samples are read as `i / 32768` and written by
//! rounding `s · 32768` into the `i16` range, so a read/write cycle is
//! bit-exact.

use std::path::Path;

use lrasr_core::corpus::AudioClip;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum WavError {
    #[error("{path}: {source}")]
    Io { path: String, source: hound::Error },
    #[error("{path}: expected 16-bit integer PCM, found {bits}-bit {format:?}")]
    Format { path: String, bits: u16, format: hound::SampleFormat },
    #[error("{path}: {message}")]
    Content { path: String, message: String },
}

fn io(path: &Path) -> impl FnOnce(hound::Error) -> WavError + '_ {
    move |source| WavError::Io { path: path.display().to_string(), source }
}

pub fn read_wav(path: &Path) -> Result<AudioClip, WavError> {
    let mut reader = hound::WavReader::open(path).map_err(io(path))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(WavError::Format {
            path: path.display().to_string(),
            bits: spec.bits_per_sample,
            format: spec.sample_format,
        });
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0))
        .collect::<Result<Vec<f32>, _>>()
        .map_err(io(path))?;
    AudioClip::new(samples, spec.sample_rate, spec.channels)
        .map_err(|e| WavError::Content { path: path.display().to_string(), message: e.to_string() })
}

/// Duration from the header alone.
pub fn wav_duration(path: &Path) -> Result<f64, WavError> {
    let reader = hound::WavReader::open(path).map_err(io(path))?;
    Ok(reader.duration() as f64 / reader.spec().sample_rate as f64)
}

pub fn to_i16(sample: f32) -> i16 {
    (sample as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<(), WavError> {
    let spec = hound::WavSpec {
        channels: clip.channels(),
        sample_rate: clip.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(io(path))?;
    for &s in clip.samples() {
        writer.write_sample(to_i16(s)).map_err(io(path))?;
    }
    writer.finalize().map_err(io(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let ints: Vec<i16> = vec![i16::MIN, -1, 0, 1, 12345, i16::MAX];
        let clip = AudioClip::new(ints.iter().map(|&i| i as f32 / 32768.0).collect(), 8000, 2).unwrap();
        write_wav(&path, &clip).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back, clip);
        assert_eq!(back.samples().iter().map(|&s| to_i16(s)).collect::<Vec<_>>(), ints);
        write_wav(&path, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), bytes);
        assert!((wav_duration(&path).unwrap() - 3.0 / 8000.0).abs() < 1e-12);
    }

    #[test]
    fn clamps_out_of_range() {
        assert_eq!(to_i16(1.5), i16::MAX);
        assert_eq!(to_i16(-1.0), i16::MIN);
    }

    #[test]
    fn rejects_float_wav() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16000,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        w.write_sample(0.5f32).unwrap();
        w.finalize().unwrap();
        assert!(matches!(read_wav(&path), Err(WavError::Format { .. })));
    }
}

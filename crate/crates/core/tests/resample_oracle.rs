//! Resampler spectra checked with an FFT.

use lrasr_core::corpus::{resample_mono, AudioClip};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

fn magnitudes(samples: &[f32]) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = samples.iter().map(|&x| Complex::new(x as f64, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
    buf[..buf.len() / 2].iter().map(|c| c.norm()).collect()
}

fn sine(freq: f64, rate: u32, seconds: f64) -> AudioClip {
    let n = (rate as f64 * seconds) as usize;
    let s = (0..n).map(|i| (0.5 * (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin()) as f32).collect();
    AudioClip::mono(s, rate).unwrap()
}

fn peak_hz(clip: &AudioClip) -> f64 {
    let mags = magnitudes(clip.samples());
    let (bin, _) = mags.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap();
    bin as f64 * clip.sample_rate() as f64 / clip.frames() as f64
}

#[test]
fn downsampled_tone_keeps_its_frequency() {
    let out = resample_mono(&sine(440.0, 48_000, 2.0), 16_000).unwrap();
    assert_eq!(out.sample_rate(), 16_000);
    assert_eq!(out.frames(), 32_000);
    let peak = peak_hz(&out);
    assert!((peak - 440.0).abs() <= 1.0, "peak at {peak} Hz");
}

#[test]
fn tone_above_new_nyquist_is_removed() {
    let mut a = sine(440.0, 48_000, 2.0).into_samples();
    let b = sine(11_000.0, 48_000, 2.0).into_samples();
    for (x, y) in a.iter_mut().zip(&b) {
        *x += y;
    }
    let out = resample_mono(&AudioClip::mono(a, 48_000).unwrap(), 16_000).unwrap();
    let mags = magnitudes(out.samples());
    let hz = |f: f64| (f * out.frames() as f64 / 16_000.0).round() as usize;
    let kept = mags[hz(440.0)];
    // 11 kHz would alias to 5 kHz.
    let alias = mags[hz(5_000.0) - 3..=hz(5_000.0) + 3].iter().copied().fold(0.0, f64::max);
    assert!(alias < kept * 1e-2, "alias {alias} vs tone {kept}");
}

#[test]
fn common_rates_keep_the_tone() {
    for rate in [8_000, 22_050, 44_100] {
        let out = resample_mono(&sine(440.0, rate, 1.0), 16_000).unwrap();
        let peak = peak_hz(&out);
        assert!((peak - 440.0).abs() <= 1.0, "{rate} Hz input: peak at {peak} Hz");
    }
}

//! A seeded toy language for end-to-end tests.
//!
//! Eight letters, each a fixed 100 ms template: four steady tones and four
//! tones with a band of noise around them. Words of two to four letters come from a seeded lexicon.
//! Rendering adds per-letter gain jitter, background noise, short gaps
//! between letters and longer gaps between words.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SYNTH_RATE: u32 = 16_000;
pub const LETTERS: [char; 8] = ['a', 'e', 'i', 'o', 'k', 's', 't', 'm'];
const FREQUENCIES: [f64; 8] = [300.0, 520.0, 800.0, 1150.0, 1600.0, 2150.0, 2800.0, 3600.0];
const LETTER_MS: usize = 100;

fn ms(n: f64) -> usize {
    libm::round(n * SYNTH_RATE as f64 / 1000.0) as usize
}

#[derive(Debug, Clone)]
pub struct ToyLanguage {
    templates: Vec<Vec<f32>>,
    pub lexicon: Vec<String>,
    pub max_words: usize,
}

impl ToyLanguage {
    /// Templates depend only on the letter; the lexicon on `seed`.
    pub fn new(seed: u64, lexicon_size: usize, max_words: usize) -> Self {
        let len = ms(LETTER_MS as f64);
        let templates = (0..LETTERS.len())
            .map(|k| {
                let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0000 + k as u64);
                let f = FREQUENCIES[k];
                let mut smooth = 0.0;
                (0..len)
                    .map(|i| {
                        let t = i as f64 / SYNTH_RATE as f64;
                        let env = libm::sin(core::f64::consts::PI * i as f64 / len as f64).min(0.5) * 2.0;
                        let carrier = libm::sin(2.0 * core::f64::consts::PI * f * t);
                        let v = if k < 4 {
                            0.6 * carrier + 0.2 * libm::sin(4.0 * core::f64::consts::PI * f * t)
                        } else {
                            smooth = 0.8 * smooth + 0.2 * rng.gen_range(-1.0..1.0);
                            0.4 * carrier + 1.5 * smooth * carrier
                        };
                        (0.5 * env * v) as f32
                    })
                    .collect()
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut lexicon: Vec<String> = Vec::new();
        while lexicon.len() < lexicon_size {
            let n = rng.gen_range(2..=4);
            let word: String = (0..n).map(|_| LETTERS[rng.gen_range(0..LETTERS.len())]).collect();
            if !lexicon.contains(&word) {
                lexicon.push(word);
            }
        }
        Self { templates, lexicon, max_words: max_words.max(1) }
    }

    pub fn sample_transcript(&self, rng: &mut impl Rng) -> String {
        let n = rng.gen_range(1..=self.max_words);
        let words: Vec<&str> = (0..n).map(|_| self.lexicon.choose(rng).map(String::as_str).unwrap_or("")).collect();
        words.join(" ")
    }

    /// Renders a transcript of letters and single spaces. Characters outside
    /// the alphabet are skipped.
    pub fn render(&self, transcript: &str, rng: &mut impl Rng) -> Vec<f32> {
        let mut out: Vec<f32> = Vec::new();
        let silence = |out: &mut Vec<f32>, lo: f64, hi: f64, rng: &mut dyn rand::RngCore| {
            let n = ms(rng.gen_range(lo..hi));
            out.extend(core::iter::repeat(0.0).take(n));
        };
        silence(&mut out, 100.0, 200.0, rng);
        for (w, word) in transcript.split(' ').filter(|w| !w.is_empty()).enumerate() {
            if w > 0 {
                silence(&mut out, 150.0, 250.0, rng);
            }
            for (i, c) in word.chars().enumerate() {
                let Some(k) = LETTERS.iter().position(|&l| l == c) else { continue };
                if i > 0 {
                    silence(&mut out, 20.0, 40.0, rng);
                }
                let gain: f32 = rng.gen_range(0.7..1.0);
                out.extend(self.templates[k].iter().map(|&s| s * gain));
            }
        }
        silence(&mut out, 100.0, 200.0, rng);
        for s in out.iter_mut() {
            *s = (*s + rng.gen_range(-0.005f32..0.005)).clamp(-1.0, 1.0);
        }
        out
    }

    pub fn utterance(&self, rng: &mut impl Rng) -> (String, Vec<f32>) {
        let text = self.sample_transcript(rng);
        let audio = self.render(&text, rng);
        (text, audio)
    }
}

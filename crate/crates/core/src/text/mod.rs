//! Transcript processing: normalization, kana romanization, output
//! vocabularies, and typological distance between languages.

pub mod normalize;
pub mod translit;
pub mod typology;
pub mod vocab;

pub use normalize::{normalize, CaseFold, NormalizationPolicy};
pub use translit::{transliterate, Target, TransliterationTable};
pub use typology::{language_distance, LanguageFeatureVector};
pub use vocab::{build_vocabulary, CharVocabulary, SharingPolicy};

//! Mean distance between typological feature vectors.

use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq)]
pub struct LanguageFeatureVector {
    pub feature_names: Vec<String>,
    /// `None` marks a missing value.
    pub feature_values: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TypologyError {
    #[error("feature inventories differ")]
    InventoryMismatch,
    #[error("feature {name:?} has value {value} outside [0, 1]")]
    OutOfRange { name: String, value: f64 },
    #[error("no feature is present in both vectors")]
    Incomparable,
}

impl LanguageFeatureVector {
    pub fn new(feature_names: Vec<String>, feature_values: Vec<Option<f64>>) -> Result<Self, TypologyError> {
        if feature_names.len() != feature_values.len() {
            return Err(TypologyError::InventoryMismatch);
        }
        for (name, value) in feature_names.iter().zip(&feature_values) {
            if let Some(v) = *value {
                if !(0.0..=1.0).contains(&v) {
                    return Err(TypologyError::OutOfRange { name: name.clone(), value: v });
                }
            }
        }
        Ok(Self { feature_names, feature_values })
    }
}

/// Mean absolute difference over the features both vectors define.
pub fn language_distance(a: &LanguageFeatureVector, b: &LanguageFeatureVector) -> Result<f64, TypologyError> {
    if a.feature_names != b.feature_names || a.feature_values.len() != b.feature_values.len() {
        return Err(TypologyError::InventoryMismatch);
    }
    let (sum, count) = a
        .feature_values
        .iter()
        .zip(&b.feature_values)
        .filter_map(|(x, y)| Some(libm::fabs(x.as_ref()? - y.as_ref()?)))
        .fold((0.0, 0usize), |(s, n), d| (s + d, n + 1));
    if count == 0 {
        return Err(TypologyError::Incomparable);
    }
    Ok(sum / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::format;
    use alloc::vec;

    fn vector(values: &[Option<f64>]) -> LanguageFeatureVector {
        let names = (0..values.len()).map(|i| format!("f{i}")).collect();
        LanguageFeatureVector::new(names, values.to_vec()).unwrap()
    }

    #[test]
    fn identical_vectors() {
        let a = vector(&[Some(0.2), None, Some(1.0)]);
        assert_eq!(language_distance(&a, &a), Ok(0.0));
    }

    #[test]
    fn opposite_vectors() {
        let a = vector(&[Some(0.0); 4]);
        let b = vector(&[Some(1.0); 4]);
        assert_eq!(language_distance(&a, &b), Ok(1.0));
    }

    #[test]
    fn missing_values_are_skipped() {
        let a = vector(&[Some(1.0), Some(0.0), None]);
        let b = vector(&[Some(1.0), Some(1.0), Some(0.0)]);
        assert_eq!(language_distance(&a, &b), Ok(0.5));
    }

    #[test]
    fn disjoint_coverage_is_incomparable() {
        let a = vector(&[Some(1.0), None]);
        let b = vector(&[None, Some(0.0)]);
        assert_eq!(language_distance(&a, &b), Err(TypologyError::Incomparable));
    }

    #[test]
    fn validation() {
        assert!(LanguageFeatureVector::new(vec!["x".into()], vec![Some(1.5)]).is_err());
        assert!(LanguageFeatureVector::new(vec!["x".into()], vec![]).is_err());
        assert_eq!(
            language_distance(&vector(&[Some(0.0)]), &vector(&[Some(0.0), None])),
            Err(TypologyError::InventoryMismatch)
        );
    }
}

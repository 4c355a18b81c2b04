use thiserror::Error;

use crate::tokenizer::Encoding;

/// Language label for the base language (Hindi, Roman script).
pub const BASE_LANG: u8 = 0;
/// Language label for the mixing language (English).
pub const MIX_LANG: u8 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnnotationError {
    #[error("label sequence is empty")]
    EmptyLabels,
    #[error("label {value} at position {position} is not 0 or 1")]
    InvalidLabel { position: usize, value: i64 },
    #[error("length mismatch: {what} has {actual} entries, expected {expected}")]
    LengthMismatch { what: &'static str, expected: usize, actual: usize },
    #[error("invalid CMI weights w_n={w_n}, w_p={w_p}: both must be >= 0 with a positive sum")]
    InvalidWeights { w_n: f64, w_p: f64 },
}

/// Weights of the code-mixing index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CmiConfig {
    /// Weight on the share of mixing-language words.
    pub w_n: f64,
    /// Weight on the switching-point count.
    pub w_p: f64,
}

impl Default for CmiConfig {
    fn default() -> Self {
        Self { w_n: 0.5, w_p: 0.5 }
    }
}

impl CmiConfig {
    pub fn new(w_n: f64, w_p: f64) -> Result<Self, AnnotationError> {
        let cfg = Self { w_n, w_p };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), AnnotationError> {
        let ok = self.w_n >= 0.0 && self.w_p >= 0.0 && self.w_n + self.w_p > 0.0;
        if ok {
            Ok(())
        } else {
            Err(AnnotationError::InvalidWeights { w_n: self.w_n, w_p: self.w_p })
        }
    }
}

fn check_bits(labels: &[u8]) -> Result<(), AnnotationError> {
    match labels.iter().position(|&l| l > 1) {
        Some(position) => Err(AnnotationError::InvalidLabel { position, value: labels[position] as i64 }),
        None => Ok(()),
    }
}

/// Marks a 1 before every word whose language differs from the previous
/// word's. Position 0 is always 0.
pub fn derive_switching_points(labels: &[u8]) -> Result<Vec<u8>, AnnotationError> {
    if labels.is_empty() {
        return Err(AnnotationError::EmptyLabels);
    }
    check_bits(labels)?;
    Ok(std::iter::once(0)
        .chain(labels.windows(2).map(|w| u8::from(w[0] != w[1])))
        .collect())
}

/// `(w_n · (N − N_d) + w_p · P) / N`, where `N_d` counts base-language
/// words and `P` counts switching points.
pub fn compute_cmi(labels: &[u8], switching_points: &[u8], cfg: &CmiConfig) -> Result<f64, AnnotationError> {
    if labels.is_empty() {
        return Err(AnnotationError::EmptyLabels);
    }
    if switching_points.len() != labels.len() {
        return Err(AnnotationError::LengthMismatch {
            what: "switching_points",
            expected: labels.len(),
            actual: switching_points.len(),
        });
    }
    check_bits(labels)?;
    check_bits(switching_points)?;
    let n = labels.len() as f64;
    let base = labels.iter().filter(|&&l| l == BASE_LANG).count() as f64;
    let switches = switching_points.iter().map(|&t| t as f64).sum::<f64>();
    Ok((cfg.w_n * (n - base) + cfg.w_p * switches) / n)
}

/// Puts each word's label on its first subword and `ignore_value` on every
/// other position (continuation pieces and specials).
pub fn align_word_labels(word_labels: &[i64], encoding: &Encoding, ignore_value: i64) -> Result<Vec<i64>, AnnotationError> {
    let words = encoding.word_ids.iter().flatten().max().map_or(0, |&m| m + 1);
    if words != word_labels.len() {
        return Err(AnnotationError::LengthMismatch { what: "word_labels", expected: words, actual: word_labels.len() });
    }
    let mut previous = None;
    Ok(encoding
        .word_ids
        .iter()
        .map(|&w| match w {
            Some(w) if previous != Some(w) => {
                previous = Some(w);
                word_labels[w]
            }
            _ => ignore_value,
        })
        .collect())
}

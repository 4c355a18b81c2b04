//! Per-token attention profiles from an encoder self-attention head.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{derive_switching_points, AnnotationError};
use crate::model::{Checkpoint, CheckpointKind, Encoder, ModelError, ParamStore, TokenBatch};
use crate::tensor::Tape;
use crate::tokenizer::{encode, Vocabulary};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("layer {layer} / head {head} out of range ({layers} layers, {heads} heads)")]
    OutOfRange { layer: usize, head: usize, layers: usize, heads: usize },
    #[error("text has {len} tokens, the model accepts at most {max}")]
    TooLong { len: usize, max: usize },
    #[error("text has no tokens besides [CLS]/[SEP]")]
    Empty,
    #[error("labels: {0}")]
    Labels(#[from] AnnotationError),
    #[error("{labels} labels for {words} words")]
    LabelCount { labels: usize, words: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("profile json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionProfile {
    pub tokens: Vec<String>,
    pub scores: Vec<f64>,
    pub switch_flags: Vec<u8>,
    pub layer: usize,
    pub head: usize,
}

/// Mean over valid query rows of each column of a row-major `t × t`
/// attention matrix. Columns of invalid keys are reported as 0.
pub fn column_means(attention: &[f64], valid: &[bool]) -> Vec<f64> {
    let t = valid.len();
    assert_eq!(attention.len(), t * t, "square attention matrix");
    let rows: Vec<usize> = (0..t).filter(|&i| valid[i]).collect();
    (0..t)
        .map(|j| {
            if !valid[j] || rows.is_empty() {
                return 0.0;
            }
            rows.iter().map(|&i| attention[i * t + j]).sum::<f64>() / rows.len() as f64
        })
        .collect()
}

/// Min-max scaling to [0, 1]; a constant input maps to 0.5 everywhere.
pub fn min_max_scale(raw: &[f64]) -> Vec<f64> {
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if !(span > 0.0) {
        return vec![0.5; raw.len()];
    }
    raw.iter().map(|v| ((v - lo) / span).clamp(0.0, 1.0)).collect()
}

/// Encoder weights and vocabulary from either checkpoint kind.
pub fn encoder_from_checkpoint(ck: &Checkpoint) -> Result<(Encoder, Vocabulary), AnalysisError> {
    let encoder = match ck.kind {
        CheckpointKind::Pretrained => ck.pretrained_model()?.encoder,
        CheckpointKind::Classifier { .. } => ck.classifier_model()?.encoder,
    };
    let vocab = Vocabulary::from_tokens(ck.vocab.clone()).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    Ok((encoder, vocab))
}

/// Scaled average attention each token receives in one head.
#[allow(clippy::too_many_arguments)]
pub fn attention_profile(
    encoder: &Encoder,
    params: &ParamStore,
    vocab: &Vocabulary,
    text: &str,
    labels: Option<&[u8]>,
    layer: usize,
    head: usize,
) -> Result<AttentionProfile, AnalysisError> {
    let layers = encoder.layers.len();
    let heads = encoder.layers.first().map_or(0, |l| l.attention.heads);
    if layer >= layers || head >= heads {
        return Err(AnalysisError::OutOfRange { layer, head, layers, heads });
    }
    let enc = encode(text, vocab, true, usize::MAX);
    let max = encoder.embeddings.max_len;
    if enc.len() > max {
        return Err(AnalysisError::TooLong { len: enc.len(), max });
    }
    if enc.word_count() == 0 {
        return Err(AnalysisError::Empty);
    }
    let flags_by_word: Vec<u8> = match labels {
        Some(l) => {
            if l.len() != enc.word_count() {
                return Err(AnalysisError::LabelCount { labels: l.len(), words: enc.word_count() });
            }
            derive_switching_points(l)?
        }
        None => vec![0; enc.word_count()],
    };

    let batch = TokenBatch::from_sequences(&[enc.ids.clone()]);
    let mut tape = Tape::new();
    let out = encoder.forward(&mut tape, params, &batch)?;
    let t = batch.len;
    let probs = tape.value(out.attentions[layer]).data();
    let matrix = &probs[head * t * t..(head + 1) * t * t];
    let raw = column_means(matrix, &batch.mask);

    let mut tokens = Vec::new();
    let mut kept = Vec::new();
    let mut switch_flags = Vec::new();
    let mut previous = None;
    for (pos, word) in enc.word_ids.iter().enumerate() {
        let Some(w) = *word else { continue };
        tokens.push(vocab.token(enc.ids[pos]).unwrap_or("[UNK]").to_string());
        kept.push(raw[pos]);
        switch_flags.push(if previous != Some(w) { flags_by_word[w] } else { 0 });
        previous = Some(w);
    }
    Ok(AttentionProfile { tokens, scores: min_max_scale(&kept), switch_flags, layer, head })
}

impl AttentionProfile {
    /// JSON with keys in the order tokens, scores, switch_flags, layer,
    /// head. Scores carry 18 significant digits so they read back exactly.
    pub fn to_json(&self) -> String {
        let list = |items: Vec<String>| items.join(", ");
        let mut out = String::from("{\n");
        let tokens = list(self.tokens.iter().map(|t| serde_json::to_string(t).expect("string")).collect());
        let _ = writeln!(out, "  \"tokens\": [{tokens}],");
        let _ = writeln!(out, "  \"scores\": [{}],", list(self.scores.iter().map(|s| format!("{s:.17e}")).collect()));
        let _ = writeln!(out, "  \"switch_flags\": [{}],", list(self.switch_flags.iter().map(u8::to_string).collect()));
        let _ = writeln!(out, "  \"layer\": {},", self.layer);
        let _ = writeln!(out, "  \"head\": {}", self.head);
        out.push_str("}\n");
        out
    }

    pub fn from_json(text: &str) -> Result<Self, AnalysisError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), AnalysisError> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, AnalysisError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

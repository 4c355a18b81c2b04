//! Aligned code-mixed records: JSONL I/O, validation and annotation.
//!
//! Each record carries the code-mixed sentence, its base-language
//! (Hindi, Roman script) and mixing-language (English) translations, one
//! language bit per whitespace word, and the derived switching-point bits.

mod annotate;
pub mod augment;

pub use annotate::{
    align_word_labels, compute_cmi, derive_switching_points, AnnotationError, CmiConfig, BASE_LANG, MIX_LANG,
};

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: malformed JSON: {message}")]
    Json { line: usize, message: String },
    #[error("line {line}: {reason}")]
    Invalid { line: usize, reason: RecordIssue },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Why a record failed validation.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum RecordIssue {
    #[error("missing or empty field `{0}`")]
    MissingField(&'static str),
    #[error("`{field}` has {actual} entries but the sentence has {words} words")]
    WordCount { field: &'static str, words: usize, actual: usize },
    #[error("`{field}` contains a value other than 0/1 at position {position}")]
    NotBinary { field: &'static str, position: usize },
    #[error("switching_points[0] must be 0")]
    LeadingSwitch,
    #[error("switching_points[{0}] disagrees with the language labels")]
    SwitchMismatch(usize),
}

/// On-disk JSONL shape. Translations and switching points are optional
/// here because raw input to annotation and augmentation may lack them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordJson {
    pub hinglish: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub english: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hindi_roman: Option<String>,
    pub labels: Vec<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub switching_points: Option<Vec<u8>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cmi: Option<f64>,
}

/// One fully annotated example.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusRecord {
    /// Code-mixed sentence.
    pub cm_text: String,
    /// Base-language translation.
    pub base_text: String,
    /// Mixing-language translation.
    pub mix_text: String,
    /// One bit per whitespace word of `cm_text`; 1 = mixing language.
    pub labels: Vec<u8>,
    pub switching_points: Vec<u8>,
    pub cmi: Option<f64>,
}

pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

fn check_binary(field: &'static str, bits: &[u8]) -> Result<(), RecordIssue> {
    match bits.iter().position(|&b| b > 1) {
        Some(position) => Err(RecordIssue::NotBinary { field, position }),
        None => Ok(()),
    }
}

/// Checks label/switch invariants against the sentence's word count.
pub fn validate_annotation(text: &str, labels: &[u8], switching_points: &[u8]) -> Result<(), RecordIssue> {
    let words = word_count(text);
    if words == 0 {
        return Err(RecordIssue::MissingField("hinglish"));
    }
    if labels.len() != words {
        return Err(RecordIssue::WordCount { field: "labels", words, actual: labels.len() });
    }
    if switching_points.len() != words {
        return Err(RecordIssue::WordCount { field: "switching_points", words, actual: switching_points.len() });
    }
    check_binary("labels", labels)?;
    check_binary("switching_points", switching_points)?;
    if switching_points[0] != 0 {
        return Err(RecordIssue::LeadingSwitch);
    }
    for i in 1..words {
        if (switching_points[i] == 1) != (labels[i] != labels[i - 1]) {
            return Err(RecordIssue::SwitchMismatch(i));
        }
    }
    Ok(())
}

impl CorpusRecord {
    pub fn validate(&self) -> Result<(), RecordIssue> {
        if self.base_text.trim().is_empty() {
            return Err(RecordIssue::MissingField("hindi_roman"));
        }
        if self.mix_text.trim().is_empty() {
            return Err(RecordIssue::MissingField("english"));
        }
        validate_annotation(&self.cm_text, &self.labels, &self.switching_points)
    }

    pub fn word_count(&self) -> usize {
        word_count(&self.cm_text)
    }

    /// Ground-truth code-mixing index of this record.
    pub fn cmi_with(&self, cfg: &CmiConfig) -> Result<f64, AnnotationError> {
        compute_cmi(&self.labels, &self.switching_points, cfg)
    }

    pub fn to_json(&self) -> RecordJson {
        RecordJson {
            hinglish: self.cm_text.clone(),
            english: Some(self.mix_text.clone()),
            hindi_roman: Some(self.base_text.clone()),
            labels: self.labels.clone(),
            switching_points: Some(self.switching_points.clone()),
            cmi: self.cmi,
        }
    }
}

impl TryFrom<RecordJson> for CorpusRecord {
    type Error = RecordIssue;

    /// Strict conversion: translations and switching points must be present.
    fn try_from(raw: RecordJson) -> Result<Self, RecordIssue> {
        let english = raw.english.filter(|s| !s.trim().is_empty()).ok_or(RecordIssue::MissingField("english"))?;
        let hindi = raw.hindi_roman.filter(|s| !s.trim().is_empty()).ok_or(RecordIssue::MissingField("hindi_roman"))?;
        let switching_points = raw.switching_points.ok_or(RecordIssue::MissingField("switching_points"))?;
        let record = CorpusRecord {
            cm_text: raw.hinglish,
            base_text: hindi,
            mix_text: english,
            labels: raw.labels,
            switching_points,
            cmi: raw.cmi,
        };
        record.validate()?;
        Ok(record)
    }
}

/// Reads JSONL, returning each non-blank line with its 1-based number.
pub fn read_json_lines(path: &Path) -> Result<Vec<(usize, RecordJson)>, CorpusError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RecordJson =
            serde_json::from_str(&line).map_err(|e| CorpusError::Json { line: i + 1, message: e.to_string() })?;
        out.push((i + 1, raw));
    }
    Ok(out)
}

/// Loads fully annotated records; the first invalid line is an error.
pub fn load_jsonl(path: &Path) -> Result<Vec<CorpusRecord>, CorpusError> {
    read_json_lines(path)?
        .into_iter()
        .map(|(line, raw)| CorpusRecord::try_from(raw).map_err(|reason| CorpusError::Invalid { line, reason }))
        .collect()
}

pub fn save_jsonl(path: &Path, records: &[CorpusRecord]) -> Result<(), CorpusError> {
    let rows: Vec<RecordJson> = records.iter().map(CorpusRecord::to_json).collect();
    write_json_lines(path, &rows)
}

pub fn write_json_lines<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CorpusError> {
    let mut writer = BufWriter::new(File::create(path)?);
    for row in rows {
        let line = serde_json::to_string(row).map_err(|e| CorpusError::Json { line: 0, message: e.to_string() })?;
        writeln!(writer, "{line}")?;
    }
    writer.flush()?;
    Ok(())
}

/// Outcome of annotating raw rows.
#[derive(Debug, Default)]
pub struct AnnotateReport {
    pub records: Vec<RecordJson>,
    pub rejected: Vec<(usize, RecordIssue)>,
}

/// Derives missing switching points, validates and attaches CMI. Rows that
/// fail validation are dropped and reported.
pub fn annotate(rows: Vec<(usize, RecordJson)>, cfg: &CmiConfig) -> AnnotateReport {
    let mut report = AnnotateReport::default();
    for (line, mut raw) in rows {
        if raw.switching_points.is_none() {
            match derive_switching_points(&raw.labels) {
                Ok(t) => raw.switching_points = Some(t),
                Err(AnnotationError::EmptyLabels) => {
                    report.rejected.push((line, RecordIssue::MissingField("labels")));
                    continue;
                }
                Err(_) => {
                    let position = raw.labels.iter().position(|&b| b > 1).unwrap_or(0);
                    report.rejected.push((line, RecordIssue::NotBinary { field: "labels", position }));
                    continue;
                }
            }
        }
        let t = raw.switching_points.as_deref().unwrap_or_default();
        if let Err(issue) = validate_annotation(&raw.hinglish, &raw.labels, t) {
            report.rejected.push((line, issue));
            continue;
        }
        raw.cmi = compute_cmi(&raw.labels, t, cfg).ok();
        report.records.push(raw);
    }
    report
}

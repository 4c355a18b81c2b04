//! Translation augmentation through an LLM.
//!
//! The transport is a trait so the pipeline runs against canned responses
//! offline. A response is accepted only if it is exactly the JSON object
//! `{"english": …, "hindi_roman": …}`; anything else is rejected.

use std::collections::VecDeque;
use std::time::Duration;

use serde::Deserialize;
use thiserror::Error;

use super::RecordJson;

pub const DEFAULT_TEMPERATURE: f64 = 0.7;
pub const DEFAULT_ATTEMPTS: u32 = 3;
pub const DEFAULT_RETRY_DELAY: Duration = Duration::from_secs(2);

const PROMPT_HEAD: &str = "Task: Translate the given Hinglish text into both formal English and standardized Hindi (written in Roman script).\n\nInput Hinglish: \"";

const PROMPT_TAIL: &str = r#""

Requirements:

1. English translation should be grammatically correct and natural.
2. Hindi translation must use ONLY Roman script (Latin alphabet), not Devanagari.
3. Maintain the original meaning and tone in both translations.
4. Use standard transliteration conventions for Hindi.
5. Preserve context from the original text.

Important:

- DO NOT include any explanations, notes, or additional text.
- Respond ONLY with the exact JSON format shown below.
- Both translations should be complete sentences with proper punctuation.
- If the input text is not in Hinglish, English, or Hindi, return "NULL"
- If the input is Hindi, return the Hindi as is in the "hindi_roman" field.
- If the input is English, return the English as is in the "english" field.

Return this exact JSON structure:

{
  "english": "Your English translation here",
  "hindi_roman": "Your Hindi translation in Roman script here"
}

Examples:

Input: "Main kal movie dekhne jaa raha hoon"
Output: {"english": "I am going to watch a movie tomorrow", "hindi_roman": "Main kal film dekhne ja raha hoon"}

Input: "Office ke baad hum coffee shop par milenge"
Output: {"english": "We will meet at the coffee shop after office", "hindi_roman": "Karyalay ke baad hum coffee shop par milenge"}
"#;

/// Few-shot translation prompt with `hinglish_text` interpolated verbatim.
pub fn build_translation_prompt(hinglish_text: &str) -> String {
    let mut prompt = String::with_capacity(PROMPT_HEAD.len() + hinglish_text.len() + PROMPT_TAIL.len());
    prompt.push_str(PROMPT_HEAD);
    prompt.push_str(hinglish_text);
    prompt.push_str(PROMPT_TAIL);
    prompt
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AugmentationResponse {
    pub english: String,
    pub hindi_roman: String,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum Rejection {
    #[error("model declined the input (NULL)")]
    Null,
    #[error("response is not the expected JSON object: {0}")]
    Malformed(String),
    #[error("field `{0}` is empty")]
    EmptyField(&'static str),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ResponseBody {
    english: String,
    hindi_roman: String,
}

fn is_null(s: &str) -> bool {
    let s = s.trim();
    s == "NULL" || s == "\"NULL\""
}

/// Strict parse of a model response.
pub fn parse_translation_response(body: &str) -> Result<AugmentationResponse, Rejection> {
    if is_null(body) {
        return Err(Rejection::Null);
    }
    let parsed: ResponseBody = serde_json::from_str(body).map_err(|e| Rejection::Malformed(e.to_string()))?;
    if is_null(&parsed.english) || is_null(&parsed.hindi_roman) {
        return Err(Rejection::Null);
    }
    if parsed.english.trim().is_empty() {
        return Err(Rejection::EmptyField("english"));
    }
    if parsed.hindi_roman.trim().is_empty() {
        return Err(Rejection::EmptyField("hindi_roman"));
    }
    Ok(AugmentationResponse { english: parsed.english, hindi_roman: parsed.hindi_roman })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TranslationRequest {
    pub prompt: String,
    pub temperature: f64,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("transport failure: {0}")]
pub struct TransportError(pub String);

/// One request, one UTF-8 response body.
pub trait TranslationTransport {
    fn send(&mut self, request: &TranslationRequest) -> Result<String, TransportError>;
}

/// Replays a fixed list of responses, then fails.
#[derive(Debug, Default)]
pub struct ScriptedTransport {
    responses: VecDeque<Result<String, TransportError>>,
    pub requests: Vec<TranslationRequest>,
}

impl ScriptedTransport {
    pub fn new(responses: impl IntoIterator<Item = Result<String, TransportError>>) -> Self {
        Self { responses: responses.into_iter().collect(), requests: Vec::new() }
    }
}

impl TranslationTransport for ScriptedTransport {
    fn send(&mut self, request: &TranslationRequest) -> Result<String, TransportError> {
        self.requests.push(request.clone());
        self.responses.pop_front().unwrap_or_else(|| Err(TransportError("script exhausted".into())))
    }
}

/// Offline stand-in that answers with the input sentence in both fields.
#[derive(Debug, Default)]
pub struct EchoTransport;

impl TranslationTransport for EchoTransport {
    fn send(&mut self, request: &TranslationRequest) -> Result<String, TransportError> {
        let text = request
            .prompt
            .strip_prefix(PROMPT_HEAD)
            .and_then(|rest| rest.strip_suffix(PROMPT_TAIL))
            .ok_or_else(|| TransportError("unrecognized prompt".into()))?;
        serde_json::to_string(&serde_json::json!({ "english": text, "hindi_roman": text }))
            .map_err(|e| TransportError(e.to_string()))
    }
}

/// Posts `{"prompt", "temperature", "response_mime_type"}` as JSON and
/// returns the response body.
#[derive(Debug, Clone)]
pub struct HttpTransport {
    pub endpoint: String,
}

impl TranslationTransport for HttpTransport {
    fn send(&mut self, request: &TranslationRequest) -> Result<String, TransportError> {
        let body = serde_json::json!({
            "prompt": request.prompt,
            "temperature": request.temperature,
            "response_mime_type": "application/json",
        });
        ureq::post(&self.endpoint)
            .send_json(body)
            .map_err(|e| TransportError(e.to_string()))?
            .into_string()
            .map_err(|e| TransportError(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentOptions {
    pub max_attempts: u32,
    pub retry_delay: Duration,
    pub temperature: f64,
}

impl Default for AugmentOptions {
    fn default() -> Self {
        Self { max_attempts: DEFAULT_ATTEMPTS, retry_delay: DEFAULT_RETRY_DELAY, temperature: DEFAULT_TEMPERATURE }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SkipReason {
    Rejected(Rejection),
    Exhausted { attempts: u32, last_error: String },
}

#[derive(Debug, Default)]
pub struct AugmentReport {
    pub records: Vec<RecordJson>,
    /// Input index and reason for every dropped record.
    pub skipped: Vec<(usize, SkipReason)>,
    pub requests: usize,
}

/// Fills `english`/`hindi_roman` on records that lack them. Transport errors
/// and malformed bodies are retried up to `max_attempts` with a fixed delay;
/// a `NULL` answer drops the record immediately.
pub fn augment<T: TranslationTransport + ?Sized>(
    records: Vec<RecordJson>,
    transport: &mut T,
    options: &AugmentOptions,
    sleep: &mut dyn FnMut(Duration),
) -> AugmentReport {
    let mut report = AugmentReport::default();
    for (index, mut record) in records.into_iter().enumerate() {
        let has = |s: &Option<String>| s.as_deref().is_some_and(|s| !s.trim().is_empty());
        if has(&record.english) && has(&record.hindi_roman) {
            report.records.push(record);
            continue;
        }
        let request = TranslationRequest {
            prompt: build_translation_prompt(&record.hinglish),
            temperature: options.temperature,
        };
        let mut outcome = Err(SkipReason::Exhausted { attempts: 0, last_error: String::new() });
        for attempt in 1..=options.max_attempts {
            if attempt > 1 {
                sleep(options.retry_delay);
            }
            report.requests += 1;
            let error = match transport.send(&request) {
                Ok(body) => match parse_translation_response(&body) {
                    Ok(response) => {
                        outcome = Ok(response);
                        break;
                    }
                    Err(Rejection::Null) => {
                        outcome = Err(SkipReason::Rejected(Rejection::Null));
                        break;
                    }
                    Err(rejection) => rejection.to_string(),
                },
                Err(e) => e.to_string(),
            };
            outcome = Err(SkipReason::Exhausted { attempts: attempt, last_error: error });
        }
        match outcome {
            Ok(response) => {
                record.english = Some(response.english);
                record.hindi_roman = Some(response.hindi_roman);
                report.records.push(record);
            }
            Err(reason) => {
                log::warn!("skipping record {index}: {reason:?}");
                report.skipped.push((index, reason));
            }
        }
    }
    report
}

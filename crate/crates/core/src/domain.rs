//! Value types shared by every stage of the pipeline, and the text
//! canonicalization that all matchers rely on.

use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

/// Lowest loudness value representable by the pipeline (≈ 16-bit noise floor).
pub const DBFS_FLOOR: f64 = -96.0;

/// Transcript text in canonical form: lowercase, no punctuation or symbols,
/// words separated by exactly one space, no leading or trailing space.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(transparent)]
pub struct NormalizedText(String);

impl NormalizedText {
    pub fn new(raw: &str) -> Self {
        normalize_text(raw)
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_string(self) -> String {
        self.0
    }

    /// Number of space-separated words.
    pub fn word_count(&self) -> usize {
        if self.0.is_empty() {
            0
        } else {
            self.0.split(' ').count()
        }
    }
}

impl fmt::Display for NormalizedText {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl AsRef<str> for NormalizedText {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

fn punctuation() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[\p{P}\p{S}]").expect("static punctuation class"))
}

/// Canonicalizes raw transcript text.
///
/// Punctuation and symbol characters (Unicode categories `P*` and `S*`) become
/// word separators, so `"capital-one"` and `"capital one"` normalize alike.
/// The function is total and idempotent.
pub fn normalize_text(raw: &str) -> NormalizedText {
    let lowered = raw.to_lowercase();
    let spaced = punctuation().replace_all(&lowered, " ");
    let mut out = String::with_capacity(spaced.len());
    for word in spaced.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    NormalizedText(out)
}

/// True iff `text` is `word` or begins with `word` followed by a space.
pub fn starts_with_word(text: &NormalizedText, word: &NormalizedText) -> bool {
    let (text, word) = (text.as_str(), word.as_str());
    if word.is_empty() {
        return false;
    }
    match text.strip_prefix(word) {
        Some(rest) => rest.is_empty() || rest.starts_with(' '),
        None => false,
    }
}

/// Mono PCM samples in `[-1, 1]` at a fixed rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Samples {
    pub data: Vec<f64>,
    pub sample_rate_hz: u32,
}

impl Samples {
    pub fn duration_ms(&self) -> f64 {
        self.data.len() as f64 * 1000.0 / f64::from(self.sample_rate_hz)
    }
}

/// One pause-delimited utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct PhraseEvent {
    pub id: u64,
    /// Phrase start on the caller's monotonic event timeline.
    pub t_ms: u64,
    pub samples: Option<Samples>,
    pub text: Option<String>,
    pub rms_dbfs: f64,
}

impl PhraseEvent {
    /// A transcript-only event (no audio attached).
    pub fn from_text(id: u64, t_ms: u64, text: impl Into<String>, rms_dbfs: f64) -> Self {
        Self {
            id,
            t_ms,
            samples: None,
            text: Some(text.into()),
            rms_dbfs: clamp_dbfs(rms_dbfs),
        }
    }
}

/// Clamps a loudness value into `[DBFS_FLOOR, 0]`. NaN maps to the floor.
pub fn clamp_dbfs(v: f64) -> f64 {
    if v.is_nan() {
        DBFS_FLOOR
    } else {
        v.clamp(DBFS_FLOOR, 0.0)
    }
}

/// Why a phrase was withheld from the smart speaker.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DropCause {
    /// A phrase or timed rule matched this phrase (lowest matching ordinal).
    Rule(usize),
    /// The phrase fell inside the suppression window opened by a timed rule.
    TimedWindow(usize),
    Privacy,
    Hotword,
    Loudness,
    /// The phrase carried a mode control phrase, or transcription failed.
    Control,
    EmptyAfterDeletion,
}

impl fmt::Display for DropCause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DropCause::Rule(o) => write!(f, "rule:{o}"),
            DropCause::TimedWindow(o) => write!(f, "timed_window:{o}"),
            DropCause::Privacy => f.write_str("privacy"),
            DropCause::Hotword => f.write_str("hotword"),
            DropCause::Loudness => f.write_str("loudness"),
            DropCause::Control => f.write_str("control"),
            DropCause::EmptyAfterDeletion => f.write_str("empty_after_deletion"),
        }
    }
}

/// The engine's only output per phrase.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Decision {
    Forward,
    /// Forward re-synthesized speech for this (never empty) text instead of the
    /// captured audio.
    ForwardSynthesized(String),
    Drop(DropCause),
}

impl Decision {
    pub fn is_drop(&self) -> bool {
        matches!(self, Decision::Drop(_))
    }

    /// Short label used in decision logs: `forward`, `synth` or `drop`.
    pub fn label(&self) -> &'static str {
        match self {
            Decision::Forward => "forward",
            Decision::ForwardSynthesized(_) => "synth",
            Decision::Drop(_) => "drop",
        }
    }

    pub fn cause(&self) -> Option<DropCause> {
        match self {
            Decision::Drop(c) => Some(*c),
            _ => None,
        }
    }
}

/// Corpus and transcript-file record (one JSON object per line).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusEvent {
    pub t_ms: u64,
    pub text: String,
    pub rms_dbfs: f64,
    #[serde(default)]
    pub expected: Vec<Expectation>,
}

/// Ground-truth label: a rule ordinal or a mode name.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Expectation {
    Rule(usize),
    Mode(String),
}

//! Speech-to-text boundary.
//!
//! Backends are deterministic stand-ins (passthrough text, fingerprint table)
//! or an out-of-process adapter speaking a one-line protocol:
//!
//! ```text
//! -> TRANSCRIBE /tmp/phrase.wav
//! <- OK 0.91 bank account password
//! <- ERR model not loaded
//! ```
//!
//! [`ErrorInjecting`] wraps any backend with seeded word substitution to
//! emulate a recognizer's word error rate.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::str::FromStr;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::audio::{quantize, read_wav, write_wav};
use crate::domain::{PhraseEvent, Samples};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SttError {
    #[error("event carries no transcript text")]
    NoText,
    #[error("event carries no audio")]
    NoAudio,
    #[error("adapter timed out after {0:?}")]
    Timeout(Duration),
    #[error("malformed adapter reply: {0:?}")]
    Malformed(String),
    #[error("adapter error: {0}")]
    Adapter(String),
    #[error("adapter exited")]
    AdapterExited,
    #[error("i/o error: {0}")]
    Io(String),
    #[error("invalid backend: {0}")]
    Config(String),
}

impl From<std::io::Error> for SttError {
    fn from(e: std::io::Error) -> Self {
        SttError::Io(e.to_string())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transcription {
    pub text: String,
    /// In `[0, 1]`.
    pub confidence: f64,
    pub elapsed_ms: f64,
}

impl Transcription {
    /// Text known exactly, e.g. from a transcript file.
    pub fn exact(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            confidence: 1.0,
            elapsed_ms: 0.0,
        }
    }
}

pub trait SpeechToText: Send + Sync {
    fn transcribe(&self, event: &PhraseEvent) -> Result<Transcription, SttError>;
}

fn elapsed_ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1000.0
}

/// Uses the text already attached to the event.
#[derive(Debug, Default, Clone, Copy)]
pub struct Passthrough;

impl SpeechToText for Passthrough {
    fn transcribe(&self, event: &PhraseEvent) -> Result<Transcription, SttError> {
        let start = Instant::now();
        let text = event.text.as_ref().ok_or(SttError::NoText)?;
        Ok(Transcription {
            text: text.clone(),
            confidence: 1.0,
            elapsed_ms: elapsed_ms(start),
        })
    }
}

/// Hex SHA-256 of the samples as 16-bit little-endian PCM.
pub fn fingerprint(samples: &[f64]) -> String {
    let mut hasher = Sha256::new();
    for &s in samples {
        hasher.update(quantize(s).to_le_bytes());
    }
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Deserialize)]
struct TableEntry {
    #[serde(default)]
    fingerprint: Option<String>,
    #[serde(default)]
    wav: Option<PathBuf>,
    text: String,
}

/// Looks audio up by fingerprint in a fixture table.
#[derive(Debug, Default, Clone)]
pub struct TableBackend {
    entries: HashMap<String, String>,
}

impl TableBackend {
    pub fn new(entries: HashMap<String, String>) -> Self {
        Self { entries }
    }

    /// Loads a JSON-lines fixture whose lines are either
    /// `{"fingerprint": "<hex>", "text": ...}` or `{"wav": "<path>", "text": ...}`;
    /// relative WAV paths resolve against the fixture's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, SttError> {
        let path = path.as_ref();
        let dir = path.parent().unwrap_or(Path::new("."));
        let body = std::fs::read_to_string(path)?;
        let mut entries = HashMap::new();
        for (i, line) in body.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: TableEntry = serde_json::from_str(line)
                .map_err(|e| SttError::Config(format!("{}:{}: {e}", path.display(), i + 1)))?;
            let key = match (entry.fingerprint, entry.wav) {
                (Some(fp), _) => fp.to_ascii_lowercase(),
                (None, Some(wav)) => {
                    let samples = read_wav(dir.join(wav)).map_err(|e| {
                        SttError::Config(format!("{}:{}: {e}", path.display(), i + 1))
                    })?;
                    fingerprint(&samples.data)
                }
                (None, None) => {
                    return Err(SttError::Config(format!(
                        "{}:{}: entry needs `fingerprint` or `wav`",
                        path.display(),
                        i + 1
                    )))
                }
            };
            entries.insert(key, entry.text);
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl SpeechToText for TableBackend {
    fn transcribe(&self, event: &PhraseEvent) -> Result<Transcription, SttError> {
        let start = Instant::now();
        let samples = event.samples.as_ref().ok_or(SttError::NoAudio)?;
        let (text, confidence) = match self.entries.get(&fingerprint(&samples.data)) {
            Some(text) => (text.clone(), 1.0),
            None => (String::new(), 0.0),
        };
        Ok(Transcription {
            text,
            confidence,
            elapsed_ms: elapsed_ms(start),
        })
    }
}

/// Parses one adapter reply line (without the trailing newline).
pub fn parse_reply(line: &str) -> Result<(f64, String), SttError> {
    if let Some(rest) = line.strip_prefix("OK ") {
        let (conf, text) = rest.split_once(' ').unwrap_or((rest, ""));
        return match conf.parse::<f64>() {
            Ok(c) if (0.0..=1.0).contains(&c) => Ok((c, text.to_owned())),
            _ => Err(SttError::Malformed(line.to_owned())),
        };
    }
    if let Some(reason) = line.strip_prefix("ERR") {
        if reason.is_empty() || reason.starts_with(' ') {
            return Err(SttError::Adapter(reason.trim_start().to_owned()));
        }
    }
    Err(SttError::Malformed(line.to_owned()))
}

struct AdapterProcess {
    child: Child,
    stdin: ChildStdin,
    replies: Receiver<std::io::Result<String>>,
}

impl AdapterProcess {
    fn spawn(command: &str) -> Result<Self, SttError> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, replies) = mpsc::channel();
        std::thread::spawn(move || {
            let mut reader = BufReader::new(stdout);
            loop {
                let mut line = String::new();
                match reader.read_line(&mut line) {
                    Ok(0) => break,
                    Ok(_) => {
                        if tx.send(Ok(line)).is_err() {
                            break;
                        }
                    }
                    Err(e) => {
                        let _ = tx.send(Err(e));
                        break;
                    }
                }
            }
        });
        Ok(Self {
            child,
            stdin,
            replies,
        })
    }

    fn request(&mut self, wav: &Path, timeout: Duration) -> Result<String, SttError> {
        writeln!(self.stdin, "TRANSCRIBE {}", wav.display())?;
        self.stdin.flush()?;
        match self.replies.recv_timeout(timeout) {
            Ok(Ok(line)) => Ok(line.trim_end_matches(['\n', '\r']).to_owned()),
            Ok(Err(e)) => Err(e.into()),
            Err(RecvTimeoutError::Timeout) => Err(SttError::Timeout(timeout)),
            Err(RecvTimeoutError::Disconnected) => Err(SttError::AdapterExited),
        }
    }
}

impl Drop for AdapterProcess {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Out-of-process recognizer. Requests are serialized; the adapter is
/// restarted after any failed exchange so a late reply cannot be paired with
/// the wrong phrase.
pub struct ExternalBackend {
    command: String,
    timeout: Duration,
    process: Mutex<Option<AdapterProcess>>,
}

impl ExternalBackend {
    pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(10);

    pub fn new(command: impl Into<String>, timeout: Duration) -> Self {
        Self {
            command: command.into(),
            timeout,
            process: Mutex::new(None),
        }
    }
}

impl fmt::Debug for ExternalBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ExternalBackend")
            .field("command", &self.command)
            .field("timeout", &self.timeout)
            .finish()
    }
}

impl SpeechToText for ExternalBackend {
    fn transcribe(&self, event: &PhraseEvent) -> Result<Transcription, SttError> {
        let start = Instant::now();
        let samples = event.samples.as_ref().ok_or(SttError::NoAudio)?;
        let file = tempfile::Builder::new().suffix(".wav").tempfile()?;
        write_wav(file.path(), samples).map_err(|e| SttError::Io(e.to_string()))?;

        let mut guard = self.process.lock().unwrap_or_else(|p| p.into_inner());
        if guard.is_none() {
            *guard = Some(AdapterProcess::spawn(&self.command)?);
        }
        let reply = guard
            .as_mut()
            .expect("spawned above")
            .request(file.path(), self.timeout)
            .and_then(|line| parse_reply(&line));
        match reply {
            Ok((confidence, text)) => Ok(Transcription {
                text,
                confidence,
                elapsed_ms: elapsed_ms(start),
            }),
            Err(e) => {
                if !matches!(e, SttError::Adapter(_)) {
                    *guard = None;
                }
                Err(e)
            }
        }
    }
}

/// Backend selection as given on the command line.
#[derive(Clone, Debug, PartialEq)]
pub enum BackendConfig {
    Passthrough,
    Table(PathBuf),
    External { command: String, timeout: Duration },
}

impl FromStr for BackendConfig {
    type Err = SttError;

    /// `passthrough`, `table:<fixture>` or `external:<command>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "passthrough" {
            Ok(BackendConfig::Passthrough)
        } else if let Some(p) = s.strip_prefix("table:").filter(|p| !p.is_empty()) {
            Ok(BackendConfig::Table(PathBuf::from(p)))
        } else if let Some(c) = s.strip_prefix("external:").filter(|c| !c.trim().is_empty()) {
            Ok(BackendConfig::External {
                command: c.to_owned(),
                timeout: ExternalBackend::DEFAULT_TIMEOUT,
            })
        } else {
            Err(SttError::Config(format!(
                "unknown backend `{s}`; expected passthrough, table:<fixture> or external:<cmd>"
            )))
        }
    }
}

impl BackendConfig {
    pub fn build(&self) -> Result<Box<dyn SpeechToText>, SttError> {
        Ok(match self {
            BackendConfig::Passthrough => Box::new(Passthrough),
            BackendConfig::Table(path) => Box::new(TableBackend::load(path)?),
            BackendConfig::External { command, timeout } => {
                Box::new(ExternalBackend::new(command.clone(), *timeout))
            }
        })
    }
}

/// Seeded word-level recognition errors.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorModel {
    /// Per-word substitution probability, in `[0, 1)`.
    pub word_substitution_rate: f64,
    pub seed: u64,
    /// Misrecognitions per word; words without an entry are deleted instead.
    pub confusion_map: BTreeMap<String, Vec<String>>,
    /// When set, only these words are exposed to errors.
    pub target_words: Option<BTreeSet<String>>,
}

impl ErrorModel {
    pub fn new(word_substitution_rate: f64, seed: u64) -> Result<Self, SttError> {
        if !(0.0..1.0).contains(&word_substitution_rate) {
            return Err(SttError::Config(format!(
                "word substitution rate must be in [0, 1), got {word_substitution_rate}"
            )));
        }
        Ok(Self {
            word_substitution_rate,
            seed,
            confusion_map: BTreeMap::new(),
            target_words: None,
        })
    }

    pub fn with_targets(mut self, words: impl IntoIterator<Item = String>) -> Self {
        self.target_words = Some(words.into_iter().collect());
        self
    }

    pub fn with_confusions(mut self, map: BTreeMap<String, Vec<String>>) -> Self {
        self.confusion_map = map;
        self
    }
}

/// Two uniform draws for one word, keyed by `(seed, event_id, word_index)`.
///
/// ChaCha is used as a counter-mode generator: the event picks the stream and
/// the word index picks the block position, so draws never depend on how many
/// other words or events were processed before.
pub fn word_draws(seed: u64, event_id: u64, word_index: usize) -> (f64, u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(event_id);
    rng.set_word_pos(word_index as u128 * 4);
    let u = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    (u, rng.next_u64())
}

/// Result of [`inject_errors_counted`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Injection {
    pub text: String,
    /// Words eligible for substitution.
    pub eligible: usize,
    pub substituted: usize,
}

pub fn inject_errors_counted(text: &str, model: &ErrorModel, event_id: u64) -> Injection {
    let mut words: Vec<&str> = Vec::new();
    let mut eligible = 0;
    let mut substituted = 0;
    let key = |w: &str| w.to_lowercase();
    for (index, word) in text.split_whitespace().enumerate() {
        let exposed = model
            .target_words
            .as_ref()
            .is_none_or(|t| t.contains(&key(word)));
        if !exposed {
            words.push(word);
            continue;
        }
        eligible += 1;
        let (u, pick) = word_draws(model.seed, event_id, index);
        if u < model.word_substitution_rate {
            substituted += 1;
            if let Some(alts) = model
                .confusion_map
                .get(&key(word))
                .filter(|a| !a.is_empty())
            {
                words.push(&alts[(pick % alts.len() as u64) as usize]);
            }
        } else {
            words.push(word);
        }
    }
    let text = if substituted == 0 {
        text.to_owned()
    } else {
        words.join(" ")
    };
    Injection {
        text,
        eligible,
        substituted,
    }
}

/// Substitutes or deletes words independently with the model's rate.
/// Deterministic in `(text, model, event_id)`; rate 0 returns `text` unchanged.
pub fn inject_errors(text: &str, model: &ErrorModel, event_id: u64) -> String {
    inject_errors_counted(text, model, event_id).text
}

/// Wraps a backend and corrupts its output with an [`ErrorModel`].
pub struct ErrorInjecting<B> {
    inner: B,
    model: ErrorModel,
}

impl<B: SpeechToText> ErrorInjecting<B> {
    pub fn new(inner: B, model: ErrorModel) -> Self {
        Self { inner, model }
    }

    pub fn model(&self) -> &ErrorModel {
        &self.model
    }
}

impl<B: SpeechToText> SpeechToText for ErrorInjecting<B> {
    fn transcribe(&self, event: &PhraseEvent) -> Result<Transcription, SttError> {
        let mut t = self.inner.transcribe(event)?;
        t.text = inject_errors(&t.text, &self.model, event.id);
        Ok(t)
    }
}

impl<T: SpeechToText + ?Sized> SpeechToText for Box<T> {
    fn transcribe(&self, event: &PhraseEvent) -> Result<Transcription, SttError> {
        (**self).transcribe(event)
    }
}

/// Convenience for callers holding raw samples.
pub fn transcribe_samples(
    backend: &dyn SpeechToText,
    samples: Samples,
) -> Result<Transcription, SttError> {
    let rms = crate::audio::rms_dbfs(&samples.data);
    backend.transcribe(&PhraseEvent {
        id: 0,
        t_ms: 0,
        samples: Some(samples),
        text: None,
        rms_dbfs: rms,
    })
}

//! Speech firewall: segments a microphone stream into phrases, transcribes
//! them and decides per phrase whether to forward, rewrite or drop the audio
//! before it reaches a voice assistant.

pub mod audio;
pub mod audit;
pub mod config;
pub mod domain;
pub mod engine;
pub mod harness;
pub mod stt;

pub use audit::AuditReport;
pub use config::{parse_policy, validate_policy, Action, ConfigError, Pattern, Policy, Rule};
pub use domain::{normalize_text, Decision, DropCause, NormalizedText, PhraseEvent};
pub use engine::{evaluate, EngineState, FilterEngine, Verdict};
pub use stt::{SpeechToText, SttError, Transcription};

//! The filter state machine.
//!
//! Every phrase goes through a fixed precedence pipeline and produces exactly
//! one [`Decision`]:
//!
//! 1. a mode control phrase toggles its mode and the phrase is dropped;
//! 2. privacy mode drops everything;
//! 3. strict hotword mode drops phrases that do not start with the hotword;
//! 4. loudness mode drops loud phrases, and everything inside the hold window;
//! 5. a timed rule match drops the phrase and (re)arms the suppression window;
//! 6. phrases inside an armed window are dropped;
//! 7. phrase rules drop the phrase;
//! 8. deletion rules cut their matches out and forward synthesized speech;
//! 9. text-to-speech mode re-synthesizes whatever is still forwarded.
//!
//! Timed-rule scanning and the loudness hold are updated from every
//! transcribed phrase, even one dropped by an earlier stage, so suppression
//! windows always extend from the last occurrence heard.

use thiserror::Error;

use crate::config::{Action, Pattern, Policy, Rule};
use crate::domain::{
    normalize_text, starts_with_word, Decision, DropCause, NormalizedText, PhraseEvent,
};
use crate::stt::{SttError, Transcription};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EngineError {
    #[error("event id {got} is not after the last evaluated id {last}")]
    OutOfOrder { last: u64, got: u64 },
}

/// Byte ranges of one rule's matches in normalized text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MatchResult {
    pub ordinal: usize,
    /// Non-empty, sorted, non-overlapping `(start, end)` byte offsets.
    pub spans: Vec<(usize, usize)>,
}

/// Leftmost non-overlapping whole-word occurrences of `needle` in `text`.
pub(crate) fn word_spans(text: &str, needle: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    if needle.is_empty() {
        return spans;
    }
    let bytes = text.as_bytes();
    let mut from = 0;
    while let Some(rel) = text[from..].find(needle) {
        let start = from + rel;
        let end = start + needle.len();
        let left_ok = start == 0 || bytes[start - 1] == b' ';
        let right_ok = end == text.len() || bytes[end] == b' ';
        if left_ok && right_ok {
            spans.push((start, end));
            from = end;
        } else {
            from = start + text[start..].chars().next().map_or(1, char::len_utf8);
        }
        if from >= text.len() {
            break;
        }
    }
    spans
}

/// Matches one rule against normalized text.
///
/// Literals match whole words only, so `"won"` never fires on `"wonderful"`.
/// Regexes run unanchored; zero-width matches are ignored.
pub fn match_rule(rule: &Rule, text: &NormalizedText) -> Option<MatchResult> {
    let spans: Vec<(usize, usize)> = match &rule.pattern {
        Pattern::Literal(lit) => word_spans(text.as_str(), lit.as_str()),
        Pattern::Regex(re) => re
            .regex()
            .find_iter(text.as_str())
            .filter(|m| !m.is_empty())
            .map(|m| (m.start(), m.end()))
            .collect(),
    };
    (!spans.is_empty()).then_some(MatchResult {
        ordinal: rule.ordinal,
        spans,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EngineState {
    pub privacy_active: bool,
    pub tts_active: bool,
    pub hotword_enabled: bool,
    pub loudness_hold_until_ms: Option<u64>,
    pub timed_deadline_ms: Option<u64>,
    pub timed_source_ordinal: Option<usize>,
    pub last_event_id: Option<u64>,
}

impl EngineState {
    pub fn new(policy: &Policy) -> Self {
        Self {
            hotword_enabled: policy.modes.hotword.is_some(),
            ..Self::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Toggle {
    PrivacyOn,
    PrivacyOff,
    TtsOn,
    TtsOff,
}

/// Applies privacy/tts control phrases found in `text`, left to right.
///
/// Scanning happens regardless of the current modes, otherwise privacy mode
/// could never be switched off. Where an on and an off phrase start at the same
/// word, the longer one is applied last.
pub fn scan_modes(
    state: &EngineState,
    text: &NormalizedText,
    policy: &Policy,
) -> (EngineState, bool) {
    let mut hits: Vec<(usize, usize, Toggle)> = Vec::new();
    let mut collect = |phrase: &NormalizedText, toggle: Toggle| {
        for (s, e) in word_spans(text.as_str(), phrase.as_str()) {
            hits.push((s, e, toggle));
        }
    };
    if let Some(p) = &policy.modes.privacy {
        collect(&p.on, Toggle::PrivacyOn);
        collect(&p.off, Toggle::PrivacyOff);
    }
    if let Some(t) = &policy.modes.tts {
        collect(&t.on, Toggle::TtsOn);
        collect(&t.off, Toggle::TtsOff);
    }
    let mut next = state.clone();
    if hits.is_empty() {
        return (next, false);
    }
    hits.sort_by_key(|&(s, e, _)| (s, e));
    for (_, _, toggle) in hits {
        match toggle {
            Toggle::PrivacyOn => next.privacy_active = true,
            Toggle::PrivacyOff => next.privacy_active = false,
            Toggle::TtsOn => next.tts_active = true,
            Toggle::TtsOff => next.tts_active = false,
        }
    }
    (next, true)
}

/// A decision plus what the audit trail needs to attribute it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Verdict {
    pub decision: Decision,
    /// Rule credited with the outcome: the cause of a rule or window drop, or
    /// the lowest-ordinal deletion rule that rewrote the phrase.
    pub rule: Option<usize>,
    pub stt_failure: bool,
    /// Synthesized only because text-to-speech mode was on.
    pub via_tts: bool,
}

impl Verdict {
    fn plain(decision: Decision) -> Self {
        Self {
            decision,
            rule: None,
            stt_failure: false,
            via_tts: false,
        }
    }

    fn rule(decision: Decision, ordinal: usize) -> Self {
        Self {
            rule: Some(ordinal),
            ..Self::plain(decision)
        }
    }
}

fn delete_spans(text: &str, spans: &mut [(usize, usize)]) -> NormalizedText {
    spans.sort_unstable();
    let mut out = String::with_capacity(text.len());
    let mut cursor = 0;
    for &(s, e) in spans.iter() {
        if s > cursor {
            out.push_str(&text[cursor..s]);
            out.push(' ');
        }
        cursor = cursor.max(e);
    }
    out.push_str(&text[cursor.min(text.len())..]);
    normalize_text(&out)
}

/// Removes every deletion-rule match, repeating until none matches the
/// remainder. Returns the lowest matching ordinal and the rewritten text.
fn apply_deletions(policy: &Policy, text: &NormalizedText) -> Option<(usize, NormalizedText)> {
    let mut current = text.clone();
    let mut first_ordinal = None;
    loop {
        let mut spans = Vec::new();
        for rule in policy.rules.iter().filter(|r| r.action == Action::Delete) {
            if let Some(m) = match_rule(rule, &current) {
                first_ordinal.get_or_insert(m.ordinal);
                spans.extend(m.spans);
            }
        }
        if spans.is_empty() {
            return first_ordinal.map(|o| (o, current));
        }
        current = delete_spans(current.as_str(), &mut spans);
    }
}

/// Evaluates one phrase. Pure: the input state is not modified.
pub fn evaluate(
    state: &EngineState,
    ev: &PhraseEvent,
    transcription: &Result<Transcription, SttError>,
    policy: &Policy,
) -> Result<(EngineState, Verdict), EngineError> {
    if let Some(last) = state.last_event_id {
        if ev.id <= last {
            return Err(EngineError::OutOfOrder { last, got: ev.id });
        }
    }
    let mut next = state.clone();
    next.last_event_id = Some(ev.id);
    next.hotword_enabled = policy.modes.hotword.is_some();

    let mut too_loud = false;
    if let Some(loud) = &policy.modes.loudness {
        if ev.rms_dbfs >= loud.threshold_dbfs {
            too_loud = true;
            let until = ev.t_ms + loud.hold_s * 1000;
            next.loudness_hold_until_ms =
                Some(next.loudness_hold_until_ms.map_or(until, |h| h.max(until)));
        } else if next.loudness_hold_until_ms.is_some_and(|h| ev.t_ms < h) {
            too_loud = true;
        }
    }

    let transcript = match transcription {
        Ok(t) => t,
        Err(_) => {
            return Ok((
                next,
                Verdict {
                    stt_failure: true,
                    ..Verdict::plain(Decision::Drop(DropCause::Control))
                },
            ))
        }
    };
    let text = normalize_text(&transcript.text);

    let (mut next, control_hit) = scan_modes(&next, &text, policy);

    let mut own_timed: Option<usize> = None;
    for rule in &policy.rules {
        let Action::Timed { duration_s } = rule.action else {
            continue;
        };
        if match_rule(rule, &text).is_none() {
            continue;
        }
        own_timed.get_or_insert(rule.ordinal);
        let deadline = ev.t_ms + duration_s * 1000;
        if next.timed_deadline_ms.is_none_or(|d| deadline > d) {
            next.timed_deadline_ms = Some(deadline);
            next.timed_source_ordinal = Some(rule.ordinal);
        }
    }

    let verdict = if control_hit {
        Verdict::plain(Decision::Drop(DropCause::Control))
    } else if next.privacy_active {
        Verdict::plain(Decision::Drop(DropCause::Privacy))
    } else if policy
        .modes
        .hotword
        .as_ref()
        .is_some_and(|hw| !starts_with_word(&text, hw))
    {
        Verdict::plain(Decision::Drop(DropCause::Hotword))
    } else if too_loud {
        Verdict::plain(Decision::Drop(DropCause::Loudness))
    } else if let Some(o) = own_timed {
        Verdict::rule(Decision::Drop(DropCause::Rule(o)), o)
    } else if let (Some(deadline), Some(src)) = (next.timed_deadline_ms, next.timed_source_ordinal)
    {
        if ev.t_ms < deadline {
            Verdict::rule(Decision::Drop(DropCause::TimedWindow(src)), src)
        } else {
            rules_and_rewrites(&next, &text, policy)
        }
    } else {
        rules_and_rewrites(&next, &text, policy)
    };
    Ok((next, verdict))
}

/// Phrase rules, then deletion rules, then text-to-speech, else forward.
fn rules_and_rewrites(state: &EngineState, text: &NormalizedText, policy: &Policy) -> Verdict {
    if let Some(rule) = policy
        .rules
        .iter()
        .filter(|r| r.action == Action::Phrase)
        .find(|r| match_rule(r, text).is_some())
    {
        return Verdict::rule(Decision::Drop(DropCause::Rule(rule.ordinal)), rule.ordinal);
    }
    if let Some((ordinal, rewritten)) = apply_deletions(policy, text) {
        return if rewritten.is_empty() {
            Verdict::rule(Decision::Drop(DropCause::EmptyAfterDeletion), ordinal)
        } else {
            Verdict::rule(
                Decision::ForwardSynthesized(rewritten.into_string()),
                ordinal,
            )
        };
    }
    if state.tts_active {
        // Nothing to re-synthesize; forwarding raw audio would unmask the speaker.
        if text.is_empty() {
            return Verdict::plain(Decision::Drop(DropCause::Control));
        }
        return Verdict {
            via_tts: true,
            ..Verdict::plain(Decision::ForwardSynthesized(text.as_str().to_owned()))
        };
    }
    Verdict::plain(Decision::Forward)
}

/// Owns the state for one stream and evaluates events in order.
#[derive(Debug, Clone)]
pub struct FilterEngine<'p> {
    policy: &'p Policy,
    state: EngineState,
}

impl<'p> FilterEngine<'p> {
    pub fn new(policy: &'p Policy) -> Self {
        Self {
            policy,
            state: EngineState::new(policy),
        }
    }

    pub fn state(&self) -> &EngineState {
        &self.state
    }

    pub fn policy(&self) -> &Policy {
        self.policy
    }

    pub fn evaluate(
        &mut self,
        ev: &PhraseEvent,
        transcription: &Result<Transcription, SttError>,
    ) -> Result<Verdict, EngineError> {
        let (next, verdict) = evaluate(&self.state, ev, transcription, self.policy)?;
        self.state = next;
        Ok(verdict)
    }
}

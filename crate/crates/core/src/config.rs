//! Plain-text policy format.
//!
//! One directive per line, `#` starts a comment:
//!
//! ```text
//! rule phrase "password"
//! rule timed 600 "girlfriend"
//! rule delete "capital one"
//! rule phrase re:"\d{3} \d{2} \d{4}"
//! mode privacy on="privacy mode on" off="privacy mode off"
//! mode hotword word="alexa"
//! mode loudness threshold_dbfs=-12.0 hold_s=30
//! mode tts on="mask my voice" off="unmask my voice"
//! set pause_ms=400
//! ```
//!
//! Literal patterns and control phrases are normalized when parsed. Regex
//! sources are kept verbatim and run unanchored over normalized text.

use std::fmt;

use regex::Regex;
use thiserror::Error;

use crate::domain::{normalize_text, NormalizedText, DBFS_FLOOR};
use crate::engine::match_rule;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("line {line}: invalid regex: {reason}")]
    InvalidRegex { line: usize, reason: String },
    #[error("line {line}: duplicate `mode {mode}` block")]
    DuplicateMode { line: usize, mode: &'static str },
    #[error("line {line}: {reason}")]
    OutOfRange { line: usize, reason: String },
    #[error("{0}")]
    Invalid(String),
}

/// What a rule's pattern is matched as.
#[derive(Clone, Debug)]
pub enum Pattern {
    /// Whole-word phrase in normalized form.
    Literal(NormalizedText),
    Regex(RegexPattern),
}

#[derive(Clone, Debug)]
pub struct RegexPattern {
    source: String,
    compiled: Regex,
}

impl RegexPattern {
    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn regex(&self) -> &Regex {
        &self.compiled
    }
}

impl Pattern {
    pub fn literal(raw: &str) -> Result<Self, ConfigError> {
        let text = normalize_text(raw);
        if text.is_empty() {
            return Err(ConfigError::Invalid(
                "literal pattern is empty after normalization".into(),
            ));
        }
        Ok(Pattern::Literal(text))
    }

    pub fn regex(source: &str) -> Result<Self, ConfigError> {
        let compiled = Regex::new(source).map_err(|e| ConfigError::InvalidRegex {
            line: 0,
            reason: e.to_string(),
        })?;
        Ok(Pattern::Regex(RegexPattern {
            source: source.to_owned(),
            compiled,
        }))
    }

    pub fn source(&self) -> &str {
        match self {
            Pattern::Literal(t) => t.as_str(),
            Pattern::Regex(r) => r.source(),
        }
    }

    pub fn is_literal(&self) -> bool {
        matches!(self, Pattern::Literal(_))
    }
}

impl PartialEq for Pattern {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Pattern::Literal(a), Pattern::Literal(b)) => a == b,
            (Pattern::Regex(a), Pattern::Regex(b)) => a.source == b.source,
            _ => false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Action {
    /// Drop the matching phrase.
    Phrase,
    /// Drop everything until `duration_s` after the last match.
    Timed { duration_s: u64 },
    /// Remove the matched text and forward the rest as synthesized speech.
    Delete,
}

impl Action {
    pub fn kind(&self) -> RuleKind {
        match self {
            Action::Phrase => RuleKind::Phrase,
            Action::Timed { .. } => RuleKind::Timed,
            Action::Delete => RuleKind::Delete,
        }
    }
}

/// Rule action without parameters; this is all the audit trail records.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RuleKind {
    Phrase,
    Timed,
    Delete,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rule {
    pub ordinal: usize,
    pub action: Action,
    pub pattern: Pattern,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TogglePhrases {
    pub on: NormalizedText,
    pub off: NormalizedText,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoudnessMode {
    pub threshold_dbfs: f64,
    pub hold_s: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModeConfig {
    pub privacy: Option<TogglePhrases>,
    pub hotword: Option<NormalizedText>,
    pub loudness: Option<LoudnessMode>,
    pub tts: Option<TogglePhrases>,
}

impl ModeConfig {
    fn check(&self) -> Result<(), String> {
        for (name, toggle) in [("privacy", &self.privacy), ("tts", &self.tts)] {
            let Some(t) = toggle else { continue };
            if t.on.is_empty() || t.off.is_empty() {
                return Err(format!("{name} mode control phrases must be non-empty"));
            }
            if t.on == t.off {
                return Err(format!("{name} mode on and off phrases are identical"));
            }
            if let Some(hw) = &self.hotword {
                if *hw == t.on || *hw == t.off {
                    return Err(format!("{name} mode control phrase equals the hotword"));
                }
            }
        }
        if let Some(hw) = &self.hotword {
            if hw.is_empty() {
                return Err("hotword must be non-empty".into());
            }
        }
        if let Some(l) = &self.loudness {
            if !l.threshold_dbfs.is_finite() || l.threshold_dbfs > 0.0 {
                return Err("loudness threshold_dbfs must be a finite value <= 0".into());
            }
        }
        Ok(())
    }

    /// Configured (mode name, role, phrase) control phrases plus the hotword.
    fn control_phrases(&self) -> Vec<(&'static str, &NormalizedText)> {
        let mut out = Vec::new();
        if let Some(t) = &self.privacy {
            out.push(("privacy on", &t.on));
            out.push(("privacy off", &t.off));
        }
        if let Some(t) = &self.tts {
            out.push(("tts on", &t.on));
            out.push(("tts off", &t.off));
        }
        if let Some(hw) = &self.hotword {
            out.push(("hotword", hw));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    /// Silence needed to close a phrase.
    pub pause_ms: u64,
    /// Frames quieter than this count as silence.
    pub silence_dbfs: f64,
    /// Open phrases are force-closed at this length.
    pub max_phrase_s: u64,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            pause_ms: 400,
            silence_dbfs: -45.0,
            max_phrase_s: 15,
        }
    }
}

impl Settings {
    pub fn check(&self) -> Result<(), String> {
        if self.pause_ms < 50 {
            return Err(format!("pause_ms must be >= 50, got {}", self.pause_ms));
        }
        if !(DBFS_FLOOR..=0.0).contains(&self.silence_dbfs) {
            return Err(format!(
                "silence_dbfs must lie in [{DBFS_FLOOR}, 0], got {}",
                self.silence_dbfs
            ));
        }
        if self.max_phrase_s < 1 {
            return Err("max_phrase_s must be >= 1".into());
        }
        Ok(())
    }
}

/// A parsed, validated filtering policy.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Policy {
    pub rules: Vec<Rule>,
    pub modes: ModeConfig,
    pub settings: Settings,
}

impl Policy {
    /// Builds a policy from rules in ordinal order.
    pub fn from_parts(
        rules: Vec<(Action, Pattern)>,
        modes: ModeConfig,
        settings: Settings,
    ) -> Result<Self, ConfigError> {
        modes.check().map_err(ConfigError::Invalid)?;
        settings.check().map_err(ConfigError::Invalid)?;
        let rules = rules
            .into_iter()
            .enumerate()
            .map(|(ordinal, (action, pattern))| {
                if let Action::Timed { duration_s: 0 } = action {
                    return Err(ConfigError::Invalid(format!(
                        "rule {ordinal}: timed duration must be >= 1"
                    )));
                }
                Ok(Rule {
                    ordinal,
                    action,
                    pattern,
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            rules,
            modes,
            settings,
        })
    }

    pub fn has_timed_rules(&self) -> bool {
        self.rules
            .iter()
            .any(|r| matches!(r.action, Action::Timed { .. }))
    }

    pub fn has_modes(&self) -> bool {
        self.modes != ModeConfig::default()
    }

    /// Every literal pattern configured, for privacy scans of emitted reports.
    pub fn literal_sources(&self) -> impl Iterator<Item = &str> {
        self.rules.iter().filter_map(|r| match &r.pattern {
            Pattern::Literal(t) => Some(t.as_str()),
            Pattern::Regex(_) => None,
        })
    }
}

fn quote_regex(source: &str) -> String {
    source.replace('"', "\\\"")
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Pattern::Literal(t) => write!(f, "\"{t}\""),
            Pattern::Regex(r) => write!(f, "re:\"{}\"", quote_regex(&r.source)),
        }
    }
}

/// Canonical policy text; parses back to an equal `Policy`.
impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for rule in &self.rules {
            match rule.action {
                Action::Phrase => writeln!(f, "rule phrase {}", rule.pattern)?,
                Action::Timed { duration_s } => {
                    writeln!(f, "rule timed {duration_s} {}", rule.pattern)?
                }
                Action::Delete => writeln!(f, "rule delete {}", rule.pattern)?,
            }
        }
        let m = &self.modes;
        if let Some(t) = &m.privacy {
            writeln!(f, "mode privacy on=\"{}\" off=\"{}\"", t.on, t.off)?;
        }
        if let Some(hw) = &m.hotword {
            writeln!(f, "mode hotword word=\"{hw}\"")?;
        }
        if let Some(l) = &m.loudness {
            writeln!(
                f,
                "mode loudness threshold_dbfs={:?} hold_s={}",
                l.threshold_dbfs, l.hold_s
            )?;
        }
        if let Some(t) = &m.tts {
            writeln!(f, "mode tts on=\"{}\" off=\"{}\"", t.on, t.off)?;
        }
        let s = &self.settings;
        writeln!(f, "set pause_ms={}", s.pause_ms)?;
        writeln!(f, "set silence_dbfs={:?}", s.silence_dbfs)?;
        writeln!(f, "set max_phrase_s={}", s.max_phrase_s)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Bare(String),
    Quoted(String),
    Regex(String),
    KeyValue(String, String),
}

fn syntax(line: usize, reason: impl Into<String>) -> ConfigError {
    ConfigError::Syntax {
        line,
        reason: reason.into(),
    }
}

/// Reads a quoted string starting after the opening quote. In regex strings
/// only `\"` is an escape; other backslashes are kept for the regex engine.
fn read_quoted(
    chars: &mut std::iter::Peekable<std::str::Chars<'_>>,
    regex: bool,
    line: usize,
) -> Result<String, ConfigError> {
    let mut out = String::new();
    loop {
        match chars.next() {
            None => return Err(syntax(line, "unterminated quoted string")),
            Some('"') => return Ok(out),
            Some('\\') => match chars.peek() {
                Some('"') => {
                    out.push('"');
                    chars.next();
                }
                Some('\\') if !regex => {
                    out.push('\\');
                    chars.next();
                }
                _ if regex => out.push('\\'),
                Some(&c) => {
                    out.push(c);
                    chars.next();
                }
                None => return Err(syntax(line, "unterminated quoted string")),
            },
            Some(c) => out.push(c),
        }
    }
}

fn tokenize(text: &str, line: usize) -> Result<Vec<Token>, ConfigError> {
    let mut tokens = Vec::new();
    let mut chars = text.chars().peekable();
    loop {
        while chars.next_if(|c| c.is_whitespace()).is_some() {}
        let Some(&c) = chars.peek() else { break };
        if c == '#' {
            break;
        }
        if c == '"' {
            chars.next();
            tokens.push(Token::Quoted(read_quoted(&mut chars, false, line)?));
            continue;
        }
        let mut word = String::new();
        while let Some(&c) = chars.peek() {
            if c.is_whitespace() || c == '#' || c == '=' || c == '"' {
                break;
            }
            word.push(c);
            chars.next();
        }
        match chars.peek() {
            Some('"') if word == "re:" => {
                chars.next();
                tokens.push(Token::Regex(read_quoted(&mut chars, true, line)?));
            }
            Some('"') => return Err(syntax(line, format!("unexpected quote after `{word}`"))),
            Some('=') => {
                chars.next();
                if word.is_empty() {
                    return Err(syntax(line, "missing key before `=`"));
                }
                let value = if chars.peek() == Some(&'"') {
                    chars.next();
                    read_quoted(&mut chars, false, line)?
                } else {
                    let mut v = String::new();
                    while let Some(&c) = chars.peek() {
                        if c.is_whitespace() || c == '#' {
                            break;
                        }
                        v.push(c);
                        chars.next();
                    }
                    if v.is_empty() {
                        return Err(syntax(line, format!("missing value for `{word}`")));
                    }
                    v
                };
                tokens.push(Token::KeyValue(word, value));
            }
            _ => tokens.push(Token::Bare(word)),
        }
        if let Some(&c) = chars.peek() {
            if !(c.is_whitespace() || c == '#') {
                return Err(syntax(line, format!("unexpected `{c}`")));
            }
        }
    }
    Ok(tokens)
}

fn parse_pattern(token: Option<&Token>, line: usize) -> Result<Pattern, ConfigError> {
    match token {
        Some(Token::Quoted(s)) => Pattern::literal(s)
            .map_err(|_| syntax(line, "literal pattern is empty after normalization")),
        Some(Token::Regex(s)) => Pattern::regex(s).map_err(|e| match e {
            ConfigError::InvalidRegex { reason, .. } => ConfigError::InvalidRegex { line, reason },
            other => other,
        }),
        _ => Err(syntax(line, "expected a pattern: \"text\" or re:\"regex\"")),
    }
}

fn parse_int(value: &str, key: &str, line: usize) -> Result<u64, ConfigError> {
    value.parse::<u64>().map_err(|_| {
        syntax(
            line,
            format!("`{key}` expects a non-negative integer, got `{value}`"),
        )
    })
}

fn parse_float(value: &str, key: &str, line: usize) -> Result<f64, ConfigError> {
    match value.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(syntax(
            line,
            format!("`{key}` expects a finite number, got `{value}`"),
        )),
    }
}

/// Collects `key=value` tokens, rejecting unknown and repeated keys.
fn key_values<'a>(
    tokens: &'a [Token],
    allowed: &[&str],
    line: usize,
) -> Result<Vec<(&'a str, &'a str)>, ConfigError> {
    let mut out: Vec<(&str, &str)> = Vec::new();
    for t in tokens {
        let Token::KeyValue(k, v) = t else {
            return Err(syntax(line, "expected key=value arguments"));
        };
        if !allowed.contains(&k.as_str()) {
            return Err(syntax(line, format!("unknown key `{k}`")));
        }
        if out.iter().any(|(seen, _)| seen == k) {
            return Err(syntax(line, format!("key `{k}` given twice")));
        }
        out.push((k, v));
    }
    Ok(out)
}

fn lookup<'a>(kv: &[(&str, &'a str)], key: &str) -> Option<&'a str> {
    kv.iter().find(|(k, _)| *k == key).map(|(_, v)| *v)
}

fn require<'a>(kv: &[(&str, &'a str)], key: &str, line: usize) -> Result<&'a str, ConfigError> {
    lookup(kv, key).ok_or_else(|| syntax(line, format!("missing `{key}=`")))
}

fn toggle(kv: &[(&str, &str)], line: usize) -> Result<TogglePhrases, ConfigError> {
    Ok(TogglePhrases {
        on: normalize_text(require(kv, "on", line)?),
        off: normalize_text(require(kv, "off", line)?),
    })
}

/// Parses policy text. Rule ordinals follow the order of `rule` lines.
/// Policy used when no policy file is configured.
pub const DEFAULT_POLICY: &str = include_str!("../fixtures/default.policy");

pub fn parse_policy(text: &str) -> Result<Policy, ConfigError> {
    let mut rules: Vec<(Action, Pattern)> = Vec::new();
    let mut modes = ModeConfig::default();
    let mut settings = Settings::default();
    let mut seen_settings: Vec<&str> = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let tokens = tokenize(raw, line)?;
        let Some(first) = tokens.first() else {
            continue;
        };
        let Token::Bare(directive) = first else {
            return Err(syntax(line, "expected a directive: rule, mode or set"));
        };
        match directive.as_str() {
            "rule" => {
                let Some(Token::Bare(action)) = tokens.get(1) else {
                    return Err(syntax(
                        line,
                        "expected rule action: phrase, timed or delete",
                    ));
                };
                let (action, rest) = match action.as_str() {
                    "phrase" => (Action::Phrase, &tokens[2..]),
                    "delete" => (Action::Delete, &tokens[2..]),
                    "timed" => {
                        let Some(Token::Bare(secs)) = tokens.get(2) else {
                            return Err(syntax(line, "timed rule expects a duration in seconds"));
                        };
                        let duration_s = parse_int(secs, "timed", line)?;
                        if duration_s < 1 {
                            return Err(ConfigError::OutOfRange {
                                line,
                                reason: "timed duration must be >= 1 second".into(),
                            });
                        }
                        (Action::Timed { duration_s }, &tokens[3.min(tokens.len())..])
                    }
                    other => return Err(syntax(line, format!("unknown rule action `{other}`"))),
                };
                let pattern = parse_pattern(rest.first(), line)?;
                if rest.len() > 1 {
                    return Err(syntax(line, "trailing tokens after pattern"));
                }
                rules.push((action, pattern));
            }
            "mode" => {
                let Some(Token::Bare(kind)) = tokens.get(1) else {
                    return Err(syntax(
                        line,
                        "expected mode kind: privacy, hotword, loudness or tts",
                    ));
                };
                let args = &tokens[2..];
                let dup = |mode: &'static str| ConfigError::DuplicateMode { line, mode };
                match kind.as_str() {
                    "privacy" => {
                        let kv = key_values(args, &["on", "off"], line)?;
                        if modes.privacy.is_some() {
                            return Err(dup("privacy"));
                        }
                        modes.privacy = Some(toggle(&kv, line)?);
                    }
                    "tts" => {
                        let kv = key_values(args, &["on", "off"], line)?;
                        if modes.tts.is_some() {
                            return Err(dup("tts"));
                        }
                        modes.tts = Some(toggle(&kv, line)?);
                    }
                    "hotword" => {
                        let kv = key_values(args, &["word"], line)?;
                        if modes.hotword.is_some() {
                            return Err(dup("hotword"));
                        }
                        modes.hotword = Some(normalize_text(require(&kv, "word", line)?));
                    }
                    "loudness" => {
                        let kv = key_values(args, &["threshold_dbfs", "hold_s"], line)?;
                        if modes.loudness.is_some() {
                            return Err(dup("loudness"));
                        }
                        let threshold_dbfs = parse_float(
                            require(&kv, "threshold_dbfs", line)?,
                            "threshold_dbfs",
                            line,
                        )?;
                        if threshold_dbfs > 0.0 {
                            return Err(ConfigError::OutOfRange {
                                line,
                                reason: format!(
                                    "threshold_dbfs must be <= 0, got {threshold_dbfs}"
                                ),
                            });
                        }
                        let hold_s = match lookup(&kv, "hold_s") {
                            Some(v) => parse_int(v, "hold_s", line)?,
                            None => 0,
                        };
                        modes.loudness = Some(LoudnessMode {
                            threshold_dbfs,
                            hold_s,
                        });
                    }
                    other => return Err(syntax(line, format!("unknown mode `{other}`"))),
                }
                modes
                    .check()
                    .map_err(|reason| ConfigError::Syntax { line, reason })?;
            }
            "set" => {
                let kv = key_values(
                    &tokens[1..],
                    &["pause_ms", "silence_dbfs", "max_phrase_s"],
                    line,
                )?;
                if kv.len() != 1 {
                    return Err(syntax(line, "`set` takes exactly one key=value"));
                }
                let (key, value) = kv[0];
                if seen_settings.contains(&key) {
                    return Err(syntax(line, format!("setting `{key}` given twice")));
                }
                match key {
                    "pause_ms" => settings.pause_ms = parse_int(value, key, line)?,
                    "silence_dbfs" => settings.silence_dbfs = parse_float(value, key, line)?,
                    _ => settings.max_phrase_s = parse_int(value, key, line)?,
                }
                settings
                    .check()
                    .map_err(|reason| ConfigError::OutOfRange { line, reason })?;
                seen_settings.push(match key {
                    "pause_ms" => "pause_ms",
                    "silence_dbfs" => "silence_dbfs",
                    _ => "max_phrase_s",
                });
            }
            other => return Err(syntax(line, format!("unknown directive `{other}`"))),
        }
    }

    Policy::from_parts(rules, modes, settings)
}

/// Non-fatal policy problems.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Diagnostic {
    /// `later` has exactly the same pattern as `first`.
    DuplicatePattern { first: usize, later: usize },
    /// Literal of rule `inner` occurs inside the literal of rule `outer`.
    NestedLiteral { inner: usize, outer: usize },
    /// A control phrase (or the hotword) is itself matched by a rule.
    ControlCollision {
        control: &'static str,
        ordinal: usize,
    },
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diagnostic::DuplicatePattern { first, later } => {
                write!(f, "rule {later} repeats the pattern of rule {first}")
            }
            Diagnostic::NestedLiteral { inner, outer } => {
                write!(
                    f,
                    "rule {inner}'s pattern occurs inside rule {outer}'s pattern"
                )
            }
            Diagnostic::ControlCollision { control, ordinal } => {
                write!(f, "{control} phrase is matched by rule {ordinal}")
            }
        }
    }
}

/// Reports likely policy mistakes without rejecting the policy.
pub fn validate_policy(policy: &Policy) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let rules = &policy.rules;
    for (j, later) in rules.iter().enumerate() {
        if let Some(first) = rules[..j].iter().find(|r| r.pattern == later.pattern) {
            out.push(Diagnostic::DuplicatePattern {
                first: first.ordinal,
                later: later.ordinal,
            });
        }
    }
    for inner in rules {
        for outer in rules {
            let (Pattern::Literal(a), Pattern::Literal(b)) = (&inner.pattern, &outer.pattern)
            else {
                continue;
            };
            if a != b && match_rule(inner, b).is_some() {
                out.push(Diagnostic::NestedLiteral {
                    inner: inner.ordinal,
                    outer: outer.ordinal,
                });
            }
        }
    }
    for (control, phrase) in policy.modes.control_phrases() {
        for rule in rules {
            if match_rule(rule, phrase).is_some() {
                out.push(Diagnostic::ControlCollision {
                    control,
                    ordinal: rule.ordinal,
                });
            }
        }
    }
    out
}

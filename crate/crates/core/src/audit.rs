//! Counts-only telemetry.
//!
//! Reports identify rules by ordinal and kind and carry integers only: no
//! pattern text, no transcripts.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::config::{Policy, RuleKind};
use crate::domain::{Decision, DropCause};
use crate::engine::Verdict;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleCount {
    pub ordinal: usize,
    pub kind: RuleKind,
    pub activations: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModeCounts {
    pub privacy: u64,
    pub hotword: u64,
    pub loudness: u64,
    pub tts: u64,
    pub control: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Totals {
    pub phrases: u64,
    pub forwarded: u64,
    pub synthesized: u64,
    pub dropped: u64,
    pub stt_failures: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditReport {
    pub rules: Vec<RuleCount>,
    pub modes: ModeCounts,
    pub totals: Totals,
    /// First and last event time seen, on the event timeline.
    pub started_at_ms: Option<u64>,
    pub ended_at_ms: Option<u64>,
}

impl AuditReport {
    pub fn new(policy: &Policy) -> Self {
        Self {
            rules: policy
                .rules
                .iter()
                .map(|r| RuleCount {
                    ordinal: r.ordinal,
                    kind: r.action.kind(),
                    activations: 0,
                })
                .collect(),
            ..Self::default()
        }
    }

    /// Increments exactly the counters implied by one verdict.
    ///
    /// Every phrase lands in one of forwarded/synthesized/dropped, and every
    /// non-forward outcome is credited to exactly one of: a rule, a mode, or
    /// the STT failure counter.
    pub fn record(&mut self, verdict: &Verdict, t_ms: u64) {
        self.started_at_ms = Some(self.started_at_ms.map_or(t_ms, |s| s.min(t_ms)));
        self.ended_at_ms = Some(self.ended_at_ms.map_or(t_ms, |e| e.max(t_ms)));
        let totals = &mut self.totals;
        totals.phrases += 1;
        match &verdict.decision {
            Decision::Forward => totals.forwarded += 1,
            Decision::ForwardSynthesized(_) => totals.synthesized += 1,
            Decision::Drop(_) => totals.dropped += 1,
        }
        if verdict.stt_failure {
            totals.stt_failures += 1;
            return;
        }
        if let Some(ordinal) = verdict.rule {
            self.rule_mut(ordinal).activations += 1;
            return;
        }
        match verdict.decision {
            Decision::Drop(DropCause::Privacy) => self.modes.privacy += 1,
            Decision::Drop(DropCause::Hotword) => self.modes.hotword += 1,
            Decision::Drop(DropCause::Loudness) => self.modes.loudness += 1,
            Decision::Drop(DropCause::Control) => self.modes.control += 1,
            Decision::ForwardSynthesized(_) if verdict.via_tts => self.modes.tts += 1,
            _ => {}
        }
    }

    fn rule_mut(&mut self, ordinal: usize) -> &mut RuleCount {
        let idx = match self.rules.binary_search_by_key(&ordinal, |r| r.ordinal) {
            Ok(i) => i,
            Err(i) => {
                // Unknown ordinal: keep the row anyway so counts still add up.
                self.rules.insert(
                    i,
                    RuleCount {
                        ordinal,
                        kind: RuleKind::Phrase,
                        activations: 0,
                    },
                );
                i
            }
        };
        &mut self.rules[idx]
    }

    /// Adds another shard's counters into this report.
    pub fn merge(&mut self, other: &AuditReport) {
        for r in &other.rules {
            let kind = r.kind;
            let row = self.rule_mut(r.ordinal);
            row.kind = kind;
            row.activations += r.activations;
        }
        let (m, o) = (&mut self.modes, &other.modes);
        m.privacy += o.privacy;
        m.hotword += o.hotword;
        m.loudness += o.loudness;
        m.tts += o.tts;
        m.control += o.control;
        let (t, o) = (&mut self.totals, &other.totals);
        t.phrases += o.phrases;
        t.forwarded += o.forwarded;
        t.synthesized += o.synthesized;
        t.dropped += o.dropped;
        t.stt_failures += o.stt_failures;
        self.started_at_ms = match (self.started_at_ms, other.started_at_ms) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        };
        self.ended_at_ms = match (self.ended_at_ms, other.ended_at_ms) {
            (Some(a), Some(b)) => Some(a.max(b)),
            (a, b) => a.or(b),
        };
    }

    /// True when the credited counters add up to the outcome totals.
    pub fn is_consistent(&self) -> bool {
        let t = &self.totals;
        let m = &self.modes;
        let credited: u64 = self.rules.iter().map(|r| r.activations).sum::<u64>()
            + m.privacy
            + m.hotword
            + m.loudness
            + m.control
            + m.tts
            + t.stt_failures;
        t.forwarded + t.synthesized + t.dropped == t.phrases
            && credited == t.dropped + t.synthesized
    }
}

/// Stable JSON encoding of a report.
pub fn serialize_report(report: &AuditReport) -> String {
    serde_json::to_string(report).expect("audit report serializes")
}

pub fn deserialize_report(json: &str) -> Result<AuditReport, serde_json::Error> {
    serde_json::from_str(json)
}

/// Keys and enum values allowed in audit, eval and bench reports.
pub const STRUCTURAL_TOKENS: &[&str] = &[
    "rules",
    "ordinal",
    "kind",
    "activations",
    "expected_count",
    "failures",
    "modes",
    "privacy",
    "hotword",
    "loudness",
    "tts",
    "control",
    "totals",
    "phrases",
    "forwarded",
    "synthesized",
    "dropped",
    "stt_failures",
    "sensitive_expected",
    "sensitive_filtered",
    "filtered_rate",
    "started_at_ms",
    "ended_at_ms",
    "latency",
    "stt_ms",
    "filter_ms",
    "synth_ms",
    "min",
    "max",
    "mean",
    "n",
    "rows",
    "index",
    "action",
    "aggregate",
    "repetitions",
    "phrase",
    "timed",
    "delete",
    "FWD",
    "BLOCK",
    "SYNTH",
];

fn collect_strings(value: &serde_json::Value, out: &mut Vec<String>) {
    match value {
        serde_json::Value::String(s) => out.push(s.clone()),
        serde_json::Value::Array(items) => items.iter().for_each(|v| collect_strings(v, out)),
        serde_json::Value::Object(map) => {
            for (k, v) in map {
                out.push(k.clone());
                collect_strings(v, out);
            }
        }
        _ => {}
    }
}

/// Scans a serialized report for anything that could reveal what was said.
///
/// Returns every non-structural string in the JSON, plus every candidate word
/// (pattern text, corpus vocabulary) that still occurs once the structural
/// tokens are removed. An empty result means the report is transcript-free.
pub fn privacy_leaks<'a>(json: &str, candidates: impl IntoIterator<Item = &'a str>) -> Vec<String> {
    let mut leaks = BTreeSet::new();
    match serde_json::from_str::<serde_json::Value>(json) {
        Ok(value) => {
            let mut strings = Vec::new();
            collect_strings(&value, &mut strings);
            for s in strings {
                if !STRUCTURAL_TOKENS.contains(&s.as_str()) {
                    leaks.insert(s);
                }
            }
        }
        Err(_) => {
            leaks.insert("<unparseable report>".to_owned());
        }
    }
    let mut residual = json.to_owned();
    for tok in STRUCTURAL_TOKENS {
        residual = residual.replace(&format!("\"{tok}\""), "\"\"");
    }
    for word in ["null", "true", "false"] {
        residual = residual.replace(word, "");
    }
    for c in candidates {
        if !c.is_empty() && residual.contains(c) {
            leaks.insert(c.to_owned());
        }
    }
    leaks.into_iter().collect()
}

//! Evaluation harness: seeded corpora, raw-vs-filtered leakage statistics and
//! per-stage latency measurement.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{synthesize_mock, DEFAULT_WORDS_PER_MINUTE};
use crate::audit::{AuditReport, ModeCounts};
use crate::config::{Action, Pattern, Policy, RuleKind};
use crate::domain::{normalize_text, CorpusEvent, Decision, Expectation, PhraseEvent};
use crate::engine::{match_rule, EngineError, FilterEngine, Verdict};
use crate::stt::SpeechToText;

/// Benign vocabulary for generated phrases, one word per line.
pub const WORD_POOL: &str = include_str!("../fixtures/words.txt");

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("sensitive fraction must lie in [0, 1], got {0}")]
    BadFraction(f64),
    #[error("policy has no literal rules to embed into sensitive phrases")]
    NoLiteralRules,
    #[error("word pool is empty after excluding policy words")]
    EmptyPool,
    #[error("event {index}: label {label} does not exist in the policy")]
    UnknownLabel { index: usize, label: String },
    #[error("corpus events out of time order at line {0}")]
    TimeOrder(usize),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("repetitions must be at least 1")]
    NoRepetitions,
    #[error("corpus line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub n_phrases: usize,
    pub sensitive_fraction: f64,
    pub seed: u64,
    pub timeline_gap_ms: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_phrases: 1000,
            sensitive_fraction: 0.1,
            seed: 42,
            timeline_gap_ms: 5_000,
        }
    }
}

/// Pool words that cannot trigger anything in `policy` on their own.
fn benign_pool(policy: &Policy) -> Vec<&'static str> {
    let mut excluded: BTreeSet<String> = BTreeSet::new();
    for rule in &policy.rules {
        if let Pattern::Literal(t) = &rule.pattern {
            excluded.extend(t.as_str().split(' ').map(str::to_owned));
        }
    }
    let m = &policy.modes;
    let controls = [m.privacy.as_ref(), m.tts.as_ref()]
        .into_iter()
        .flatten()
        .flat_map(|t| [&t.on, &t.off])
        .chain(m.hotword.as_ref());
    for phrase in controls {
        excluded.extend(phrase.as_str().split(' ').map(str::to_owned));
    }
    WORD_POOL
        .lines()
        .map(str::trim)
        .filter(|w| !w.is_empty() && !w.starts_with('#'))
        .filter(|w| !excluded.contains(*w))
        .filter(|w| {
            let t = normalize_text(w);
            t.as_str() == *w
                && policy
                    .rules
                    .iter()
                    .all(|r| r.pattern.is_literal() || match_rule(r, &t).is_none())
        })
        .collect()
}

/// Generates `n_phrases` phrases of 8 to 16 benign words. A
/// `sensitive_fraction` of them (rounded) embed one literal rule pattern,
/// assigned round-robin over the literal rules in ordinal order, and are
/// labeled with that rule's ordinal.
pub fn generate_corpus(
    spec: &CorpusSpec,
    policy: &Policy,
) -> Result<Vec<CorpusEvent>, HarnessError> {
    if !(0.0..=1.0).contains(&spec.sensitive_fraction) {
        return Err(HarnessError::BadFraction(spec.sensitive_fraction));
    }
    let literals: Vec<(usize, &str)> = policy
        .rules
        .iter()
        .filter_map(|r| match &r.pattern {
            Pattern::Literal(t) => Some((r.ordinal, t.as_str())),
            Pattern::Regex(_) => None,
        })
        .collect();
    let n_sensitive = (spec.n_phrases as f64 * spec.sensitive_fraction).round() as usize;
    if n_sensitive > 0 && literals.is_empty() {
        return Err(HarnessError::NoLiteralRules);
    }
    let pool = benign_pool(policy);
    if pool.is_empty() && spec.n_phrases > 0 {
        return Err(HarnessError::EmptyPool);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut order: Vec<usize> = (0..spec.n_phrases).collect();
    order.shuffle(&mut rng);
    let mut sensitive = vec![false; spec.n_phrases];
    for &i in &order[..n_sensitive] {
        sensitive[i] = true;
    }

    let mut next_literal = 0;
    let mut corpus = Vec::with_capacity(spec.n_phrases);
    for (i, is_sensitive) in sensitive.into_iter().enumerate() {
        let len = rng.gen_range(8..=16);
        let mut words: Vec<&str> = (0..len)
            .map(|_| pool[rng.gen_range(0..pool.len())])
            .collect();
        let mut expected = Vec::new();
        if is_sensitive {
            let (ordinal, pattern) = literals[next_literal % literals.len()];
            next_literal += 1;
            let at = rng.gen_range(0..=words.len());
            words.insert(at, pattern);
            expected.push(Expectation::Rule(ordinal));
        }
        let rms_dbfs = (rng.gen_range(-400..-200) as f64) / 10.0;
        corpus.push(CorpusEvent {
            t_ms: i as u64 * spec.timeline_gap_ms,
            text: words.join(" "),
            rms_dbfs,
            expected,
        });
    }
    Ok(corpus)
}

pub fn write_corpus<W: Write>(mut out: W, corpus: &[CorpusEvent]) -> std::io::Result<()> {
    for ev in corpus {
        serde_json::to_writer(&mut out, ev)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads JSON-lines corpus events, checking that time never runs backwards.
pub fn read_corpus<R: BufRead>(input: R) -> Result<Vec<CorpusEvent>, HarnessError> {
    let mut out: Vec<CorpusEvent> = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ev: CorpusEvent = serde_json::from_str(&line).map_err(|e| HarnessError::Parse {
            line: i + 1,
            reason: e.to_string(),
        })?;
        if out.last().is_some_and(|prev| ev.t_ms < prev.t_ms) {
            return Err(HarnessError::TimeOrder(i + 1));
        }
        out.push(ev);
    }
    Ok(out)
}

/// The phrase events a corpus describes; ids follow corpus order.
pub fn corpus_events(corpus: &[CorpusEvent]) -> Vec<PhraseEvent> {
    corpus
        .iter()
        .enumerate()
        .map(|(i, ev)| PhraseEvent::from_text(i as u64, ev.t_ms, ev.text.clone(), ev.rms_dbfs))
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub n: u64,
}

impl Stats {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        Self {
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean: values.iter().sum::<f64>() / values.len() as f64,
            n: values.len() as u64,
        }
    }

    pub fn merge(&self, other: &Stats) -> Stats {
        match (self.n, other.n) {
            (0, _) => *other,
            (_, 0) => *self,
            (a, b) => Stats {
                min: self.min.min(other.min),
                max: self.max.max(other.max),
                mean: (self.mean * a as f64 + other.mean * b as f64) / (a + b) as f64,
                n: a + b,
            },
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Latency {
    pub stt_ms: Stats,
    pub filter_ms: Stats,
    pub synth_ms: Stats,
}

impl Latency {
    fn merge(&self, other: &Latency) -> Latency {
        Latency {
            stt_ms: self.stt_ms.merge(&other.stt_ms),
            filter_ms: self.filter_ms.merge(&other.filter_ms),
            synth_ms: self.synth_ms.merge(&other.synth_ms),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRule {
    pub ordinal: usize,
    pub kind: RuleKind,
    pub activations: u64,
    pub expected_count: u64,
    pub failures: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalTotals {
    pub phrases: u64,
    pub forwarded: u64,
    pub synthesized: u64,
    pub dropped: u64,
    pub stt_failures: u64,
    pub sensitive_expected: u64,
    pub sensitive_filtered: u64,
    pub failures: u64,
    /// `sensitive_filtered / sensitive_expected`; null without sensitive events.
    pub filtered_rate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rules: Vec<EvalRule>,
    pub modes: ModeCounts,
    pub totals: EvalTotals,
    /// Wall-clock stage timings; only present when requested, since they make
    /// the report non-reproducible.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub latency: Option<Latency>,
}

impl EvalReport {
    fn from_parts(
        audit: &AuditReport,
        expected: &[u64],
        failures: &[u64],
        sensitive: (u64, u64, u64),
        latency: Option<Latency>,
    ) -> Self {
        let (sensitive_expected, sensitive_filtered, total_failures) = sensitive;
        let t = &audit.totals;
        Self {
            rules: audit
                .rules
                .iter()
                .map(|r| EvalRule {
                    ordinal: r.ordinal,
                    kind: r.kind,
                    activations: r.activations,
                    expected_count: expected.get(r.ordinal).copied().unwrap_or(0),
                    failures: failures.get(r.ordinal).copied().unwrap_or(0),
                })
                .collect(),
            modes: audit.modes.clone(),
            totals: EvalTotals {
                phrases: t.phrases,
                forwarded: t.forwarded,
                synthesized: t.synthesized,
                dropped: t.dropped,
                stt_failures: t.stt_failures,
                sensitive_expected,
                sensitive_filtered,
                failures: total_failures,
                filtered_rate: (sensitive_expected > 0)
                    .then(|| sensitive_filtered as f64 / sensitive_expected as f64),
            },
            latency,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("eval report serializes")
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EvalOptions {
    /// Measure per-stage wall-clock time (and synthesize output audio).
    pub timings: bool,
}

const MODE_LABELS: &[&str] = &["privacy", "hotword", "loudness", "tts", "control"];

fn check_labels(corpus: &[CorpusEvent], policy: &Policy) -> Result<(), HarnessError> {
    for (index, ev) in corpus.iter().enumerate() {
        for label in &ev.expected {
            let ok = match label {
                Expectation::Rule(o) => *o < policy.rules.len(),
                Expectation::Mode(m) => MODE_LABELS.contains(&m.as_str()),
            };
            if !ok {
                return Err(HarnessError::UnknownLabel {
                    index,
                    label: serde_json::to_string(label).unwrap_or_default(),
                });
            }
        }
    }
    Ok(())
}

/// Ground-truth check for one label against the filtered output.
fn label_filtered(label: &Expectation, decision: &Decision, policy: &Policy) -> bool {
    match (label, decision) {
        (_, Decision::Drop(_)) => true,
        (Expectation::Rule(o), Decision::ForwardSynthesized(text)) => {
            let rule = &policy.rules[*o];
            rule.action == Action::Delete && match_rule(rule, &normalize_text(text)).is_none()
        }
        (Expectation::Mode(m), Decision::ForwardSynthesized(_)) => m == "tts",
        (_, Decision::Forward) => false,
    }
}

struct Tally<'a> {
    policy: &'a Policy,
    audit: AuditReport,
    expected: Vec<u64>,
    failures: Vec<u64>,
    sensitive_expected: u64,
    sensitive_filtered: u64,
    total_failures: u64,
    stt: Vec<f64>,
    filter: Vec<f64>,
    synth: Vec<f64>,
}

impl<'a> Tally<'a> {
    fn new(policy: &'a Policy) -> Self {
        Self {
            policy,
            audit: AuditReport::new(policy),
            expected: vec![0; policy.rules.len()],
            failures: vec![0; policy.rules.len()],
            sensitive_expected: 0,
            sensitive_filtered: 0,
            total_failures: 0,
            stt: Vec::new(),
            filter: Vec::new(),
            synth: Vec::new(),
        }
    }

    fn observe(&mut self, ev: &CorpusEvent, verdict: &Verdict) {
        self.audit.record(verdict, ev.t_ms);
        if ev.expected.is_empty() {
            return;
        }
        self.sensitive_expected += 1;
        let mut all = true;
        for label in &ev.expected {
            let ok = label_filtered(label, &verdict.decision, self.policy);
            if let Expectation::Rule(o) = label {
                self.expected[*o] += 1;
                if !ok {
                    self.failures[*o] += 1;
                }
            }
            all &= ok;
        }
        if all {
            self.sensitive_filtered += 1;
        } else {
            self.total_failures += 1;
        }
    }

    fn latency(&self) -> Latency {
        Latency {
            stt_ms: Stats::of(&self.stt),
            filter_ms: Stats::of(&self.filter),
            synth_ms: Stats::of(&self.synth),
        }
    }

    fn finish(self, timings: bool) -> EvalReport {
        let latency = timings.then(|| self.latency());
        EvalReport::from_parts(
            &self.audit,
            &self.expected,
            &self.failures,
            (
                self.sensitive_expected,
                self.sensitive_filtered,
                self.total_failures,
            ),
            latency,
        )
    }
}

fn ms_since(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1000.0
}

fn eval_range<'p>(
    corpus: &[CorpusEvent],
    first_id: usize,
    policy: &'p Policy,
    stt: &dyn SpeechToText,
    opts: EvalOptions,
) -> Result<Tally<'p>, HarnessError> {
    let mut tally = Tally::new(policy);
    let mut engine = FilterEngine::new(policy);
    for (offset, ev) in corpus.iter().enumerate() {
        let phrase = PhraseEvent::from_text(
            (first_id + offset) as u64,
            ev.t_ms,
            ev.text.clone(),
            ev.rms_dbfs,
        );
        let t0 = Instant::now();
        let transcription = stt.transcribe(&phrase);
        let t1 = Instant::now();
        let verdict = engine.evaluate(&phrase, &transcription)?;
        if opts.timings {
            tally.filter.push(ms_since(t1));
            tally.stt.push((t1 - t0).as_secs_f64() * 1000.0);
            let t2 = Instant::now();
            if let Decision::ForwardSynthesized(text) = &verdict.decision {
                let _ = synthesize_mock(text, DEFAULT_WORDS_PER_MINUTE);
            }
            tally.synth.push(ms_since(t2));
        }
        tally.observe(ev, &verdict);
    }
    Ok(tally)
}

/// Runs the corpus through transcription, the filter engine and the audit
/// trail, checking each labeled phrase against the filtered output. The
/// report holds counts only.
pub fn run_eval(
    corpus: &[CorpusEvent],
    policy: &Policy,
    stt: &dyn SpeechToText,
    opts: EvalOptions,
) -> Result<EvalReport, HarnessError> {
    check_labels(corpus, policy)?;
    let tally = eval_range(corpus, 0, policy, stt, opts)?;
    Ok(tally.finish(opts.timings))
}

/// Like [`run_eval`], split into contiguous time ranges evaluated in
/// parallel. Falls back to a serial run when the policy carries state across
/// phrases (timed rules or any mode).
pub fn run_eval_sharded(
    corpus: &[CorpusEvent],
    policy: &Policy,
    stt: &dyn SpeechToText,
    opts: EvalOptions,
    shards: usize,
) -> Result<EvalReport, HarnessError> {
    if shards <= 1 || policy.has_timed_rules() || policy.has_modes() || corpus.len() < 2 {
        return run_eval(corpus, policy, stt, opts);
    }
    check_labels(corpus, policy)?;
    let chunk = corpus.len().div_ceil(shards);
    let results: Vec<Result<Tally<'_>, HarnessError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = corpus
            .chunks(chunk)
            .enumerate()
            .map(|(i, part)| scope.spawn(move || eval_range(part, i * chunk, policy, stt, opts)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("eval shard panicked"))
            .collect()
    });
    let mut merged = Tally::new(policy);
    let mut latency = Latency::default();
    for result in results {
        let part = result?;
        merged.audit.merge(&part.audit);
        for o in 0..policy.rules.len() {
            merged.expected[o] += part.expected[o];
            merged.failures[o] += part.failures[o];
        }
        merged.sensitive_expected += part.sensitive_expected;
        merged.sensitive_filtered += part.sensitive_filtered;
        merged.total_failures += part.total_failures;
        latency = latency.merge(&part.latency());
    }
    let mut report = merged.finish(false);
    if opts.timings {
        report.latency = Some(latency);
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub index: usize,
    /// `FWD`, `BLOCK` or `SYNTH`.
    pub action: String,
    pub stt_ms: Stats,
    pub filter_ms: Stats,
    pub synth_ms: Stats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub repetitions: usize,
    pub rows: Vec<BenchRow>,
    pub aggregate: Latency,
}

impl BenchReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("bench report serializes")
    }
}

fn action_label(decision: &Decision) -> &'static str {
    match decision {
        Decision::Forward => "FWD",
        Decision::ForwardSynthesized(_) => "SYNTH",
        Decision::Drop(_) => "BLOCK",
    }
}

/// Times each stage per corpus phrase over `repetitions` full passes (each
/// pass starts from a fresh engine) and summarizes min/max/mean per phrase
/// and overall.
pub fn bench_latency(
    corpus: &[CorpusEvent],
    policy: &Policy,
    stt: &dyn SpeechToText,
    repetitions: usize,
) -> Result<BenchReport, HarnessError> {
    if corpus.is_empty() {
        return Err(HarnessError::EmptyCorpus);
    }
    if repetitions == 0 {
        return Err(HarnessError::NoRepetitions);
    }
    let events = corpus_events(corpus);
    let n = events.len();
    let mut stt_ms = vec![Vec::with_capacity(repetitions); n];
    let mut filter_ms = vec![Vec::with_capacity(repetitions); n];
    let mut synth_ms = vec![Vec::with_capacity(repetitions); n];
    let mut actions = vec![""; n];
    for _ in 0..repetitions {
        let mut engine = FilterEngine::new(policy);
        for (i, ev) in events.iter().enumerate() {
            let t0 = Instant::now();
            let transcription = stt.transcribe(ev);
            let t1 = Instant::now();
            let verdict = engine.evaluate(ev, &transcription)?;
            let t2 = Instant::now();
            if let Decision::ForwardSynthesized(text) = &verdict.decision {
                let _ = synthesize_mock(text, DEFAULT_WORDS_PER_MINUTE);
            }
            synth_ms[i].push(ms_since(t2));
            filter_ms[i].push((t2 - t1).as_secs_f64() * 1000.0);
            stt_ms[i].push((t1 - t0).as_secs_f64() * 1000.0);
            actions[i] = action_label(&verdict.decision);
        }
    }
    let rows: Vec<BenchRow> = (0..n)
        .map(|i| BenchRow {
            index: i,
            action: actions[i].to_owned(),
            stt_ms: Stats::of(&stt_ms[i]),
            filter_ms: Stats::of(&filter_ms[i]),
            synth_ms: Stats::of(&synth_ms[i]),
        })
        .collect();
    let flat = |v: &[Vec<f64>]| Stats::of(&v.concat());
    Ok(BenchReport {
        repetitions,
        rows,
        aggregate: Latency {
            stt_ms: flat(&stt_ms),
            filter_ms: flat(&filter_ms),
            synth_ms: flat(&synth_ms),
        },
    })
}

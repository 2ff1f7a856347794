//! Independent reference models shared by integration and acceptance tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use speech_firewall::config::{Action, LoudnessMode, ModeConfig, Pattern, Settings, TogglePhrases};
use speech_firewall::domain::{normalize_text, Decision, DropCause, PhraseEvent};
use speech_firewall::stt::{SttError, Transcription};
use speech_firewall::Policy;

// ---------------------------------------------------------------- audio

fn dbfs(samples: &[f64]) -> f64 {
    if samples.is_empty() {
        return -96.0;
    }
    let ms = samples.iter().map(|s| s * s).sum::<f64>() / samples.len() as f64;
    if ms == 0.0 {
        -96.0
    } else {
        (10.0 * ms.log10()).max(-96.0)
    }
}

/// A phrase found by the batch segmenter: sample range and voiced loudness.
#[derive(Clone, Debug, PartialEq)]
pub struct RefPhrase {
    pub start: usize,
    pub end: usize,
    pub rms_dbfs: f64,
}

/// Whole-recording segmentation: classify every 10 ms hop by the energy of
/// the 20 ms frame ending with it (zero outside the recording), then group
/// voiced hops into phrases.
pub fn reference_segments(samples: &[f64], sr: u32, settings: &Settings) -> Vec<RefPhrase> {
    let hop = (sr as usize / 100).max(1);
    let n_hops = samples.len().div_ceil(hop);
    let window = |k: usize, width: usize| &samples[k * hop..(k * hop + width).min(samples.len())];
    let frame_dbfs = |k: usize| {
        let lo = k.saturating_sub(1) * hop;
        let hi = ((k + 1) * hop).min(samples.len());
        let energy: f64 = samples[lo..hi].iter().map(|s| s * s).sum();
        if energy == 0.0 {
            -96.0
        } else {
            (10.0 * (energy / (2 * hop) as f64).log10()).max(-96.0)
        }
    };
    let voiced: Vec<usize> = (0..n_hops)
        .filter(|&k| frame_dbfs(k) >= settings.silence_dbfs)
        .collect();
    let pause_hops = ((settings.pause_ms as usize * sr as usize).div_ceil(1000 * hop)).max(1);
    let cap_hops = (settings.max_phrase_s as usize * sr as usize).div_ceil(hop);

    let mut groups: Vec<Vec<usize>> = Vec::new();
    for &k in &voiced {
        match groups.last_mut() {
            Some(g) if k - g[g.len() - 1] <= pause_hops && k < g[0] + cap_hops => g.push(k),
            _ => groups.push(vec![k]),
        }
    }
    groups
        .into_iter()
        .map(|g| {
            let voiced_samples: Vec<f64> = g
                .iter()
                .flat_map(|&k| window(k, hop).iter().copied())
                .collect();
            RefPhrase {
                start: g[0] * hop,
                end: ((g[g.len() - 1] + 1) * hop).min(samples.len()),
                rms_dbfs: dbfs(&voiced_samples),
            }
        })
        .collect()
}

pub fn tone(seconds: f64, sr: u32, amplitude: f64) -> Vec<f64> {
    let n = (seconds * sr as f64).round() as usize;
    (0..n)
        .map(|i| amplitude * (2.0 * std::f64::consts::PI * 300.0 * i as f64 / sr as f64).sin())
        .collect()
}

pub fn silence(seconds: f64, sr: u32) -> Vec<f64> {
    vec![0.0; (seconds * sr as f64).round() as usize]
}

// ---------------------------------------------------------------- engine

pub fn tokens(s: &str) -> Vec<&str> {
    s.split(' ').filter(|w| !w.is_empty()).collect()
}

/// Start indices (in words) of leftmost non-overlapping occurrences.
pub fn occurrences(text: &[&str], needle: &[&str]) -> Vec<usize> {
    let mut out = Vec::new();
    if needle.is_empty() {
        return out;
    }
    let mut i = 0;
    while i + needle.len() <= text.len() {
        if &text[i..i + needle.len()] == needle {
            out.push(i);
            i += needle.len();
        } else {
            i += 1;
        }
    }
    out
}

/// Per-event facts that depend only on that event.
struct Facts {
    ok: bool,
    words: Vec<String>,
    /// (word index, word length, flag, new value) for each control phrase hit.
    toggles: Vec<(usize, usize, u8, bool)>,
    /// (rule ordinal, deadline) for every matching timed rule.
    timed: Vec<(usize, u64)>,
}

const PRIVACY: u8 = 0;
const TTS: u8 = 1;

fn literal(p: &Pattern) -> &str {
    match p {
        Pattern::Literal(t) => t.as_str(),
        Pattern::Regex(_) => panic!("the reference model handles literal patterns only"),
    }
}

fn facts(policy: &Policy, ev: &PhraseEvent, tr: &Result<Transcription, SttError>) -> Facts {
    let Ok(t) = tr else {
        return Facts {
            ok: false,
            words: vec![],
            toggles: vec![],
            timed: vec![],
        };
    };
    let norm = normalize_text(&t.text);
    let words: Vec<String> = tokens(norm.as_str())
        .into_iter()
        .map(str::to_owned)
        .collect();
    let w: Vec<&str> = words.iter().map(String::as_str).collect();
    let mut toggles = Vec::new();
    for (flag, modes) in [(PRIVACY, &policy.modes.privacy), (TTS, &policy.modes.tts)] {
        if let Some(m) = modes {
            for (phrase, value) in [(&m.on, true), (&m.off, false)] {
                let p = tokens(phrase.as_str());
                for i in occurrences(&w, &p) {
                    toggles.push((i, p.len(), flag, value));
                }
            }
        }
    }
    toggles.sort_by_key(|&(i, len, _, _)| (i, len));
    let timed = policy
        .rules
        .iter()
        .filter_map(|r| match r.action {
            Action::Timed { duration_s }
                if !occurrences(&w, &tokens(literal(&r.pattern))).is_empty() =>
            {
                Some((r.ordinal, ev.t_ms + duration_s * 1000))
            }
            _ => None,
        })
        .collect();
    Facts {
        ok: true,
        words,
        toggles,
        timed,
    }
}

fn matches(words: &[String], pattern: &Pattern) -> bool {
    let w: Vec<&str> = words.iter().map(String::as_str).collect();
    !occurrences(&w, &tokens(literal(pattern))).is_empty()
}

fn delete_all(policy: &Policy, words: &[String]) -> Option<(usize, Vec<String>)> {
    let mut current = words.to_vec();
    let mut first = None;
    loop {
        let w: Vec<&str> = current.iter().map(String::as_str).collect();
        let mut cut = vec![false; w.len()];
        let mut any = false;
        for r in policy.rules.iter().filter(|r| r.action == Action::Delete) {
            let p = tokens(literal(&r.pattern));
            for i in occurrences(&w, &p) {
                any = true;
                first.get_or_insert(r.ordinal);
                cut[i..i + p.len()].iter_mut().for_each(|c| *c = true);
            }
        }
        if !any {
            return first.map(|o| (o, current));
        }
        current = current
            .into_iter()
            .zip(cut)
            .filter(|(_, c)| !c)
            .map(|(w, _)| w)
            .collect();
    }
}

/// Brute-force simulator: each decision is recomputed from the complete
/// history of events up to and including the current one.
pub fn reference_decisions(
    policy: &Policy,
    stream: &[(PhraseEvent, Result<Transcription, SttError>)],
) -> Vec<Decision> {
    let all: Vec<Facts> = stream
        .iter()
        .map(|(ev, tr)| facts(policy, ev, tr))
        .collect();
    (0..stream.len())
        .map(|k| {
            let ev = &stream[k].0;
            let f = &all[k];
            if !f.ok {
                return Decision::Drop(DropCause::Control);
            }
            let (mut privacy, mut tts) = (false, false);
            for past in &all[..=k] {
                for &(_, _, flag, value) in &past.toggles {
                    if flag == PRIVACY {
                        privacy = value;
                    } else {
                        tts = value;
                    }
                }
            }
            if !f.toggles.is_empty() {
                return Decision::Drop(DropCause::Control);
            }
            if privacy {
                return Decision::Drop(DropCause::Privacy);
            }
            if let Some(hw) = &policy.modes.hotword {
                let h = tokens(hw.as_str());
                let prefix: Vec<&str> = f.words.iter().take(h.len()).map(String::as_str).collect();
                if prefix != h {
                    return Decision::Drop(DropCause::Hotword);
                }
            }
            if let Some(l) = &policy.modes.loudness {
                let held = stream[..k].iter().any(|(p, _)| {
                    p.rms_dbfs >= l.threshold_dbfs && ev.t_ms < p.t_ms + l.hold_s * 1000
                });
                if ev.rms_dbfs >= l.threshold_dbfs || held {
                    return Decision::Drop(DropCause::Loudness);
                }
            }
            if let Some(&(o, _)) = f.timed.iter().min_by_key(|(o, _)| *o) {
                return Decision::Drop(DropCause::Rule(o));
            }
            // Latest deadline so far; ties go to the earliest event, then lowest ordinal.
            let window = all[..=k]
                .iter()
                .enumerate()
                .flat_map(|(j, past)| past.timed.iter().map(move |&(o, d)| (d, j, o)))
                .min_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            if let Some((deadline, _, o)) = window {
                if ev.t_ms < deadline {
                    return Decision::Drop(DropCause::TimedWindow(o));
                }
            }
            if let Some(r) = policy
                .rules
                .iter()
                .find(|r| r.action == Action::Phrase && matches(&f.words, &r.pattern))
            {
                return Decision::Drop(DropCause::Rule(r.ordinal));
            }
            if let Some((_, rest)) = delete_all(policy, &f.words) {
                return if rest.is_empty() {
                    Decision::Drop(DropCause::EmptyAfterDeletion)
                } else {
                    Decision::ForwardSynthesized(rest.join(" "))
                };
            }
            if tts {
                return if f.words.is_empty() {
                    Decision::Drop(DropCause::Control)
                } else {
                    Decision::ForwardSynthesized(f.words.join(" "))
                };
            }
            Decision::Forward
        })
        .collect()
}

// ---------------------------------------------------------------- generators

pub const VOCAB: &[&str] = &[
    "alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel",
];

fn phrase(rng: &mut ChaCha8Rng, min: usize, max: usize) -> String {
    let n = rng.gen_range(min..=max);
    (0..n)
        .map(|_| VOCAB[rng.gen_range(0..VOCAB.len())])
        .collect::<Vec<_>>()
        .join(" ")
}

pub struct ModeMix {
    pub privacy: bool,
    pub tts: bool,
    pub hotword: bool,
    pub loudness: bool,
}

impl ModeMix {
    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        Self {
            privacy: rng.gen_bool(0.3),
            tts: rng.gen_bool(0.3),
            hotword: rng.gen_bool(0.2),
            loudness: rng.gen_bool(0.3),
        }
    }

    pub fn none() -> Self {
        Self {
            privacy: false,
            tts: false,
            hotword: false,
            loudness: false,
        }
    }
}

/// A random valid literal-only policy over [`VOCAB`].
pub fn random_policy(rng: &mut ChaCha8Rng, max_rules: usize, mix: &ModeMix) -> Policy {
    loop {
        let n = rng.gen_range(0..=max_rules);
        let rules = (0..n)
            .map(|_| {
                let action = match rng.gen_range(0..3) {
                    0 => Action::Phrase,
                    1 => Action::Timed {
                        duration_s: rng.gen_range(1..=20),
                    },
                    _ => Action::Delete,
                };
                (
                    action,
                    Pattern::literal(&phrase(rng, 1, 2)).expect("non-empty literal"),
                )
            })
            .collect();
        let toggle = |rng: &mut ChaCha8Rng| TogglePhrases {
            on: normalize_text(&phrase(rng, 1, 2)),
            off: normalize_text(&phrase(rng, 1, 2)),
        };
        let modes = ModeConfig {
            privacy: mix.privacy.then(|| toggle(rng)),
            tts: mix.tts.then(|| toggle(rng)),
            hotword: mix
                .hotword
                .then(|| normalize_text(VOCAB[rng.gen_range(0..VOCAB.len())])),
            loudness: mix.loudness.then(|| LoudnessMode {
                threshold_dbfs: -(rng.gen_range(5..40) as f64),
                hold_s: rng.gen_range(0..=5),
            }),
        };
        if let Ok(p) = Policy::from_parts(rules, modes, Settings::default()) {
            return p;
        }
    }
}

/// Random text events with increasing ids and non-decreasing times; about 3%
/// of transcriptions fail.
pub fn random_stream(
    rng: &mut ChaCha8Rng,
    len: usize,
) -> Vec<(PhraseEvent, Result<Transcription, SttError>)> {
    let mut t = 0u64;
    (0..len)
        .map(|i| {
            t += rng.gen_range(0..4_000);
            let text = phrase(rng, 0, 6);
            let rms = -(rng.gen_range(0..500) as f64) / 10.0;
            let ev = PhraseEvent::from_text(i as u64, t, text.clone(), rms);
            let tr = if rng.gen_bool(0.03) {
                Err(SttError::Timeout(std::time::Duration::from_secs(10)))
            } else {
                Ok(Transcription::exact(text))
            };
            (ev, tr)
        })
        .collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

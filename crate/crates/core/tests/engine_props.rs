mod support;

use proptest::prelude::*;
use rand::Rng;
use speech_firewall::config::{parse_policy, Action};
use speech_firewall::domain::{normalize_text, starts_with_word, Decision, DropCause};
use speech_firewall::engine::{match_rule, FilterEngine};
use speech_firewall::stt::Transcription;
use speech_firewall::PhraseEvent;

use support::{random_policy, random_stream, reference_decisions, rng, ModeMix};

fn run(
    policy: &speech_firewall::Policy,
    stream: &[(
        PhraseEvent,
        Result<Transcription, speech_firewall::SttError>,
    )],
) -> Vec<Decision> {
    let mut engine = FilterEngine::new(policy);
    stream
        .iter()
        .map(|(ev, tr)| engine.evaluate(ev, tr).unwrap().decision)
        .collect()
}

#[test]
fn matches_reference_on_random_instances() {
    let mut r = rng(0x5eed);
    for case in 0..150 {
        let mix = ModeMix::random(&mut r);
        let policy = random_policy(&mut r, 10, &mix);
        let len = r.gen_range(0..=300);
        let stream = random_stream(&mut r, len);
        assert_eq!(
            run(&policy, &stream),
            reference_decisions(&policy, &stream),
            "case {case}\n{policy}"
        );
    }
}

#[test]
fn reference_agrees_on_worked_timeline() {
    let p = parse_policy("rule timed 600 \"girlfriend\"").unwrap();
    let stream: Vec<_> = [
        (0, "my girlfriend called"),
        (300_000, "lets get dinner"),
        (601_000, "lets get dinner"),
    ]
    .into_iter()
    .enumerate()
    .map(|(i, (t, text))| {
        (
            PhraseEvent::from_text(i as u64, t, text, -30.0),
            Ok(Transcription::exact(text)),
        )
    })
    .collect();
    let expected = vec![
        Decision::Drop(DropCause::Rule(0)),
        Decision::Drop(DropCause::TimedWindow(0)),
        Decision::Forward,
    ];
    assert_eq!(run(&p, &stream), expected);
    assert_eq!(reference_decisions(&p, &stream), expected);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn soundness_and_deletion_completeness(seed in any::<u64>()) {
        let mut r = rng(seed);
        let policy = random_policy(&mut r, 8, &ModeMix::none());
        let stream = random_stream(&mut r, 60);
        for ((ev, tr), d) in stream.iter().zip(run(&policy, &stream)) {
            let Ok(t) = tr else { continue };
            let text = normalize_text(&t.text);
            let blocked = policy.rules.iter().any(|rule| {
                matches!(rule.action, Action::Phrase | Action::Timed { .. }) && match_rule(rule, &text).is_some()
            });
            if blocked {
                prop_assert!(d.is_drop(), "event {} forwarded", ev.id);
            }
            if let Decision::ForwardSynthesized(out) = &d {
                let out = normalize_text(out);
                for rule in policy.rules.iter().filter(|r| r.action == Action::Delete) {
                    prop_assert!(match_rule(rule, &out).is_none());
                }
            }
        }
    }

    #[test]
    fn hotword_totality(seed in any::<u64>()) {
        let mut r = rng(seed);
        let mix = ModeMix { hotword: true, ..ModeMix::random(&mut r) };
        let policy = random_policy(&mut r, 6, &mix);
        let hw = policy.modes.hotword.clone().unwrap();
        let stream = random_stream(&mut r, 80);
        for ((_, tr), d) in stream.iter().zip(run(&policy, &stream)) {
            if !d.is_drop() {
                let text = normalize_text(&tr.as_ref().unwrap().text);
                prop_assert!(starts_with_word(&text, &hw));
            }
        }
    }

    #[test]
    fn timed_deadline_never_decreases(seed in any::<u64>()) {
        let mut r = rng(seed);
        let mix = ModeMix::random(&mut r);
        let policy = random_policy(&mut r, 10, &mix);
        let stream = random_stream(&mut r, 100);
        let mut engine = FilterEngine::new(&policy);
        let mut last = None;
        for (ev, tr) in &stream {
            engine.evaluate(ev, tr).unwrap();
            let now = engine.state().timed_deadline_ms;
            prop_assert!(now >= last);
            prop_assert_eq!(now.is_some(), engine.state().timed_source_ordinal.is_some());
            last = now;
        }
    }

    #[test]
    fn replay_is_deterministic(seed in any::<u64>()) {
        let mut r = rng(seed);
        let mix = ModeMix::random(&mut r);
        let policy = random_policy(&mut r, 10, &mix);
        let stream = random_stream(&mut r, 50);
        prop_assert_eq!(run(&policy, &stream), run(&policy, &stream));
    }
}

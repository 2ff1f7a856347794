use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use speech_firewall::audio::{read_wav, segment, synthesize_mock, write_wav};
use speech_firewall::config::Settings;
use speech_firewall::domain::Samples;
use speech_firewall::stt::fingerprint;

const SR: u32 = 16_000;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/fixtures")
        .join(name)
}

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_speech-firewall"))
        .args(args)
        .env_remove("SPEECH_FIREWALL_CONFIG")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn lines(p: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(p)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

/// Two spoken phrases separated by a second of silence, plus a table fixture
/// transcribing them.
fn two_phrase_recording(dir: &Path, second_text: &str) -> (PathBuf, PathBuf, Vec<Vec<f64>>) {
    let a = synthesize_mock("play some music", 150)
        .unwrap()
        .into_samples()
        .data;
    let b: Vec<f64> = synthesize_mock("bank account password", 150)
        .unwrap()
        .into_samples()
        .data
        .iter()
        .map(|x| x * 0.5)
        .collect();
    let mut rec = a;
    rec.extend(vec![0.0; SR as usize]);
    rec.extend(b);
    rec.extend(vec![0.0; SR as usize]);
    let wav = dir.join("rec.wav");
    write_wav(
        &wav,
        &Samples {
            data: rec,
            sample_rate_hz: SR,
        },
    )
    .unwrap();

    let events = segment(&read_wav(&wav).unwrap().data, SR, &Settings::default()).unwrap();
    assert_eq!(events.len(), 2);
    let phrases: Vec<Vec<f64>> = events
        .into_iter()
        .map(|e| e.samples.unwrap().data)
        .collect();
    let table = dir.join("table.jsonl");
    let body = format!(
        "{{\"fingerprint\":\"{}\",\"text\":\"play some music\"}}\n{{\"fingerprint\":\"{}\",\"text\":\"{second_text}\"}}\n",
        fingerprint(&phrases[0]),
        fingerprint(&phrases[1])
    );
    std::fs::write(&table, body).unwrap();
    (wav, table, phrases)
}

#[test]
fn dropped_phrase_never_reaches_the_output() {
    let dir = tempfile::tempdir().unwrap();
    let (wav, table, phrases) = two_phrase_recording(dir.path(), "bank account password");
    let out = dir.path().join("out.wav");
    let log = dir.path().join("log.jsonl");
    let audit = dir.path().join("audit.json");
    let o = cli(&[
        "run",
        "--policy",
        s(&fixture("password.policy")),
        "--input",
        s(&wav),
        "--stt",
        &format!("table:{}", s(&table)),
        "--out-wav",
        s(&out),
        "--log",
        s(&log),
        "--audit",
        s(&audit),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let written = read_wav(&out).unwrap().data;
    assert_eq!(written.len(), phrases[0].len());
    assert_eq!(fingerprint(&written), fingerprint(&phrases[0]));

    let log = lines(&log);
    assert_eq!(log.len(), 2);
    assert_eq!(log[0]["decision"], "forward");
    assert_eq!(log[1]["decision"], "drop");
    assert_eq!(log[1]["cause"], "rule:0");
    assert!(log[0].get("text").is_none());

    let audit: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(audit).unwrap()).unwrap();
    assert_eq!(audit["rules"][0]["activations"], 1);
    assert_eq!(audit["totals"]["phrases"], 2);
}

#[test]
fn deletion_emits_synthesized_audio() {
    let dir = tempfile::tempdir().unwrap();
    let (wav, table, phrases) = two_phrase_recording(dir.path(), "open capital one please");
    let out = dir.path().join("out.wav");
    let o = cli(&[
        "run",
        "--policy",
        s(&fixture("default.policy")),
        "--input",
        s(&wav),
        "--stt",
        &format!("table:{}", s(&table)),
        "--out-wav",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    // First phrase copied, second replaced by 0.8 s of mock speech ("open please").
    let written = read_wav(&out).unwrap().data;
    assert_eq!(written.len(), phrases[0].len() + (0.8 * SR as f64) as usize);
    assert_eq!(
        fingerprint(&written[..phrases[0].len()]),
        fingerprint(&phrases[0])
    );
}

#[test]
fn transcript_run_logs_one_line_per_phrase() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("log.jsonl");
    let o = cli(&[
        "run",
        "--policy",
        s(&fixture("password.policy")),
        "--transcripts",
        s(&fixture("dialog.jsonl")),
        "--log",
        s(&log),
    ]);
    assert!(o.status.success());
    let log = lines(&log);
    assert_eq!(log.len(), 4);
    let decisions: Vec<&str> = log
        .iter()
        .map(|l| l["decision"].as_str().unwrap())
        .collect();
    assert_eq!(decisions, ["forward", "drop", "forward", "forward"]);
    for (i, l) in log.iter().enumerate() {
        assert_eq!(l["id"], i);
        let keys: Vec<&String> = l.as_object().unwrap().keys().collect();
        assert_eq!(keys.len(), 4);
    }
    assert_eq!(log[0]["cause"], serde_json::Value::Null);
    let raw = std::fs::read_to_string(dir.path().join("log.jsonl")).unwrap();
    assert!(raw.starts_with("{\"id\":0,\"t_ms\":0,\"decision\":\"forward\",\"cause\":null}"));
    let stdout: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(stdout["phrases"], 4);
}

#[test]
fn log_text_warns_and_includes_text() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("log.jsonl");
    let o = cli(&[
        "run",
        "--policy",
        s(&fixture("password.policy")),
        "--transcripts",
        s(&fixture("dialog.jsonl")),
        "--log",
        s(&log),
        "--log-text",
    ]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("warning"));
    assert_eq!(lines(&log)[0]["text"], "How's the weather today?");
}

#[test]
fn policy_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("log.jsonl");
    let o = Command::new(env!("CARGO_BIN_EXE_speech-firewall"))
        .args([
            "run",
            "--transcripts",
            s(&fixture("dialog.jsonl")),
            "--log",
            s(&log),
        ])
        .env("SPEECH_FIREWALL_CONFIG", fixture("modes.policy"))
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(lines(&log).iter().all(|l| l["cause"] == "hotword"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.policy");
    std::fs::write(&bad, "rule phrase \"ok\"\nrule phrase \"unterminated\n").unwrap();
    let log = dir.path().join("log.jsonl");
    let transcripts = fixture("dialog.jsonl");

    let o = cli(&[
        "run",
        "--policy",
        s(&bad),
        "--transcripts",
        s(&transcripts),
        "--log",
        s(&log),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));

    let o = cli(&["run", "--transcripts", s(&transcripts)]);
    assert_eq!(o.status.code(), Some(2), "no sink");
    let o = cli(&[
        "run",
        "--transcripts",
        s(&transcripts),
        "--log",
        s(&log),
        "--audit",
        s(&log),
    ]);
    assert_eq!(o.status.code(), Some(2), "same path twice");

    let o = cli(&[
        "run",
        "--transcripts",
        s(&dir.path().join("missing.jsonl")),
        "--log",
        s(&log),
    ]);
    assert_eq!(o.status.code(), Some(3));
    let o = cli(&["run", "--live", "--log", s(&log)]);
    assert_eq!(o.status.code(), Some(3));

    // Raw audio through the text-only backend: every phrase fails transcription.
    let (wav, _, _) = two_phrase_recording(dir.path(), "x");
    let o = cli(&["run", "--input", s(&wav), "--log", s(&log)]);
    assert_eq!(o.status.code(), Some(4));
    assert_eq!(lines(&log).len(), 2);
    let o = cli(&[
        "run",
        "--input",
        s(&wav),
        "--log",
        s(&log),
        "--max-failure-rate",
        "1.0",
    ]);
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn check_config_levels() {
    let dir = tempfile::tempdir().unwrap();
    let warn = dir.path().join("warn.policy");
    std::fs::write(
        &warn,
        "rule phrase \"password\"\nrule delete \"password\"\n",
    )
    .unwrap();
    let err = dir.path().join("err.policy");
    std::fs::write(&err, "mode loudness threshold_dbfs=3\n").unwrap();

    assert_eq!(
        cli(&["check-config", s(&fixture("modes.policy"))])
            .status
            .code(),
        Some(0)
    );
    let o = cli(&["check-config", s(&warn)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("rule 1"));
    let o = cli(&["check-config", s(&err)]);
    assert_eq!(o.status.code(), Some(2));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["status"], "error");
}

#[test]
fn gen_corpus_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let c1 = dir.path().join("c1.jsonl");
    let c2 = dir.path().join("c2.jsonl");
    for c in [&c1, &c2] {
        let o = cli(&[
            "gen-corpus",
            "--n",
            "1000",
            "--sensitive",
            "0.1",
            "--seed",
            "42",
            "--out",
            s(c),
        ]);
        assert!(o.status.success());
    }
    assert_eq!(std::fs::read(&c1).unwrap(), std::fs::read(&c2).unwrap());
    assert_eq!(lines(&c1).len(), 1000);

    let o = cli(&["eval", "--corpus", s(&c1), "--stt-error-rate", "0.0"]);
    assert!(o.status.success());
    let r: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(r["totals"]["failures"], 0);
    assert_eq!(r["totals"]["sensitive_expected"], 100);
    assert_eq!(r["totals"]["filtered_rate"], 1.0);
    assert!(r.get("latency").is_none());

    // The default policy's ten-minute window covers this whole timeline, so
    // use phrase rules to see injected misses.
    let c3 = dir.path().join("c3.jsonl");
    let password_policy = fixture("password.policy");
    cli(&[
        "gen-corpus",
        "--policy",
        s(&password_policy),
        "--n",
        "500",
        "--sensitive",
        "0.5",
        "--out",
        s(&c3),
    ]);
    let o = cli(&[
        "eval",
        "--policy",
        s(&password_policy),
        "--corpus",
        s(&c3),
        "--stt-error-rate",
        "0.5",
        "--keyword-errors",
        "--seed",
        "1",
    ]);
    let r: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(r["totals"]["failures"].as_u64().unwrap() > 0);

    let o = cli(&["eval", "--corpus", s(&c1), "--timings"]);
    let r: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(r["latency"]["filter_ms"]["n"], 1000);
}

#[test]
fn bench_mirrors_the_latency_table() {
    let o = cli(&[
        "bench",
        "--policy",
        s(&fixture("password.policy")),
        "--corpus",
        s(&fixture("dialog.jsonl")),
        "--reps",
        "10",
    ]);
    assert!(o.status.success());
    let r: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let rows = r["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 4);
    let actions: Vec<&str> = rows
        .iter()
        .map(|row| row["action"].as_str().unwrap())
        .collect();
    assert_eq!(actions, ["FWD", "BLOCK", "FWD", "FWD"]);
    for row in rows {
        let f = &row["filter_ms"];
        assert_eq!(f["n"], 10);
        let (min, mean, max) = (
            f["min"].as_f64().unwrap(),
            f["mean"].as_f64().unwrap(),
            f["max"].as_f64().unwrap(),
        );
        assert!(min <= mean && mean <= max);
        assert!(mean < 5.0);
    }
}

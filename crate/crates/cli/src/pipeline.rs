use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use speech_firewall::audio::{
    read_wav, synthesize_mock_at, Segmenter, WavSink, DEFAULT_SAMPLE_RATE_HZ,
    DEFAULT_WORDS_PER_MINUTE,
};
use speech_firewall::audit::{serialize_report, AuditReport};
use speech_firewall::config::Policy;
use speech_firewall::domain::{Decision, PhraseEvent};
use speech_firewall::engine::{FilterEngine, Verdict};
use speech_firewall::harness::corpus_events;
use speech_firewall::stt::SpeechToText;

use crate::commands::{build_stt, load_corpus, load_policy};
use crate::{CliError, RunArgs};

/// Produces phrase events, in order, from some input.
trait PhraseSource {
    fn sample_rate_hz(&self) -> u32;
    fn next_batch(&mut self) -> Result<Option<Vec<PhraseEvent>>, CliError>;
}

/// A WAV recording fed through the segmenter in 100 ms chunks.
struct WavSource {
    data: Vec<f64>,
    pos: usize,
    sample_rate_hz: u32,
    segmenter: Option<Segmenter>,
}

impl WavSource {
    fn open(path: &Path, policy: &Policy) -> Result<Self, CliError> {
        let samples =
            read_wav(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let segmenter = Segmenter::new(samples.sample_rate_hz, &policy.settings)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Ok(Self {
            data: samples.data,
            pos: 0,
            sample_rate_hz: samples.sample_rate_hz,
            segmenter: Some(segmenter),
        })
    }
}

impl PhraseSource for WavSource {
    fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    fn next_batch(&mut self) -> Result<Option<Vec<PhraseEvent>>, CliError> {
        let chunk = (self.sample_rate_hz / 10).max(1) as usize;
        if self.pos < self.data.len() {
            let end = (self.pos + chunk).min(self.data.len());
            let seg = self
                .segmenter
                .as_mut()
                .expect("segmenter present until finished");
            let events = seg.push(&self.data[self.pos..end]);
            self.pos = end;
            return Ok(Some(events));
        }
        Ok(self.segmenter.take().map(Segmenter::finish))
    }
}

struct TranscriptSource {
    events: std::vec::IntoIter<PhraseEvent>,
}

impl PhraseSource for TranscriptSource {
    fn sample_rate_hz(&self) -> u32 {
        DEFAULT_SAMPLE_RATE_HZ
    }

    fn next_batch(&mut self) -> Result<Option<Vec<PhraseEvent>>, CliError> {
        Ok(self.events.next().map(|e| vec![e]))
    }
}

/// Microphone capture is not wired to an audio device in this build.
struct LiveCapture;

impl PhraseSource for LiveCapture {
    fn sample_rate_hz(&self) -> u32 {
        DEFAULT_SAMPLE_RATE_HZ
    }

    fn next_batch(&mut self) -> Result<Option<Vec<PhraseEvent>>, CliError> {
        Err(CliError::Io(
            "live capture is not available; use --input or --transcripts".into(),
        ))
    }
}

fn check_sinks(args: &RunArgs) -> Result<(), CliError> {
    let sinks: Vec<&PathBuf> = [&args.out_wav, &args.log, &args.audit]
        .into_iter()
        .flatten()
        .collect();
    if sinks.is_empty() {
        return Err(CliError::Config(
            "no output configured; pass --out-wav, --log or --audit".into(),
        ));
    }
    let inputs = [&args.input, &args.transcripts].into_iter().flatten();
    let all: Vec<&PathBuf> = sinks.iter().copied().chain(inputs).collect();
    for (i, a) in all.iter().enumerate() {
        if all[i + 1..].contains(a) {
            return Err(CliError::Config(format!(
                "path {} is used twice",
                a.display()
            )));
        }
    }
    if !(0.0..=1.0).contains(&args.max_failure_rate) {
        return Err(CliError::Config(
            "--max-failure-rate must lie in [0, 1]".into(),
        ));
    }
    Ok(())
}

#[derive(Serialize)]
struct LogLine<'a> {
    id: u64,
    t_ms: u64,
    decision: &'static str,
    cause: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    text: Option<&'a str>,
}

fn log_line(ev: &PhraseEvent, verdict: &Verdict, text: Option<&str>) -> String {
    let cause = match &verdict.decision {
        Decision::Forward => None,
        Decision::Drop(c) => Some(c.to_string()),
        Decision::ForwardSynthesized(_) => Some(match verdict.rule {
            Some(o) => format!("rule:{o}"),
            None => "tts".to_owned(),
        }),
    };
    let line = LogLine {
        id: ev.id,
        t_ms: ev.t_ms,
        decision: verdict.decision.label(),
        cause,
        text,
    };
    serde_json::to_string(&line).expect("log line serializes")
}

struct Sinks {
    wav: Option<WavSink>,
    log: Option<BufWriter<File>>,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

pub fn cmd_run(args: &RunArgs) -> Result<u8, CliError> {
    check_sinks(args)?;
    let policy = load_policy(&args.policy)?;
    let stt = build_stt(&args.stt, &policy)?;
    if args.log_text {
        eprintln!("warning: --log-text writes transcripts to the decision log; keep it off outside local debugging");
    }

    let mut source: Box<dyn PhraseSource> = match (&args.input, &args.transcripts) {
        (Some(path), _) => Box::new(WavSource::open(path, &policy)?),
        (None, Some(path)) => Box::new(TranscriptSource {
            events: corpus_events(&load_corpus(path)?).into_iter(),
        }),
        (None, None) => Box::new(LiveCapture),
    };

    let mut sinks = Sinks {
        wav: match &args.out_wav {
            Some(p) => Some(WavSink::create(p, source.sample_rate_hz()).map_err(|e| io_err(p, e))?),
            None => None,
        },
        log: match &args.log {
            Some(p) => Some(BufWriter::new(File::create(p).map_err(|e| io_err(p, e))?)),
            None => None,
        },
    };

    let mut engine = FilterEngine::new(&policy);
    let mut audit = AuditReport::new(&policy);
    while let Some(batch) = source.next_batch()? {
        for ev in batch {
            process(
                &ev,
                stt.as_ref(),
                &mut engine,
                &mut audit,
                &mut sinks,
                args,
                source.sample_rate_hz(),
            )?;
        }
    }

    if let (Some(wav), Some(p)) = (sinks.wav.take(), &args.out_wav) {
        wav.finalize().map_err(|e| io_err(p, e))?;
    }
    if let (Some(mut log), Some(p)) = (sinks.log.take(), &args.log) {
        log.flush().map_err(|e| io_err(p, e))?;
    }
    if let Some(p) = &args.audit {
        fs::write(p, serialize_report(&audit) + "\n").map_err(|e| io_err(p, e))?;
    }

    let t = &audit.totals;
    println!("{}", serde_json::to_string(t).expect("totals serialize"));
    eprintln!(
        "phrases {}  forwarded {}  synthesized {}  dropped {}  stt failures {}",
        t.phrases, t.forwarded, t.synthesized, t.dropped, t.stt_failures
    );
    if t.phrases > 0 && t.stt_failures as f64 / t.phrases as f64 > args.max_failure_rate {
        return Err(CliError::Backend(format!(
            "{} of {} phrases failed transcription (cap {:.0}%)",
            t.stt_failures,
            t.phrases,
            args.max_failure_rate * 100.0
        )));
    }
    Ok(0)
}

fn process(
    ev: &PhraseEvent,
    stt: &dyn SpeechToText,
    engine: &mut FilterEngine<'_>,
    audit: &mut AuditReport,
    sinks: &mut Sinks,
    args: &RunArgs,
    sample_rate_hz: u32,
) -> Result<(), CliError> {
    let transcription = stt.transcribe(ev);
    let verdict = engine
        .evaluate(ev, &transcription)
        .map_err(|e| CliError::Backend(e.to_string()))?;
    audit.record(&verdict, ev.t_ms);

    if let (Some(wav), Some(path)) = (sinks.wav.as_mut(), &args.out_wav) {
        match &verdict.decision {
            Decision::Forward => {
                if let Some(s) = &ev.samples {
                    wav.write(&s.data).map_err(|e| io_err(path, e))?;
                }
            }
            Decision::ForwardSynthesized(text) => {
                let audio = synthesize_mock_at(text, DEFAULT_WORDS_PER_MINUTE, sample_rate_hz)
                    .map_err(|e| io_err(path, e))?;
                wav.write(audio.samples()).map_err(|e| io_err(path, e))?;
            }
            Decision::Drop(_) => {}
        }
    }
    if let (Some(log), Some(path)) = (sinks.log.as_mut(), &args.log) {
        let text = args.log_text.then(|| {
            transcription
                .as_ref()
                .map(|t| t.text.as_str())
                .unwrap_or("")
        });
        writeln!(log, "{}", log_line(ev, &verdict, text)).map_err(|e| io_err(path, e))?;
    }
    Ok(())
}

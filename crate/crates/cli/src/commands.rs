use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::Path;

use speech_firewall::config::{parse_policy, validate_policy, Policy, DEFAULT_POLICY};
use speech_firewall::domain::CorpusEvent;
use speech_firewall::harness::{
    bench_latency, generate_corpus, read_corpus, run_eval_sharded, write_corpus, CorpusSpec,
    EvalOptions, HarnessError,
};
use speech_firewall::stt::{BackendConfig, ErrorInjecting, ErrorModel, SpeechToText};

use crate::{BenchArgs, CliError, EvalArgs, GenCorpusArgs, PolicyArg, SttArgs};

pub fn load_policy(arg: &PolicyArg) -> Result<Policy, CliError> {
    let text = match &arg.policy {
        Some(path) => fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read policy {}: {e}", path.display())))?,
        None => DEFAULT_POLICY.to_owned(),
    };
    parse_policy(&text).map_err(|e| CliError::Config(e.to_string()))
}

pub fn build_stt(args: &SttArgs, policy: &Policy) -> Result<Box<dyn SpeechToText>, CliError> {
    let backend: BackendConfig = args
        .stt
        .parse()
        .map_err(|e| CliError::Config(format!("{e}")))?;
    let inner = backend
        .build()
        .map_err(|e| CliError::Config(e.to_string()))?;
    if args.stt_error_rate == 0.0 {
        return Ok(inner);
    }
    let mut model = ErrorModel::new(args.stt_error_rate, args.seed)
        .map_err(|e| CliError::Config(e.to_string()))?;
    if args.keyword_errors {
        let words = policy
            .literal_sources()
            .flat_map(|s| s.split(' ').map(str::to_owned).collect::<Vec<_>>());
        model = model.with_targets(words);
    }
    Ok(Box::new(ErrorInjecting::new(inner, model)))
}

fn harness_error(e: HarnessError) -> CliError {
    match e {
        HarnessError::Io(e) => CliError::Io(e.to_string()),
        HarnessError::Parse { .. } | HarnessError::TimeOrder(_) => CliError::Io(e.to_string()),
        other => CliError::Config(other.to_string()),
    }
}

pub fn load_corpus(path: &Path) -> Result<Vec<CorpusEvent>, CliError> {
    let file = File::open(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    read_corpus(BufReader::new(file)).map_err(harness_error)
}

/// Writes `body` plus a newline to `out`, or to stdout when unset.
fn emit(out: Option<&Path>, body: &str) -> Result<(), CliError> {
    match out {
        Some(path) => fs::write(path, format!("{body}\n"))?,
        None => writeln!(io::stdout().lock(), "{body}")?,
    }
    Ok(())
}

pub fn cmd_eval(args: &EvalArgs) -> Result<u8, CliError> {
    let policy = load_policy(&args.policy)?;
    let stt = build_stt(&args.stt, &policy)?;
    let corpus = load_corpus(&args.corpus)?;
    let opts = EvalOptions {
        timings: args.timings,
    };
    let report = run_eval_sharded(&corpus, &policy, stt.as_ref(), opts, args.shards)
        .map_err(harness_error)?;
    emit(args.out.as_deref(), &report.to_json())?;
    let t = &report.totals;
    let rate = t
        .filtered_rate
        .map_or("n/a".to_owned(), |r| format!("{:.2}%", r * 100.0));
    eprintln!(
        "phrases {}  forwarded {}  synthesized {}  dropped {}  stt failures {}",
        t.phrases, t.forwarded, t.synthesized, t.dropped, t.stt_failures
    );
    eprintln!(
        "sensitive {}  filtered {}  failures {}  filtered rate {rate}",
        t.sensitive_expected, t.sensitive_filtered, t.failures
    );
    Ok(0)
}

pub fn cmd_gen_corpus(args: &GenCorpusArgs) -> Result<u8, CliError> {
    let policy = load_policy(&args.policy)?;
    let spec = CorpusSpec {
        n_phrases: args.n,
        sensitive_fraction: args.sensitive,
        seed: args.seed,
        timeline_gap_ms: args.gap_ms,
    };
    let corpus = generate_corpus(&spec, &policy).map_err(harness_error)?;
    match &args.out {
        Some(path) => {
            let mut w = BufWriter::new(File::create(path)?);
            write_corpus(&mut w, &corpus)?;
            w.flush()?;
        }
        None => {
            let mut w = BufWriter::new(io::stdout().lock());
            write_corpus(&mut w, &corpus)?;
            w.flush()?;
        }
    }
    let labeled = corpus.iter().filter(|e| !e.expected.is_empty()).count();
    eprintln!(
        "generated {} phrases, {labeled} labeled sensitive",
        corpus.len()
    );
    Ok(0)
}

pub fn cmd_bench(args: &BenchArgs) -> Result<u8, CliError> {
    let policy = load_policy(&args.policy)?;
    let stt_args = SttArgs {
        stt: args.stt.clone(),
        stt_error_rate: 0.0,
        seed: 0,
        keyword_errors: false,
    };
    let stt = build_stt(&stt_args, &policy)?;
    let corpus = load_corpus(&args.corpus)?;
    let report = bench_latency(&corpus, &policy, stt.as_ref(), args.reps).map_err(harness_error)?;
    emit(None, &report.to_json())?;
    eprintln!(
        "{:>5} {:<6} {:>27} {:>27} {:>27}",
        "#", "action", "stt min/max/avg ms", "filter min/max/avg ms", "synth min/max/avg ms"
    );
    let cell =
        |s: &speech_firewall::harness::Stats| format!("{:.3}/{:.3}/{:.3}", s.min, s.max, s.mean);
    for row in &report.rows {
        eprintln!(
            "{:>5} {:<6} {:>27} {:>27} {:>27}",
            row.index,
            row.action,
            cell(&row.stt_ms),
            cell(&row.filter_ms),
            cell(&row.synth_ms)
        );
    }
    let a = &report.aggregate;
    eprintln!(
        "{:>5} {:<6} {:>27} {:>27} {:>27}",
        "all",
        "",
        cell(&a.stt_ms),
        cell(&a.filter_ms),
        cell(&a.synth_ms)
    );
    Ok(0)
}

pub fn cmd_check_config(path: &Path) -> Result<u8, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let policy = match parse_policy(&text) {
        Ok(p) => p,
        Err(e) => {
            emit(
                None,
                &serde_json::json!({"status": "error", "errors": 1, "warnings": 0}).to_string(),
            )?;
            eprintln!("{}: {e}", path.display());
            return Ok(2);
        }
    };
    let diagnostics = validate_policy(&policy);
    let status = if diagnostics.is_empty() {
        "ok"
    } else {
        "warning"
    };
    let body = serde_json::json!({
        "status": status,
        "errors": 0,
        "warnings": diagnostics.len(),
        "rules": policy.rules.len(),
    });
    emit(None, &body.to_string())?;
    for d in &diagnostics {
        eprintln!("{}: warning: {d}", path.display());
    }
    if diagnostics.is_empty() {
        eprintln!(
            "{}: {} rules, no problems",
            path.display(),
            policy.rules.len()
        );
        Ok(0)
    } else {
        Ok(1)
    }
}

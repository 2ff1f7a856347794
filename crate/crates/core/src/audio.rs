//! Loudness metering, pause-based phrase segmentation, mock speech synthesis
//! and 16-bit mono WAV I/O.

use std::f64::consts::PI;
use std::path::Path;

use thiserror::Error;

use crate::config::Settings;
use crate::domain::{PhraseEvent, Samples, DBFS_FLOOR};

/// Sample rate used for synthesized speech when no other rate is imposed.
pub const DEFAULT_SAMPLE_RATE_HZ: u32 = 16_000;
/// Speaking rate of the mock synthesizer.
pub const DEFAULT_WORDS_PER_MINUTE: u32 = 150;

const MOCK_TONE_HZ: f64 = 440.0;
const MOCK_TONE_DBFS: f64 = -20.0;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("sample rate must be positive")]
    InvalidSampleRate,
    #[error("audio segment is empty")]
    Empty,
    #[error("sample {index} out of range: {value}")]
    OutOfRange { index: usize, value: f64 },
    #[error("cannot synthesize empty text")]
    EmptyText,
    #[error("words per minute must be positive")]
    InvalidRate,
    #[error("unsupported WAV format: {0}")]
    UnsupportedFormat(String),
    #[error(transparent)]
    Wav(#[from] hound::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Origin {
    Captured,
    Synthesized,
}

/// Non-empty mono audio with every sample in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioSegment {
    samples: Vec<f64>,
    sample_rate_hz: u32,
    origin: Origin,
}

impl AudioSegment {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32, origin: Origin) -> Result<Self, AudioError> {
        if sample_rate_hz == 0 {
            return Err(AudioError::InvalidSampleRate);
        }
        if samples.is_empty() {
            return Err(AudioError::Empty);
        }
        if let Some((index, &value)) = samples
            .iter()
            .enumerate()
            .find(|(_, v)| v.is_nan() || v.abs() > 1.0 + 1e-9)
        {
            return Err(AudioError::OutOfRange { index, value });
        }
        Ok(Self {
            samples,
            sample_rate_hz,
            origin,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn origin(&self) -> Origin {
        self.origin
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate_hz)
    }

    pub fn rms_dbfs(&self) -> f64 {
        rms_dbfs(&self.samples)
    }

    pub fn into_samples(self) -> Samples {
        Samples {
            data: self.samples,
            sample_rate_hz: self.sample_rate_hz,
        }
    }
}

fn level_dbfs(sum_sq: f64, count: usize) -> f64 {
    if count == 0 {
        return DBFS_FLOOR;
    }
    let rms = (sum_sq / count as f64).sqrt();
    if rms <= 0.0 {
        return DBFS_FLOOR;
    }
    (20.0 * rms.log10()).clamp(DBFS_FLOOR, 0.0)
}

/// `20·log10(rms)`, floored at -96 dBFS. Empty input reads as the floor.
pub fn rms_dbfs(samples: &[f64]) -> f64 {
    level_dbfs(samples.iter().map(|s| s * s).sum(), samples.len())
}

#[derive(Debug)]
struct OpenPhrase {
    start_hop: u64,
    last_voiced_hop: u64,
    voiced_sq: f64,
    voiced_len: usize,
    silent_run: u64,
}

/// Incremental pause-based phrase segmenter.
///
/// Energy is tracked on 20 ms frames every 10 ms: a hop is voiced when the
/// frame ending with it reaches `silence_dbfs`. Each hop owns its own samples;
/// a phrase spans from its first voiced hop to its last voiced hop, and
/// loudness is measured over voiced hops only. Output does not depend on how
/// the stream is split into buffers.
#[derive(Debug)]
pub struct Segmenter {
    sample_rate_hz: u32,
    hop: usize,
    frame: usize,
    silence_dbfs: f64,
    pause_hops: u64,
    max_phrase_samples: u64,
    /// Samples from absolute index `base` onward.
    buffer: Vec<f64>,
    base: u64,
    total: u64,
    next_hop: u64,
    open: Option<OpenPhrase>,
    next_id: u64,
}

impl Segmenter {
    pub fn new(sample_rate_hz: u32, settings: &Settings) -> Result<Self, AudioError> {
        if sample_rate_hz == 0 {
            return Err(AudioError::InvalidSampleRate);
        }
        let hop = (sample_rate_hz as usize / 100).max(1);
        Ok(Self {
            sample_rate_hz,
            hop,
            frame: 2 * hop,
            silence_dbfs: settings.silence_dbfs,
            pause_hops: (settings.pause_ms * u64::from(sample_rate_hz))
                .div_ceil(1000 * hop as u64)
                .max(1),
            max_phrase_samples: settings.max_phrase_s * u64::from(sample_rate_hz),
            buffer: Vec::new(),
            base: 0,
            total: 0,
            next_hop: 0,
            open: None,
            next_id: 0,
        })
    }

    /// Feeds more samples and returns every phrase closed by them.
    pub fn push(&mut self, samples: &[f64]) -> Vec<PhraseEvent> {
        self.buffer.extend_from_slice(samples);
        self.total += samples.len() as u64;
        let mut out = Vec::new();
        while (self.next_hop + 1) * self.hop as u64 <= self.total {
            self.step(&mut out);
        }
        self.compact();
        out
    }

    /// Ends the stream, flushing a trailing partial hop and any open phrase.
    pub fn finish(mut self) -> Vec<PhraseEvent> {
        let mut out = Vec::new();
        while self.next_hop * (self.hop as u64) < self.total {
            self.step(&mut out);
        }
        if let Some(open) = self.open.take() {
            out.push(self.emit(open));
        }
        out
    }

    fn slice(&self, from: u64, to: u64) -> &[f64] {
        let to = to.min(self.total);
        &self.buffer[(from - self.base) as usize..(to - self.base) as usize]
    }

    fn step(&mut self, out: &mut Vec<PhraseEvent>) {
        let k = self.next_hop;
        self.next_hop += 1;
        let hop = self.hop as u64;
        let hop_sq: f64 = self
            .slice(k * hop, (k + 1) * hop)
            .iter()
            .map(|s| s * s)
            .sum();
        let hop_len = self.slice(k * hop, (k + 1) * hop).len();
        // Frame = this hop and the one before it; missing samples count as zeros.
        let prev_sq: f64 = match k {
            0 => 0.0,
            _ => self
                .slice((k - 1) * hop, k * hop)
                .iter()
                .map(|s| s * s)
                .sum(),
        };
        let voiced = level_dbfs(prev_sq + hop_sq, self.frame) >= self.silence_dbfs;

        if voiced {
            let open = self.open.get_or_insert(OpenPhrase {
                start_hop: k,
                last_voiced_hop: k,
                voiced_sq: 0.0,
                voiced_len: 0,
                silent_run: 0,
            });
            open.last_voiced_hop = k;
            open.voiced_sq += hop_sq;
            open.voiced_len += hop_len;
            open.silent_run = 0;
        } else if let Some(open) = self.open.as_mut() {
            open.silent_run += 1;
        }

        let close = match &self.open {
            Some(open) => {
                open.silent_run >= self.pause_hops
                    || (k + 1 - open.start_hop) * hop >= self.max_phrase_samples
            }
            None => false,
        };
        if close {
            let open = self.open.take().expect("checked above");
            out.push(self.emit(open));
        }
    }

    fn emit(&mut self, open: OpenPhrase) -> PhraseEvent {
        let hop = self.hop as u64;
        let start = open.start_hop * hop;
        let data = self.slice(start, (open.last_voiced_hop + 1) * hop).to_vec();
        let id = self.next_id;
        self.next_id += 1;
        PhraseEvent {
            id,
            t_ms: start * 1000 / u64::from(self.sample_rate_hz),
            samples: Some(Samples {
                data,
                sample_rate_hz: self.sample_rate_hz,
            }),
            text: None,
            rms_dbfs: level_dbfs(open.voiced_sq, open.voiced_len),
        }
    }

    fn compact(&mut self) {
        let hop = self.hop as u64;
        let keep_from = match &self.open {
            Some(open) => open.start_hop * hop,
            None => self.next_hop.saturating_sub(1) * hop,
        }
        .min(self.next_hop.saturating_sub(1) * hop)
        .min(self.total);
        let drop = (keep_from - self.base) as usize;
        if drop > 0 {
            self.buffer.drain(..drop);
            self.base = keep_from;
        }
    }
}

/// Segments a complete recording.
pub fn segment(
    samples: &[f64],
    sample_rate_hz: u32,
    settings: &Settings,
) -> Result<Vec<PhraseEvent>, AudioError> {
    let mut seg = Segmenter::new(sample_rate_hz, settings)?;
    let mut events = seg.push(samples);
    events.extend(seg.finish());
    Ok(events)
}

/// Placeholder "speech" for `text`: a 440 Hz tone at -20 dBFS lasting as long
/// as the words would take to say at `words_per_minute`.
pub fn synthesize_mock(text: &str, words_per_minute: u32) -> Result<AudioSegment, AudioError> {
    synthesize_mock_at(text, words_per_minute, DEFAULT_SAMPLE_RATE_HZ)
}

pub fn synthesize_mock_at(
    text: &str,
    words_per_minute: u32,
    sample_rate_hz: u32,
) -> Result<AudioSegment, AudioError> {
    if words_per_minute == 0 {
        return Err(AudioError::InvalidRate);
    }
    if sample_rate_hz == 0 {
        return Err(AudioError::InvalidSampleRate);
    }
    let words = text.split_whitespace().count();
    if words == 0 {
        return Err(AudioError::EmptyText);
    }
    let seconds = words as f64 * 60.0 / f64::from(words_per_minute);
    let len = (seconds * f64::from(sample_rate_hz)).round() as usize;
    let amplitude = std::f64::consts::SQRT_2 * 10f64.powf(MOCK_TONE_DBFS / 20.0);
    let step = 2.0 * PI * MOCK_TONE_HZ / f64::from(sample_rate_hz);
    let samples = (0..len)
        .map(|n| amplitude * (step * n as f64).sin())
        .collect();
    AudioSegment::new(samples, sample_rate_hz, Origin::Synthesized)
}

/// Maps a sample to the 16-bit PCM value written to disk.
pub fn quantize(sample: f64) -> i16 {
    (sample * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Reads a 16-bit PCM mono WAV file, scaling samples by 1/32768.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Samples, AudioError> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1
        || spec.bits_per_sample != 16
        || spec.sample_format != hound::SampleFormat::Int
    {
        return Err(AudioError::UnsupportedFormat(format!(
            "{} channel(s), {}-bit {:?}; expected mono 16-bit PCM",
            spec.channels, spec.bits_per_sample, spec.sample_format
        )));
    }
    if spec.sample_rate == 0 {
        return Err(AudioError::InvalidSampleRate);
    }
    let data = reader
        .samples::<i16>()
        .map(|s| s.map(|v| f64::from(v) / 32768.0))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Samples {
        data,
        sample_rate_hz: spec.sample_rate,
    })
}

/// Incremental 16-bit mono WAV writer.
pub struct WavSink {
    writer: hound::WavWriter<std::io::BufWriter<std::fs::File>>,
    sample_rate_hz: u32,
}

impl WavSink {
    pub fn create(path: impl AsRef<Path>, sample_rate_hz: u32) -> Result<Self, AudioError> {
        if sample_rate_hz == 0 {
            return Err(AudioError::InvalidSampleRate);
        }
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: sample_rate_hz,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        Ok(Self {
            writer: hound::WavWriter::create(path, spec)?,
            sample_rate_hz,
        })
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn write(&mut self, samples: &[f64]) -> Result<(), AudioError> {
        for &s in samples {
            self.writer.write_sample(quantize(s))?;
        }
        Ok(())
    }

    pub fn finalize(self) -> Result<(), AudioError> {
        self.writer.finalize()?;
        Ok(())
    }
}

pub fn write_wav(path: impl AsRef<Path>, samples: &Samples) -> Result<(), AudioError> {
    let mut sink = WavSink::create(path, samples.sample_rate_hz)?;
    sink.write(&samples.data)?;
    sink.finalize()
}

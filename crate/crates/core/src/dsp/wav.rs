//! 16-bit mono PCM WAV input and output.

use std::io::Read;
use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::{AudioSegment, SAMPLE_RATE};
use crate::error::{Error, Result};

fn check_spec(spec: &WavSpec, path: &Path) -> Result<()> {
    let bad = |reason: String| Error::Audio {
        path: path.to_path_buf(),
        reason,
    };
    if spec.channels != 1 {
        return Err(bad(format!("{} channels, expected mono", spec.channels)));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(bad(format!("{} Hz, expected {SAMPLE_RATE} Hz", spec.sample_rate)));
    }
    if spec.sample_format != SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(bad(format!(
            "{:?} {}-bit samples, expected 16-bit PCM",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    Ok(())
}

fn audio_err(path: &Path, e: hound::Error) -> Error {
    Error::Audio {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

pub fn pcm_spec() -> WavSpec {
    WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    }
}

pub fn read_wav(path: &Path) -> Result<AudioSegment> {
    let reader = WavReader::open(path).map_err(|e| audio_err(path, e))?;
    check_spec(&reader.spec(), path)?;
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| audio_err(path, e))?;
    Ok(AudioSegment::new(samples))
}

pub fn to_pcm16(x: f64) -> i16 {
    (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

pub fn write_wav(path: &Path, seg: &AudioSegment) -> Result<()> {
    let mut w = WavWriter::create(path, pcm_spec()).map_err(|e| audio_err(path, e))?;
    for &s in &seg.samples {
        w.write_sample(to_pcm16(s)).map_err(|e| audio_err(path, e))?;
    }
    w.finalize().map_err(|e| audio_err(path, e))
}

/// Incremental reader over a WAV byte stream (a file or standard input).
pub struct WavStream<R: Read> {
    reader: WavReader<R>,
    label: std::path::PathBuf,
}

impl<R: Read> WavStream<R> {
    pub fn new(inner: R, label: &Path) -> Result<Self> {
        let reader = WavReader::new(inner).map_err(|e| audio_err(label, e))?;
        check_spec(&reader.spec(), label)?;
        Ok(WavStream {
            reader,
            label: label.to_path_buf(),
        })
    }

    /// Appends up to `max` samples to `out`; returns how many were read
    /// (0 at end of stream).
    pub fn read_chunk(&mut self, max: usize, out: &mut Vec<f64>) -> Result<usize> {
        let mut n = 0;
        for s in self.reader.samples::<i16>().take(max) {
            let v = s.map_err(|e| audio_err(&self.label, e))?;
            out.push(v as f64 / 32768.0);
            n += 1;
        }
        Ok(n)
    }
}

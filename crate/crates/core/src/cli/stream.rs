//! Sliding-window inference over a sample stream.

use std::io::Read;
use std::time::Instant;

use crate::dsp::wav::WavStream;
use crate::dsp::{AudioSegment, DspConfig, LmfbExtractor};
use crate::error::{Error, Result};
use crate::nn::model::argmax;
use crate::nn::Model;

#[derive(Clone, Debug, PartialEq)]
pub struct StreamResult {
    /// First analysis frame of the window, counted from the start of the stream.
    pub start_frame: usize,
    pub label: usize,
    pub log_probs: Vec<f32>,
    pub latency_ms: f64,
}

impl StreamResult {
    pub fn posterior(&self) -> [f64; 4] {
        let mut p = [0.0; 4];
        for (o, &l) in p.iter_mut().zip(&self.log_probs) {
            *o = (l as f64).exp();
        }
        p
    }

    /// `start_frame,label,p0,p1,p2,p3,latency_ms`
    pub fn csv_line(&self) -> String {
        let p = self.posterior();
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.3}",
            self.start_frame, self.label, p[0], p[1], p[2], p[3], self.latency_ms
        )
    }
}

/// Window geometry shared by streaming and batch evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowSpec {
    pub window_frames: usize,
    pub hop_frames: usize,
}

impl WindowSpec {
    pub fn new(window_frames: usize, hop_frames: Option<usize>) -> Result<Self> {
        let hop_frames = hop_frames.unwrap_or(window_frames);
        if window_frames == 0 || hop_frames == 0 {
            return Err(Error::Config("window and hop must be positive".into()));
        }
        Ok(WindowSpec {
            window_frames,
            hop_frames,
        })
    }

    /// Start frames of every complete window in `samples` samples.
    pub fn starts(&self, dsp: &DspConfig, samples: usize) -> Vec<usize> {
        let total = dsp.frame_count(samples);
        if total < self.window_frames {
            return Vec::new();
        }
        (0..=total - self.window_frames).step_by(self.hop_frames).collect()
    }
}

struct WindowScorer<'a> {
    model: &'a Model<f32>,
    extractor: LmfbExtractor,
    spec: WindowSpec,
}

impl<'a> WindowScorer<'a> {
    fn new(model: &'a Model<f32>, dsp: &DspConfig, spec: WindowSpec) -> Result<Self> {
        if spec.window_frames < model.config.min_frames {
            return Err(Error::Config(format!(
                "window of {} frames is below the model minimum of {}",
                spec.window_frames, model.config.min_frames
            )));
        }
        if dsp.n_mels != model.config.n_mels {
            return Err(Error::Config(format!(
                "features have {} mel bands, model expects {}",
                dsp.n_mels, model.config.n_mels
            )));
        }
        Ok(WindowScorer {
            model,
            extractor: LmfbExtractor::new(dsp)?,
            spec,
        })
    }

    fn window_samples(&self) -> usize {
        self.extractor.config().samples_for_frames(self.spec.window_frames)
    }

    /// Features are computed from scratch for every window.
    fn score(&self, start_frame: usize, samples: &[f64], since: Instant) -> Result<StreamResult> {
        let m = self.extractor.extract(&AudioSegment::new(samples.to_vec()))?;
        let log_probs = self.model.forward(&m.values, m.frames)?;
        Ok(StreamResult {
            start_frame,
            label: argmax(&log_probs),
            log_probs,
            latency_ms: since.elapsed().as_secs_f64() * 1e3,
        })
    }
}

/// Reads fixed-size chunks from `source` and emits one result per window as
/// soon as its last sample has arrived. Latency runs from that moment to
/// the end of inference. Returns the number of windows scored.
pub fn stream_windows<R: Read>(
    model: &Model<f32>,
    dsp: &DspConfig,
    spec: WindowSpec,
    mut source: WavStream<R>,
    chunk: usize,
    mut emit: impl FnMut(&StreamResult) -> Result<()>,
) -> Result<usize> {
    let scorer = WindowScorer::new(model, dsp, spec)?;
    let need = scorer.window_samples();
    let mut buf: Vec<f64> = Vec::new();
    // sample index of buf[0]
    let mut base = 0usize;
    let mut next_frame = 0usize;
    let mut seen = 0usize;
    let mut emitted = 0usize;
    loop {
        let got = source.read_chunk(chunk.max(1), &mut buf)?;
        seen += got;
        loop {
            let start = next_frame * dsp.hop;
            if start + need > base + buf.len() {
                break;
            }
            let t0 = Instant::now();
            let r = scorer.score(next_frame, &buf[start - base..start - base + need], t0)?;
            emit(&r)?;
            emitted += 1;
            next_frame += spec.hop_frames;
            let drop = (next_frame * dsp.hop).saturating_sub(base).min(buf.len());
            buf.drain(..drop);
            base += drop;
        }
        if got == 0 {
            break;
        }
    }
    if emitted == 0 {
        log::warn!(
            "stream ended after {seen} samples, fewer than one {}-frame window ({need} samples); no output",
            spec.window_frames
        );
    }
    Ok(emitted)
}

/// Scores the same windows as [`stream_windows`] from an in-memory signal.
pub fn batch_windows(model: &Model<f32>, dsp: &DspConfig, spec: WindowSpec, audio: &AudioSegment) -> Result<Vec<StreamResult>> {
    let scorer = WindowScorer::new(model, dsp, spec)?;
    let need = scorer.window_samples();
    spec.starts(dsp, audio.len())
        .into_iter()
        .map(|f| {
            let s = f * dsp.hop;
            scorer.score(f, &audio.samples[s..s + need], Instant::now())
        })
        .collect()
}

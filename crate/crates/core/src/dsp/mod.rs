//! Log mel filterbank (LMFB) front end.
//!
//! The chain is: pre-emphasis, framing (25 ms frames every 10 ms at 16 kHz),
//! a 512-point FFT per frame, power spectrum, 40 triangular mel filters, and
//! a floored natural logarithm.

pub mod archive;
pub mod wav;

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;

/// Mono audio at a fixed sample rate.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioSegment {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioSegment {
    pub fn new(samples: Vec<f64>) -> Self {
        AudioSegment {
            samples,
            sample_rate: SAMPLE_RATE,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|x| x * x).sum::<f64>() / self.samples.len() as f64
    }

    pub fn slice(&self, start: usize, len: usize) -> AudioSegment {
        let end = (start + len).min(self.samples.len());
        let start = start.min(end);
        AudioSegment {
            samples: self.samples[start..end].to_vec(),
            sample_rate: self.sample_rate,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    Rectangular,
    Hamming,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DspConfig {
    pub sample_rate: u32,
    pub pre_emphasis: f64,
    pub frame_len: usize,
    pub hop: usize,
    pub nfft: usize,
    pub n_mels: usize,
    pub log_floor: f64,
    pub window: Window,
}

impl Default for DspConfig {
    fn default() -> Self {
        DspConfig {
            sample_rate: SAMPLE_RATE,
            pre_emphasis: 0.97,
            frame_len: 400,
            hop: 160,
            nfft: 512,
            n_mels: 40,
            log_floor: 1e-10,
            window: Window::Rectangular,
        }
    }
}

impl DspConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 || self.frame_len == 0 || self.hop == 0 || self.nfft == 0 || self.n_mels == 0 {
            return Err(Error::Config("DSP sizes must all be positive".into()));
        }
        if self.frame_len > self.nfft {
            return Err(Error::Config(format!(
                "frame_len {} exceeds nfft {}",
                self.frame_len, self.nfft
            )));
        }
        if self.hop > self.frame_len {
            return Err(Error::Config("hop must not exceed frame_len".into()));
        }
        if !(0.0..1.0).contains(&self.pre_emphasis) {
            return Err(Error::Config("pre-emphasis coefficient must lie in [0, 1)".into()));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::Config("log_floor must be positive".into()));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.nfft / 2 + 1
    }

    /// Samples needed for exactly `frames` analysis frames.
    pub fn samples_for_frames(&self, frames: usize) -> usize {
        if frames == 0 {
            0
        } else {
            self.frame_len + (frames - 1) * self.hop
        }
    }

    pub fn frame_count(&self, samples: usize) -> usize {
        if samples < self.frame_len {
            0
        } else {
            (samples - self.frame_len) / self.hop + 1
        }
    }

    pub fn floor_value(&self) -> f32 {
        self.log_floor.ln() as f32
    }
}

/// `y[t] = x[t] - coeff * x[t-1]`, with `y[0] = x[0]`.
pub fn pre_emphasize(seg: &AudioSegment, coeff: f64) -> AudioSegment {
    let x = &seg.samples;
    let mut y = Vec::with_capacity(x.len());
    if let Some(&first) = x.first() {
        y.push(first);
        y.extend(x.windows(2).map(|w| w[1] - coeff * w[0]));
    }
    AudioSegment {
        samples: y,
        sample_rate: seg.sample_rate,
    }
}

/// Full frames only; frame `i` covers `[i * hop, i * hop + frame_len)`.
pub fn frame_signal<'a>(seg: &'a AudioSegment, cfg: &DspConfig) -> Vec<&'a [f64]> {
    (0..cfg.frame_count(seg.len()))
        .map(|i| &seg.samples[i * cfg.hop..i * cfg.hop + cfg.frame_len])
        .collect()
}

pub fn hamming(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    (0..len)
        .map(|n| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (len - 1) as f64).cos())
        .collect()
}

/// Zero-padded FFT returning the `nfft / 2 + 1` one-sided magnitudes.
pub struct Spectrum {
    nfft: usize,
    fft: Arc<dyn Fft<f64>>,
}

impl Spectrum {
    pub fn new(nfft: usize) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(nfft);
        Spectrum { nfft, fft }
    }

    fn transform(&self, frame: &[f64]) -> Vec<Complex<f64>> {
        assert!(frame.len() <= self.nfft, "frame longer than the transform");
        let mut buf: Vec<Complex<f64>> = frame.iter().map(|&x| Complex::new(x, 0.0)).collect();
        buf.resize(self.nfft, Complex::new(0.0, 0.0));
        self.fft.process(&mut buf);
        buf.truncate(self.nfft / 2 + 1);
        buf
    }

    pub fn magnitude(&self, frame: &[f64]) -> Vec<f64> {
        self.transform(frame).into_iter().map(|c| c.norm()).collect()
    }

    pub fn power(&self, frame: &[f64]) -> Vec<f64> {
        self.transform(frame).into_iter().map(|c| c.norm_sqr()).collect()
    }
}

pub fn magnitude_spectrum(frame: &[f64], nfft: usize) -> Vec<f64> {
    Spectrum::new(nfft).magnitude(frame)
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// The `n_mels + 2` band edges, equally spaced in mel from 0 Hz to Nyquist.
pub fn mel_edges_hz(cfg: &DspConfig) -> Vec<f64> {
    let top = hz_to_mel(cfg.sample_rate as f64 / 2.0);
    let n = cfg.n_mels + 1;
    (0..=n).map(|i| mel_to_hz(top * i as f64 / n as f64)).collect()
}

/// Centre frequency of every filter, in Hz.
pub fn mel_center_frequencies(cfg: &DspConfig) -> Vec<f64> {
    let edges = mel_edges_hz(cfg);
    edges[1..edges.len() - 1].to_vec()
}

/// Band edges rounded to the nearest FFT bin.
pub fn mel_edge_bins(cfg: &DspConfig) -> Result<Vec<usize>> {
    let bins: Vec<usize> = mel_edges_hz(cfg)
        .iter()
        .map(|&f| (f * cfg.nfft as f64 / cfg.sample_rate as f64).round() as usize)
        .collect();
    if bins.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config(format!(
            "{} mel bands collapse onto shared FFT bins at nfft = {}",
            cfg.n_mels, cfg.nfft
        )));
    }
    Ok(bins)
}

/// Row-major `n_mels x (nfft/2 + 1)` matrix of triangular filters.
///
/// Filter `j` rises from edge bin `j` to a peak of exactly 1 at edge bin
/// `j + 1` and falls back to 0 at edge bin `j + 2`. Neighbouring filters
/// share their slopes so that every column strictly between the first and
/// last centre sums to exactly 1.
pub fn mel_filterbank(cfg: &DspConfig) -> Result<Vec<f64>> {
    let edges = mel_edge_bins(cfg)?;
    let nb = cfg.n_bins();
    let mut fb = vec![0.0; cfg.n_mels * nb];
    // segment s spans edge bins [s, s+1]; filter s-1 falls and filter s rises on it
    for s in 0..=cfg.n_mels {
        let (lo, hi) = (edges[s], edges[s + 1]);
        for b in lo..=hi.min(nb - 1) {
            let t = (b - lo) as f64 / (hi - lo) as f64;
            if s < cfg.n_mels {
                fb[s * nb + b] = t;
            }
            if s > 0 {
                fb[(s - 1) * nb + b] = 1.0 - t;
            }
        }
    }
    Ok(fb)
}

/// `T x n_mels` log mel filterbank features, row-major by frame.
#[derive(Clone, Debug, PartialEq)]
pub struct LmfbMatrix {
    pub frames: usize,
    pub n_mels: usize,
    pub values: Vec<f32>,
}

impl LmfbMatrix {
    pub fn new(frames: usize, n_mels: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != frames * n_mels {
            return Err(Error::shape(
                "lmfb",
                format!("{frames}x{n_mels} matrix with {} values", values.len()),
            ));
        }
        Ok(LmfbMatrix { frames, n_mels, values })
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.values[t * self.n_mels..(t + 1) * self.n_mels]
    }
}

/// Reusable feature extractor holding the FFT plan, window and filterbank.
pub struct LmfbExtractor {
    cfg: DspConfig,
    spectrum: Spectrum,
    window: Option<Vec<f64>>,
    filterbank: Vec<f64>,
}

impl LmfbExtractor {
    pub fn new(cfg: &DspConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(LmfbExtractor {
            spectrum: Spectrum::new(cfg.nfft),
            window: match cfg.window {
                Window::Rectangular => None,
                Window::Hamming => Some(hamming(cfg.frame_len)),
            },
            filterbank: mel_filterbank(cfg)?,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &DspConfig {
        &self.cfg
    }

    /// Log filterbank energies of one (already pre-emphasized) frame, in f64.
    pub fn log_mel_frame(&self, frame: &[f64]) -> Vec<f64> {
        let power = match &self.window {
            Some(w) => {
                let wf: Vec<f64> = frame.iter().zip(w).map(|(x, w)| x * w).collect();
                self.spectrum.power(&wf)
            }
            None => self.spectrum.power(frame),
        };
        let nb = self.cfg.n_bins();
        self.filterbank
            .chunks(nb)
            .map(|filter| {
                let e: f64 = filter.iter().zip(&power).map(|(f, p)| f * p).sum();
                e.max(self.cfg.log_floor).ln()
            })
            .collect()
    }

    pub fn extract(&self, seg: &AudioSegment) -> Result<LmfbMatrix> {
        if seg.sample_rate != self.cfg.sample_rate {
            return Err(Error::Data(format!(
                "segment sampled at {} Hz, extractor expects {}",
                seg.sample_rate, self.cfg.sample_rate
            )));
        }
        if seg.len() < self.cfg.frame_len {
            return Err(Error::InsufficientSamples {
                needed: self.cfg.frame_len,
                got: seg.len(),
            });
        }
        let emph = pre_emphasize(seg, self.cfg.pre_emphasis);
        let frames = frame_signal(&emph, &self.cfg);
        let mut values = Vec::with_capacity(frames.len() * self.cfg.n_mels);
        for f in &frames {
            values.extend(self.log_mel_frame(f).into_iter().map(|v| v as f32));
        }
        LmfbMatrix::new(frames.len(), self.cfg.n_mels, values)
    }
}

pub fn extract_lmfb(seg: &AudioSegment, cfg: &DspConfig) -> Result<LmfbMatrix> {
    LmfbExtractor::new(cfg)?.extract(seg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(v: &[f64]) -> AudioSegment {
        AudioSegment::new(v.to_vec())
    }

    #[test]
    fn pre_emphasis_examples() {
        assert_eq!(pre_emphasize(&seg(&[1.0, 0.0, 0.0]), 0.97).samples, vec![1.0, -0.97, 0.0]);
        let c = pre_emphasize(&seg(&[1.0, 1.0, 1.0]), 0.97).samples;
        assert_eq!(c[0], 1.0);
        assert!((c[1] - 0.03).abs() < 1e-15 && (c[2] - 0.03).abs() < 1e-15);
        assert_eq!(pre_emphasize(&seg(&[0.3, -0.2]), 0.0).samples, vec![0.3, -0.2]);
        assert!(pre_emphasize(&seg(&[]), 0.97).is_empty());
    }

    #[test]
    fn framing_counts() {
        let cfg = DspConfig::default();
        for (n, want) in [(400, 1), (3440, 20), (399, 0), (0, 0), (16240, 100)] {
            assert_eq!(frame_signal(&seg(&vec![0.0; n]), &cfg).len(), want, "{n} samples");
        }
        assert_eq!(cfg.samples_for_frames(20), 3440);
        let s = seg(&(0..600).map(|i| i as f64).collect::<Vec<_>>());
        let frames = frame_signal(&s, &cfg);
        assert_eq!(frames[1][0], 160.0);
        assert_eq!(frames[1].len(), 400);
    }

    #[test]
    fn zero_frame_zero_spectrum() {
        let m = magnitude_spectrum(&[0.0; 400], 512);
        assert_eq!(m.len(), 257);
        assert!(m.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn filterbank_rows_peak_at_one() {
        let cfg = DspConfig::default();
        let fb = mel_filterbank(&cfg).unwrap();
        for row in fb.chunks(257) {
            assert_eq!(row.iter().copied().fold(0.0, f64::max), 1.0);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn too_many_bands_rejected() {
        let cfg = DspConfig {
            n_mels: 200,
            ..DspConfig::default()
        };
        assert!(mel_filterbank(&cfg).is_err());
    }

    #[test]
    fn silence_hits_the_floor() {
        let cfg = DspConfig::default();
        let m = extract_lmfb(&seg(&vec![0.0; 3440]), &cfg).unwrap();
        assert_eq!((m.frames, m.n_mels), (20, 40));
        assert!(m.values.iter().all(|&v| v == cfg.floor_value()));
    }

    #[test]
    fn short_segment_is_an_error() {
        let err = extract_lmfb(&seg(&[0.1; 399]), &DspConfig::default()).unwrap_err();
        assert!(matches!(err, Error::InsufficientSamples { needed: 400, got: 399 }));
    }

    #[test]
    fn hamming_option_changes_output() {
        let x: Vec<f64> = (0..400).map(|i| ((i * 37 % 101) as f64 / 50.0) - 1.0).collect();
        let rect = extract_lmfb(&seg(&x), &DspConfig::default()).unwrap();
        let ham = extract_lmfb(
            &seg(&x),
            &DspConfig {
                window: Window::Hamming,
                ..DspConfig::default()
            },
        )
        .unwrap();
        assert_ne!(rect, ham);
    }
}

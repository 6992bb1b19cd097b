//! Simulated overlapping-speech corpus: SIR-controlled mixing, energy-based
//! activity detection, activity-based labeling and balanced dataset
//! construction.

pub mod dataset;
pub mod synth;

use serde::{Deserialize, Serialize};

use crate::dsp::{frame_signal, AudioSegment, DspConfig};
use crate::error::{Error, Result};

pub use dataset::{build_dataset, build_split, featurize_manifest, labeled_set, render_entry, DatasetConfig, DatasetManifest, ManifestEntry, Split};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum ClassLabel {
    NonSpeech = 0,
    OneSpeaker = 1,
    TwoSpeakers = 2,
    ThreeSpeakers = 3,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 4] = [
        ClassLabel::NonSpeech,
        ClassLabel::OneSpeaker,
        ClassLabel::TwoSpeakers,
        ClassLabel::ThreeSpeakers,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        ClassLabel::ALL.get(i).copied().ok_or(Error::Label(i))
    }

    /// Class for a number of active speakers, saturating at three.
    pub fn from_count(n: usize) -> Self {
        ClassLabel::ALL[n.min(3)]
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassLabel::NonSpeech => "non-speech",
            ClassLabel::OneSpeaker => "1-speaker",
            ClassLabel::TwoSpeakers => "2-speaker",
            ClassLabel::ThreeSpeakers => "3-speaker",
        }
    }
}

impl From<ClassLabel> for u8 {
    fn from(c: ClassLabel) -> u8 {
        c as u8
    }
}

impl TryFrom<u8> for ClassLabel {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        ClassLabel::from_index(v as usize)
    }
}

impl std::fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-frame activity of one source.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActivityMask(pub Vec<bool>);

impl ActivityMask {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn active_frames(&self) -> usize {
        self.0.iter().filter(|&&a| a).count()
    }

    pub fn slice(&self, start: usize, len: usize) -> ActivityMask {
        let end = (start + len).min(self.0.len());
        ActivityMask(self.0[start.min(end)..end].to_vec())
    }
}

/// Sums sources after scaling every interferer to the requested SIR
/// relative to the first source. If the sum would clip, all components are
/// scaled by a common factor, which leaves every SIR unchanged.
pub fn mix_sources(sources: &[AudioSegment], sir_db: &[f64]) -> Result<AudioSegment> {
    mix_sources_with_gains(sources, sir_db).map(|(mix, _)| mix)
}

/// Like [`mix_sources`], additionally returning the final gain applied to each source.
pub fn mix_sources_with_gains(sources: &[AudioSegment], sir_db: &[f64]) -> Result<(AudioSegment, Vec<f64>)> {
    let Some(first) = sources.first() else {
        return Err(Error::Data("mix_sources needs at least one source".into()));
    };
    if sir_db.len() + 1 != sources.len() {
        return Err(Error::Data(format!(
            "{} sources need {} SIR values, got {}",
            sources.len(),
            sources.len() - 1,
            sir_db.len()
        )));
    }
    let len = first.len();
    if let Some(s) = sources.iter().find(|s| s.len() != len || s.sample_rate != first.sample_rate) {
        return Err(Error::Data(format!(
            "source length/rate mismatch: {} @ {} Hz vs {len} @ {} Hz",
            s.len(),
            s.sample_rate,
            first.sample_rate
        )));
    }
    let p0 = first.power();
    if sources.len() > 1 && p0 == 0.0 {
        return Err(Error::Data("target source has zero power".into()));
    }
    let mut gains = vec![1.0];
    for (i, (s, &sir)) in sources[1..].iter().zip(sir_db).enumerate() {
        let p = s.power();
        if p == 0.0 {
            return Err(Error::Data(format!("interferer {} has zero power", i + 1)));
        }
        gains.push((p0 / (p * 10f64.powf(sir / 10.0))).sqrt());
    }
    let mut out = vec![0.0; len];
    for (s, &g) in sources.iter().zip(&gains) {
        for (o, &x) in out.iter_mut().zip(&s.samples) {
            *o += g * x;
        }
    }
    let peak = out.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if peak > 1.0 {
        let k = 1.0 / peak;
        out.iter_mut().for_each(|x| *x *= k);
        gains.iter_mut().for_each(|g| *g *= k);
    }
    Ok((
        AudioSegment {
            samples: out,
            sample_rate: first.sample_rate,
        },
        gains,
    ))
}

/// Frame energies (sum of squares) on the analysis grid.
pub fn frame_energies(seg: &AudioSegment, cfg: &DspConfig) -> Vec<f64> {
    frame_signal(seg, cfg)
        .iter()
        .map(|f| f.iter().map(|x| x * x).sum())
        .collect()
}

/// A frame is active when its energy exceeds the loudest frame's energy
/// lowered by `rel_threshold_db`.
pub fn energy_vad(seg: &AudioSegment, cfg: &DspConfig, rel_threshold_db: f64) -> ActivityMask {
    let e = frame_energies(seg, cfg);
    let peak = e.iter().copied().fold(0.0, f64::max);
    let thr = peak * 10f64.powf(rel_threshold_db / 10.0);
    ActivityMask(e.iter().map(|&v| v > thr).collect())
}

/// Number of sources with at least `min_active_frames` active frames.
pub fn label_segment(masks: &[ActivityMask], min_active_frames: usize) -> ClassLabel {
    let min = min_active_frames.max(1);
    ClassLabel::from_count(masks.iter().filter(|m| m.active_frames() >= min).count())
}

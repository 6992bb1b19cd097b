//! Balanced four-class dataset construction and manifest persistence.
//!
//! Source utterances are mixed at random SIRs, a window of the requested
//! number of frames is cut at a random frame-aligned offset, and the window
//! is labeled by how many sources are active inside it. An entry drawn for
//! class `c` may therefore start from more than `c` sources, with the extra
//! ones silent in its window.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::synth::{synth_noise, synth_voice, NoiseKind};
use super::{energy_vad, label_segment, mix_sources, ActivityMask, ClassLabel};
use crate::dsp::wav::read_wav;
use crate::dsp::{AudioSegment, DspConfig, LmfbExtractor, LmfbMatrix};
use crate::nn::LabeledSet;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Cv,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Cv, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Cv => "cv",
            Split::Test => "test",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.pad(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Classes to generate (subset of 0..=3).
    pub classes: Vec<u8>,
    /// Entries per class for train, cv and test.
    pub per_class: [usize; 3],
    pub segment_frames: usize,
    /// Length of every source utterance before a window is cut from it.
    pub utterance_frames: usize,
    pub max_sources: usize,
    pub sir_db: [f64; 2],
    /// Minimum fraction of window frames a source must be active in to count.
    pub min_active_fraction: f64,
    pub vad_threshold_db: f64,
    /// Output level applied to every window, drawn uniformly from this range.
    pub gain_db: [f64; 2],
    /// Background noise floor (dBFS RMS) added to every window.
    pub floor_db: [f64; 2],
    /// Level of environmental noise in non-speech entries.
    pub noise_level_db: [f64; 2],
    /// Share of non-speech entries that are near-silence rather than noise.
    pub silence_fraction: f64,
    /// Taken from the experiment seed rather than the file.
    #[serde(skip)]
    pub seed: u64,
    /// Directory of 16 kHz mono WAV utterances to use instead of synthetic voices.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source_dir: Option<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            classes: vec![0, 1, 2, 3],
            per_class: [5000, 500, 500],
            segment_frames: 20,
            utterance_frames: 300,
            max_sources: 3,
            sir_db: [0.0, 5.0],
            min_active_fraction: 0.25,
            vad_threshold_db: -30.0,
            gain_db: [-12.0, 0.0],
            floor_db: [-70.0, -50.0],
            noise_level_db: [-40.0, -15.0],
            silence_fraction: 0.3,
            seed: 0,
            source_dir: None,
        }
    }
}

impl DatasetConfig {
    /// Same configuration with every per-class count multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut c = self.clone();
        for n in &mut c.per_class {
            *n = (*n as f64 * factor).round() as usize;
        }
        c
    }

    pub fn min_active_frames(&self) -> usize {
        ((self.segment_frames as f64 * self.min_active_fraction).ceil() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.segment_frames == 0 || self.utterance_frames < self.segment_frames {
            return Err(Error::Config("need 0 < segment_frames <= utterance_frames".into()));
        }
        if !(self.sir_db[0] <= self.sir_db[1]) || !(self.vad_threshold_db < 0.0) {
            return Err(Error::Config("invalid SIR range or VAD threshold".into()));
        }
        if !(0.0..=1.0).contains(&self.min_active_fraction) {
            return Err(Error::Config("min_active_fraction must lie in [0, 1]".into()));
        }
        for &c in &self.classes {
            if c > 3 {
                return Err(Error::Label(c as usize));
            }
            if c as usize > self.max_sources {
                return Err(Error::Config(format!(
                    "class {c} needs {c} sources but max_sources = {}",
                    self.max_sources
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum SourceSpec {
    Synth { f0: f64, seed: u64 },
    File { path: PathBuf, start: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub level_db: f64,
    pub seed: u64,
}

/// One dataset record; enough to re-render its audio and re-derive its label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub label: ClassLabel,
    pub seed: u64,
    pub segment_frames: usize,
    pub utterance_frames: usize,
    pub offset_frames: usize,
    pub sources: Vec<SourceSpec>,
    pub sir_db: Vec<f64>,
    pub gain_db: f64,
    pub floor_db: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseSpec>,
    /// Rendered audio, relative to the manifest's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub split: Split,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn counts(&self) -> [usize; 4] {
        let mut c = [0; 4];
        for e in &self.entries {
            c[e.label.index()] += 1;
        }
        c
    }

    pub fn segment_frames(&self) -> Option<usize> {
        self.entries.first().map(|e| e.segment_frames)
    }

    pub fn write_jsonl(&self, w: impl Write) -> Result<()> {
        let mut w = BufWriter::new(w);
        for e in &self.entries {
            serde_json::to_writer(&mut w, e).map_err(|e| Error::Data(e.to_string()))?;
            w.write_all(b"\n").map_err(|e| Error::io("writing manifest", e))?;
        }
        w.flush().map_err(|e| Error::io("writing manifest", e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        self.write_jsonl(f)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
            if line.trim().is_empty() {
                continue;
            }
            let e: ManifestEntry = serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
            entries.push(e);
        }
        let split = entries
            .first()
            .map(|e| e.split)
            .ok_or_else(|| Error::Data(format!("{} is empty", path.display())))?;
        if entries.iter().any(|e| e.split != split) {
            return Err(Error::Data(format!("{} mixes several splits", path.display())));
        }
        Ok(DatasetManifest { split, entries })
    }
}

/// Audio of one entry's window plus the per-source activity inside it.
#[derive(Clone, Debug)]
pub struct RenderedEntry {
    pub audio: AudioSegment,
    pub masks: Vec<ActivityMask>,
}

fn load_source(spec: &SourceSpec, utterance_samples: usize) -> Result<AudioSegment> {
    match spec {
        SourceSpec::Synth { f0, seed } => {
            let dsp = DspConfig::default();
            let frames = dsp.frame_count(utterance_samples);
            let mut v = synth_voice(*f0, frames, *seed)?;
            v.samples.resize(utterance_samples, 0.0);
            Ok(v)
        }
        SourceSpec::File { path, start } => {
            let mut v = read_wav(path)?.slice(*start, utterance_samples);
            v.samples.resize(utterance_samples, 0.0);
            Ok(v)
        }
    }
}

fn add_floor(audio: &mut AudioSegment, floor_db: f64, seed: u64) {
    let floor = synth_noise(NoiseKind::Silence, audio.len(), floor_db, rng::derive(seed, &[0x666c]));
    for (a, f) in audio.samples.iter_mut().zip(&floor.samples) {
        *a += f;
    }
}

fn render_with_sources(
    entry: &ManifestEntry,
    sources: &[AudioSegment],
    cfg: &DatasetConfig,
) -> Result<RenderedEntry> {
    let dsp = DspConfig::default();
    let seg_samples = dsp.samples_for_frames(entry.segment_frames);
    let gain = 10f64.powf(entry.gain_db / 20.0);
    let (mut audio, masks) = match &entry.noise {
        Some(n) => (synth_noise(n.kind, seg_samples, n.level_db, n.seed), Vec::new()),
        None => {
            let mix = mix_sources(sources, &entry.sir_db)?;
            let start = entry.offset_frames * dsp.hop;
            let masks = sources
                .iter()
                .map(|s| energy_vad(s, &dsp, cfg.vad_threshold_db).slice(entry.offset_frames, entry.segment_frames))
                .collect();
            (mix.slice(start, seg_samples), masks)
        }
    };
    if audio.len() != seg_samples {
        return Err(Error::Data(format!("entry {} window runs past its utterances", entry.id)));
    }
    audio.samples.iter_mut().for_each(|x| *x *= gain);
    add_floor(&mut audio, entry.floor_db, entry.seed);
    Ok(RenderedEntry { audio, masks })
}

/// Re-synthesizes (or reloads) an entry's sources and renders its window.
pub fn render_entry(entry: &ManifestEntry, cfg: &DatasetConfig) -> Result<RenderedEntry> {
    let utt = DspConfig::default().samples_for_frames(entry.utterance_frames);
    let sources = entry
        .sources
        .iter()
        .map(|s| load_source(s, utt))
        .collect::<Result<Vec<_>>>()?;
    render_with_sources(entry, &sources, cfg)
}

/// Label implied by an entry's activity masks.
pub fn derive_label(masks: &[ActivityMask], cfg: &DatasetConfig) -> ClassLabel {
    label_segment(masks, cfg.min_active_frames())
}

fn list_wavs(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
    let mut files: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Data(format!("no .wav files in {}", dir.display())));
    }
    Ok(files)
}

fn draw_f0(rng: &mut impl Rng) -> f64 {
    if rng.random_bool(0.5) {
        rng.random_range(85.0..155.0)
    } else {
        rng.random_range(165.0..255.0)
    }
}

const SOURCE_DRAWS: usize = 60;
const OFFSET_DRAWS: usize = 12;

fn make_entry(cfg: &DatasetConfig, split: Split, class: u8, index: usize, wavs: &[(PathBuf, usize)]) -> Result<ManifestEntry> {
    let seed = rng::derive(cfg.seed, &[split.index() as u64, class as u64, index as u64]);
    let mut rng = rng::stream(seed, &[]);
    let dsp = DspConfig::default();
    let mut entry = ManifestEntry {
        id: format!("{}-c{class}-{index:06}", split.name()),
        split,
        label: ClassLabel::from_index(class as usize)?,
        seed,
        segment_frames: cfg.segment_frames,
        utterance_frames: cfg.utterance_frames,
        offset_frames: 0,
        sources: Vec::new(),
        sir_db: Vec::new(),
        gain_db: rng.random_range(cfg.gain_db[0]..=cfg.gain_db[1]),
        floor_db: rng.random_range(cfg.floor_db[0]..=cfg.floor_db[1]),
        noise: None,
        audio: None,
    };
    if class == 0 {
        let silent = rng.random_bool(cfg.silence_fraction.clamp(0.0, 1.0));
        entry.noise = Some(NoiseSpec {
            kind: if silent { NoiseKind::Silence } else { NoiseKind::Environmental },
            level_db: if silent {
                rng.random_range(cfg.floor_db[0]..=cfg.floor_db[1])
            } else {
                rng.random_range(cfg.noise_level_db[0]..=cfg.noise_level_db[1])
            },
            seed: rng.random(),
        });
        return Ok(entry);
    }

    let utt = dsp.samples_for_frames(cfg.utterance_frames);
    let max_offset = cfg.utterance_frames - cfg.segment_frames;
    let target = class as usize;
    for _ in 0..SOURCE_DRAWS {
        let n_src = if target == cfg.max_sources || rng.random_bool(0.5) {
            target
        } else {
            rng.random_range(target + 1..=cfg.max_sources)
        };
        entry.sources = (0..n_src)
            .map(|_| {
                if wavs.is_empty() {
                    SourceSpec::Synth {
                        f0: draw_f0(&mut rng),
                        seed: rng.random(),
                    }
                } else {
                    let (path, len) = &wavs[rng.random_range(0..wavs.len())];
                    SourceSpec::File {
                        path: path.clone(),
                        start: rng.random_range(0..=len.saturating_sub(utt)),
                    }
                }
            })
            .collect();
        entry.sir_db = (1..n_src)
            .map(|_| rng.random_range(cfg.sir_db[0]..=cfg.sir_db[1]))
            .collect();
        let sources = entry
            .sources
            .iter()
            .map(|s| load_source(s, utt))
            .collect::<Result<Vec<_>>>()?;
        if sources.iter().any(|s| s.power() == 0.0) {
            continue;
        }
        let masks: Vec<ActivityMask> = sources.iter().map(|s| energy_vad(s, &dsp, cfg.vad_threshold_db)).collect();
        for _ in 0..OFFSET_DRAWS {
            let offset = rng.random_range(0..=max_offset);
            let window: Vec<ActivityMask> = masks.iter().map(|m| m.slice(offset, cfg.segment_frames)).collect();
            if derive_label(&window, cfg).index() == target {
                entry.offset_frames = offset;
                return Ok(entry);
            }
        }
    }
    Err(Error::Data(format!(
        "could not draw a {target}-speaker window for {} after {} attempts",
        entry.id,
        SOURCE_DRAWS * OFFSET_DRAWS
    )))
}

/// Builds one split with `per_class` entries for every configured class,
/// interleaved by class. Entries are independent and deterministic in
/// `(seed, split, class, index)`.
pub fn build_split(cfg: &DatasetConfig, split: Split) -> Result<DatasetManifest> {
    cfg.validate()?;
    let wavs: Vec<(PathBuf, usize)> = match &cfg.source_dir {
        Some(dir) => list_wavs(dir)?
            .into_iter()
            .map(|p| read_wav(&p).map(|a| (p, a.len())))
            .collect::<Result<_>>()?,
        None => Vec::new(),
    };
    let n = cfg.per_class[split.index()];
    let jobs: Vec<(u8, usize)> = (0..n).flat_map(|i| cfg.classes.iter().map(move |&c| (c, i))).collect();
    let entries = jobs
        .par_iter()
        .map(|&(c, i)| make_entry(cfg, split, c, i, &wavs))
        .collect::<Result<Vec<_>>>()?;
    Ok(DatasetManifest { split, entries })
}

pub fn build_dataset(cfg: &DatasetConfig) -> Result<Vec<DatasetManifest>> {
    Split::ALL.iter().map(|&s| build_split(cfg, s)).collect()
}

/// Renders every entry and extracts its LMFB matrix, in manifest order.
pub fn featurize_manifest(manifest: &DatasetManifest, cfg: &DatasetConfig, dsp: &DspConfig) -> Result<Vec<LmfbMatrix>> {
    let ex = LmfbExtractor::new(dsp)?;
    manifest
        .entries
        .par_iter()
        .map(|e| ex.extract(&render_entry(e, cfg)?.audio))
        .collect()
}

/// Model-ready inputs for a featurized manifest.
pub fn labeled_set(manifest: &DatasetManifest, features: Vec<LmfbMatrix>) -> Result<LabeledSet<f32>> {
    let frames = features.first().map_or(0, |m| m.frames);
    let mut set = LabeledSet::new(frames);
    for (e, m) in manifest.entries.iter().zip(features) {
        if m.frames != frames {
            return Err(Error::Data(format!("{} has {} frames, expected {frames}", e.id, m.frames)));
        }
        set.push(m.values, e.label.index());
    }
    Ok(set)
}

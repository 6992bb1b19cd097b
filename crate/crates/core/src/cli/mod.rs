//! The `spkcount` command line: simulate → featurize → train → evaluate,
//! plus duration sweeps and streaming inference.
//!
//! Everything a command writes goes under the output directory:
//!
//! ```text
//! out/
//!   config.toml                 effective configuration
//!   train.jsonl cv.jsonl test.jsonl
//!   audio/<split>/<id>.wav
//!   features/<split>/<id>.lmfb
//!   <aggregation>.ckpt  <aggregation>-history.csv
//!   <name>-metrics.csv  <name>-confusion.txt  sweep.csv
//! ```

pub mod stream;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{build_split, labeled_set, render_entry, DatasetConfig, DatasetManifest, ManifestEntry, Split};
use crate::dsp::archive::{read_lmfb, write_lmfb};
use crate::dsp::wav::{read_wav, write_wav, WavStream};
use crate::dsp::{DspConfig, LmfbExtractor, LmfbMatrix};
use crate::error::{Error, Result};
use crate::eval::{duration_sweep, evaluate_model, Evaluation};
use crate::nn::train::write_history_csv;
use crate::nn::{load_checkpoint, save_checkpoint, train, Aggregation, Checkpoint, LabeledSet, Model, ModelConfig, TrainConfig};
use crate::rng;
pub use stream::{batch_windows, stream_windows, StreamResult, WindowSpec};

/// Every knob of an experiment. Defaults give the full-size recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Segment durations evaluated by `sweep`.
    pub sweep_frames: Vec<usize>,
    pub dataset: DatasetConfig,
    pub dsp: DspConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            out_dir: PathBuf::from("out"),
            sweep_frames: vec![20, 30, 50, 100],
            dataset: DatasetConfig::default(),
            dsp: DspConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_toml(&text)
    }

    /// Dataset settings with the experiment seed applied.
    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            seed: self.seed,
            ..self.dataset.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset_config().validate()?;
        self.dsp.validate()?;
        self.model.validate()?;
        self.train.scheduler.validate()?;
        if self.dsp.n_mels != self.model.n_mels {
            return Err(Error::Config("dsp.n_mels and model.n_mels differ".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Parser)]
#[command(name = "spkcount", version, about = "Count concurrent speakers in short audio segments")]
pub struct Cli {
    /// Experiment configuration (TOML)
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a balanced corpus: manifests plus rendered audio
    Simulate(SimulateArgs),
    /// Extract LMFB archives for every manifest entry
    Featurize(FeaturizeArgs),
    /// Train one aggregation variant
    Train(TrainArgs),
    /// Score a checkpoint on a featurized manifest
    Evaluate(EvaluateArgs),
    /// Compare checkpoints across segment durations
    Sweep(SweepArgs),
    /// Sliding-window inference over a WAV file or standard input
    Stream(StreamArgs),
    /// Print the effective configuration
    Config,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Classes to generate, e.g. 0,1,2,3
    #[arg(long, value_delimiter = ',')]
    pub classes: Option<Vec<u8>>,
    /// Training entries per class; cv and test get a tenth of that (at least 1)
    #[arg(long)]
    pub per_class: Option<usize>,
    /// Frames per segment
    #[arg(long)]
    pub frames: Option<usize>,
    /// Directory of 16 kHz mono WAV utterances to mix instead of synthetic voices
    #[arg(long)]
    pub source_dir: Option<PathBuf>,
    /// Write manifests only; featurize then renders audio in memory
    #[arg(long)]
    pub no_audio: bool,
}

#[derive(Debug, Args)]
pub struct FeaturizeArgs {
    /// Manifests to featurize (default: every split found in the output directory)
    #[arg(long)]
    pub manifest: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub aggregation: Option<Aggregation>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Where to write the checkpoint (default: <out-dir>/<aggregation>.ckpt)
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Featurized manifest (default: <out-dir>/test.jsonl)
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Score only the first N frames of every segment
    #[arg(long)]
    pub frames: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Checkpoints to compare (repeat the flag)
    #[arg(long, required = true)]
    pub checkpoint: Vec<PathBuf>,
    /// Segment durations in frames
    #[arg(long, value_delimiter = ',')]
    pub frames: Option<Vec<usize>>,
    /// Test entries per class for every duration
    #[arg(long)]
    pub per_class: Option<usize>,
}

#[derive(Debug, Args)]
pub struct StreamArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// WAV file, or - for standard input
    #[arg(default_value = "-")]
    pub input: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub window: usize,
    /// Defaults to the window length (non-overlapping windows)
    #[arg(long)]
    pub hop: Option<usize>,
    /// Samples read per chunk
    #[arg(long, default_value_t = 1600)]
    pub chunk: usize,
}

/// Parses `args` and runs the command. Returns the process exit code:
/// 0 success, 1 usage, 2 data error, 3 numerical failure.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn effective_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = &cli.out_dir {
        cfg.out_dir = d.clone();
    }
    Ok(cfg)
}

pub fn execute(cli: Cli) -> Result<()> {
    let mut cfg = effective_config(&cli)?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match cli.command {
        Command::Simulate(a) => cmd_simulate(&mut cfg, &a, &mut out),
        Command::Featurize(a) => cmd_featurize(&cfg, &a, &mut out),
        Command::Train(a) => cmd_train(&mut cfg, &a, &mut out),
        Command::Evaluate(a) => cmd_evaluate(&cfg, &a, &mut out),
        Command::Sweep(a) => cmd_sweep(&cfg, &a, &mut out),
        Command::Stream(a) => cmd_stream(&cfg, &a, &mut out),
        Command::Config => {
            let text = cfg.to_toml()?;
            out.write_all(text.as_bytes()).map_err(|e| Error::io("writing stdout", e))
        }
    }
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(format!("creating {}", p.display()), e))
}

fn say(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes()).map_err(|e| Error::io("writing stdout", e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn manifest_path(out_dir: &Path, split: Split) -> PathBuf {
    out_dir.join(format!("{split}.jsonl"))
}

fn base_dir(manifest: &Path) -> &Path {
    manifest.parent().unwrap_or(Path::new("."))
}

fn feature_path(base: &Path, e: &ManifestEntry) -> PathBuf {
    base.join("features").join(e.split.name()).join(format!("{}.lmfb", e.id))
}

pub fn cmd_simulate(cfg: &mut ExperimentConfig, a: &SimulateArgs, out: &mut dyn Write) -> Result<()> {
    if let Some(c) = &a.classes {
        cfg.dataset.classes = c.clone();
    }
    if let Some(n) = a.per_class {
        cfg.dataset.per_class = [n, (n / 10).max(1), (n / 10).max(1)];
    }
    if let Some(f) = a.frames {
        cfg.dataset.segment_frames = f;
        cfg.dataset.utterance_frames = cfg.dataset.utterance_frames.max(f);
    }
    if let Some(d) = &a.source_dir {
        cfg.dataset.source_dir = Some(d.clone());
    }
    cfg.validate()?;
    let dir = cfg.out_dir.clone();
    create_dir(&dir)?;
    write_file(&dir.join("config.toml"), cfg.to_toml()?.as_bytes())?;
    let ds = cfg.dataset_config();
    for split in Split::ALL {
        let mut m = build_split(&ds, split)?;
        if !a.no_audio {
            let audio_dir = dir.join("audio").join(split.name());
            create_dir(&audio_dir)?;
            m.entries.par_iter_mut().try_for_each(|e| -> Result<()> {
                let rel = PathBuf::from("audio").join(split.name()).join(format!("{}.wav", e.id));
                write_wav(&dir.join(&rel), &render_entry(e, &ds)?.audio)?;
                e.audio = Some(rel);
                Ok(())
            })?;
        }
        m.save(&manifest_path(&dir, split))?;
        let c = m.counts();
        say(
            out,
            &format!("{split:<5} {:>6} {:>6} {:>6} {:>6}\n", c[0], c[1], c[2], c[3]),
        )?;
    }
    log::info!("wrote manifests to {}", dir.display());
    Ok(())
}

fn entry_features(e: &ManifestEntry, base: &Path, ds: &DatasetConfig, ex: &LmfbExtractor) -> Result<LmfbMatrix> {
    let audio = match &e.audio {
        Some(rel) => read_wav(&base.join(rel))?,
        None => render_entry(e, ds)?.audio,
    };
    ex.extract(&audio)
}

fn existing_manifests(dir: &Path) -> Vec<PathBuf> {
    Split::ALL
        .iter()
        .map(|&s| manifest_path(dir, s))
        .filter(|p| p.exists())
        .collect()
}

pub fn cmd_featurize(cfg: &ExperimentConfig, a: &FeaturizeArgs, out: &mut dyn Write) -> Result<()> {
    cfg.validate()?;
    let manifests = if a.manifest.is_empty() {
        existing_manifests(&cfg.out_dir)
    } else {
        a.manifest.clone()
    };
    if manifests.is_empty() {
        return Err(Error::Data(format!("no manifests in {}; run simulate first", cfg.out_dir.display())));
    }
    let ex = LmfbExtractor::new(&cfg.dsp)?;
    let ds = cfg.dataset_config();
    let mut failed = 0;
    for path in manifests {
        let m = DatasetManifest::load(&path)?;
        let base = base_dir(&path);
        create_dir(&base.join("features").join(m.split.name()))?;
        let results: Vec<Result<()>> = m
            .entries
            .par_iter()
            .map(|e| write_lmfb(&feature_path(base, e), &entry_features(e, base, &ds, &ex)?))
            .collect();
        let mut ok = 0;
        for (e, r) in m.entries.iter().zip(results) {
            match r {
                Ok(()) => ok += 1,
                Err(err) => {
                    log::error!("{}: {err}", e.id);
                    failed += 1;
                }
            }
        }
        say(out, &format!("{}: {ok}/{} entries featurized\n", path.display(), m.entries.len()))?;
    }
    if failed > 0 {
        return Err(Error::Data(format!("{failed} entries could not be featurized")));
    }
    Ok(())
}

/// Loads the stored LMFB archives of a manifest, optionally keeping only the
/// first `frames` frames of each.
pub fn load_features(manifest: &Path, frames: Option<usize>) -> Result<LabeledSet<f32>> {
    let m = DatasetManifest::load(manifest)?;
    let base = base_dir(manifest);
    let feats: Vec<LmfbMatrix> = m
        .entries
        .par_iter()
        .map(|e| {
            let p = feature_path(base, e);
            let mut x = read_lmfb(&p).map_err(|err| match err {
                Error::Io { .. } => Error::Data(format!("{} missing; run featurize first", p.display())),
                other => other,
            })?;
            if let Some(f) = frames {
                if f > x.frames {
                    return Err(Error::Data(format!("{} has {} frames, {f} requested", e.id, x.frames)));
                }
                x = LmfbMatrix::new(f, x.n_mels, x.values[..f * x.n_mels].to_vec())?;
            }
            Ok(x)
        })
        .collect::<Result<_>>()?;
    labeled_set(&m, feats)
}

pub fn model_seed(seed: u64, agg: Aggregation) -> u64 {
    rng::derive(seed, &[0x6d6f_64656c, agg as u64])
}

pub fn cmd_train(cfg: &mut ExperimentConfig, a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    if let Some(agg) = a.aggregation {
        cfg.model.aggregation = agg;
    }
    if let Some(e) = a.epochs {
        cfg.train.max_epochs = e;
    }
    cfg.validate()?;
    let dir = &cfg.out_dir;
    let tr = load_features(&manifest_path(dir, Split::Train), None)?;
    let cv = load_features(&manifest_path(dir, Split::Cv), None)?;
    let agg = cfg.model.aggregation;
    let mut model = Model::<f32>::new(cfg.model.clone(), model_seed(cfg.seed, agg))?;
    let outcome = train(&mut model, &tr, &cv, &cfg.train, rng::derive(cfg.seed, &[0x7472_6169]), |r| {
        log::info!(
            "epoch {:>3} lr {:.5} train {:.4}/{:.3} cv {:.4}/{:.3}",
            r.epoch,
            r.lr,
            r.train_loss,
            r.train_acc,
            r.cv_loss,
            r.cv_acc
        )
    })?;
    let ck_path = a.checkpoint.clone().unwrap_or_else(|| dir.join(format!("{agg}.ckpt")));
    save_checkpoint(
        &Checkpoint {
            model,
            scheduler: outcome.scheduler,
            epochs_completed: outcome.history.len() as u32,
        },
        &ck_path,
    )?;
    let mut csv = Vec::new();
    write_history_csv(&outcome.history, &mut csv).map_err(|e| Error::io("formatting history", e))?;
    write_file(&dir.join(format!("{agg}-history.csv")), &csv)?;
    let last = outcome.history.last().expect("at least one epoch");
    say(
        out,
        &format!(
            "{agg}: {} epochs ({:?}), final train loss {:.4}, cv loss {:.4}, cv acc {:.4}\ncheckpoint {}\n",
            outcome.history.len(),
            outcome.stop,
            last.train_loss,
            last.cv_loss,
            last.cv_acc,
            ck_path.display()
        ),
    )
}

fn report(name: &str, frames: usize, ev: &Evaluation, dir: &Path, out: &mut dyn Write) -> Result<()> {
    say(out, &format!("{name} @ {frames} frames\n{}confusion (rows true, columns predicted)\n{}", ev.report.table(), ev.confusion.grid()))?;
    create_dir(dir)?;
    let csv = format!(
        "model,frames,{}\n{name},{frames},{}\n",
        crate::eval::MetricsReport::CSV_HEADER,
        ev.report.csv_row()
    );
    write_file(&dir.join(format!("{name}-metrics.csv")), csv.as_bytes())?;
    write_file(&dir.join(format!("{name}-confusion.txt")), ev.confusion.grid().as_bytes())
}

fn checkpoint_name(p: &Path) -> String {
    p.file_stem().map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned())
}

pub fn cmd_evaluate(cfg: &ExperimentConfig, a: &EvaluateArgs, out: &mut dyn Write) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let manifest = a.manifest.clone().unwrap_or_else(|| manifest_path(&cfg.out_dir, Split::Test));
    let set = load_features(&manifest, a.frames)?;
    let ev = evaluate_model(&ck.model, &set)?;
    report(&checkpoint_name(&a.checkpoint), set.frames, &ev, &cfg.out_dir, out)
}

pub fn cmd_sweep(cfg: &ExperimentConfig, a: &SweepArgs, out: &mut dyn Write) -> Result<()> {
    cfg.validate()?;
    let cks = a.checkpoint.iter().map(|p| load_checkpoint(p)).collect::<Result<Vec<_>>>()?;
    let names: Vec<String> = a.checkpoint.iter().map(|p| checkpoint_name(p)).collect();
    let frames = a.frames.clone().unwrap_or_else(|| cfg.sweep_frames.clone());
    let tests = frames
        .iter()
        .map(|&f| {
            let mut ds = cfg.dataset_config();
            ds.segment_frames = f;
            ds.utterance_frames = ds.utterance_frames.max(f);
            if let Some(n) = a.per_class {
                ds.per_class[2] = n;
            }
            let m = build_split(&ds, Split::Test)?;
            labeled_set(&m, crate::corpus::featurize_manifest(&m, &ds, &cfg.dsp)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let models: Vec<(&str, &Model<f32>)> = names.iter().map(|n| n.as_str()).zip(cks.iter().map(|c| &c.model)).collect();
    let table = duration_sweep(&models, &tests)?;
    say(out, "weighted accuracy\n")?;
    say(out, &table.table())?;
    for row in &table.rows {
        for (n, e) in names.iter().zip(&row.results) {
            say(out, &format!("\n{n} @ {} frames\n{}", row.frames, e.report.table()))?;
        }
    }
    create_dir(&cfg.out_dir)?;
    write_file(&cfg.out_dir.join("sweep.csv"), table.to_csv().as_bytes())
}

pub fn cmd_stream(cfg: &ExperimentConfig, a: &StreamArgs, out: &mut dyn Write) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let spec = WindowSpec::new(a.window, a.hop)?;
    let mut emit = |r: &StreamResult| -> Result<()> {
        writeln!(out, "{}", r.csv_line())
            .and_then(|_| out.flush())
            .map_err(|e| Error::io("writing stdout", e))
    };
    if a.input.as_os_str() == "-" {
        let src = WavStream::new(std::io::stdin().lock(), Path::new("<stdin>"))?;
        stream_windows(&ck.model, &cfg.dsp, spec, src, a.chunk, &mut emit)?;
    } else {
        let f = std::fs::File::open(&a.input).map_err(|e| Error::io(format!("opening {}", a.input.display()), e))?;
        let src = WavStream::new(std::io::BufReader::new(f), &a.input)?;
        stream_windows(&ck.model, &cfg.dsp, spec, src, a.chunk, &mut emit)?;
    }
    Ok(())
}

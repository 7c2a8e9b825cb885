//! End-to-end runs: load inputs, build the vocabulary, train, evaluate, and
//! write everything under `<out_dir>/<timestamp>-<tag>/`:
//!
//! * `config.echo`: the resolved configuration
//! * `ckpt`: best-dev checkpoint
//! * `metrics.jsonl`: one JSON record per epoch plus the test record
//! * `norms.csv`: norm histogram, mixed embedder only

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use crate::analysis::{embedding_norms, export_norm_histogram, NormSummary};
use crate::config::{ExperimentConfig, Task};
use crate::corpus::{build_vocab, parse_bakeoff_file, split_dev, SegmentedSentence, Sentence};
use crate::embed::{EmbedderConfig, EmbedderKind};
use crate::glyph::GlyphAtlas;
use crate::lm::{train_lm, LmModel};
use crate::seg::{train_seg, SegModel, SegScore};
use crate::tensor::Checkpoint;
use crate::train::{EpochRecord, TrainLog};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Atlas,
    Corpus,
    Vocab,
    Train,
    Eval,
    Analysis,
    Output,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Config => "config",
            Stage::Atlas => "atlas",
            Stage::Corpus => "corpus",
            Stage::Vocab => "vocab",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Analysis => "analysis",
            Stage::Output => "output",
        })
    }
}

/// A failure tagged with the pipeline stage it happened in.
#[derive(Debug)]
pub struct StageError {
    pub stage: Stage,
    pub message: String,
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}", self.stage, self.message)
    }
}

impl std::error::Error for StageError {}

/// Tags any displayable error with `stage`.
pub fn at<E: fmt::Display>(stage: Stage) -> impl FnOnce(E) -> StageError {
    move |e| StageError { stage, message: e.to_string() }
}

/// Loads the atlas an embedder needs, checking its resolution. `None` for the ID embedder.
pub fn load_atlas(embedder: &EmbedderConfig, path: Option<&Path>) -> Result<Option<GlyphAtlas>, StageError> {
    if !embedder.kind.uses_glyphs() {
        return Ok(None);
    }
    let path = path.ok_or_else(|| at(Stage::Atlas)(format!("{} embedder needs an atlas", embedder.kind)))?;
    let atlas = GlyphAtlas::load(path).map_err(|e| at(Stage::Atlas)(format!("{}: {e}", path.display())))?;
    if atlas.resolution() != embedder.resolution {
        return Err(at(Stage::Atlas)(format!(
            "{} has resolution {} but the model expects {}",
            path.display(),
            atlas.resolution(),
            embedder.resolution
        )));
    }
    Ok(Some(atlas))
}

pub fn load_segmented(path: &Path) -> Result<Vec<SegmentedSentence>, StageError> {
    let (sents, _) = parse_bakeoff_file(path).map_err(|e| at(Stage::Corpus)(format!("{}: {e}", path.display())))?;
    if sents.is_empty() {
        return Err(at(Stage::Corpus)(format!("{}: no sentences", path.display())));
    }
    Ok(sents)
}

/// Sentences of a segmented file with the word spacing removed.
pub fn load_sentences(path: &Path) -> Result<Vec<Sentence>, StageError> {
    load_segmented(path)?
        .iter()
        .map(|s| s.sentence().map_err(|e| at(Stage::Corpus)(format!("{}: {e}", path.display()))))
        .collect()
}

fn train_dev<T: Clone>(cfg: &ExperimentConfig, train: Vec<T>, load: impl Fn(&Path) -> Result<Vec<T>, StageError>) -> Result<(Vec<T>, Vec<T>), StageError> {
    match &cfg.dev {
        Some(p) => Ok((train, load(p)?)),
        None => Ok(split_dev(&train, cfg.dev_fraction)),
    }
}

pub fn epoch_json(task: Task, rec: &EpochRecord) -> Value {
    let dev_key = match task {
        Task::Lm => "dev_perplexity",
        Task::Seg => "dev_f1",
    };
    json!({
        "event": "epoch",
        "task": task.to_string(),
        "epoch": rec.epoch,
        "steps": rec.steps,
        "train_loss": rec.mean_loss,
        dev_key: rec.dev_metric,
    })
}

pub fn perplexity_json(perplexity: f64, positions: usize) -> Value {
    json!({ "event": "test", "task": "lm", "perplexity": perplexity, "positions": positions })
}

pub fn score_json(s: &SegScore) -> Value {
    json!({
        "event": "test",
        "task": "seg",
        "precision": s.precision,
        "recall": s.recall,
        "f1": s.f1,
        "tp": s.tp,
        "pred_count": s.pred_count,
        "gold_count": s.gold_count,
    })
}

fn checkpoint_with(mut ckpt: Checkpoint, cfg: &ExperimentConfig) -> Checkpoint {
    ckpt.meta.insert("config".into(), cfg.echo());
    if let (Some(a), true) = (&cfg.atlas, cfg.embedder.uses_glyphs()) {
        ckpt.meta.insert("atlas".into(), a.display().to_string());
    }
    ckpt
}

pub struct TrainedLm {
    pub model: LmModel,
    pub log: TrainLog,
    pub atlas: Option<GlyphAtlas>,
    pub checkpoint: Checkpoint,
}

/// Loads data for a language-model config and trains it.
pub fn train_lm_from_config(cfg: &ExperimentConfig, on_epoch: &mut dyn FnMut(&EpochRecord)) -> Result<TrainedLm, StageError> {
    cfg.validate().map_err(at(Stage::Config))?;
    let train_path = cfg.train.as_deref().ok_or_else(|| at(Stage::Config)("missing required key `train`"))?;
    let atlas = load_atlas(&cfg.embedder_config(), cfg.atlas.as_deref())?;
    let (train, dev) = train_dev(cfg, load_sentences(train_path)?, load_sentences)?;
    let vocab = build_vocab(&train, cfg.vocab_size).map_err(at(Stage::Vocab))?;
    let mut model = LmModel::new(cfg.lm_config(), vocab, cfg.seed).map_err(at(Stage::Config))?;
    let log = train_lm(&mut model, &cfg.train_config(), &train, &dev, atlas.as_ref(), on_epoch).map_err(at(Stage::Train))?;
    let checkpoint = checkpoint_with(model.to_checkpoint(), cfg);
    Ok(TrainedLm { model, log, atlas, checkpoint })
}

pub struct TrainedSeg {
    pub model: SegModel,
    pub log: TrainLog,
    pub atlas: Option<GlyphAtlas>,
    pub checkpoint: Checkpoint,
}

pub fn train_seg_from_config(cfg: &ExperimentConfig, on_epoch: &mut dyn FnMut(&EpochRecord)) -> Result<TrainedSeg, StageError> {
    cfg.validate().map_err(at(Stage::Config))?;
    let train_path = cfg.train.as_deref().ok_or_else(|| at(Stage::Config)("missing required key `train`"))?;
    let atlas = load_atlas(&cfg.embedder_config(), cfg.atlas.as_deref())?;
    let (train, dev) = train_dev(cfg, load_segmented(train_path)?, load_segmented)?;
    let raw: Vec<Sentence> = train.iter().map(SegmentedSentence::sentence).collect::<Result<_, _>>().map_err(at(Stage::Corpus))?;
    let vocab = build_vocab(&raw, cfg.vocab_size).map_err(at(Stage::Vocab))?;
    let mut model = SegModel::new(cfg.seg_config(), vocab, cfg.seed).map_err(at(Stage::Config))?;
    let log = train_seg(&mut model, &cfg.train_config(), &train, &dev, atlas.as_ref(), on_epoch).map_err(at(Stage::Train))?;
    let checkpoint = checkpoint_with(model.to_checkpoint(), cfg);
    Ok(TrainedSeg { model, log, atlas, checkpoint })
}

#[derive(Debug, Clone, PartialEq)]
pub enum TestMetric {
    Perplexity(f64),
    Segmentation(SegScore),
}

impl TestMetric {
    /// The line printed for humans, e.g. `perplexity=47.53` or `P=.. R=.. F1=..`.
    pub fn summary_line(&self) -> String {
        match self {
            TestMetric::Perplexity(p) => format!("perplexity={p:.4}"),
            TestMetric::Segmentation(s) => format!("P={:.2} R={:.2} F1={:.2}", s.precision, s.recall, s.f1),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub metric: TestMetric,
    /// Median-norm comparison, mixed embedder only.
    pub norm_report: Option<String>,
}

fn create_run_dir(cfg: &ExperimentConfig) -> Result<PathBuf, StageError> {
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    fs::create_dir_all(&cfg.out_dir).map_err(at(Stage::Output))?;
    for n in 1.. {
        let name = if n == 1 { format!("{stamp}-{}", cfg.tag) } else { format!("{stamp}-{}-{n}", cfg.tag) };
        let dir = cfg.out_dir.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(at(Stage::Output)(e)),
        }
    }
    unreachable!()
}

struct MetricsLog {
    out: BufWriter<File>,
    error: Option<std::io::Error>,
}

impl MetricsLog {
    fn write(&mut self, v: &Value) {
        if self.error.is_none() {
            if let Err(e) = writeln!(self.out, "{v}").and_then(|_| self.out.flush()) {
                self.error = Some(e);
            }
        }
    }
}

/// Runs one full experiment. All configuration is checked before any data is read.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary, StageError> {
    cfg.validate().map_err(at(Stage::Config))?;
    cfg.require_inputs().map_err(at(Stage::Config))?;
    let test_path = cfg.test.clone().expect("checked by require_inputs");
    let run_dir = create_run_dir(cfg)?;
    fs::write(run_dir.join("config.echo"), cfg.echo()).map_err(at(Stage::Output))?;
    let file = File::create(run_dir.join("metrics.jsonl")).map_err(at(Stage::Output))?;
    let mut metrics = MetricsLog { out: BufWriter::new(file), error: None };
    let task = cfg.task;

    let (metric, ckpt, mixed_parts) = match task {
        Task::Lm => {
            let t = train_lm_from_config(cfg, &mut |r| metrics.write(&epoch_json(task, r)))?;
            let test = load_sentences(&test_path)?;
            let (nll, count) = t.model.nll(t.atlas.as_ref(), &test).map_err(at(Stage::Eval))?;
            let ppl = crate::lm::perplexity_from_nll(nll, count);
            metrics.write(&perplexity_json(ppl, count));
            let parts = (cfg.embedder == EmbedderKind::Mixed).then(|| (t.model.embedder.clone(), t.model.params.clone(), t.model.vocab.clone(), t.atlas.clone()));
            (TestMetric::Perplexity(ppl), t.checkpoint, parts)
        }
        Task::Seg => {
            let t = train_seg_from_config(cfg, &mut |r| metrics.write(&epoch_json(task, r)))?;
            let test = load_segmented(&test_path)?;
            let score = t.model.evaluate(t.atlas.as_ref(), &test).map_err(at(Stage::Eval))?;
            metrics.write(&score_json(&score));
            let parts = (cfg.embedder == EmbedderKind::Mixed).then(|| (t.model.embedder.clone(), t.model.params.clone(), t.model.vocab.clone(), t.atlas.clone()));
            (TestMetric::Segmentation(score), t.checkpoint, parts)
        }
    };
    if let Some(e) = metrics.error {
        return Err(at(Stage::Output)(e));
    }
    ckpt.save(run_dir.join("ckpt")).map_err(at(Stage::Output))?;

    let mut norm_report = None;
    if let Some((embedder, params, vocab, atlas)) = mixed_parts {
        let atlas = atlas.expect("mixed embedder has an atlas");
        let records = embedding_norms(&embedder, &params, &vocab, &atlas).map_err(at(Stage::Analysis))?;
        let hist = export_norm_histogram(&records, cfg.bins, None).map_err(at(Stage::Analysis))?;
        fs::write(run_dir.join("norms.csv"), hist.to_csv()).map_err(at(Stage::Output))?;
        norm_report = NormSummary::from_records(&records).map(|s| s.report());
    }
    Ok(RunSummary { run_dir, metric, norm_report })
}

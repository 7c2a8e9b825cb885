//! Word segmentation as per-character boundary prediction.
//!
//! A GRU or bidirectional LSTM reads the embedded characters and a dense
//! head maps each hidden state to one logit: the probability that a word
//! ends after that character.

mod score;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{decode_words, label_boundaries, BoundaryLabeling, CorpusError, SegmentedSentence, Sentence, Vocab};
use crate::embed::{Embedder, EmbedderConfig, EmbedderKind};
use crate::glyph::GlyphAtlas;
use crate::nn::{run_gru, run_lstm, GruCell, Linear, LstmCell};
use crate::tensor::{BoundParams, Checkpoint, Initializer, ParamStore, Tape, TensorError, Var};
use crate::train::{batch_sequences, fit, par_chunks, EpochRecord, Goal, Position, SeqBatch, TrainConfig, TrainError, TrainLog};

pub use score::{f1_score, score_segmentation, word_spans, ScoreError, SegScore};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
const EVAL_CHUNK: usize = 64;

#[derive(Debug, Error)]
pub enum SegError {
    #[error("sentence is empty")]
    EmptySentence,
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Backbone {
    Gru,
    BiLstm,
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backbone::Gru => "gru",
            Backbone::BiLstm => "bilstm",
        })
    }
}

impl FromStr for Backbone {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gru" => Ok(Backbone::Gru),
            "bilstm" => Ok(Backbone::BiLstm),
            other => Err(format!("unknown backbone `{other}` (expected gru or bilstm)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegConfig {
    pub backbone: Backbone,
    pub hidden_dim: usize,
    pub embedder: EmbedderConfig,
}

impl SegConfig {
    /// 100 hidden units over 100-dimensional embeddings.
    pub fn new(backbone: Backbone, kind: EmbedderKind) -> Self {
        Self { backbone, hidden_dim: 100, embedder: EmbedderConfig::seg(kind) }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.hidden_dim == 0 {
            return Err("hidden_dim must be positive".into());
        }
        self.embedder.validate()
    }

    /// Width of the state the head reads.
    pub fn head_input_dim(&self) -> usize {
        match self.backbone {
            Backbone::Gru => self.hidden_dim,
            Backbone::BiLstm => 2 * self.hidden_dim,
        }
    }
}

#[derive(Debug, Clone)]
enum Recurrent {
    Gru(GruCell),
    BiLstm { fw: LstmCell, bw: LstmCell },
}

#[derive(Debug, Clone)]
pub struct SegModel {
    pub config: SegConfig,
    pub vocab: Vocab,
    pub embedder: Embedder,
    rnn: Recurrent,
    pub head: Linear,
    pub params: ParamStore,
}

/// Label 1 where `prob ≥ threshold`; the last label is always 1.
pub fn predict_labels(probs: &[f64], threshold: f64) -> BoundaryLabeling {
    let mut labels: Vec<bool> = probs.iter().map(|&p| p >= threshold).collect();
    if let Some(last) = labels.last_mut() {
        *last = true;
    }
    BoundaryLabeling::new(labels)
}

impl SegModel {
    pub fn new(config: SegConfig, vocab: Vocab, seed: u64) -> Result<Self, SegError> {
        let mut model = Self::skeleton(config, vocab)?;
        let mut init = Initializer::new(seed);
        model.embedder.init_params(&mut init, &mut model.params);
        match &model.rnn {
            Recurrent::Gru(c) => c.init_params(&mut init, &mut model.params),
            Recurrent::BiLstm { fw, bw } => {
                fw.init_params(&mut init, &mut model.params);
                bw.init_params(&mut init, &mut model.params);
            }
        }
        model.head.init_params(&mut init, &mut model.params);
        Ok(model)
    }

    fn skeleton(config: SegConfig, vocab: Vocab) -> Result<Self, SegError> {
        config.validate().map_err(SegError::Config)?;
        let embedder = Embedder::new(config.embedder.clone(), vocab.len()).map_err(SegError::Config)?;
        let (k, h) = (config.embedder.dim, config.hidden_dim);
        let rnn = match config.backbone {
            Backbone::Gru => Recurrent::Gru(GruCell::new("seg/gru", k, h)),
            Backbone::BiLstm => Recurrent::BiLstm { fw: LstmCell::new("seg/lstm_fw", k, h), bw: LstmCell::new("seg/lstm_bw", k, h) },
        };
        let head = Linear::new("seg/head", config.head_input_dim(), 1);
        Ok(Self { config, vocab, embedder, rnn, head, params: ParamStore::new() })
    }

    fn positions(&self, s: &Sentence) -> Vec<Position> {
        s.chars().iter().map(|&c| (self.vocab.encode(c), Some(c))).collect()
    }

    /// Boundary logits for a batch, one time-major row per position.
    fn logits(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        sentences: &[&Sentence],
        atlas: Option<&GlyphAtlas>,
        jitter: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, SeqBatch), TensorError> {
        let seqs: Vec<Vec<Position>> = sentences.iter().map(|s| self.positions(s)).collect();
        let batch = batch_sequences(&self.embedder, &seqs, jitter);
        let x = self.embedder.forward(tape, p, &batch.embed, atlas)?;
        let h = match &self.rnn {
            Recurrent::Gru(cell) => run_gru(tape, p, cell, x, batch.steps, batch.batch)?,
            Recurrent::BiLstm { fw, bw } => {
                let forward = run_lstm(tape, p, fw, x, batch.steps, batch.batch)?;
                let rev = batch.reversal();
                let xr = tape.gather_rows(x, &rev)?;
                let backward = run_lstm(tape, p, bw, xr, batch.steps, batch.batch)?;
                let backward = tape.gather_rows(backward, &rev)?;
                tape.concat_cols(&[forward, backward])?
            }
        };
        let logits = self.head.forward(tape, p, h)?;
        Ok((logits, batch))
    }

    /// Masked mean binary cross-entropy of a batch against gold labels.
    pub fn batch_loss(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        gold: &[&SegmentedSentence],
        atlas: Option<&GlyphAtlas>,
        jitter: Option<&mut ChaCha8Rng>,
    ) -> Result<Var, SegError> {
        let mut sentences = Vec::with_capacity(gold.len());
        let mut labels = Vec::with_capacity(gold.len());
        for g in gold {
            sentences.push(g.sentence()?);
            labels.push(label_boundaries(g)?.labels().iter().map(|&b| if b { 1.0f32 } else { 0.0 }).collect::<Vec<_>>());
        }
        let refs: Vec<&Sentence> = sentences.iter().collect();
        let (logits, batch) = self.logits(tape, p, &refs, atlas, jitter)?;
        let targets = batch.layout(&labels, 0.0);
        Ok(tape.sigmoid_bce(logits, &targets, &batch.mask)?)
    }

    /// Boundary probability for every character of every sentence.
    pub fn boundary_probs(&self, atlas: Option<&GlyphAtlas>, sentences: &[Sentence]) -> Result<Vec<Vec<f64>>, SegError> {
        let parts = par_chunks(sentences, EVAL_CHUNK, |chunk| -> Result<Vec<Vec<f64>>, TensorError> {
            let refs: Vec<&Sentence> = chunk.iter().collect();
            let mut tape = Tape::new();
            let p = self.params.bind(&mut tape);
            let (logits, batch) = self.logits(&mut tape, &p, &refs, atlas, None)?;
            let z = tape.value(logits);
            Ok((0..batch.batch)
                .map(|b| (0..batch.lengths[b]).map(|t| crate::tensor::sigmoid(z[batch.row(t, b)] as f64)).collect())
                .collect())
        });
        let mut out = Vec::with_capacity(sentences.len());
        for part in parts {
            out.extend(part?);
        }
        Ok(out)
    }

    /// Per-character boundary probabilities of one sentence.
    pub fn forward(&self, atlas: Option<&GlyphAtlas>, s: &Sentence) -> Result<Vec<f64>, SegError> {
        Ok(self.boundary_probs(atlas, std::slice::from_ref(s))?.remove(0))
    }

    pub fn segment(&self, atlas: Option<&GlyphAtlas>, sentences: &[Sentence]) -> Result<Vec<SegmentedSentence>, SegError> {
        self.boundary_probs(atlas, sentences)?
            .iter()
            .zip(sentences)
            .map(|(probs, s)| Ok(decode_words(s, &predict_labels(probs, DEFAULT_THRESHOLD))?))
            .collect()
    }

    /// Segments raw lines; blank lines (`None`) come back as empty strings.
    pub fn segment_text(&self, atlas: Option<&GlyphAtlas>, lines: &[Option<Sentence>]) -> Result<Vec<String>, SegError> {
        let present: Vec<Sentence> = lines.iter().flatten().cloned().collect();
        let mut segmented = self.segment(atlas, &present)?.into_iter();
        Ok(lines
            .iter()
            .map(|l| match l {
                Some(_) => segmented.next().expect("one result per sentence").to_line(),
                None => String::new(),
            })
            .collect())
    }

    /// Segments the raw text of `gold` and scores the result against it.
    pub fn evaluate(&self, atlas: Option<&GlyphAtlas>, gold: &[SegmentedSentence]) -> Result<SegScore, SegError> {
        if gold.is_empty() {
            return Err(SegError::EmptyCorpus);
        }
        let raw: Vec<Sentence> = gold.iter().map(SegmentedSentence::sentence).collect::<Result<_, _>>()?;
        Ok(score_segmentation(&self.segment(atlas, &raw)?, gold)?)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut meta = BTreeMap::new();
        meta.insert("task".into(), "seg".into());
        meta.insert("seg.backbone".into(), self.config.backbone.to_string());
        meta.insert("seg.hidden_dim".into(), self.config.hidden_dim.to_string());
        self.config.embedder.write_meta(&mut meta);
        meta.insert("vocab".into(), self.vocab.to_file_string());
        Checkpoint::from_params(&self.params, meta)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, SegError> {
        let meta = &ckpt.meta;
        let bad = |m: &str| SegError::Checkpoint(m.to_string());
        if meta.get("task").map(String::as_str) != Some("seg") {
            return Err(bad("not a segmentation checkpoint"));
        }
        let backbone = meta.get("seg.backbone").ok_or_else(|| bad("missing `seg.backbone`"))?.parse().map_err(SegError::Checkpoint)?;
        let hidden_dim = meta.get("seg.hidden_dim").and_then(|v| v.parse().ok()).ok_or_else(|| bad("missing or bad `seg.hidden_dim`"))?;
        let embedder = EmbedderConfig::read_meta(meta).map_err(SegError::Checkpoint)?;
        let vocab = Vocab::parse(meta.get("vocab").ok_or_else(|| bad("missing vocab"))?)?;
        let config = SegConfig { backbone, hidden_dim, embedder };
        let fresh = Self::new(config, vocab, 0)?;
        let mut params = ckpt.to_params();
        if params.len() != fresh.params.len() {
            return Err(bad("tensor set does not match the model"));
        }
        for (name, t) in fresh.params.iter() {
            let got = params.get(name).map_err(|_| SegError::Checkpoint(format!("missing tensor `{name}`")))?;
            if got.shape() != t.shape() {
                return Err(SegError::Checkpoint(format!("`{name}` has shape {:?}, expected {:?}", got.shape(), t.shape())));
            }
        }
        for (_, t) in params.iter_mut() {
            t.requires_grad = true;
        }
        Ok(Self { params, ..fresh })
    }
}

/// Trains `model` in place, keeping the parameters with the best dev F1.
pub fn train_seg(
    model: &mut SegModel,
    cfg: &TrainConfig,
    train: &[SegmentedSentence],
    dev: &[SegmentedSentence],
    atlas: Option<&GlyphAtlas>,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainLog, SegError> {
    if train.is_empty() {
        return Err(SegError::EmptyCorpus);
    }
    if model.config.embedder.kind.uses_glyphs() && atlas.is_none() {
        return Err(SegError::Config(format!("{} embedder needs a glyph atlas", model.config.embedder.kind)));
    }
    for s in train.iter().chain(dev) {
        label_boundaries(s)?;
    }
    let mut params = std::mem::take(&mut model.params);
    let snapshot = model.clone();
    let as_tensor = |e: SegError| match e {
        SegError::Tensor(t) => t,
        other => TensorError::Checkpoint(other.to_string()),
    };
    let loss_fn = |tape: &mut Tape, p: &BoundParams, idx: &[usize], jitter: Option<&mut ChaCha8Rng>| {
        let batch: Vec<&SegmentedSentence> = idx.iter().map(|&i| &train[i]).collect();
        snapshot.batch_loss(tape, p, &batch, atlas, jitter).map_err(as_tensor)
    };
    let dev_fn = (!dev.is_empty()).then_some(|params: &ParamStore| {
        let mut probe = snapshot.clone();
        probe.params = params.clone();
        probe.evaluate(atlas, dev).map(|s| s.f1).map_err(|e| match e {
            SegError::Tensor(t) => TrainError::Tensor(t),
            SegError::Train(t) => t,
            other => TrainError::Config(other.to_string()),
        })
    });
    let result = fit(cfg, &mut params, train.len(), Goal::Maximize, loss_fn, dev_fn, on_epoch);
    model.params = params;
    Ok(result?)
}

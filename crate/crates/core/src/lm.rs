//! Character-level GRU language model over any of the four embedders.
//!
//! Each sentence is read as `BOS c1 .. cn` and predicts `c1 .. cn EOS`, so a
//! sentence of `n` characters yields `n + 1` prediction positions. The hidden
//! state starts from zero for every sentence.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{CorpusError, Sentence, Vocab, BOS, EOS, PAD};
use crate::embed::{Embedder, EmbedderConfig, EmbedderKind};
use crate::glyph::GlyphAtlas;
use crate::nn::{run_gru, GruCell, Linear};
use crate::tensor::{log_sum_exp, BoundParams, Checkpoint, Initializer, ParamStore, Tape, TensorError, Var};
use crate::train::{batch_sequences, fit, par_chunks, Goal, Position, TrainConfig, TrainError, TrainLog};

pub use crate::train::EpochRecord;

const EVAL_CHUNK: usize = 32;

#[derive(Debug, Error)]
pub enum LmError {
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
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LmConfig {
    pub embedder: EmbedderConfig,
    pub hidden_dim: usize,
}

impl LmConfig {
    /// 128 hidden units over 300-dimensional embeddings.
    pub fn new(kind: EmbedderKind) -> Self {
        Self { embedder: EmbedderConfig::lm(kind), hidden_dim: 128 }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.hidden_dim == 0 {
            return Err("hidden_dim must be positive".into());
        }
        self.embedder.validate()
    }
}

#[derive(Debug, Clone)]
pub struct LmModel {
    pub config: LmConfig,
    pub vocab: Vocab,
    pub embedder: Embedder,
    pub gru: GruCell,
    pub proj: Linear,
    pub params: ParamStore,
}

/// `exp(total_nll / count)`.
pub fn perplexity_from_nll(total_nll: f64, count: usize) -> f64 {
    (total_nll / count as f64).exp()
}

impl LmModel {
    /// Fresh model with parameters drawn from `seed`.
    pub fn new(config: LmConfig, vocab: Vocab, seed: u64) -> Result<Self, LmError> {
        let mut model = Self::skeleton(config, vocab)?;
        let mut init = Initializer::new(seed);
        model.embedder.init_params(&mut init, &mut model.params);
        model.gru.init_params(&mut init, &mut model.params);
        model.proj.init_params(&mut init, &mut model.params);
        Ok(model)
    }

    fn skeleton(config: LmConfig, vocab: Vocab) -> Result<Self, LmError> {
        config.validate().map_err(LmError::Config)?;
        let v = vocab.len();
        let embedder = Embedder::new(config.embedder.clone(), v).map_err(LmError::Config)?;
        let gru = GruCell::new("lm/gru", config.embedder.dim, config.hidden_dim);
        let proj = Linear::new("lm/proj", config.hidden_dim, v);
        Ok(Self { config, vocab, embedder, gru, proj, params: ParamStore::new() })
    }

    /// Size of every predicted distribution: the full id space, reserved ids included.
    pub fn num_classes(&self) -> usize {
        self.vocab.len()
    }

    fn inputs_and_targets(&self, s: &Sentence) -> (Vec<Position>, Vec<usize>) {
        let mut inputs = Vec::with_capacity(s.len() + 1);
        inputs.push((BOS, None));
        let mut targets = Vec::with_capacity(s.len() + 1);
        for &c in s.chars() {
            let id = self.vocab.encode(c);
            inputs.push((id, Some(c)));
            targets.push(id);
        }
        targets.push(EOS);
        (inputs, targets)
    }

    /// Logits for a batch, with time-major targets and mask.
    fn logits(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        sentences: &[&Sentence],
        atlas: Option<&GlyphAtlas>,
        jitter: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, Vec<usize>, Vec<bool>, usize), TensorError> {
        let (inputs, targets): (Vec<_>, Vec<_>) = sentences.iter().map(|s| self.inputs_and_targets(s)).unzip();
        let batch = batch_sequences(&self.embedder, &inputs, jitter);
        let x = self.embedder.forward(tape, p, &batch.embed, atlas)?;
        let h = run_gru(tape, p, &self.gru, x, batch.steps, batch.batch)?;
        let logits = self.proj.forward(tape, p, h)?;
        Ok((logits, batch.layout(&targets, PAD), batch.mask, batch.batch))
    }

    /// Per-position log-probabilities over all classes: `n + 1` rows for a
    /// sentence of `n` characters, the last predicting EOS.
    pub fn log_probs(&self, atlas: Option<&GlyphAtlas>, s: &Sentence) -> Result<Vec<Vec<f64>>, LmError> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let (logits, _, _, _) = self.logits(&mut tape, &p, &[s], atlas, None)?;
        Ok(tape
            .value(logits)
            .chunks(self.num_classes())
            .map(|row| {
                let row: Vec<f64> = row.iter().map(|&z| z as f64).collect();
                let lse = log_sum_exp(&row);
                row.iter().map(|z| z - lse).collect()
            })
            .collect())
    }

    /// `log p(sentence)`, natural log, EOS included.
    pub fn sentence_log_prob(&self, atlas: Option<&GlyphAtlas>, s: &Sentence) -> Result<f64, LmError> {
        let rows = self.log_probs(atlas, s)?;
        let (_, targets) = self.inputs_and_targets(s);
        Ok(rows.iter().zip(&targets).map(|(row, &t)| row[t]).sum())
    }

    /// Summed negative log-likelihood and number of prediction positions.
    pub fn nll(&self, atlas: Option<&GlyphAtlas>, sentences: &[Sentence]) -> Result<(f64, usize), LmError> {
        if sentences.is_empty() {
            return Err(LmError::EmptyCorpus);
        }
        let v = self.num_classes();
        let parts = par_chunks(sentences, EVAL_CHUNK, |chunk| -> Result<(f64, usize), TensorError> {
            let refs: Vec<&Sentence> = chunk.iter().collect();
            let mut tape = Tape::new();
            let p = self.params.bind(&mut tape);
            let (logits, targets, mask, _) = self.logits(&mut tape, &p, &refs, atlas, None)?;
            let mut total = 0.0;
            let mut count = 0;
            for ((row, &t), &m) in tape.value(logits).chunks(v).zip(&targets).zip(&mask) {
                if m {
                    let row: Vec<f64> = row.iter().map(|&z| z as f64).collect();
                    total += log_sum_exp(&row) - row[t];
                    count += 1;
                }
            }
            Ok((total, count))
        });
        let mut total = 0.0;
        let mut count = 0;
        for part in parts {
            let (t, c) = part?;
            total += t;
            count += c;
        }
        Ok((total, count))
    }

    /// `exp` of the mean per-position negative log-likelihood. Glyphs are never jittered here.
    pub fn perplexity(&self, atlas: Option<&GlyphAtlas>, sentences: &[Sentence]) -> Result<f64, LmError> {
        let (total, count) = self.nll(atlas, sentences)?;
        Ok(perplexity_from_nll(total, count))
    }

    /// Mean cross-entropy of one batch on `tape`, for training and gradient checks.
    pub fn batch_loss(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        sentences: &[&Sentence],
        atlas: Option<&GlyphAtlas>,
        jitter: Option<&mut ChaCha8Rng>,
    ) -> Result<Var, TensorError> {
        let (logits, targets, mask, _) = self.logits(tape, p, sentences, atlas, jitter)?;
        tape.softmax_cross_entropy(logits, &targets, &mask)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut meta = BTreeMap::new();
        meta.insert("task".into(), "lm".into());
        meta.insert("lm.hidden_dim".into(), self.config.hidden_dim.to_string());
        self.config.embedder.write_meta(&mut meta);
        meta.insert("vocab".into(), self.vocab.to_file_string());
        Checkpoint::from_params(&self.params, meta)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, LmError> {
        let meta = &ckpt.meta;
        if meta.get("task").map(String::as_str) != Some("lm") {
            return Err(LmError::Checkpoint("not a language-model checkpoint".into()));
        }
        let hidden_dim = meta
            .get("lm.hidden_dim")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| LmError::Checkpoint("missing or bad `lm.hidden_dim`".into()))?;
        let embedder = EmbedderConfig::read_meta(meta).map_err(LmError::Checkpoint)?;
        let vocab = Vocab::parse(meta.get("vocab").ok_or_else(|| LmError::Checkpoint("missing vocab".into()))?)?;
        let mut model = Self::skeleton(LmConfig { embedder, hidden_dim }, vocab)?;
        let fresh = Self::new(model.config.clone(), model.vocab.clone(), 0)?;
        model.params = ckpt.to_params();
        for (name, t) in fresh.params.iter() {
            let got = model.params.get(name).map_err(|_| LmError::Checkpoint(format!("missing tensor `{name}`")))?;
            if got.shape() != t.shape() {
                return Err(LmError::Checkpoint(format!("`{name}` has shape {:?}, expected {:?}", got.shape(), t.shape())));
            }
        }
        if model.params.len() != fresh.params.len() {
            return Err(LmError::Checkpoint("unexpected extra tensors".into()));
        }
        for (_, t) in model.params.iter_mut() {
            t.requires_grad = true;
        }
        Ok(model)
    }
}

/// Trains `model` in place. Dev perplexity is computed after every epoch and
/// the best-dev parameters are kept; without a dev set the final parameters
/// are kept.
pub fn train_lm(
    model: &mut LmModel,
    cfg: &TrainConfig,
    train: &[Sentence],
    dev: &[Sentence],
    atlas: Option<&GlyphAtlas>,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainLog, LmError> {
    if train.is_empty() {
        return Err(LmError::EmptyCorpus);
    }
    if model.config.embedder.kind.uses_glyphs() && atlas.is_none() {
        return Err(LmError::Config(format!("{} embedder needs a glyph atlas", model.config.embedder.kind)));
    }
    let mut params = std::mem::take(&mut model.params);
    let snapshot = model.clone();
    let loss_fn = |tape: &mut Tape, p: &BoundParams, idx: &[usize], jitter: Option<&mut ChaCha8Rng>| {
        let batch: Vec<&Sentence> = idx.iter().map(|&i| &train[i]).collect();
        snapshot.batch_loss(tape, p, &batch, atlas, jitter)
    };
    let dev_fn = (!dev.is_empty()).then_some(|params: &ParamStore| {
        let mut probe = snapshot.clone();
        probe.params = params.clone();
        probe.perplexity(atlas, dev).map_err(|e| match e {
            LmError::Tensor(t) => TrainError::Tensor(t),
            LmError::Train(t) => t,
            other => TrainError::Config(other.to_string()),
        })
    });
    let result = fit(cfg, &mut params, train.len(), Goal::Minimize, loss_fn, dev_fn, on_epoch);
    model.params = params;
    Ok(result?)
}

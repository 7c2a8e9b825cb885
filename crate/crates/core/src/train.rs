//! Training loop shared by the language model and the segmentor, plus
//! time-major sequence batching.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::PAD;
use crate::embed::{EmbedBatch, Embedder, GlyphKey};
use crate::glyph::{sample_jitter, JitterSpec};
use crate::tensor::{clip_grad_norm, Adam, AdamConfig, BoundParams, ParamStore, Tape, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("non-finite value at epoch {epoch}, step {step}: {detail}")]
    NonFinite { epoch: usize, step: usize, detail: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
    pub adam: AdamConfig,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub seed: u64,
    /// Random glyph translation during training. Never applied at evaluation.
    pub jitter: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { batch_size: 32, epochs: 5, max_steps: None, adam: AdamConfig::default(), clip_norm: Some(5.0), seed: 1, jitter: false }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.batch_size == 0 {
            return Err("batch_size must be positive".into());
        }
        if self.epochs == 0 {
            return Err("epochs must be positive".into());
        }
        if self.max_steps == Some(0) {
            return Err("max_steps must be positive".into());
        }
        if let Some(c) = self.clip_norm {
            if !(c.is_finite() && c > 0.0) {
                return Err(format!("clip must be positive, got {c}"));
            }
        }
        self.adam.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub steps: usize,
    pub mean_loss: f64,
    /// Dev perplexity (LM) or dev F1 (segmentation), when a dev set exists.
    pub dev_metric: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    /// Loss after every optimizer step, in order.
    pub step_losses: Vec<f64>,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (best dev metric).
    pub best_epoch: Option<usize>,
}

/// Which direction of the dev metric is better.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Goal {
    Minimize,
    Maximize,
}

const SHUFFLE_STREAM: u64 = 1;
const JITTER_STREAM: u64 = 2;

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Runs Adam over shuffled minibatches of `0..n_items`.
///
/// `loss_fn` builds the loss for a batch of item indices on a fresh tape and
/// receives the jitter stream (`None` when jitter is off). `dev_fn` scores
/// the current parameters after every epoch; the best-scoring parameters are
/// left in `params` at the end.
pub fn fit<L, D>(
    cfg: &TrainConfig,
    params: &mut ParamStore,
    n_items: usize,
    goal: Goal,
    mut loss_fn: L,
    mut dev_fn: Option<D>,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainLog, TrainError>
where
    L: FnMut(&mut Tape, &BoundParams, &[usize], Option<&mut ChaCha8Rng>) -> Result<Var, TensorError>,
    D: FnMut(&ParamStore) -> Result<f64, TrainError>,
{
    cfg.validate().map_err(TrainError::Config)?;
    if n_items == 0 {
        return Err(TrainError::EmptyCorpus);
    }
    let mut shuffle_rng = rng_stream(cfg.seed, SHUFFLE_STREAM);
    let mut jitter_rng = rng_stream(cfg.seed, JITTER_STREAM);
    let mut adam = Adam::new(cfg.adam);
    let mut order: Vec<usize> = (0..n_items).collect();
    let mut log = TrainLog::default();
    let mut best: Option<(f64, ParamStore)> = None;
    let mut step = 0;

    'epochs: for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut epoch_steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let jr = cfg.jitter.then_some(&mut jitter_rng);
            let non_finite = |e: TensorError| match e {
                TensorError::NonFinite { op } => TrainError::NonFinite { epoch, step: step + 1, detail: format!("forward op `{op}`") },
                other => other.into(),
            };
            let loss = loss_fn(&mut tape, &bound, chunk, jr).map_err(non_finite)?;
            let value = tape.value(loss)[0] as f64;
            if !value.is_finite() {
                return Err(TrainError::NonFinite { epoch, step: step + 1, detail: format!("loss {value}") });
            }
            let mut grads = tape.backward(loss).map_err(non_finite)?;
            params.zero_grads();
            params.accumulate_grads(&bound, &mut grads)?;
            if let Some(max) = cfg.clip_norm {
                let norm = clip_grad_norm(params, max);
                if !norm.is_finite() {
                    return Err(TrainError::NonFinite { epoch, step: step + 1, detail: format!("gradient norm {norm}") });
                }
            }
            adam.step(params).map_err(|e| match e {
                TensorError::NonFiniteGradient(name) => {
                    TrainError::NonFinite { epoch, step: step + 1, detail: format!("gradient of `{name}`") }
                }
                other => other.into(),
            })?;
            step += 1;
            epoch_steps += 1;
            epoch_loss += value;
            log.step_losses.push(value);
            if cfg.max_steps.is_some_and(|m| step >= m) {
                finish_epoch(&mut log, &mut best, params, &mut dev_fn, goal, epoch, step, epoch_loss / epoch_steps as f64, on_epoch)?;
                break 'epochs;
            }
        }
        finish_epoch(&mut log, &mut best, params, &mut dev_fn, goal, epoch, step, epoch_loss / epoch_steps.max(1) as f64, on_epoch)?;
    }
    if let Some((_, kept)) = best {
        *params = kept;
    }
    params.zero_grads();
    Ok(log)
}

#[allow(clippy::too_many_arguments)]
fn finish_epoch<D>(
    log: &mut TrainLog,
    best: &mut Option<(f64, ParamStore)>,
    params: &ParamStore,
    dev_fn: &mut Option<D>,
    goal: Goal,
    epoch: usize,
    steps: usize,
    mean_loss: f64,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<(), TrainError>
where
    D: FnMut(&ParamStore) -> Result<f64, TrainError>,
{
    let dev_metric = match dev_fn {
        Some(f) => Some(f(params)?),
        None => None,
    };
    if let Some(m) = dev_metric {
        let improved = match best {
            None => true,
            Some((b, _)) => match goal {
                Goal::Minimize => m < *b,
                Goal::Maximize => m > *b,
            },
        };
        if improved {
            let mut kept = params.clone();
            kept.zero_grads();
            *best = Some((m, kept));
            log.best_epoch = Some(epoch);
        }
    }
    let rec = EpochRecord { epoch, steps, mean_loss, dev_metric };
    on_epoch(&rec);
    log.epochs.push(rec);
    Ok(())
}

/// One position of an input sequence: vocabulary id and source character.
pub(crate) type Position = (usize, Option<char>);

/// Padded time-major layout of a batch of sequences (`row = t·batch + b`).
#[derive(Debug, Clone)]
pub(crate) struct SeqBatch {
    pub steps: usize,
    pub batch: usize,
    pub lengths: Vec<usize>,
    pub embed: EmbedBatch,
    /// False at PAD positions.
    pub mask: Vec<bool>,
}

impl SeqBatch {
    pub fn row(&self, t: usize, b: usize) -> usize {
        t * self.batch + b
    }

    /// Row permutation that reverses every sequence in place and leaves the
    /// trailing padding where it is. It is its own inverse.
    pub fn reversal(&self) -> Vec<usize> {
        let mut rows = vec![0; self.steps * self.batch];
        for (b, &len) in self.lengths.iter().enumerate() {
            for t in 0..self.steps {
                let src = if t < len { len - 1 - t } else { t };
                rows[self.row(t, b)] = self.row(src, b);
            }
        }
        rows
    }

    /// Spreads per-sequence values into time-major order with `fill` at padding.
    pub fn layout<V: Copy>(&self, per_seq: &[Vec<V>], fill: V) -> Vec<V> {
        let mut out = vec![fill; self.steps * self.batch];
        for (b, seq) in per_seq.iter().enumerate() {
            for (t, &v) in seq.iter().enumerate() {
                out[self.row(t, b)] = v;
            }
        }
        out
    }
}

pub(crate) fn batch_sequences(embedder: &Embedder, seqs: &[Vec<Position>], mut jitter_rng: Option<&mut ChaCha8Rng>) -> SeqBatch {
    let steps = seqs.iter().map(Vec::len).max().unwrap_or(0);
    let batch = seqs.len();
    let mut embed = EmbedBatch { ids: vec![PAD; steps * batch], glyphs: vec![GlyphKey::BLANK; steps * batch] };
    let mut mask = vec![false; steps * batch];
    let draw_jitter = embedder.config.kind.uses_glyphs();
    for (b, seq) in seqs.iter().enumerate() {
        for (t, &(id, ch)) in seq.iter().enumerate() {
            let row = t * batch + b;
            let j = match (&mut jitter_rng, draw_jitter) {
                (Some(rng), true) => sample_jitter(&mut **rng),
                _ => JitterSpec::IDENTITY,
            };
            embed.ids[row] = id;
            embed.glyphs[row] = embedder.glyph_key(id, ch, j);
            mask[row] = true;
        }
    }
    SeqBatch { steps, batch, lengths: seqs.iter().map(Vec::len).collect(), embed, mask }
}

/// Evaluates `f` over `items` in fixed-size chunks on worker threads and
/// returns the per-chunk results in order.
pub(crate) fn par_chunks<I: Sync, R: Send>(items: &[I], chunk: usize, f: impl Fn(&[I]) -> R + Sync) -> Vec<R> {
    let chunks: Vec<&[I]> = items.chunks(chunk.max(1)).collect();
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(chunks.len()).max(1);
    if workers == 1 {
        return chunks.into_iter().map(f).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut results: Vec<Option<R>> = (0..chunks.len()).map(|_| None).collect();
    let slots = std::sync::Mutex::new(&mut results);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                let Some(c) = chunks.get(i) else { break };
                let r = f(c);
                slots.lock().unwrap()[i] = Some(r);
            });
        }
    });
    results.into_iter().map(|r| r.expect("every chunk evaluated")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::{EmbedderConfig, EmbedderKind};

    #[test]
    fn reversal_keeps_padding_trailing() {
        let e = Embedder::new(EmbedderConfig::seg(EmbedderKind::Id), 10).unwrap();
        let seqs = vec![vec![(4, None), (5, None), (6, None)], vec![(7, None)]];
        let b = batch_sequences(&e, &seqs, None);
        assert_eq!((b.steps, b.batch), (3, 2));
        assert_eq!(b.embed.ids, vec![4, 7, 5, PAD, 6, PAD]);
        assert_eq!(b.mask, vec![true, true, true, false, true, false]);
        let rev = b.reversal();
        let reversed: Vec<usize> = rev.iter().map(|&r| b.embed.ids[r]).collect();
        assert_eq!(reversed, vec![6, 7, 5, PAD, 4, PAD]);
        let twice: Vec<usize> = rev.iter().map(|&r| rev[r]).collect();
        assert_eq!(twice, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn id_embedder_never_draws_jitter() {
        let e = Embedder::new(EmbedderConfig::seg(EmbedderKind::Id), 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let before = rng.clone();
        batch_sequences(&e, &[vec![(4, Some('a'))]], Some(&mut rng));
        assert_eq!(rng, before);
    }

    #[test]
    fn par_chunks_preserves_order() {
        let items: Vec<u32> = (0..1000).collect();
        let sums = par_chunks(&items, 7, |c| c.iter().sum::<u32>());
        assert_eq!(sums.len(), 143);
        assert_eq!(sums.iter().sum::<u32>(), 999 * 1000 / 2);
        assert_eq!(sums[0], 21);
    }
}

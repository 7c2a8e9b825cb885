//! Helpers shared by the integration tests and the acceptance target.
#![allow(dead_code)]

pub mod ops;

use std::path::PathBuf;

use glyphembed::corpus::{SegmentedSentence, Sentence};
use glyphembed::glyph::{GlyphAtlas, GlyphBitmap};
use glyphembed::tensor::{BoundParams, ParamStore, Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn fixture_font() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/NotoSansSC-subset.ttf")
}

// ---------------------------------------------------------------------------
// finite differences

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor of the relative error, so near-zero gradients are compared absolutely.
pub const FD_FLOOR: f64 = 1e-3;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

pub fn random_tensor(r: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| r.gen_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Values bounded away from zero so kinks stay out of the difference stencil.
pub fn away_from_zero(r: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| r.gen_range(0.05..1.5) * if r.gen_bool(0.5) { 1.0 } else { -1.0 }).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `Σ out ∘ w` for weights fixed by `seed`, turning any output into a scalar
/// whose gradient probes every output element differently.
pub fn scalarize(tape: &mut Tape<f64>, v: Var, seed: u64) -> Result<Var, TensorError> {
    let shape = tape.shape(v).to_vec();
    let n: usize = shape.iter().product();
    let mut r = rng(seed ^ 0x5eed);
    let w = tape.constant(shape, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect())?;
    let prod = tape.mul(v, w)?;
    tape.sum(prod)
}

#[derive(Debug, Clone, Copy)]
pub struct GradReport {
    pub max_rel: f64,
    pub coords: usize,
}

/// Compares backward-pass gradients of every tensor in `store` against
/// central differences, on at most `per_tensor` coordinates of each.
pub fn check_gradients<F>(store: &ParamStore<f64>, per_tensor: usize, seed: u64, f: F) -> GradReport
where
    F: Fn(&mut Tape<f64>, &BoundParams) -> Result<Var, TensorError>,
{
    let eval = |s: &ParamStore<f64>| {
        let mut tape = Tape::new();
        let p = s.bind(&mut tape);
        let loss = f(&mut tape, &p).expect("forward");
        tape.value(loss)[0]
    };
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let loss = f(&mut tape, &bound).expect("forward");
    let mut grads = tape.backward(loss).expect("backward");
    let mut with_grads = store.clone();
    with_grads.accumulate_grads(&bound, &mut grads).unwrap();

    let mut r = rng(seed);
    let mut report = GradReport { max_rel: 0.0, coords: 0 };
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in names {
        let n = store.get(&name).unwrap().numel();
        let analytic = with_grads.get(&name).unwrap().grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        let coords: Vec<usize> = if n <= per_tensor { (0..n).collect() } else { (0..per_tensor).map(|_| r.gen_range(0..n)).collect() };
        for i in coords {
            let mut plus = store.clone();
            plus.get_mut(&name).unwrap().data_mut()[i] += FD_STEP;
            let mut minus = store.clone();
            minus.get_mut(&name).unwrap().data_mut()[i] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            report.max_rel = report.max_rel.max(rel_err(analytic[i], numeric));
            report.coords += 1;
        }
    }
    report
}

// ---------------------------------------------------------------------------
// segmentation

/// Exact-span counts by comparing every predicted span with every gold span.
pub fn brute_force_counts(pred: &[SegmentedSentence], gold: &[SegmentedSentence]) -> (usize, usize, usize) {
    let spans = |s: &SegmentedSentence| {
        let mut out = Vec::new();
        let mut start = 0;
        for w in &s.words {
            let len = w.chars().count();
            out.push((start, start + len));
            start += len;
        }
        out
    };
    let (mut tp, mut np, mut ng) = (0, 0, 0);
    for (p, g) in pred.iter().zip(gold) {
        let (ps, gs) = (spans(p), spans(g));
        np += ps.len();
        ng += gs.len();
        for a in &ps {
            for b in &gs {
                if a == b {
                    tp += 1;
                }
            }
        }
    }
    (tp, np, ng)
}

/// Splits `text` at random points.
pub fn random_split(r: &mut impl Rng, text: &[char]) -> SegmentedSentence {
    let mut words = Vec::new();
    let mut cur = String::new();
    for (i, &c) in text.iter().enumerate() {
        cur.push(c);
        if i + 1 == text.len() || r.gen_bool(0.45) {
            words.push(std::mem::take(&mut cur));
        }
    }
    SegmentedSentence::new(words)
}

pub fn random_text(r: &mut impl Rng, len: usize) -> Vec<char> {
    const POOL: &[char] = &['我', '们', '的', '是', '人', '中', '国', '一', '年', '大'];
    (0..len).map(|_| POOL[r.gen_range(0..POOL.len())]).collect()
}

/// Sentences of four two-character words from a fixed lexicon.
pub fn toy_seg_corpus(n: usize) -> Vec<SegmentedSentence> {
    const WORDS: [&str; 6] = ["中国", "人民", "大学", "今天", "我们", "学习"];
    (0..n)
        .map(|i| {
            let words = (0..4).map(|j| WORDS[(i * 5 + j * 7 + i / 6) % WORDS.len()].to_string()).collect();
            SegmentedSentence::new(words)
        })
        .collect()
}

/// A zero-entropy language: every sentence is `abababab`.
pub fn toy_lm_corpus(n: usize) -> Vec<Sentence> {
    (0..n).map(|_| "abababab".parse().unwrap()).collect()
}

/// Atlas over `chars` with distinct deterministic random bitmaps.
pub fn random_atlas(chars: &[char], resolution: usize, seed: u64) -> GlyphAtlas {
    let mut r = rng(seed);
    let mut atlas = GlyphAtlas::new(resolution, "random");
    for &c in chars {
        let mut b = GlyphBitmap::blank(resolution);
        for y in 4..resolution - 4 {
            for x in 4..resolution - 4 {
                if r.gen_bool(0.3) {
                    b.set(x, y, (r.gen_range(1..=255u32) as f32) / 255.0);
                }
            }
        }
        atlas.insert(c, &b).unwrap();
    }
    atlas
}

// ---------------------------------------------------------------------------
// synthetic radicals

pub const RADICAL_SIDE: usize = 36;
const PART: usize = 12;

/// A sub-pattern: a `PART×PART` binary stroke pattern.
fn sub_pattern(index: usize) -> Vec<bool> {
    let mut r = rng(1000 + index as u64);
    let mut cells = vec![false; PART * PART];
    // a few horizontal and vertical strokes
    for _ in 0..3 {
        let horizontal = r.gen_bool(0.5);
        let at = r.gen_range(1..PART - 1);
        let (from, to) = {
            let a = r.gen_range(0..PART / 2);
            (a, r.gen_range(PART / 2..PART))
        };
        for k in from..to {
            let (x, y) = if horizontal { (k, at) } else { (at, k) };
            cells[y * PART + x] = true;
        }
    }
    cells
}

#[derive(Debug, Clone)]
pub struct SyntheticChar {
    pub ch: char,
    /// Radical index: the class label.
    pub radical: usize,
    pub component: usize,
    pub layout: usize,
    pub offset: usize,
}

/// 256 characters: 4 radicals × 4 components × 4 layouts × 4 offsets. The
/// 8 sub-patterns are reused everywhere; the radical decides the class.
pub fn synthetic_radicals() -> (Vec<SyntheticChar>, GlyphAtlas) {
    let patterns: Vec<Vec<bool>> = (0..8).map(sub_pattern).collect();
    let mut atlas = GlyphAtlas::new(RADICAL_SIDE, "synthetic-radicals");
    let mut chars = Vec::new();
    let mut code = 0xE000u32;
    for radical in 0..4 {
        for component in 0..4 {
            for layout in 0..4 {
                for offset in 0..4 {
                    let ch = char::from_u32(code).unwrap();
                    code += 1;
                    let (ox, oy) = (2 + 2 * (offset % 2), 2 + 2 * (offset / 2));
                    // radical slot and component slot per layout
                    let (rs, cs) = match layout {
                        0 => ((0, 0), (PART + 4, 0)),
                        1 => ((0, 0), (0, PART + 4)),
                        2 => ((0, PART + 4), (PART + 4, PART + 4)),
                        _ => ((PART + 4, 0), (PART + 4, PART + 4)),
                    };
                    let mut b = GlyphBitmap::blank(RADICAL_SIDE);
                    for (pat, (sx, sy)) in [(&patterns[radical], rs), (&patterns[4 + component], cs)] {
                        for y in 0..PART {
                            for x in 0..PART {
                                if pat[y * PART + x] {
                                    b.set(ox + sx + x, oy + sy + y, 1.0);
                                }
                            }
                        }
                    }
                    atlas.insert(ch, &b).unwrap();
                    chars.push(SyntheticChar { ch, radical, component, layout, offset });
                }
            }
        }
    }
    (chars, atlas)
}

// ---------------------------------------------------------------------------
// toy training

use glyphembed::corpus::build_vocab;
use glyphembed::embed::{ConvLayerSpec, EmbedderConfig, EmbedderKind};
use glyphembed::lm::{train_lm, LmConfig, LmModel};
use glyphembed::seg::{train_seg, Backbone, SegConfig, SegModel};
use glyphembed::tensor::AdamConfig;
use glyphembed::train::{TrainConfig, TrainLog};

pub const TOY_RESOLUTION: usize = 16;

/// A small embedder that trains in seconds.
pub fn small_embedder(kind: EmbedderKind) -> EmbedderConfig {
    EmbedderConfig { kind, dim: 16, resolution: TOY_RESOLUTION, conv: vec![ConvLayerSpec::new(4, 3, 2)], oov_glyphs: false }
}

pub fn toy_train_cfg(steps: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 10,
        epochs: 1000,
        max_steps: Some(steps),
        adam: AdamConfig { lr: 0.01, ..AdamConfig::default() },
        clip_norm: Some(5.0),
        seed: 7,
        jitter: false,
    }
}

pub fn toy_lm(kind: EmbedderKind, corpus: &[Sentence]) -> (LmModel, GlyphAtlas) {
    let vocab = build_vocab(corpus, 100).unwrap();
    let atlas = random_atlas(&vocab.content_chars().collect::<Vec<_>>(), TOY_RESOLUTION, 9);
    let cfg = LmConfig { embedder: small_embedder(kind), hidden_dim: 16 };
    (LmModel::new(cfg, vocab, 3).unwrap(), atlas)
}

/// Trains the toy LM for `steps` steps and returns it with its log.
pub fn train_toy_lm(kind: EmbedderKind, corpus: &[Sentence], cfg: &TrainConfig) -> (LmModel, GlyphAtlas, TrainLog) {
    let (mut model, atlas) = toy_lm(kind, corpus);
    let log = train_lm(&mut model, cfg, corpus, &[], Some(&atlas), &mut |_| {}).unwrap();
    (model, atlas, log)
}

pub fn toy_seg(backbone: Backbone, kind: EmbedderKind, corpus: &[SegmentedSentence]) -> (SegModel, GlyphAtlas) {
    let sents: Vec<Sentence> = corpus.iter().map(|s| s.sentence().unwrap()).collect();
    let vocab = build_vocab(&sents, 100).unwrap();
    let atlas = random_atlas(&vocab.content_chars().collect::<Vec<_>>(), TOY_RESOLUTION, 9);
    let cfg = SegConfig { backbone, hidden_dim: 16, embedder: small_embedder(kind) };
    (SegModel::new(cfg, vocab, 3).unwrap(), atlas)
}

pub fn train_toy_seg(backbone: Backbone, kind: EmbedderKind, corpus: &[SegmentedSentence], cfg: &TrainConfig) -> (SegModel, GlyphAtlas, TrainLog) {
    let (mut model, atlas) = toy_seg(backbone, kind, corpus);
    let log = train_seg(&mut model, cfg, corpus, &[], Some(&atlas), &mut |_| {}).unwrap();
    (model, atlas, log)
}

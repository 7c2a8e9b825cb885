//! One randomized finite-difference instance per differentiable operation.

use glyphembed::embed::{ConvLayerSpec, EmbedBatch, Embedder, EmbedderConfig, EmbedderKind, GlyphKey};
use glyphembed::glyph::JitterSpec;
use glyphembed::nn::{run_gru, run_lstm, GruCell, Linear, LstmCell};
use glyphembed::tensor::{Initializer, Padding, ParamStore};
use rand::Rng;

use super::{away_from_zero, check_gradients, random_atlas, random_tensor, rng, scalarize, GradReport};

pub const OPS: &[&str] = &[
    "dense",
    "conv2d",
    "relu",
    "sigmoid",
    "tanh",
    "elementwise",
    "rows",
    "gru_step",
    "lstm_step",
    "softmax_cross_entropy",
    "sigmoid_bce",
    "composite_lm",
    "composite_seg",
];

const PER_TENSOR: usize = 12;

fn randomize(store: &mut ParamStore<f64>, r: &mut impl Rng, scale: f64) {
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for n in names {
        let shape = store.get(&n).unwrap().shape().to_vec();
        store.insert(n, random_tensor(r, &shape, scale));
    }
}

pub fn grad_instance(op: &str, seed: u64) -> GradReport {
    let mut r = rng(seed.wrapping_mul(7919).wrapping_add(op.len() as u64));
    let mut s = ParamStore::<f64>::new();
    match op {
        "dense" => {
            let (b, i, o) = (r.gen_range(1..5), r.gen_range(1..6), r.gen_range(1..6));
            s.insert("x", random_tensor(&mut r, &[b, i], 1.0));
            s.insert("W", random_tensor(&mut r, &[i, o], 1.0));
            s.insert("b", random_tensor(&mut r, &[o], 1.0));
            check_gradients(&s, PER_TENSOR, seed, |t, p| {
                let y = t.dense(p.get("x")?, p.get("W")?, p.get("b")?)?;
                scalarize(t, y, seed)
            })
        }
        "conv2d" => {
            let (n, h, w, c, o) = (r.gen_range(1..3), r.gen_range(3..8), r.gen_range(3..8), r.gen_range(1..4), r.gen_range(1..4));
            let padding = if r.gen_bool(0.5) { Padding::Same } else { Padding::Valid };
            let kh = r.gen_range(1..=h.min(5));
            let kw = r.gen_range(1..=w.min(5));
            let stride = (r.gen_range(1..3), r.gen_range(1..3));
            s.insert("x", random_tensor(&mut r, &[n, h, w, c], 1.0));
            s.insert("f", random_tensor(&mut r, &[kh, kw, c, o], 1.0));
            check_gradients(&s, PER_TENSOR, seed, |t, p| {
                let y = t.conv2d(p.get("x")?, p.get("f")?, stride, padding)?;
                scalarize(t, y, seed)
            })
        }
        "relu" | "sigmoid" | "tanh" => {
            let shape = [r.gen_range(1..5), r.gen_range(1..6)];
            s.insert("x", if op == "relu" { away_from_zero(&mut r, &shape) } else { random_tensor(&mut r, &shape, 3.0) });
            check_gradients(&s, PER_TENSOR, seed, |t, p| {
                let x = p.get("x")?;
                let y = match op {
                    "relu" => t.relu(x)?,
                    "sigmoid" => t.sigmoid(x)?,
                    _ => t.tanh(x)?,
                };
                scalarize(t, y, seed)
            })
        }
        "elementwise" => {
            let (m, n) = (r.gen_range(1..5), r.gen_range(1..5));
            s.insert("a", random_tensor(&mut r, &[m, n], 1.0));
            s.insert("b", random_tensor(&mut r, &[m, n], 1.0));
            s.insert("bias", random_tensor(&mut r, &[n], 1.0));
            let cols = r.gen_range(1..4);
            s.insert("c", random_tensor(&mut r, &[n, cols], 1.0));
            let k = r.gen_range(-2.0..2.0);
            check_gradients(&s, PER_TENSOR, seed, |t, p| {
                let (a, b) = (p.get("a")?, p.get("b")?);
                let ab = t.mul(a, b)?;
                let d = t.sub(ab, b)?;
                let e = t.add(d, a)?;
                let f = t.scale(e, k)?;
                let g = t.add_bias(f, p.get("bias")?)?;
                let m = t.matmul(g, p.get("c")?)?;
                scalarize(t, m, seed)
            })
        }
        "rows" => {
            let (m, n) = (r.gen_range(2..6), r.gen_range(1..4));
            s.insert("a", random_tensor(&mut r, &[m, n], 1.0));
            s.insert("b", random_tensor(&mut r, &[m, n + 1], 1.0));
            let ids: Vec<usize> = (0..r.gen_range(1..8)).map(|_| r.gen_range(0..m)).collect();
            let start = r.gen_range(0..m);
            let len = r.gen_range(1..=m - start);
            check_gradients(&s, PER_TENSOR, seed, |t, p| {
                let (a, b) = (p.get("a")?, p.get("b")?);
                let cols = t.concat_cols(&[a, b])?;
                let picked = t.gather_rows(cols, &ids)?;
                let sl = t.slice_rows(cols, start, len)?;
                let stacked = t.concat_rows(&[picked, sl])?;
                let rows = t.shape(stacked)[0];
                let flat = t.reshape(stacked, vec![rows * (2 * n + 1)])?;
                scalarize(t, flat, seed)
            })
        }
        "gru_step" => {
            let (b, d, h) = (r.gen_range(1..4), r.gen_range(1..5), r.gen_range(1..5));
            let cell = GruCell::new("gru", d, h);
            cell.init_params(&mut Initializer::new(seed), &mut s);
            randomize(&mut s, &mut r, 0.8);
            s.insert("x", random_tensor(&mut r, &[b, d], 1.0));
            s.insert("h", random_tensor(&mut r, &[b, h], 1.0));
            check_gradients(&s, PER_TENSOR, seed, |t, p| {
                let y = cell.step(t, p, p.get("x")?, p.get("h")?)?;
                scalarize(t, y, seed)
            })
        }
        "lstm_step" => {
            let (b, d, h) = (r.gen_range(1..4), r.gen_range(1..5), r.gen_range(1..5));
            let cell = LstmCell::new("lstm", d, h);
            cell.init_params(&mut Initializer::new(seed), &mut s);
            randomize(&mut s, &mut r, 0.8);
            s.insert("x", random_tensor(&mut r, &[b, d], 1.0));
            s.insert("h", random_tensor(&mut r, &[b, h], 1.0));
            s.insert("c", random_tensor(&mut r, &[b, h], 1.0));
            check_gradients(&s, PER_TENSOR, seed, |t, p| {
                let (hn, cn) = cell.step(t, p, p.get("x")?, p.get("h")?, p.get("c")?)?;
                let a = scalarize(t, hn, seed)?;
                let b = scalarize(t, cn, seed + 1)?;
                t.add(a, b)
            })
        }
        "softmax_cross_entropy" => {
            let (rows, classes) = (r.gen_range(1..6), r.gen_range(2..7));
            s.insert("z", random_tensor(&mut r, &[rows, classes], 3.0));
            let targets: Vec<usize> = (0..rows).map(|_| r.gen_range(0..classes)).collect();
            let mut mask: Vec<bool> = (0..rows).map(|_| r.gen_bool(0.7)).collect();
            mask[r.gen_range(0..rows)] = true;
            check_gradients(&s, PER_TENSOR, seed, |t, p| t.softmax_cross_entropy(p.get("z")?, &targets, &mask))
        }
        "sigmoid_bce" => {
            let n = r.gen_range(1..8);
            s.insert("z", random_tensor(&mut r, &[n, 1], 4.0));
            let targets: Vec<f64> = (0..n).map(|_| if r.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
            let mut mask: Vec<bool> = (0..n).map(|_| r.gen_bool(0.7)).collect();
            mask[r.gen_range(0..n)] = true;
            check_gradients(&s, PER_TENSOR, seed, |t, p| t.sigmoid_bce(p.get("z")?, &targets, &mask))
        }
        "composite_lm" => composite(seed, &mut r, false),
        "composite_seg" => composite(seed, &mut r, true),
        other => panic!("unknown op {other}"),
    }
}

/// Embedder → recurrent network → head → loss, over a padded batch of two
/// sequences. The LM variant uses a CNN embedder, a GRU and softmax
/// cross-entropy; the segmentation variant a mixed embedder, a BiLSTM and
/// sigmoid cross-entropy.
fn composite(seed: u64, r: &mut impl Rng, seg: bool) -> GradReport {
    let chars = ['甲', '乙', '丙', '丁'];
    let atlas = random_atlas(&chars, 12, seed);
    let kind = if seg { EmbedderKind::Mixed } else { EmbedderKind::Cnn };
    let cfg = EmbedderConfig {
        kind,
        dim: 4,
        resolution: 12,
        conv: vec![ConvLayerSpec::new(3, 3, 2), ConvLayerSpec::new(2, 3, 2)],
        oov_glyphs: false,
    };
    let num_ids = 8;
    let embedder = Embedder::new(cfg, num_ids).unwrap();
    let mut s = ParamStore::<f64>::new();
    let mut init = Initializer::new(seed);
    embedder.init_params(&mut init, &mut s);
    randomize(&mut s, r, 0.6);

    // two sequences, lengths 3 and 2, time-major with one padded slot
    let (steps, batch) = (3, 2);
    let lengths = [3, 2];
    let mut eb = EmbedBatch::default();
    let mut mask = Vec::new();
    for t in 0..steps {
        for &len in &lengths {
            if t < len {
                let id = r.gen_range(4..num_ids);
                let j = JitterSpec::new(r.gen_range(-2..=2), r.gen_range(-2..=2)).unwrap();
                eb.push(id, embedder.glyph_key(id, Some(chars[id - 4]), j));
                mask.push(true);
            } else {
                eb.push(0, GlyphKey::BLANK);
                mask.push(false);
            }
        }
    }
    let hidden = 3;
    if seg {
        let fw = LstmCell::new("fw", 4, hidden);
        let bw = LstmCell::new("bw", 4, hidden);
        let head = Linear::new("head", 2 * hidden, 1);
        fw.init_params(&mut init, &mut s);
        bw.init_params(&mut init, &mut s);
        head.init_params(&mut init, &mut s);
        randomize(&mut s, r, 0.6);
        let targets: Vec<f64> = (0..steps * batch).map(|_| if r.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let mut rev = vec![0; steps * batch];
        for b in 0..batch {
            for t in 0..steps {
                let src = if t < lengths[b] { lengths[b] - 1 - t } else { t };
                rev[t * batch + b] = src * batch + b;
            }
        }
        check_gradients(&s, 6, seed, |t, p| {
            let x = embedder.forward(t, p, &eb, Some(&atlas))?;
            let f = run_lstm(t, p, &fw, x, steps, batch)?;
            let xr = t.gather_rows(x, &rev)?;
            let br = run_lstm(t, p, &bw, xr, steps, batch)?;
            let bk = t.gather_rows(br, &rev)?;
            let h = t.concat_cols(&[f, bk])?;
            let z = head.forward(t, p, h)?;
            t.sigmoid_bce(z, &targets, &mask)
        })
    } else {
        let gru = GruCell::new("gru", 4, hidden);
        let proj = Linear::new("proj", hidden, num_ids);
        gru.init_params(&mut init, &mut s);
        proj.init_params(&mut init, &mut s);
        randomize(&mut s, r, 0.6);
        let targets: Vec<usize> = (0..steps * batch).map(|_| r.gen_range(0..num_ids)).collect();
        check_gradients(&s, 6, seed, |t, p| {
            let x = embedder.forward(t, p, &eb, Some(&atlas))?;
            let h = run_gru(t, p, &gru, x, steps, batch)?;
            let z = proj.forward(t, p, h)?;
            t.softmax_cross_entropy(z, &targets, &mask)
        })
    }
}

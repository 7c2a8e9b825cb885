//! Norms of the two branches of a mixed embedder, and their histogram.

use std::fmt::Write as _;

use thiserror::Error;

use crate::corpus::Vocab;
use crate::embed::{EmbedBatch, Embedder, EmbedderKind};
use crate::glyph::{GlyphAtlas, JitterSpec};
use crate::tensor::{ParamStore, Tape, TensorError};

pub const DEFAULT_BINS: usize = 50;
const CHUNK: usize = 256;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("norm analysis needs a mixed embedder, got {0}")]
    NotMixed(EmbedderKind),
    #[error("bins must be at least 1")]
    NoBins,
    #[error("invalid histogram range [{0}, {1}]")]
    Range(f64, f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormRecord {
    pub ch: char,
    pub id_norm: f64,
    pub glyph_norm: f64,
}

fn l2(v: &[f32]) -> f64 {
    v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt()
}

/// One record per content character of `vocab`, in id order.
pub fn embedding_norms(embedder: &Embedder, params: &ParamStore, vocab: &Vocab, atlas: &GlyphAtlas) -> Result<Vec<NormRecord>, AnalysisError> {
    if embedder.config.kind != EmbedderKind::Mixed {
        return Err(AnalysisError::NotMixed(embedder.config.kind));
    }
    let chars: Vec<char> = vocab.content_chars().collect();
    let k = embedder.dim();
    let mut out = Vec::with_capacity(chars.len());
    for chunk in chars.chunks(CHUNK) {
        let mut batch = EmbedBatch::default();
        for &c in chunk {
            let id = vocab.encode(c);
            batch.push(id, embedder.glyph_key(id, Some(c), JitterSpec::IDENTITY));
        }
        let mut tape = Tape::new();
        let p = params.bind(&mut tape);
        let (id, glyph) = embedder.forward_parts(&mut tape, &p, &batch, Some(atlas))?;
        let (id, glyph) = (id.expect("mixed has an id branch"), glyph.expect("mixed has a glyph branch"));
        for (i, &ch) in chunk.iter().enumerate() {
            out.push(NormRecord {
                ch,
                id_norm: l2(&tape.value(id)[i * k..(i + 1) * k]),
                glyph_norm: l2(&tape.value(glyph)[i * k..(i + 1) * k]),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub id_count: usize,
    pub glyph_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormHistogram {
    pub bins: Vec<HistogramBin>,
}

impl NormHistogram {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_lo,bin_hi,id_count,glyph_count\n");
        for b in &self.bins {
            writeln!(s, "{:.6},{:.6},{},{}", b.lo, b.hi, b.id_count, b.glyph_count).unwrap();
        }
        s
    }
}

/// Equal-width bins over `range`, or `[0, largest norm]` when `range` is
/// `None`. Values outside the range fall into the nearest edge bin, so both
/// columns always sum to the record count.
pub fn export_norm_histogram(records: &[NormRecord], bins: usize, range: Option<(f64, f64)>) -> Result<NormHistogram, AnalysisError> {
    if bins == 0 {
        return Err(AnalysisError::NoBins);
    }
    let (lo, hi) = match range {
        Some(r) => r,
        None => {
            let max = records.iter().flat_map(|r| [r.id_norm, r.glyph_norm]).fold(0.0, f64::max);
            (0.0, if max > 0.0 { max } else { 1.0 })
        }
    };
    if !(lo.is_finite() && hi.is_finite() && hi > lo) {
        return Err(AnalysisError::Range(lo, hi));
    }
    let width = (hi - lo) / bins as f64;
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|i| HistogramBin {
            lo: lo + width * i as f64,
            hi: if i + 1 == bins { hi } else { lo + width * (i + 1) as f64 },
            id_count: 0,
            glyph_count: 0,
        })
        .collect();
    let slot = |v: f64| (((v - lo) / width).floor().max(0.0) as usize).min(bins - 1);
    for r in records {
        out[slot(r.id_norm)].id_count += 1;
        out[slot(r.glyph_norm)].glyph_count += 1;
    }
    Ok(NormHistogram { bins: out })
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormSummary {
    pub median_id: f64,
    pub median_glyph: f64,
}

impl NormSummary {
    pub fn from_records(records: &[NormRecord]) -> Option<Self> {
        Some(Self {
            median_id: median(records.iter().map(|r| r.id_norm).collect())?,
            median_glyph: median(records.iter().map(|r| r.glyph_norm).collect())?,
        })
    }

    pub fn report(&self) -> String {
        let order = if self.median_glyph < self.median_id {
            "glyph norms are smaller than id norms"
        } else if self.median_glyph > self.median_id {
            "glyph norms are larger than id norms"
        } else {
            "glyph and id norms have equal medians"
        };
        format!("median id_norm={:.4} median glyph_norm={:.4}: {order}", self.median_id, self.median_glyph)
    }
}

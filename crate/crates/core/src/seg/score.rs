use thiserror::Error;

use crate::corpus::SegmentedSentence;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ScoreError {
    #[error("{pred} predicted sentences but {gold} gold sentences")]
    CountMismatch { pred: usize, gold: usize },
    #[error("sentence {index}: predicted text differs from gold text")]
    TextMismatch { index: usize },
}

/// Word-level precision, recall and F1 as percentages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub pred_count: usize,
    pub gold_count: usize,
}

/// Harmonic mean, or 0 when both inputs are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

impl SegScore {
    pub fn from_counts(tp: usize, pred_count: usize, gold_count: usize) -> Self {
        let pct = |n: usize, d: usize| if d == 0 { 0.0 } else { 100.0 * n as f64 / d as f64 };
        let precision = pct(tp, pred_count);
        let recall = pct(tp, gold_count);
        Self { precision, recall, f1: f1_score(precision, recall), tp, pred_count, gold_count }
    }
}

/// Half-open character spans `[start, end)` of every word.
pub fn word_spans(s: &SegmentedSentence) -> Vec<(usize, usize)> {
    let mut start = 0;
    s.words
        .iter()
        .map(|w| {
            let end = start + w.chars().count();
            let span = (start, end);
            start = end;
            span
        })
        .collect()
}

/// Micro-averaged exact-span scoring over a corpus.
pub fn score_segmentation(pred: &[SegmentedSentence], gold: &[SegmentedSentence]) -> Result<SegScore, ScoreError> {
    if pred.len() != gold.len() {
        return Err(ScoreError::CountMismatch { pred: pred.len(), gold: gold.len() });
    }
    let (mut tp, mut pred_count, mut gold_count) = (0, 0, 0);
    for (index, (p, g)) in pred.iter().zip(gold).enumerate() {
        if !p.words.iter().flat_map(|w| w.chars()).eq(g.words.iter().flat_map(|w| w.chars())) {
            return Err(ScoreError::TextMismatch { index });
        }
        let ps = word_spans(p);
        let gs = word_spans(g);
        pred_count += ps.len();
        gold_count += gs.len();
        // both lists are strictly increasing in start
        let (mut i, mut j) = (0, 0);
        while i < ps.len() && j < gs.len() {
            match ps[i].0.cmp(&gs[j].0) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    tp += usize::from(ps[i].1 == gs[j].1);
                    i += 1;
                    j += 1;
                }
            }
        }
    }
    Ok(SegScore::from_counts(tp, pred_count, gold_count))
}

use std::fmt;

use super::{CorpusError, SegmentedSentence, Sentence};

/// `labels[i]` is true iff a word boundary follows character `i`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BoundaryLabeling {
    labels: Vec<bool>,
}

impl BoundaryLabeling {
    pub fn new(labels: Vec<bool>) -> Self {
        Self { labels }
    }

    pub fn from_bits(bits: &[u8]) -> Self {
        Self { labels: bits.iter().map(|&b| b != 0).collect() }
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn bits(&self) -> Vec<u8> {
        self.labels.iter().map(|&b| b as u8).collect()
    }
}

impl fmt::Display for BoundaryLabeling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, &b) in self.labels.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

/// 1 after the last character of every word, 0 inside words.
pub fn label_boundaries(s: &SegmentedSentence) -> Result<BoundaryLabeling, CorpusError> {
    if s.words.is_empty() {
        return Err(CorpusError::EmptySentence);
    }
    let mut labels = Vec::with_capacity(s.char_count());
    for (index, w) in s.words.iter().enumerate() {
        let n = w.chars().count();
        if n == 0 {
            return Err(CorpusError::EmptyWord { index });
        }
        labels.extend(std::iter::repeat_n(false, n - 1));
        labels.push(true);
    }
    Ok(BoundaryLabeling { labels })
}

/// Splits after every 1. A trailing 0 is treated as 1.
pub fn decode_words(s: &Sentence, labels: &BoundaryLabeling) -> Result<SegmentedSentence, CorpusError> {
    if s.len() != labels.len() {
        return Err(CorpusError::LengthMismatch { chars: s.len(), labels: labels.len() });
    }
    let mut words = Vec::new();
    let mut current = String::new();
    let last = s.len() - 1;
    for (i, (&c, &b)) in s.chars().iter().zip(labels.labels()).enumerate() {
        current.push(c);
        if b || i == last {
            words.push(std::mem::take(&mut current));
        }
    }
    Ok(SegmentedSentence { words })
}

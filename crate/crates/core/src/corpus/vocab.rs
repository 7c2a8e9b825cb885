//! Frequency-ranked character vocabulary with reserved ids.
//!
//! File format: a header of `#`-prefixed lines, then one
//! `character<TAB>id<TAB>frequency` line per content character in id order.
//!
//! ```text
//! #glyphembed-vocab	1
//! #max_size	4000
//! #reserved	<pad>	0
//! #reserved	<unk>	1
//! #reserved	<bos>	2
//! #reserved	<eos>	3
//! 的	4	52113
//! ```
#![allow(clippy::tabs_in_doc_comments)]

use std::collections::HashMap;
use std::fmt::Write as _;

use super::{CorpusError, Sentence};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
/// Number of reserved ids preceding the content characters.
pub const RESERVED: usize = 4;
pub const DEFAULT_MAX_VOCAB: usize = 4000;

const RESERVED_NAMES: [&str; RESERVED] = ["<pad>", "<unk>", "<bos>", "<eos>"];
const FORMAT_TAG: &str = "#glyphembed-vocab\t1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    max_size: usize,
    content: Vec<(char, u64)>,
    index: HashMap<char, usize>,
}

/// Counts characters and keeps the `max_size` most frequent, ties broken by
/// code point.
pub fn build_vocab<'a>(sentences: impl IntoIterator<Item = &'a Sentence>, max_size: usize) -> Result<Vocab, CorpusError> {
    let mut counts: HashMap<char, u64> = HashMap::new();
    for s in sentences {
        for &c in s.chars() {
            *counts.entry(c).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let mut ranked: Vec<(char, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(max_size);
    Ok(Vocab::from_ranked(ranked, max_size))
}

impl Vocab {
    fn from_ranked(content: Vec<(char, u64)>, max_size: usize) -> Self {
        let index = content.iter().enumerate().map(|(i, &(c, _))| (c, RESERVED + i)).collect();
        Self { max_size, content, index }
    }

    /// Total ids, reserved included.
    pub fn len(&self) -> usize {
        RESERVED + self.content.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn content_len(&self) -> usize {
        self.content.len()
    }

    pub fn max_size(&self) -> usize {
        self.max_size
    }

    pub fn encode(&self, c: char) -> usize {
        self.index.get(&c).copied().unwrap_or(UNK)
    }

    pub fn encode_sentence(&self, s: &Sentence) -> Vec<usize> {
        s.chars().iter().map(|&c| self.encode(c)).collect()
    }

    /// The content character behind `id`, `None` for reserved or out-of-range ids.
    pub fn char_of(&self, id: usize) -> Option<char> {
        id.checked_sub(RESERVED).and_then(|i| self.content.get(i)).map(|&(c, _)| c)
    }

    pub fn frequency(&self, id: usize) -> Option<u64> {
        id.checked_sub(RESERVED).and_then(|i| self.content.get(i)).map(|&(_, f)| f)
    }

    /// Content characters in id order.
    pub fn content_chars(&self) -> impl Iterator<Item = char> + '_ {
        self.content.iter().map(|&(c, _)| c)
    }

    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{FORMAT_TAG}").unwrap();
        writeln!(out, "#max_size\t{}", self.max_size).unwrap();
        for (id, name) in RESERVED_NAMES.iter().enumerate() {
            writeln!(out, "#reserved\t{name}\t{id}").unwrap();
        }
        for (i, (c, f)) in self.content.iter().enumerate() {
            writeln!(out, "{c}\t{}\t{f}", RESERVED + i).unwrap();
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, CorpusError> {
        let bad = |msg: String| CorpusError::VocabFormat(msg);
        let mut lines = text.lines();
        if lines.next() != Some(FORMAT_TAG) {
            return Err(bad("missing format header".into()));
        }
        let mut max_size = None;
        let mut reserved = 0;
        let mut content = Vec::new();
        for (n, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split('\t').collect();
            match fields.as_slice() {
                ["#max_size", v] => max_size = Some(v.parse().map_err(|_| bad(format!("bad max_size {v:?}")))?),
                ["#reserved", name, id] => {
                    let want = RESERVED_NAMES.get(reserved).ok_or_else(|| bad("too many reserved ids".into()))?;
                    if name != want || *id != reserved.to_string() {
                        return Err(bad(format!("reserved entry {name} {id} does not match {want} {reserved}")));
                    }
                    reserved += 1;
                }
                [c, id, freq] => {
                    let mut it = c.chars();
                    let (Some(ch), None) = (it.next(), it.next()) else {
                        return Err(bad(format!("line {}: key {c:?} is not one character", n + 2)));
                    };
                    let id: usize = id.parse().map_err(|_| bad(format!("line {}: bad id", n + 2)))?;
                    if id != RESERVED + content.len() {
                        return Err(bad(format!("line {}: id {id} breaks dense ordering", n + 2)));
                    }
                    let freq: u64 = freq.parse().map_err(|_| bad(format!("line {}: bad frequency", n + 2)))?;
                    content.push((ch, freq));
                }
                _ => return Err(bad(format!("line {}: unrecognized {line:?}", n + 2))),
            }
        }
        if reserved != RESERVED {
            return Err(bad(format!("expected {RESERVED} reserved ids, found {reserved}")));
        }
        let max_size = max_size.ok_or_else(|| bad("missing #max_size".into()))?;
        if content.len() > max_size {
            return Err(bad(format!("{} entries exceed max_size {max_size}", content.len())));
        }
        let v = Self::from_ranked(content, max_size);
        if v.index.len() != v.content.len() {
            return Err(bad("duplicate character".into()));
        }
        Ok(v)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<(), CorpusError> {
        std::fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, CorpusError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Fraction of character tokens in `sentences` that map to UNK.
    pub fn unk_rate<'a>(&self, sentences: impl IntoIterator<Item = &'a Sentence>) -> f64 {
        let (mut unk, mut total) = (0usize, 0usize);
        for s in sentences {
            for &c in s.chars() {
                total += 1;
                unk += usize::from(!self.index.contains_key(&c));
            }
        }
        if total == 0 {
            0.0
        } else {
            unk as f64 / total as f64
        }
    }
}

//! Bakeoff-format corpora, the capped character vocabulary, and per-character
//! word-boundary labels.

mod labels;
mod vocab;

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use thiserror::Error;

pub use labels::{decode_words, label_boundaries, BoundaryLabeling};
pub use vocab::{build_vocab, Vocab, BOS, DEFAULT_MAX_VOCAB, EOS, PAD, RESERVED, UNK};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: invalid UTF-8")]
    InvalidUtf8 { line: usize },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("sentence is empty")]
    EmptySentence,
    #[error("sentence contains whitespace {0:?}")]
    Whitespace(char),
    #[error("word {index} is empty")]
    EmptyWord { index: usize },
    #[error("{chars} characters but {labels} labels")]
    LengthMismatch { chars: usize, labels: usize },
    #[error("vocab file: {0}")]
    VocabFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A nonempty run of characters with no whitespace.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Sentence {
    chars: Vec<char>,
}

impl Sentence {
    pub fn new(chars: Vec<char>) -> Result<Self, CorpusError> {
        if chars.is_empty() {
            return Err(CorpusError::EmptySentence);
        }
        if let Some(&c) = chars.iter().find(|c| c.is_whitespace()) {
            return Err(CorpusError::Whitespace(c));
        }
        Ok(Self { chars })
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }
}

impl std::str::FromStr for Sentence {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::new(s.chars().collect())
    }
}

impl fmt::Display for Sentence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.chars.iter().try_for_each(|c| write!(f, "{c}"))
    }
}

/// A sentence split into words.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SegmentedSentence {
    pub words: Vec<String>,
}

impl SegmentedSentence {
    pub fn new(words: Vec<String>) -> Self {
        Self { words }
    }

    /// Splits a whitespace-separated line; `None` for a blank line.
    pub fn from_line(line: &str) -> Option<Self> {
        let words: Vec<String> = line.split_whitespace().map(str::to_string).collect();
        (!words.is_empty()).then_some(Self { words })
    }

    /// The raw sentence the words concatenate to.
    pub fn sentence(&self) -> Result<Sentence, CorpusError> {
        Sentence::new(self.words.iter().flat_map(|w| w.chars()).collect())
    }

    pub fn char_count(&self) -> usize {
        self.words.iter().map(|w| w.chars().count()).sum()
    }

    /// Words joined by single spaces.
    pub fn to_line(&self) -> String {
        self.words.join(" ")
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CorpusStats {
    pub sentences: usize,
    pub words: usize,
    pub chars: usize,
    pub skipped_blank_lines: usize,
}

fn decode_lines(reader: impl BufRead) -> impl Iterator<Item = Result<(usize, String), CorpusError>> {
    reader.split(b'\n').enumerate().map(|(i, bytes)| {
        let mut bytes = bytes?;
        if bytes.last() == Some(&b'\r') {
            bytes.pop();
        }
        if i == 0 && bytes.starts_with(&[0xEF, 0xBB, 0xBF]) {
            bytes.drain(..3);
        }
        String::from_utf8(bytes).map(|s| (i + 1, s)).map_err(|_| CorpusError::InvalidUtf8 { line: i + 1 })
    })
}

/// Reads a whitespace-segmented corpus, one sentence per line. Blank lines
/// are skipped and counted.
pub fn parse_bakeoff(reader: impl BufRead) -> Result<(Vec<SegmentedSentence>, CorpusStats), CorpusError> {
    let mut out = Vec::new();
    let mut stats = CorpusStats::default();
    for line in decode_lines(reader) {
        let (_, line) = line?;
        match SegmentedSentence::from_line(&line) {
            Some(s) => {
                stats.sentences += 1;
                stats.words += s.words.len();
                stats.chars += s.char_count();
                out.push(s);
            }
            None => stats.skipped_blank_lines += 1,
        }
    }
    Ok((out, stats))
}

pub fn parse_bakeoff_file(path: impl AsRef<Path>) -> Result<(Vec<SegmentedSentence>, CorpusStats), CorpusError> {
    parse_bakeoff(BufReader::new(File::open(path)?))
}

/// Reads raw lines, keeping blank lines as `None` so output can stay line-aligned.
/// Whitespace inside a line is dropped.
pub fn parse_raw(reader: impl BufRead) -> Result<Vec<Option<Sentence>>, CorpusError> {
    decode_lines(reader)
        .map(|line| {
            let (_, line) = line?;
            let chars: Vec<char> = line.chars().filter(|c| !c.is_whitespace()).collect();
            Ok((!chars.is_empty()).then_some(Sentence { chars }))
        })
        .collect()
}

/// Splits off the last `fraction` of sentences (at least one when there are
/// two or more) as a development set.
pub fn split_dev<T: Clone>(items: &[T], fraction: f64) -> (Vec<T>, Vec<T>) {
    let n = items.len();
    let mut dev = ((n as f64) * fraction).round() as usize;
    if fraction > 0.0 && n >= 2 {
        dev = dev.clamp(1, n - 1);
    }
    let dev = dev.min(n);
    (items[..n - dev].to_vec(), items[n - dev..].to_vec())
}

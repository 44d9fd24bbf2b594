use serde::{Deserialize, Serialize};

use crate::error::{Result, VistexError};
use crate::linalg::Mat;

/// Reserved vocabulary slot for the no-object word.
pub const NO_OBJECT_TOKEN: usize = 0;
/// Every name missing from the vocabulary maps here.
pub const OOV_TOKEN: usize = 1;

/// Word list built at pretraining time: two reserved slots, then one word
/// per base class name.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub words: Vec<String>,
}

impl Vocab {
    pub fn new<S: AsRef<str>>(base_names: &[S], vocab_size: usize) -> Result<Self> {
        let mut words = vec!["[none]".to_string(), "[oov]".to_string()];
        for n in base_names {
            let n = n.as_ref();
            if words.iter().any(|w| w == n) {
                return Err(VistexError::InvalidConfig(format!("duplicate vocabulary word {n}")));
            }
            words.push(n.to_string());
        }
        if words.len() > vocab_size {
            return Err(VistexError::InvalidConfig(format!(
                "{} words exceed vocab_size {vocab_size}",
                words.len()
            )));
        }
        Ok(Self { words })
    }

    pub fn lookup(&self, name: &str) -> usize {
        self.words
            .iter()
            .skip(2)
            .position(|w| w == name)
            .map_or(OOV_TOKEN, |i| i + 2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenKind {
    Text,
    Visual,
}

/// Prompt rows plus per-row class assignment (`None` is the no-object
/// sentinel).
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub rows: Mat,
    pub class_map: Vec<Option<usize>>,
    pub kinds: Vec<TokenKind>,
    /// Vocabulary index of text rows; embedding gradients flow through these.
    pub vocab_ids: Vec<Option<usize>>,
}

impl TokenSequence {
    pub fn empty(width: usize) -> Self {
        Self {
            rows: Mat::zeros(0, width),
            class_map: Vec::new(),
            kinds: Vec::new(),
            vocab_ids: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows.rows == 0
    }

    pub fn width(&self) -> usize {
        self.rows.cols
    }

    pub fn push(&mut self, row: &[f64], class: Option<usize>, kind: TokenKind, vocab_id: Option<usize>) -> Result<()> {
        if row.len() != self.rows.cols {
            return Err(VistexError::Shape(format!(
                "token width {} != {}",
                row.len(),
                self.rows.cols
            )));
        }
        self.rows.data.extend_from_slice(row);
        self.rows.rows += 1;
        self.class_map.push(class);
        self.kinds.push(kind);
        self.vocab_ids.push(vocab_id);
        Ok(())
    }

    /// Rows reordered so that new row `i` is old row `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut out = Self::empty(self.width());
        for &p in perm {
            out.push(self.rows.row(p), self.class_map[p], self.kinds[p], self.vocab_ids[p])
                .expect("same width");
        }
        out
    }

    pub fn classes(&self) -> Vec<usize> {
        let mut c: Vec<usize> = self.class_map.iter().flatten().copied().collect();
        c.sort_unstable();
        c.dedup();
        c
    }
}

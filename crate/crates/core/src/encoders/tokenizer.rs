//! Closed-vocabulary whitespace tokenizer.
//!
//! The vocabulary is a plain-text `word<TAB>id` table; the toy domain is
//! small enough that every caption word must appear in it. Ids 0 and 1 are
//! reserved for the pad and end-of-sequence tokens.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

/// Token id used to pad captions up to the configured length.
pub const PAD_ID: usize = 0;
/// Token id appended after the last caption word.
pub const EOS_ID: usize = 1;

const PAD_WORD: &str = "<pad>";
const EOS_WORD: &str = "<eos>";

/// A caption encoded against a [`Vocab`]: word ids, then the end token, then
/// padding; `eos_position` indexes the end token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub eos_position: usize,
}

/// Closed word→id table.
#[derive(Debug, Clone)]
pub struct Vocab {
    map: HashMap<String, usize>,
    size: usize,
}

impl Vocab {
    /// Parses `word<TAB>id` lines. Requires the reserved `<pad>`/`<eos>`
    /// entries at ids 0/1 and rejects duplicate words or ids.
    pub fn from_tsv(text: &str) -> Result<Vocab> {
        let mut map = HashMap::new();
        let mut seen_ids = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            let (word, id) = line.split_once('\t').ok_or_else(|| {
                Error::Config(format!("vocab line {}: expected `word<TAB>id`, got `{line}`", lineno + 1))
            })?;
            let id: usize = id.trim().parse().map_err(|_| {
                Error::Config(format!("vocab line {}: bad id `{id}`", lineno + 1))
            })?;
            if seen_ids.contains(&id) {
                return Err(Error::Config(format!("vocab id {id} assigned twice")));
            }
            if map.insert(word.to_string(), id).is_some() {
                return Err(Error::Config(format!("vocab word `{word}` listed twice")));
            }
            seen_ids.push(id);
        }
        let size = seen_ids.iter().max().map_or(0, |m| m + 1);
        let vocab = Vocab { map, size };
        if vocab.map.get(PAD_WORD) != Some(&PAD_ID) {
            return Err(Error::Config(format!("vocab must map {PAD_WORD} to {PAD_ID}")));
        }
        if vocab.map.get(EOS_WORD) != Some(&EOS_ID) {
            return Err(Error::Config(format!("vocab must map {EOS_WORD} to {EOS_ID}")));
        }
        Ok(vocab)
    }

    pub fn from_path(path: &Path) -> Result<Vocab> {
        Vocab::from_tsv(&std::fs::read_to_string(path)?)
    }

    /// The vocabulary shipped with the crate, covering the synthetic
    /// benchmark's colors, shapes, and caption-template words.
    pub fn builtin() -> Vocab {
        Vocab::from_tsv(include_str!("../../assets/vocab.tsv"))
            .expect("bundled vocabulary is well-formed")
    }

    /// One past the largest id; embedding tables use this as row count.
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.map
            .get(word)
            .copied()
            .ok_or_else(|| Error::Vocabulary { word: word.to_string() })
    }

    pub fn contains(&self, word: &str) -> bool {
        self.map.contains_key(word)
    }
}

/// Encodes a lowercased, whitespace-split caption: word ids, the end token,
/// then pad ids up to `max_text_len`.
pub fn tokenize(text: &str, vocab: &Vocab, max_text_len: usize) -> Result<TokenSequence> {
    let mut ids = Vec::with_capacity(max_text_len);
    for word in text.to_lowercase().split_whitespace() {
        ids.push(vocab.id(word)?);
    }
    if ids.len() + 1 > max_text_len {
        return Err(Error::Contract(format!(
            "caption `{text}` needs {} tokens but max_text_len is {max_text_len}",
            ids.len() + 1
        )));
    }
    let eos_position = ids.len();
    ids.push(EOS_ID);
    ids.resize(max_text_len, PAD_ID);
    Ok(TokenSequence { ids, eos_position })
}

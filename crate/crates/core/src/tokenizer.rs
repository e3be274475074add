//! Word-level tokenizer and fixed-length encoding with an attention mask.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::corpus::LabeledDataset;
use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const MASK: u32 = 2;
pub const RESERVED: [&str; 3] = ["<pad>", "<unk>", "<mask>"];

/// Default fixed encoding length for hidden-state features.
pub const DEFAULT_MAX_LEN: usize = 50;
/// Default memory guard for the unpadded encoding used by attention features.
pub const DEFAULT_UNBOUNDED_CAP: usize = 128;

/// Lowercases and splits on whitespace; every character that is neither
/// alphanumeric nor whitespace becomes a token of its own.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for c in text.chars().flat_map(char::to_lowercase) {
        if c.is_alphanumeric() {
            current.push(c);
            continue;
        }
        if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
        if !c.is_whitespace() {
            tokens.push(c.to_string());
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), id as u32).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn build(corpus: &LabeledDataset, max_size: usize) -> Result<Self> {
        Self::from_texts(corpus.texts(), max_size)
    }

    /// Most frequent tokens first, ties broken lexicographically, truncated so
    /// the total size including reserved ids is at most `max_size`.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>, max_size: usize) -> Result<Self> {
        if max_size < RESERVED.len() + 1 {
            return Err(Error::invalid(format!("vocabulary max size {max_size} < 4")));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut n_texts = 0;
        for text in texts {
            n_texts += 1;
            for tok in tokenize(text) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if n_texts == 0 || counts.is_empty() {
            return Err(Error::invalid("cannot build a vocabulary from an empty corpus"));
        }
        for r in RESERVED {
            counts.remove(r);
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size - RESERVED.len());
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(t, _)| t))
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn ids(&self, text: &str) -> Vec<u32> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// Space-joined tokens for `ids`, skipping padding.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| id != PAD)
            .filter_map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// `token<TAB>id` lines, reserved ids first.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (id, t) in self.tokens.iter().enumerate() {
            writeln!(out, "{t}\t{id}").expect("string write");
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut tokens = Vec::new();
        for (line_no, line) in content.lines().enumerate() {
            let err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: line_no + 1,
                msg,
            };
            let (tok, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| err("expected `token<TAB>id`".into()))?;
            let id: usize = id.parse().map_err(|_| err(format!("bad id `{id}`")))?;
            if id != tokens.len() {
                return Err(err(format!("id {id} out of sequence, expected {}", tokens.len())));
            }
            if id < RESERVED.len() && tok != RESERVED[id] {
                return Err(err(format!("reserved id {id} must be `{}`", RESERVED[id])));
            }
            tokens.push(tok.to_string());
        }
        if tokens.len() < RESERVED.len() {
            return Err(Error::Format(format!("{}: missing reserved tokens", path.display())));
        }
        Self::from_tokens(tokens)
    }
}

/// Token ids with a binary attention mask (1 = real token, 0 = padding).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub mask: Vec<u8>,
    /// Token count before padding or cropping.
    pub original_len: usize,
}

impl TokenSequence {
    /// Unpadded sequence over the given ids.
    pub fn from_ids(ids: Vec<u32>) -> Self {
        let n = ids.len();
        TokenSequence {
            mask: vec![1; n],
            original_len: n,
            ids,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn real_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }

    /// The sequence without its padding tail.
    pub fn real_prefix(&self) -> TokenSequence {
        let n = self.real_len();
        TokenSequence {
            ids: self.ids[..n].to_vec(),
            mask: vec![1; n],
            original_len: self.original_len,
        }
    }
}

/// Pads with PAD or crops the tail so the result has exactly `max_len` ids.
pub fn encode(text: &str, vocab: &Vocabulary, max_len: usize) -> Result<TokenSequence> {
    if max_len == 0 {
        return Err(Error::invalid("max_len must be >= 1"));
    }
    let mut ids = vocab.ids(text);
    let original_len = ids.len();
    let real = original_len.min(max_len);
    ids.truncate(max_len);
    ids.resize(max_len, PAD);
    let mut mask = vec![0u8; max_len];
    mask[..real].fill(1);
    Ok(TokenSequence {
        ids,
        mask,
        original_len,
    })
}

/// Unpadded encoding of length `min(token count, cap)`.
pub fn encode_unbounded(text: &str, vocab: &Vocabulary, cap: usize) -> Result<TokenSequence> {
    if cap < 16 {
        return Err(Error::invalid(format!("unbounded cap must be >= 16, got {cap}")));
    }
    let mut ids = vocab.ids(text);
    let original_len = ids.len();
    ids.truncate(cap);
    Ok(TokenSequence {
        mask: vec![1; ids.len()],
        ids,
        original_len,
    })
}

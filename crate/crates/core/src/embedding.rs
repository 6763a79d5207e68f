//! Vocabulary, tokenization, fixed-length sequences and the word
//! embedding matrix `W` (`d x |V|`, one column per token).

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng;
use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
const PAD_TOKEN: &str = "<pad>";
const UNK_TOKEN: &str = "<unk>";

/// Lowercases and splits on whitespace; every non-alphanumeric character
/// becomes a token of its own.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            word.extend(ch.to_lowercase());
            continue;
        }
        if !word.is_empty() {
            tokens.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            tokens.push(ch.to_lowercase().collect());
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

/// Token/id bijection. Ids 0 and 1 are reserved for padding and unknown
/// tokens; real tokens start at 2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    index: HashMap<String, usize>,
    tokens: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self {
            index: HashMap::new(),
            tokens: vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()],
        }
    }
}

impl Vocabulary {
    /// Assigns ids 2, 3, ... in iteration order. Duplicates are rejected.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Self::default();
        for tok in tokens {
            let tok = tok.into();
            if tok.is_empty() || tok.chars().any(|c| c == '\n' || c == '\r') {
                return Err(Error::Data(format!("invalid vocabulary token {tok:?}")));
            }
            if vocab.index.contains_key(&tok) {
                return Err(Error::Data(format!("duplicate vocabulary token {tok:?}")));
            }
            vocab.index.insert(tok.clone(), vocab.tokens.len());
            vocab.tokens.push(tok);
        }
        Ok(vocab)
    }

    /// Size including the two reserved ids.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 2
    }

    pub fn id_of(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token_of(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id_of(t)).collect()
    }

    /// Assigned tokens in id order, without the reserved entries.
    pub fn tokens(&self) -> &[String] {
        &self.tokens[2..]
    }

    /// One token per line; line `i` (0-based) holds id `i + 2`.
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        for tok in self.tokens() {
            writeln!(w, "{tok}")?;
        }
        Ok(())
    }

    pub fn read_from(r: impl BufRead) -> Result<Self> {
        let mut toks = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line.map_err(|e| Error::Data(format!("vocabulary line {}: {e}", n + 1)))?;
            toks.push(line);
        }
        Self::from_tokens(toks)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

/// A sequence of token ids padded or truncated to a fixed length, plus the
/// number of real tokens it holds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaddedSequence {
    pub ids: Vec<usize>,
    pub len: usize,
}

pub fn pad_truncate(ids: &[usize], length: usize) -> Result<PaddedSequence> {
    if length == 0 {
        return Err(Error::Config("sequence length must be at least 1".into()));
    }
    if ids.is_empty() {
        return Err(Error::Data("a sentence must contain at least one token".into()));
    }
    let len = ids.len().min(length);
    let mut out = ids[..len].to_vec();
    out.resize(length, PAD_ID);
    Ok(PaddedSequence { ids: out, len })
}

/// Handle to the embedding matrix inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbeddingTable {
    pub weights: ParamId,
    pub dim: usize,
    pub vocab_size: usize,
}

/// Adds a `d x |V|` matrix with entries uniform in `[-half_range, half_range]`
/// and a zero padding column.
pub fn init_embeddings<R: Rng + ?Sized>(
    store: &mut ParamStore,
    vocab_size: usize,
    dim: usize,
    half_range: f64,
    rng: &mut R,
) -> Result<EmbeddingTable> {
    if dim == 0 {
        return Err(Error::Config("embedding dimension must be positive".into()));
    }
    if !(half_range > 0.0 && half_range.is_finite()) {
        return Err(Error::Config(format!(
            "embedding init range must be positive, got {half_range}"
        )));
    }
    if vocab_size < 2 {
        return Err(Error::Config("vocabulary must hold at least the reserved ids".into()));
    }
    let mut w = Tensor::uniform(vec![dim, vocab_size], half_range, rng)?;
    for r in 0..dim {
        w.data_mut()[r * vocab_size + PAD_ID] = 0.0;
    }
    let weights = store.add("embedding.W", w)?;
    Ok(EmbeddingTable {
        weights,
        dim,
        vocab_size,
    })
}

/// Column `j` of the result is `W[:, ids[j]]`.
pub fn embed(tape: &mut Tape, store: &ParamStore, table: &EmbeddingTable, seq: &PaddedSequence) -> Result<Var> {
    tape.gather_columns(store, table.weights, &seq.ids)
}

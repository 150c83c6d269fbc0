//! Byte-level tokenizer with BOS/EOS framing and right padding.

use crate::error::{Error, Result};

pub const PAD: usize = 256;
pub const BOS: usize = 257;
pub const EOS: usize = 258;
pub const MASK: usize = 259;
pub const SPECIAL_TOKENS: usize = 4;

const INSTRUCT_PREFIX: &str = "Instruct: ";
const QUERY_MARKER: &str = " Query: ";

/// Token ids of one text.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    /// `ids[..instruction_end]` are instruction tokens (BOS included); 0 when
    /// the text carries no instruction.
    pub instruction_end: usize,
    /// Length without padding; `ids[valid_len - 1]` is EOS.
    pub valid_len: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn eos_index(&self) -> usize {
        self.valid_len - 1
    }

    pub fn is_pad(&self, pos: usize) -> bool {
        pos >= self.valid_len
    }

    /// Right-pads with PAD up to `len` tokens.
    pub fn padded(&self, len: usize) -> Result<Self> {
        if len < self.ids.len() {
            return Err(Error::Input(format!("cannot pad {} tokens down to {len}", self.ids.len())));
        }
        let mut ids = self.ids.clone();
        ids.resize(len, PAD);
        Ok(Self { ids, ..self.clone() })
    }
}

/// Tokenizes `text` into `[BOS, bytes.., EOS]`, keeping at most `max_len`
/// tokens (bytes are dropped from the right; EOS is always last).
///
/// Text of the form `Instruct: {task} Query: {query}` gets `instruction_end`
/// pointing one past the `Query: ` marker. The sequence is not padded; use
/// [`TokenSequence::padded`] to batch.
pub fn tokenize(text: &str, max_len: usize) -> Result<TokenSequence> {
    if text.trim().is_empty() {
        return Err(Error::Input("cannot tokenize empty text".into()));
    }
    if max_len < 2 {
        return Err(Error::Config(format!("max_len {max_len} leaves no room for BOS and EOS")));
    }
    let bytes = text.as_bytes();
    let kept = bytes.len().min(max_len - 2);
    let mut ids = Vec::with_capacity(kept + 2);
    ids.push(BOS);
    ids.extend(bytes[..kept].iter().map(|&b| b as usize));
    ids.push(EOS);
    let valid_len = ids.len();

    let instruction_end = instruction_boundary(text)
        .map(|offset| (offset + 1).min(valid_len - 1))
        .unwrap_or(0);
    Ok(TokenSequence { ids, instruction_end, valid_len })
}

/// Byte offset one past the query marker of an instructed text.
fn instruction_boundary(text: &str) -> Option<usize> {
    let rest = text.strip_prefix(INSTRUCT_PREFIX)?;
    let at = rest.find(QUERY_MARKER)?;
    Some(INSTRUCT_PREFIX.len() + at + QUERY_MARKER.len())
}

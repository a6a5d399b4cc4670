use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use super::{NewsItem, TokenSequence};
use crate::error::{Error, Result};
use crate::util;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;
pub const NUM_RESERVED: usize = 5;

pub const PAD_TOKEN: &str = "[PAD]";
pub const UNK_TOKEN: &str = "[UNK]";
pub const CLS_TOKEN: &str = "[CLS]";
pub const SEP_TOKEN: &str = "[SEP]";
pub const MASK_TOKEN: &str = "[MASK]";

const RESERVED: [&str; NUM_RESERVED] = [PAD_TOKEN, UNK_TOKEN, CLS_TOKEN, SEP_TOKEN, MASK_TOKEN];

/// Lowercases and splits on anything that is not alphanumeric.
///
/// The literal marker `[UNK]` (any case) survives as a single token so that
/// detokenized output re-encodes to the same ids.
pub fn normalize_tokens(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let mut tokens = Vec::new();
    let mut current = String::new();
    let mut rest = lower.as_str();
    while let Some(c) = rest.chars().next() {
        if c == '[' && rest.starts_with("[unk]") {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            tokens.push(UNK_TOKEN.to_string());
            rest = &rest["[unk]".len()..];
            continue;
        }
        if c.is_alphanumeric() {
            current.push(c);
        } else if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
        rest = &rest[c.len_utf8()..];
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// Dense token ↔ id mapping; ids `0..5` are the reserved specials.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Keeps tokens seen at least `min_count` times, most frequent first,
    /// ties broken lexicographically.
    pub fn build(items: &[NewsItem], min_count: usize) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::EmptyInput("item list for vocabulary".into()));
        }
        if min_count == 0 {
            return Err(Error::Config("min_count must be >= 1".into()));
        }
        let mut freq: BTreeMap<String, usize> = BTreeMap::new();
        for item in items {
            for tok in normalize_tokens(&item.text) {
                if tok != UNK_TOKEN {
                    *freq.entry(tok).or_default() += 1;
                }
            }
        }
        let mut kept: Vec<(String, usize)> =
            freq.into_iter().filter(|(_, c)| *c >= min_count).collect();
        if kept.is_empty() {
            return Err(Error::InvalidInput(format!(
                "no token occurs at least {min_count} times"
            )));
        }
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_tokens(kept.into_iter().map(|(t, _)| t))
    }

    /// Reserved tokens followed by `tokens` in order.
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        all.extend(tokens);
        Self::from_full_list(all)
    }

    fn from_full_list(tokens: Vec<String>) -> Result<Self> {
        for (id, want) in RESERVED.iter().enumerate() {
            if tokens.get(id).map(String::as_str) != Some(*want) {
                return Err(Error::VocabMismatch(format!(
                    "id {id} must be reserved token {want}"
                )));
            }
        }
        if tokens.len() <= NUM_RESERVED {
            return Err(Error::VocabMismatch("vocabulary has no content tokens".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if tok.is_empty() || tok.contains('\n') {
                return Err(Error::VocabMismatch(format!("invalid token at id {id}")));
            }
            if index.insert(tok.clone(), id).is_some() {
                return Err(Error::VocabMismatch(format!("duplicate token {tok:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    /// Text file body: one token per line, line number = id.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for tok in &self.tokens {
            out.push_str(tok);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_full_list(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        util::write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// SHA-256 of the serialized vocabulary; models record it so that
    /// artifacts built on different vocabularies are never combined.
    pub fn fingerprint(&self) -> String {
        util::sha256_hex(self.to_text().as_bytes())
    }

    /// Encodes `text` as `[CLS] content [SEP]`, keeping at most
    /// `max_len - 2` content tokens.
    pub fn encode(&self, item_id: &str, text: &str, max_len: usize) -> Result<TokenSequence> {
        if max_len < 3 {
            return Err(Error::Config(format!("max_len must be >= 3, got {max_len}")));
        }
        let words = normalize_tokens(text);
        if words.is_empty() {
            return Err(Error::EmptyAfterTokenization(item_id.to_string()));
        }
        let mut ids = Vec::with_capacity(words.len().min(max_len - 2) + 2);
        ids.push(CLS);
        ids.extend(words.iter().take(max_len - 2).map(|w| self.id(w)));
        ids.push(SEP);
        Ok(TokenSequence {
            item_id: item_id.to_string(),
            ids,
        })
    }

    /// Space-joined content tokens of `ids`; CLS/SEP/PAD are dropped.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| !matches!(id, PAD | CLS | SEP))
            .map(|&id| self.token(id).unwrap_or(UNK_TOKEN))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

pub fn tokenize(item: &NewsItem, vocab: &Vocabulary, max_len: usize) -> Result<TokenSequence> {
    vocab.encode(&item.id, &item.text, max_len)
}

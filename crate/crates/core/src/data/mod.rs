//! Corpus ingestion, tokenization, vocabulary, splits and episodic task sampling.

mod corpus;
mod split;
mod tasks;
mod vocab;

pub use corpus::{ingest, ingest_with, DomainCounts, IngestMode, IngestReport, Label, NewsItem, Rejection};
pub use split::{split_stratified, DomainSplit, SplitRatios};
pub use tasks::{sample_tasks, TaskBatch, TaskSampler};
pub use vocab::{
    normalize_tokens, tokenize, Vocabulary, CLS, CLS_TOKEN, MASK, MASK_TOKEN, NUM_RESERVED, PAD,
    PAD_TOKEN, SEP, SEP_TOKEN, UNK, UNK_TOKEN,
};

/// Token ids of one item wrapped as `[CLS] content... [SEP]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub item_id: String,
    pub ids: Vec<usize>,
}

impl TokenSequence {
    /// Content tokens, without the CLS/SEP wrappers.
    pub fn content(&self) -> &[usize] {
        &self.ids[1..self.ids.len() - 1]
    }

    pub fn content_len(&self) -> usize {
        self.ids.len().saturating_sub(2)
    }
}

/// A tokenized, labelled example as the models consume it.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub domain: String,
    pub label: Label,
    pub seq: TokenSequence,
}

impl Example {
    pub fn from_item(item: &NewsItem, vocab: &Vocabulary, max_len: usize) -> crate::Result<Self> {
        Ok(Example {
            id: item.id.clone(),
            domain: item.domain.clone(),
            label: item.label,
            seq: tokenize(item, vocab, max_len)?,
        })
    }
}

/// Tokenizes every item, preserving order.
pub fn examples(items: &[NewsItem], vocab: &Vocabulary, max_len: usize) -> crate::Result<Vec<Example>> {
    items.iter().map(|i| Example::from_item(i, vocab, max_len)).collect()
}

//! Word-level vocabulary and the `<s> query </s> document </s>` packing.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::data::{Document, DocumentStore, Query, QueryStore};
use crate::error::{Error, Result};

pub const CLS: &str = "<s>";
pub const SEP: &str = "</s>";
pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";

pub const CLS_ID: u32 = 0;
pub const SEP_ID: u32 = 1;
pub const PAD_ID: u32 = 2;
pub const UNK_ID: u32 = 3;

const RESERVED: [&str; 4] = [CLS, SEP, PAD, UNK];

/// Default bound on packed sequence length.
pub const DEFAULT_MAX_LEN: usize = 4096;

/// Lowercases and splits on whitespace. Every character that is neither
/// alphanumeric nor whitespace becomes a token of its own.
pub fn normalize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for c in text.chars() {
        if c.is_whitespace() {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
        } else if c.is_alphanumeric() {
            current.extend(c.to_lowercase());
        } else {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            tokens.push(c.to_lowercase().collect());
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// Which document fields make up the text fed to the tokenizer and index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DocumentText {
    #[default]
    TitleBody,
    Body,
    UrlTitleBody,
}

impl DocumentText {
    pub fn render(self, doc: &Document) -> String {
        match self {
            DocumentText::TitleBody => format!("{} {}", doc.title, doc.body),
            DocumentText::Body => doc.body.clone(),
            DocumentText::UrlTitleBody => format!("{} {} {}", doc.url, doc.title, doc.body),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(Error::DuplicateKey {
                    kind: "vocabulary token",
                    key: t.clone(),
                });
            }
        }
        Ok(Vocabulary { tokens, ids })
    }

    /// Keeps the `max_size - 4` most frequent normalized tokens of the corpus
    /// (document text per `field`, plus query text). Ties go to the
    /// lexicographically smaller token.
    pub fn build(
        docs: &DocumentStore,
        queries: &QueryStore,
        field: DocumentText,
        max_size: usize,
    ) -> Result<Self> {
        if max_size <= RESERVED.len() {
            return Err(Error::Config(format!(
                "vocabulary size must exceed {}, got {max_size}",
                RESERVED.len()
            )));
        }
        let mut counts: HashMap<String, u64> = HashMap::new();
        let texts = docs
            .iter()
            .map(|d| field.render(d))
            .chain(queries.iter().map(|q| q.text.clone()));
        for text in texts {
            for tok in normalize(&text) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::Empty("vocabulary corpus has no tokens".into()));
        }
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(
                ranked
                    .into_iter()
                    .map(|(t, _)| t)
                    .take(max_size - RESERVED.len()),
            )
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
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        normalize(text).iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(UNK).to_string())
            .collect()
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = text.lines().map(String::from).collect();
        for (i, reserved) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(reserved) {
                return Err(Error::parse(path, i + 1, format!("expected reserved token {reserved}")));
            }
        }
        Self::from_tokens(tokens)
    }
}

/// Positions that receive global attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GlobalAttention {
    /// `<s>`, every query token, and the first `</s>`.
    #[default]
    ClsAndQuery,
    ClsOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncodeOptions {
    pub max_len: usize,
    pub document_text: DocumentText,
    pub global: GlobalAttention,
}

impl Default for EncodeOptions {
    fn default() -> Self {
        EncodeOptions {
            max_len: DEFAULT_MAX_LEN,
            document_text: DocumentText::default(),
            global: GlobalAttention::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub attention_mask: Vec<u8>,
    pub global_mask: Vec<u8>,
    pub query_len: usize,
    pub doc_len: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of real (unpadded) positions.
    pub fn unpadded_len(&self) -> usize {
        self.query_len + self.doc_len + 3
    }

    /// Right-pads with `<pad>` up to `len`; pads get attention and global
    /// mask 0.
    pub fn pad_to(&mut self, len: usize) {
        if len > self.ids.len() {
            self.ids.resize(len, PAD_ID);
            self.attention_mask.resize(len, 0);
            self.global_mask.resize(len, 0);
        }
    }
}

/// Pads every sequence to the longest one in the batch.
pub fn pad_batch(batch: &mut [TokenSequence]) {
    let longest = batch.iter().map(TokenSequence::len).max().unwrap_or(0);
    for seq in batch {
        seq.pad_to(longest);
    }
}

/// Packs token ids as `<s> query </s> document </s>`, truncating only the
/// document tail so the result fits in `max_len`.
pub fn pack_ids(
    query_ids: &[u32],
    doc_ids: &[u32],
    max_len: usize,
    global: GlobalAttention,
) -> Result<TokenSequence> {
    let q = query_ids.len();
    if max_len < q + 4 {
        return Err(Error::Constraint(format!(
            "query of {q} tokens does not fit in max_len {max_len} (needs {})",
            q + 4
        )));
    }
    let doc_len = doc_ids.len().min(max_len - q - 3);
    let n = q + doc_len + 3;
    let mut ids = Vec::with_capacity(n);
    ids.push(CLS_ID);
    ids.extend_from_slice(query_ids);
    ids.push(SEP_ID);
    ids.extend_from_slice(&doc_ids[..doc_len]);
    ids.push(SEP_ID);
    let global_span = match global {
        GlobalAttention::ClsAndQuery => q + 2,
        GlobalAttention::ClsOnly => 1,
    };
    let global_mask = (0..n).map(|i| u8::from(i < global_span)).collect();
    Ok(TokenSequence {
        ids,
        attention_mask: vec![1; n],
        global_mask,
        query_len: q,
        doc_len,
    })
}

pub fn encode_pair(query: &Query, doc: &Document, vocab: &Vocabulary, max_len: usize) -> Result<TokenSequence> {
    encode_pair_with(
        query,
        doc,
        vocab,
        &EncodeOptions {
            max_len,
            ..EncodeOptions::default()
        },
    )
}

pub fn encode_pair_with(
    query: &Query,
    doc: &Document,
    vocab: &Vocabulary,
    opts: &EncodeOptions,
) -> Result<TokenSequence> {
    let q = vocab.tokenize(&query.text);
    let d = vocab.tokenize(&opts.document_text.render(doc));
    pack_ids(&q, &d, opts.max_len, opts.global)
}

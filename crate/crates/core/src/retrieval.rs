//! First-stage BM25 retrieval over an in-memory inverted index.
//!
//! Scoring follows the Lucene variant of Robertson's BM25:
//!
//! ```text
//! score(q, d) = Σ_t idf(t) · tf·(k1+1) / (tf + k1·(1 − b + b·len/avg_len))
//! idf(t)      = ln(1 + (N − df + 0.5) / (df + 0.5))
//! ```
//!
//! The `ln(1 + …)` form keeps idf positive even for terms present in every
//! document.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::{Candidate, CandidateSet, DocumentStore, MAX_CANDIDATES};
use crate::error::{Error, Result};
use crate::tokenizer::{normalize, DocumentText};

const INDEX_MAGIC: &str = "longrank-bm25-index";
const INDEX_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 0.9, b: 0.4 }
    }
}

impl Bm25Params {
    pub fn new(k1: f64, b: f64) -> Result<Self> {
        let p = Bm25Params { k1, b };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.k1 > 0.0 && self.k1.is_finite()) {
            return Err(Error::Config(format!("k1 must be positive, got {}", self.k1)));
        }
        if !(0.0..=1.0).contains(&self.b) {
            return Err(Error::Config(format!("b must lie in [0, 1], got {}", self.b)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Posting {
    pub doc: u32,
    pub tf: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvertedIndex {
    postings: BTreeMap<String, Vec<Posting>>,
    doc_lengths: Vec<u32>,
    doc_ids: Vec<String>,
    avg_doc_length: f64,
    field: DocumentText,
}

impl InvertedIndex {
    /// Internal ids follow the store's iteration order (ascending doc id).
    pub fn build(docs: &DocumentStore, field: DocumentText) -> Result<Self> {
        if docs.is_empty() {
            return Err(Error::Empty("cannot index an empty document store".into()));
        }
        let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        let mut doc_lengths = Vec::with_capacity(docs.len());
        let mut doc_ids = Vec::with_capacity(docs.len());
        for (internal, doc) in docs.iter().enumerate() {
            let tokens = normalize(&field.render(doc));
            doc_lengths.push(tokens.len() as u32);
            doc_ids.push(doc.doc_id.clone());
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for t in tokens {
                *tf.entry(t).or_default() += 1;
            }
            for (term, tf) in tf {
                postings.entry(term).or_default().push(Posting {
                    doc: internal as u32,
                    tf,
                });
            }
        }
        Ok(Self::from_parts(postings, doc_lengths, doc_ids, field))
    }

    fn from_parts(
        postings: BTreeMap<String, Vec<Posting>>,
        doc_lengths: Vec<u32>,
        doc_ids: Vec<String>,
        field: DocumentText,
    ) -> Self {
        let total: u64 = doc_lengths.iter().map(|&l| u64::from(l)).sum();
        let avg_doc_length = total as f64 / doc_lengths.len() as f64;
        InvertedIndex {
            postings,
            doc_lengths,
            doc_ids,
            avg_doc_length,
            field,
        }
    }

    pub fn doc_count(&self) -> usize {
        self.doc_lengths.len()
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    pub fn doc_length(&self, doc: u32) -> u32 {
        self.doc_lengths[doc as usize]
    }

    pub fn doc_id(&self, doc: u32) -> &str {
        &self.doc_ids[doc as usize]
    }

    pub fn field(&self) -> DocumentText {
        self.field
    }

    pub fn postings(&self, term: &str) -> &[Posting] {
        self.postings.get(term).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn terms(&self) -> impl Iterator<Item = &str> {
        self.postings.keys().map(String::as_str)
    }

    pub fn doc_freq(&self, term: &str) -> usize {
        self.postings(term).len()
    }

    pub fn term_freq(&self, term: &str, doc: u32) -> u32 {
        let list = self.postings(term);
        list.binary_search_by_key(&doc, |p| p.doc)
            .map(|i| list[i].tf)
            .unwrap_or(0)
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.doc_count() as f64;
        let df = self.doc_freq(term) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    /// Writes `meta.txt`, `docs.tsv` and `postings.tsv` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let field = match self.field {
            DocumentText::TitleBody => "title_body",
            DocumentText::Body => "body",
            DocumentText::UrlTitleBody => "url_title_body",
        };
        let meta = format!(
            "{INDEX_MAGIC} {INDEX_VERSION}\ndoc_count\t{}\nterm_count\t{}\nfield\t{field}\n",
            self.doc_count(),
            self.postings.len()
        );
        let mut docs = String::new();
        for (i, (id, len)) in self.doc_ids.iter().zip(&self.doc_lengths).enumerate() {
            writeln!(docs, "{i}\t{id}\t{len}").unwrap();
        }
        let mut postings = String::new();
        for (term, list) in &self.postings {
            postings.push_str(term);
            postings.push('\t');
            for (i, p) in list.iter().enumerate() {
                if i > 0 {
                    postings.push(' ');
                }
                write!(postings, "{}:{}", p.doc, p.tf).unwrap();
            }
            postings.push('\n');
        }
        for (name, body) in [("meta.txt", meta), ("docs.tsv", docs), ("postings.tsv", postings)] {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let read = |name: &str| {
            let path = dir.join(name);
            fs::read_to_string(&path)
                .map(|s| (path.clone(), s))
                .map_err(|e| Error::io(&path, e))
        };
        let (meta_path, meta) = read("meta.txt")?;
        let mut lines = meta.lines();
        let header = lines.next().unwrap_or_default();
        if header != format!("{INDEX_MAGIC} {INDEX_VERSION}") {
            return Err(Error::parse(&meta_path, 1, format!("unsupported index header `{header}`")));
        }
        let mut field = DocumentText::TitleBody;
        let mut doc_count = None;
        for (i, line) in lines.enumerate() {
            let (k, v) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(&meta_path, i + 2, "expected key\\tvalue"))?;
            match k {
                "doc_count" => {
                    doc_count = Some(v.parse::<usize>().map_err(|_| Error::parse(&meta_path, i + 2, "bad doc_count"))?)
                }
                "field" => {
                    field = match v {
                        "title_body" => DocumentText::TitleBody,
                        "body" => DocumentText::Body,
                        "url_title_body" => DocumentText::UrlTitleBody,
                        _ => return Err(Error::parse(&meta_path, i + 2, format!("unknown field `{v}`"))),
                    }
                }
                _ => {}
            }
        }

        let (docs_path, docs) = read("docs.tsv")?;
        let mut doc_ids = Vec::new();
        let mut doc_lengths = Vec::new();
        for (i, line) in docs.lines().enumerate() {
            let f: Vec<&str> = line.split('\t').collect();
            let ok = f.len() == 3 && f[0].parse::<usize>().ok() == Some(i);
            let len = f.get(2).and_then(|l| l.parse::<u32>().ok());
            match (ok, len) {
                (true, Some(len)) => {
                    doc_ids.push(f[1].to_string());
                    doc_lengths.push(len);
                }
                _ => return Err(Error::parse(&docs_path, i + 1, "expected `internal\\tdoc_id\\tlength`")),
            }
        }
        if doc_count != Some(doc_ids.len()) || doc_ids.is_empty() {
            return Err(Error::parse(&meta_path, 2, "doc_count disagrees with docs.tsv"));
        }

        let (post_path, post) = read("postings.tsv")?;
        let mut postings = BTreeMap::new();
        for (i, line) in post.lines().enumerate() {
            let bad = || Error::parse(&post_path, i + 1, "malformed postings line");
            let (term, rest) = line.split_once('\t').ok_or_else(bad)?;
            let mut list = Vec::new();
            for item in rest.split(' ') {
                let (d, tf) = item.split_once(':').ok_or_else(bad)?;
                let doc: u32 = d.parse().map_err(|_| bad())?;
                let tf: u32 = tf.parse().map_err(|_| bad())?;
                if doc as usize >= doc_ids.len() || tf == 0 || list.last().is_some_and(|p: &Posting| p.doc >= doc) {
                    return Err(bad());
                }
                list.push(Posting { doc, tf });
            }
            postings.insert(term.to_string(), list);
        }
        Ok(Self::from_parts(postings, doc_lengths, doc_ids, field))
    }
}

/// Contribution of a single query term occurrence with frequency `tf` in a
/// document of length `doc_len`.
fn term_weight(idf: f64, tf: u32, doc_len: u32, avg_len: f64, params: &Bm25Params) -> f64 {
    if tf == 0 {
        return 0.0;
    }
    let tf = f64::from(tf);
    let norm = 1.0 - params.b + params.b * f64::from(doc_len) / avg_len;
    idf * tf * (params.k1 + 1.0) / (tf + params.k1 * norm)
}

/// Scores one document by direct lookup; each query term occurrence
/// contributes once.
pub fn bm25_score<S: AsRef<str>>(terms: &[S], doc: u32, index: &InvertedIndex, params: &Bm25Params) -> f64 {
    let len = index.doc_length(doc);
    let mut score = 0.0;
    for t in terms {
        let t = t.as_ref();
        let tf = index.term_freq(t, doc);
        if tf > 0 {
            score += term_weight(index.idf(t), tf, len, index.avg_doc_length, params);
        }
    }
    score
}

/// Orders by score descending, then external doc id ascending.
pub fn rank_order(a: (f64, &str), b: (f64, &str)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

/// Term-at-a-time top-k retrieval. Documents matching no query term are
/// omitted.
pub fn retrieve_topk(
    query_id: &str,
    query_text: &str,
    index: &InvertedIndex,
    params: &Bm25Params,
    k: usize,
) -> CandidateSet {
    let terms = normalize(query_text);
    let mut acc = vec![0.0f64; index.doc_count()];
    let mut touched = vec![false; index.doc_count()];
    let mut matched: Vec<u32> = Vec::new();
    for t in &terms {
        let list = index.postings(t);
        if list.is_empty() {
            continue;
        }
        let idf = index.idf(t);
        for p in list {
            let d = p.doc as usize;
            acc[d] += term_weight(idf, p.tf, index.doc_lengths[d], index.avg_doc_length, params);
            if !touched[d] {
                touched[d] = true;
                matched.push(p.doc);
            }
        }
    }
    let cmp = |a: &u32, b: &u32| rank_order((acc[*a as usize], index.doc_id(*a)), (acc[*b as usize], index.doc_id(*b)));
    if k > 0 && matched.len() > k {
        matched.select_nth_unstable_by(k - 1, cmp);
        matched.truncate(k);
    }
    matched.sort_by(cmp);
    matched.truncate(k);
    CandidateSet {
        query_id: query_id.to_string(),
        candidates: matched
            .into_iter()
            .map(|d| Candidate {
                doc_id: index.doc_id(d).to_string(),
                score: acc[d as usize],
            })
            .collect(),
    }
}

/// Default candidate depth for re-ranking.
pub const DEFAULT_K: usize = MAX_CANDIDATES;

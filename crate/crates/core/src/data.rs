//! MS MARCO style corpus, query, qrels and candidate files, plus TREC run output.
//!
//! All inputs must be UTF-8. Fields are tab separated (documents, queries) or
//! whitespace separated (qrels, run files) with no quoting.

use std::collections::btree_map::Entry;
use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Upper bound on the number of first-stage candidates per query.
pub const MAX_CANDIDATES: usize = 100;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub doc_id: String,
    pub url: String,
    pub title: String,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Query {
    pub query_id: String,
    pub text: String,
}

/// Documents keyed by id. Iteration order is ascending doc id, so two stores
/// loaded from permutations of the same file compare equal.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DocumentStore {
    docs: BTreeMap<String, Document>,
}

impl DocumentStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, doc: Document) -> Result<()> {
        if doc.doc_id.is_empty() {
            return Err(Error::Constraint("document id must be non-empty".into()));
        }
        match self.docs.entry(doc.doc_id.clone()) {
            Entry::Occupied(e) => Err(Error::DuplicateKey {
                kind: "document",
                key: e.key().clone(),
            }),
            Entry::Vacant(e) => {
                e.insert(doc);
                Ok(())
            }
        }
    }

    pub fn get(&self, doc_id: &str) -> Option<&Document> {
        self.docs.get(doc_id)
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Document> {
        self.docs.values()
    }
}

impl FromIterator<Document> for DocumentStore {
    /// Panics on duplicate ids; use [`DocumentStore::insert`] for fallible
    /// construction.
    fn from_iter<I: IntoIterator<Item = Document>>(iter: I) -> Self {
        let mut store = DocumentStore::new();
        for doc in iter {
            store.insert(doc).expect("duplicate document id");
        }
        store
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct QueryStore {
    queries: BTreeMap<String, Query>,
}

impl QueryStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, query: Query) -> Result<()> {
        if query.query_id.is_empty() {
            return Err(Error::Constraint("query id must be non-empty".into()));
        }
        match self.queries.entry(query.query_id.clone()) {
            Entry::Occupied(e) => Err(Error::DuplicateKey {
                kind: "query",
                key: e.key().clone(),
            }),
            Entry::Vacant(e) => {
                e.insert(query);
                Ok(())
            }
        }
    }

    pub fn get(&self, query_id: &str) -> Option<&Query> {
        self.queries.get(query_id)
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Query> {
        self.queries.values()
    }
}

impl FromIterator<Query> for QueryStore {
    fn from_iter<I: IntoIterator<Item = Query>>(iter: I) -> Self {
        let mut store = QueryStore::new();
        for q in iter {
            store.insert(q).expect("duplicate query id");
        }
        store
    }
}

/// Graded relevance judgments. Unlisted pairs have grade 0.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Qrels {
    grades: BTreeMap<String, BTreeMap<String, u32>>,
}

impl Qrels {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, query_id: &str, doc_id: &str, grade: u32) {
        self.grades
            .entry(query_id.to_string())
            .or_default()
            .insert(doc_id.to_string(), grade);
    }

    pub fn grade(&self, query_id: &str, doc_id: &str) -> u32 {
        self.grades
            .get(query_id)
            .and_then(|m| m.get(doc_id))
            .copied()
            .unwrap_or(0)
    }

    pub fn is_relevant(&self, query_id: &str, doc_id: &str) -> bool {
        self.grade(query_id, doc_id) > 0
    }

    /// Judgments for one query, or `None` if the query has none.
    pub fn for_query(&self, query_id: &str) -> Option<&BTreeMap<String, u32>> {
        self.grades.get(query_id)
    }

    pub fn has_query(&self, query_id: &str) -> bool {
        self.grades.contains_key(query_id)
    }

    pub fn query_ids(&self) -> impl Iterator<Item = &str> {
        self.grades.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.grades.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.grades.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub doc_id: String,
    pub score: f64,
}

/// First-stage candidates for one query, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub query_id: String,
    pub candidates: Vec<Candidate>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn doc_ids(&self) -> impl Iterator<Item = &str> {
        self.candidates.iter().map(|c| c.doc_id.as_str())
    }

    /// Checks the set invariants: at most [`MAX_CANDIDATES`] entries, unique
    /// doc ids, scores non-increasing.
    pub fn validate(&self) -> Result<()> {
        if self.candidates.len() > MAX_CANDIDATES {
            return Err(Error::Constraint(format!(
                "query {} has {} candidates (limit {MAX_CANDIDATES})",
                self.query_id,
                self.candidates.len()
            )));
        }
        let mut seen = HashSet::new();
        for c in &self.candidates {
            if !seen.insert(c.doc_id.as_str()) {
                return Err(Error::Constraint(format!(
                    "query {} lists document {} twice",
                    self.query_id, c.doc_id
                )));
            }
        }
        if self.candidates.windows(2).any(|w| w[1].score > w[0].score) {
            return Err(Error::Constraint(format!(
                "query {}: candidate scores increase with rank",
                self.query_id
            )));
        }
        Ok(())
    }

    pub fn to_run_entries(&self, run_tag: &str) -> Vec<RunEntry> {
        self.candidates
            .iter()
            .enumerate()
            .map(|(i, c)| RunEntry {
                query_id: self.query_id.clone(),
                doc_id: c.doc_id.clone(),
                rank: i + 1,
                score: c.score,
                run_tag: run_tag.to_string(),
            })
            .collect()
    }
}

/// One line of a TREC run file.
#[derive(Debug, Clone, PartialEq)]
pub struct RunEntry {
    pub query_id: String,
    pub doc_id: String,
    pub rank: usize,
    pub score: f64,
    pub run_tag: String,
}

fn read_utf8_lines(path: &Path) -> Result<Vec<String>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut lines = Vec::new();
    for (i, raw) in bytes.split(|&b| b == b'\n').enumerate() {
        let raw = raw.strip_suffix(b"\r").unwrap_or(raw);
        let line = std::str::from_utf8(raw)
            .map_err(|e| Error::parse(path, i + 1, format!("invalid UTF-8: {e}")))?;
        lines.push(line.to_string());
    }
    // A trailing newline produces one empty final element.
    if lines.last().is_some_and(String::is_empty) {
        lines.pop();
    }
    Ok(lines)
}

/// Loads `doc_id \t url \t title \t body` lines.
pub fn load_documents(path: impl AsRef<Path>) -> Result<DocumentStore> {
    let path = path.as_ref();
    let mut store = DocumentStore::new();
    for (i, line) in read_utf8_lines(path)?.iter().enumerate() {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::parse(
                path,
                i + 1,
                format!("expected 4 tab-separated fields, found {}", fields.len()),
            ));
        }
        if fields[0].is_empty() {
            return Err(Error::parse(path, i + 1, "empty document id"));
        }
        store.insert(Document {
            doc_id: fields[0].to_string(),
            url: fields[1].to_string(),
            title: fields[2].to_string(),
            body: fields[3].to_string(),
        })?;
    }
    Ok(store)
}

/// Loads `query_id \t text` lines.
pub fn load_queries(path: impl AsRef<Path>) -> Result<QueryStore> {
    let path = path.as_ref();
    let mut store = QueryStore::new();
    for (i, line) in read_utf8_lines(path)?.iter().enumerate() {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 {
            return Err(Error::parse(
                path,
                i + 1,
                format!("expected 2 tab-separated fields, found {}", fields.len()),
            ));
        }
        if fields[0].is_empty() {
            return Err(Error::parse(path, i + 1, "empty query id"));
        }
        store.insert(Query {
            query_id: fields[0].to_string(),
            text: fields[1].to_string(),
        })?;
    }
    Ok(store)
}

/// Loads TREC qrels: `qid 0 docid grade`.
pub fn load_qrels(path: impl AsRef<Path>) -> Result<Qrels> {
    let path = path.as_ref();
    let mut qrels = Qrels::new();
    for (i, line) in read_utf8_lines(path)?.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(Error::parse(
                path,
                i + 1,
                format!("expected `qid 0 docid grade`, found {} fields", fields.len()),
            ));
        }
        let grade: i64 = fields[3]
            .parse()
            .map_err(|_| Error::parse(path, i + 1, format!("grade `{}` is not an integer", fields[3])))?;
        let grade = u32::try_from(grade)
            .map_err(|_| Error::parse(path, i + 1, format!("grade {grade} is negative or too large")))?;
        qrels.insert(fields[0], fields[2], grade);
    }
    Ok(qrels)
}

fn parse_run_lines(path: &Path) -> Result<Vec<RunEntry>> {
    let mut entries = Vec::new();
    for (i, line) in read_utf8_lines(path)?.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 6 {
            return Err(Error::parse(
                path,
                i + 1,
                format!("expected `qid Q0 docid rank score tag`, found {} fields", fields.len()),
            ));
        }
        let rank: usize = fields[3]
            .parse()
            .map_err(|_| Error::parse(path, i + 1, format!("rank `{}` is not a positive integer", fields[3])))?;
        if rank == 0 {
            return Err(Error::parse(path, i + 1, "rank must be >= 1"));
        }
        let score: f64 = fields[4]
            .parse()
            .map_err(|_| Error::parse(path, i + 1, format!("score `{}` is not a number", fields[4])))?;
        if !score.is_finite() {
            return Err(Error::parse(path, i + 1, "score must be finite"));
        }
        entries.push(RunEntry {
            query_id: fields[0].to_string(),
            doc_id: fields[2].to_string(),
            rank,
            score,
            run_tag: fields[5].to_string(),
        });
    }
    Ok(entries)
}

/// Groups entries by query and orders each group by its rank field, checking
/// that ranks run 1..n without gaps and that scores never increase with rank.
pub fn group_by_query(entries: Vec<RunEntry>) -> Result<BTreeMap<String, Vec<RunEntry>>> {
    let mut groups: BTreeMap<String, Vec<RunEntry>> = BTreeMap::new();
    for e in entries {
        groups.entry(e.query_id.clone()).or_default().push(e);
    }
    for (qid, group) in groups.iter_mut() {
        group.sort_by_key(|e| e.rank);
        for (i, e) in group.iter().enumerate() {
            if e.rank != i + 1 {
                return Err(Error::Constraint(format!(
                    "query {qid}: expected rank {}, found {} (duplicate or gap)",
                    i + 1,
                    e.rank
                )));
            }
        }
        if let Some(w) = group.windows(2).find(|w| w[1].score > w[0].score) {
            return Err(Error::Constraint(format!(
                "query {qid}: score at rank {} exceeds score at rank {}",
                w[1].rank, w[0].rank
            )));
        }
    }
    Ok(groups)
}

/// Loads a run file without the candidate-count limit, validated and grouped.
pub fn load_run(path: impl AsRef<Path>) -> Result<Vec<RunEntry>> {
    let groups = group_by_query(parse_run_lines(path.as_ref())?)?;
    Ok(groups.into_values().flatten().collect())
}

/// Loads a first-stage top-k file (`qid Q0 docid rank score tag`).
pub fn load_candidates(path: impl AsRef<Path>) -> Result<BTreeMap<String, CandidateSet>> {
    let path = path.as_ref();
    let entries = parse_run_lines(path)?;
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for e in &entries {
        *counts.entry(e.query_id.as_str()).or_default() += 1;
    }
    if let Some((qid, n)) = counts.iter().find(|(_, &n)| n > MAX_CANDIDATES) {
        return Err(Error::Constraint(format!(
            "query {qid} has {n} candidates (limit {MAX_CANDIDATES})"
        )));
    }
    let mut sets = BTreeMap::new();
    for (qid, group) in group_by_query(entries)? {
        let set = CandidateSet {
            query_id: qid.clone(),
            candidates: group
                .into_iter()
                .map(|e| Candidate {
                    doc_id: e.doc_id,
                    score: e.score,
                })
                .collect(),
        };
        set.validate()?;
        sets.insert(qid, set);
    }
    Ok(sets)
}

/// Validates run entries against the per-query invariants without reordering.
pub fn validate_run(entries: &[RunEntry]) -> Result<()> {
    group_by_query(entries.to_vec()).map(|_| ())
}

/// Renders entries in TREC format with fixed 6-decimal scores.
pub fn format_run(entries: &[RunEntry]) -> Result<String> {
    validate_run(entries)?;
    let mut out = String::new();
    for e in entries {
        for (field, value) in [("query id", &e.query_id), ("doc id", &e.doc_id), ("run tag", &e.run_tag)] {
            if value.is_empty() || value.chars().any(char::is_whitespace) {
                return Err(Error::Constraint(format!("{field} `{value}` is empty or contains whitespace")));
            }
        }
        if !e.score.is_finite() {
            return Err(Error::Constraint(format!("non-finite score for {} {}", e.query_id, e.doc_id)));
        }
        writeln!(
            out,
            "{} Q0 {} {} {:.6} {}",
            e.query_id, e.doc_id, e.rank, e.score, e.run_tag
        )
        .expect("writing to a String cannot fail");
    }
    Ok(out)
}

pub fn write_run(entries: &[RunEntry], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = format_run(entries)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_tsv(path: &Path, rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut out = String::new();
    for row in rows {
        if row.iter().any(|f| f.contains(['\t', '\n', '\r'])) {
            return Err(Error::Constraint(format!("field contains tab or newline: {row:?}")));
        }
        out.push_str(&row.join("\t"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_documents(docs: &DocumentStore, path: impl AsRef<Path>) -> Result<()> {
    write_tsv(
        path.as_ref(),
        docs.iter()
            .map(|d| vec![d.doc_id.clone(), d.url.clone(), d.title.clone(), d.body.clone()]),
    )
}

pub fn write_queries(queries: &QueryStore, path: impl AsRef<Path>) -> Result<()> {
    write_tsv(
        path.as_ref(),
        queries.iter().map(|q| vec![q.query_id.clone(), q.text.clone()]),
    )
}

pub fn write_qrels(qrels: &Qrels, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for (qid, docs) in &qrels.grades {
        for (did, grade) in docs {
            writeln!(out, "{qid} 0 {did} {grade}").expect("writing to a String cannot fail");
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

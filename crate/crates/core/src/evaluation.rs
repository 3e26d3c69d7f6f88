//! MRR@k over TREC run files.

use std::collections::{BTreeMap, BTreeSet};

use crate::data::{group_by_query, Qrels, RunEntry};
use crate::error::{Error, Result};

pub const DEFAULT_CUTOFF: usize = 100;

/// `1/r` for the first relevant document at 1-based rank `r ≤ cutoff`,
/// otherwise 0.
pub fn reciprocal_rank<S: AsRef<str>>(ranked: &[S], judgments: Option<&BTreeMap<String, u32>>, cutoff: usize) -> Result<f64> {
    let mut seen = BTreeSet::new();
    for d in ranked {
        if !seen.insert(d.as_ref()) {
            return Err(Error::DuplicateKey {
                kind: "ranked document",
                key: d.as_ref().to_string(),
            });
        }
    }
    let Some(judgments) = judgments else {
        return Ok(0.0);
    };
    Ok(ranked
        .iter()
        .take(cutoff)
        .position(|d| judgments.get(d.as_ref()).is_some_and(|&g| g > 0))
        .map_or(0.0, |i| 1.0 / (i + 1) as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub cutoff: usize,
    pub per_query: BTreeMap<String, f64>,
    pub mrr: f64,
    pub num_queries_evaluated: usize,
    pub num_queries_without_judgments: usize,
}

impl EvalReport {
    /// `mrr@<cutoff>\t<value>`, optionally followed by `<qid>\t<rr>` lines.
    pub fn render(&self, per_query: bool) -> String {
        let mut out = format!("mrr@{}\t{:.6}\n", self.cutoff, self.mrr);
        if per_query {
            for (q, rr) in &self.per_query {
                out.push_str(&format!("{q}\t{rr:.6}\n"));
            }
        }
        out
    }
}

/// Validates the run (ranks contiguous from 1, scores non-increasing in rank)
/// and averages RR over the queries that have judgments.
pub fn evaluate_run(run: &[RunEntry], qrels: &Qrels, cutoff: usize) -> Result<EvalReport> {
    if run.is_empty() {
        return Err(Error::Empty("run has no entries".into()));
    }
    if cutoff == 0 {
        return Err(Error::Config("cutoff must be at least 1".into()));
    }
    let grouped = group_by_query(run.to_vec())?;
    let mut per_query = BTreeMap::new();
    let mut without = 0;
    for (q, entries) in &grouped {
        let Some(j) = qrels.for_query(q) else {
            without += 1;
            continue;
        };
        let ranked: Vec<&str> = entries.iter().map(|e| e.doc_id.as_str()).collect();
        per_query.insert(q.clone(), reciprocal_rank(&ranked, Some(j), cutoff)?);
    }
    if per_query.is_empty() {
        return Err(Error::Empty(format!(
            "none of the {} run queries has relevance judgments",
            grouped.len()
        )));
    }
    let mrr = per_query.values().sum::<f64>() / per_query.len() as f64;
    Ok(EvalReport {
        cutoff,
        num_queries_evaluated: per_query.len(),
        num_queries_without_judgments: without,
        per_query,
        mrr,
    })
}

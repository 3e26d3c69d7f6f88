//! Sliding-window attention with global positions.
//!
//! A regular position `i` sees keys `j` with `|i − j| ≤ w/2` plus every
//! global position. A global position sees every key. Padded keys are never
//! visible.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numeric::{AttentionPattern, Tape, Tensor, Var};

fn check_masks(window: usize, global_mask: &[u8], attention_mask: &[u8]) -> Result<()> {
    if global_mask.len() != attention_mask.len() {
        return Err(Error::shape("sliding_window_attention", &[global_mask.len()], &[attention_mask.len()]));
    }
    if window < 2 || window % 2 != 0 {
        return Err(Error::Config(format!("window must be even and >= 2, got {window}")));
    }
    Ok(())
}

/// Per-row key sets for the windowed rows and the global rows. Each query
/// row is non-empty in at most one of the two patterns.
#[derive(Debug, Clone)]
pub struct SplitPattern {
    pub local: Rc<AttentionPattern>,
    pub global: Rc<AttentionPattern>,
}

impl SplitPattern {
    pub fn build(window: usize, global_mask: &[u8], attention_mask: &[u8]) -> Result<Self> {
        check_masks(window, global_mask, attention_mask)?;
        let n = attention_mask.len();
        let half = window / 2;
        let visible: Vec<usize> = (0..n).filter(|&j| attention_mask[j] == 1).collect();
        let globals: Vec<usize> = visible.iter().copied().filter(|&j| global_mask[j] == 1).collect();

        let mut local_rows = Vec::with_capacity(n);
        let mut global_rows = Vec::with_capacity(n);
        for i in 0..n {
            if global_mask[i] == 1 {
                local_rows.push(Vec::new());
                global_rows.push(visible.clone());
                continue;
            }
            let lo = i.saturating_sub(half);
            let hi = (i + half).min(n - 1);
            let mut row: Vec<usize> = globals.iter().copied().filter(|&j| j < lo || j > hi).collect();
            row.extend((lo..=hi).filter(|&j| attention_mask[j] == 1));
            local_rows.push(row);
            global_rows.push(Vec::new());
        }
        Ok(SplitPattern {
            local: Rc::new(AttentionPattern::from_rows(n, local_rows)),
            global: Rc::new(AttentionPattern::from_rows(n, global_rows)),
        })
    }

    /// Union of both patterns, for attention with shared projections.
    pub fn combined(&self) -> AttentionPattern {
        let n = self.local.n_queries();
        AttentionPattern::from_rows(
            self.local.n_keys(),
            (0..n).map(|i| {
                let mut r = self.local.row(i).to_vec();
                r.extend_from_slice(self.global.row(i));
                r
            }),
        )
    }
}

pub fn sliding_window_pattern(window: usize, global_mask: &[u8], attention_mask: &[u8]) -> Result<AttentionPattern> {
    Ok(SplitPattern::build(window, global_mask, attention_mask)?.combined())
}

/// Single-head sliding-window attention on the tape.
pub fn sliding_window_attention(
    tape: &mut Tape<'_>,
    q: Var,
    k: Var,
    v: Var,
    window: usize,
    global_mask: &[u8],
    attention_mask: &[u8],
) -> Result<Var> {
    let n = tape.shape(q)[0];
    if global_mask.len() != n {
        return Err(Error::shape("sliding_window_attention", &[n], &[global_mask.len()]));
    }
    let pattern = sliding_window_pattern(window, global_mask, attention_mask)?;
    tape.attention(q, k, v, 1, Rc::new(pattern))
}

/// Evaluates [`sliding_window_attention`] on plain tensors, returning the
/// output and the number of query-key scores computed.
pub fn sliding_window_attention_eval(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    window: usize,
    global_mask: &[u8],
    attention_mask: &[u8],
) -> Result<(Tensor, u64)> {
    let mut tape = Tape::new();
    let (q, k, v) = (tape.param(q), tape.param(k), tape.param(v));
    let out = sliding_window_attention(&mut tape, q, k, v, window, global_mask, attention_mask)?;
    Ok((tape.tensor(out), tape.score_evals()))
}

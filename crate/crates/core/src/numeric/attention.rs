//! Sparse scaled dot-product attention kernels.
//!
//! The set of keys each query may attend to is stored in CSR form, so the
//! work is proportional to the number of allowed (query, key) pairs rather
//! than `n²`.

/// Allowed key positions per query row, in CSR layout with sorted columns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionPattern {
    n_keys: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
}

impl AttentionPattern {
    /// Builds a pattern from per-row key lists. Columns are sorted and
    /// deduplicated.
    pub fn from_rows(n_keys: usize, rows: impl IntoIterator<Item = Vec<usize>>) -> Self {
        let mut row_ptr = vec![0];
        let mut cols = Vec::new();
        for mut row in rows {
            row.sort_unstable();
            row.dedup();
            assert!(row.last().is_none_or(|&c| c < n_keys), "key index out of range");
            cols.extend(row);
            row_ptr.push(cols.len());
        }
        AttentionPattern { n_keys, row_ptr, cols }
    }

    /// Pattern from a dense row-major boolean mask of `n_queries × n_keys`.
    pub fn from_dense(n_queries: usize, n_keys: usize, allowed: &[bool]) -> Self {
        assert_eq!(allowed.len(), n_queries * n_keys);
        Self::from_rows(
            n_keys,
            (0..n_queries).map(|i| (0..n_keys).filter(|&j| allowed[i * n_keys + j]).collect()),
        )
    }

    pub fn n_queries(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn n_keys(&self) -> usize {
        self.n_keys
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.cols[self.row_ptr[i]..self.row_ptr[i + 1]]
    }

    /// Total number of allowed (query, key) pairs.
    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    pub fn to_dense(&self) -> Vec<bool> {
        let mut out = vec![false; self.n_queries() * self.n_keys];
        for i in 0..self.n_queries() {
            for &j in self.row(i) {
                out[i * self.n_keys + j] = true;
            }
        }
        out
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Returns `(output, probabilities, score_evaluations)`. Probabilities are
/// laid out head-major, then in CSR order.
pub(crate) fn forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    d: usize,
    heads: usize,
    pattern: &AttentionPattern,
) -> (Vec<f64>, Vec<f64>, u64) {
    let n = pattern.n_queries();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let nnz = pattern.nnz();
    let mut out = vec![0.0; n * d];
    let mut probs = vec![0.0; heads * nnz];
    for h in 0..heads {
        let c0 = h * dh;
        for i in 0..n {
            let cols = pattern.row(i);
            if cols.is_empty() {
                continue;
            }
            let base = h * nnz + pattern.row_ptr[i];
            let p = &mut probs[base..base + cols.len()];
            let qi = &q[i * d + c0..i * d + c0 + dh];
            let mut max = f64::NEG_INFINITY;
            for (s, &j) in p.iter_mut().zip(cols) {
                *s = dot(qi, &k[j * d + c0..j * d + c0 + dh]) * scale;
                max = max.max(*s);
            }
            let mut total = 0.0;
            for s in p.iter_mut() {
                *s = (*s - max).exp();
                total += *s;
            }
            let oi = &mut out[i * d + c0..i * d + c0 + dh];
            for (s, &j) in p.iter_mut().zip(cols) {
                *s /= total;
                for (o, x) in oi.iter_mut().zip(&v[j * d + c0..j * d + c0 + dh]) {
                    *o += *s * x;
                }
            }
        }
    }
    (out, probs, (heads * nnz) as u64)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    d: usize,
    heads: usize,
    pattern: &AttentionPattern,
    probs: &[f64],
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = pattern.n_queries();
    let nk = pattern.n_keys();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let nnz = pattern.nnz();
    let mut dq = vec![0.0; n * d];
    let mut dk = vec![0.0; nk * d];
    let mut dv = vec![0.0; nk * d];
    let mut dp = Vec::new();
    for h in 0..heads {
        let c0 = h * dh;
        for i in 0..n {
            let cols = pattern.row(i);
            if cols.is_empty() {
                continue;
            }
            let base = h * nnz + pattern.row_ptr[i];
            let p = &probs[base..base + cols.len()];
            let gi = &grad_out[i * d + c0..i * d + c0 + dh];
            dp.clear();
            for (&pij, &j) in p.iter().zip(cols) {
                dp.push(dot(gi, &v[j * d + c0..j * d + c0 + dh]));
                for (o, x) in dv[j * d + c0..j * d + c0 + dh].iter_mut().zip(gi) {
                    *o += pij * x;
                }
            }
            let weighted: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
            let qi = &q[i * d + c0..i * d + c0 + dh];
            for ((&pij, &dpij), &j) in p.iter().zip(&dp).zip(cols) {
                let ds = pij * (dpij - weighted) * scale;
                if ds == 0.0 {
                    continue;
                }
                let kj = &k[j * d + c0..j * d + c0 + dh];
                for (o, x) in dq[i * d + c0..i * d + c0 + dh].iter_mut().zip(kj) {
                    *o += ds * x;
                }
                for (o, x) in dk[j * d + c0..j * d + c0 + dh].iter_mut().zip(qi) {
                    *o += ds * x;
                }
            }
        }
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csr_roundtrip() {
        let dense = [true, false, true, false, false, false, true, true, true];
        let p = AttentionPattern::from_dense(3, 3, &dense);
        assert_eq!(p.row(0), [0, 2]);
        assert!(p.row(1).is_empty());
        assert_eq!(p.row(2), [0, 1, 2]);
        assert_eq!(p.nnz(), 5);
        assert_eq!(p.to_dense(), dense);
    }

    #[test]
    fn single_key_returns_its_value() {
        let p = AttentionPattern::from_rows(2, [vec![1], vec![]]);
        let q = [1.0, 2.0, 3.0, 4.0];
        let k = [0.5, 0.5, 9.0, 9.0];
        let v = [7.0, 8.0, -1.0, -2.0];
        let (out, probs, evals) = forward(&q, &k, &v, 2, 1, &p);
        assert_eq!(out, [-1.0, -2.0, 0.0, 0.0]);
        assert_eq!(probs, [1.0]);
        assert_eq!(evals, 1);
    }
}

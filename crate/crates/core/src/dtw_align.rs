//! Norm-sharpened DTW over an averaged attention map.
//!
//! The cost of aligning token row `i` to frame `j` is the averaged attention
//! weight divided by its column's ℓ2 norm, negated. The accumulated cost is
//!
//! ```text
//! Q[0,0] = c[0,0]
//! Q[i,j] = min(Q[i-1,j], Q[i,j-1], Q[i-1,j-1]) + c[i,j]
//! ```
//!
//! with out-of-range predecessors treated as +∞, so the path runs from the
//! first token and frame to the last token and frame and covers every frame.

use crate::attn_io::{AttentionDump, TokenRecord, WordSegment};
use crate::error::{Error, Result};
use crate::head_filter::{
    average_heads, score_all, select_heads, Criterion, HeadId, HeadScoreTable, SelectionStrategy,
};
use crate::map::AttentionMap;
use crate::tokenization::{group_tokens_to_words, Tokenization};

/// Floor on column norms so all-zero columns cost 0 instead of NaN.
pub const COLUMN_NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || values.len() != rows * cols {
            return Err(Error::domain(format!(
                "cost matrix {rows}x{cols} with {} values",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("cost matrix has non-finite entries"));
        }
        Ok(CostMatrix { rows, cols, values })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        if rows.iter().any(|r| r.as_ref().len() != cols) {
            return Err(Error::domain("ragged cost matrix rows"));
        }
        Self::new(
            rows.len(),
            cols,
            rows.iter().flat_map(|r| r.as_ref().iter().copied()).collect(),
        )
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Monotone warping path from (0, 0) to (rows-1, cols-1) as (token, frame) pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignmentPath {
    pub steps: Vec<(usize, usize)>,
}

impl AlignmentPath {
    /// Check the start and end cells, the step set, and full coverage of rows
    /// and columns.
    pub fn validate(&self, rows: usize, cols: usize) -> Result<()> {
        let bad = |m: &str| Err(Error::domain(format!("invalid alignment path: {m}")));
        match (self.steps.first(), self.steps.last()) {
            (Some(&(0, 0)), Some(&last)) if last == (rows - 1, cols - 1) => {}
            _ => return bad("wrong start or end cell"),
        }
        for w in self.steps.windows(2) {
            let (di, dj) = (w[1].0.wrapping_sub(w[0].0), w[1].1.wrapping_sub(w[0].1));
            if !matches!((di, dj), (0, 1) | (1, 0) | (1, 1)) {
                return bad(&format!("illegal step {:?} -> {:?}", w[0], w[1]));
            }
        }
        // with unit steps from corner to corner, every row and column is visited
        Ok(())
    }
}

/// Turn an averaged K×T map into DTW costs, dropping rows of special tokens.
/// Column norms are taken over the retained rows only.
pub fn build_cost(avg: &AttentionMap, tokens: &[TokenRecord]) -> Result<CostMatrix> {
    if tokens.len() != avg.rows() {
        return Err(Error::domain(format!(
            "{} tokens for {} map rows",
            tokens.len(),
            avg.rows()
        )));
    }
    let keep: Vec<usize> = tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| !t.is_special())
        .map(|(i, _)| i)
        .collect();
    if keep.is_empty() {
        return Err(Error::domain("every token is special; nothing to align"));
    }
    if avg.as_slice().iter().any(|v| v.is_nan() || *v < 0.0) {
        return Err(Error::domain("averaged attention must be non-negative"));
    }
    let cols = avg.cols();
    let norms: Vec<f64> = (0..cols)
        .map(|j| {
            keep.iter()
                .map(|&i| avg.get(i, j).powi(2))
                .sum::<f64>()
                .sqrt()
                .max(COLUMN_NORM_EPS)
        })
        .collect();
    let values = keep
        .iter()
        .flat_map(|&i| avg.row(i).iter().zip(&norms).map(|(&a, &n)| -a / n))
        .collect();
    CostMatrix::new(keep.len(), cols, values)
}

/// Minimum-cost monotone path and its total cost.
///
/// On backtrace ties the diagonal predecessor is preferred, then the
/// horizontal one (same token, previous frame), then the vertical one.
pub fn dtw(cost: &CostMatrix) -> (AlignmentPath, f64) {
    let (n, m) = (cost.rows(), cost.cols());
    let mut q = vec![f64::INFINITY; n * m];
    for i in 0..n {
        for j in 0..m {
            let c = cost.get(i, j);
            q[i * m + j] = if i == 0 && j == 0 {
                c
            } else {
                let up = if i > 0 { q[(i - 1) * m + j] } else { f64::INFINITY };
                let left = if j > 0 { q[i * m + j - 1] } else { f64::INFINITY };
                let diag = if i > 0 && j > 0 {
                    q[(i - 1) * m + j - 1]
                } else {
                    f64::INFINITY
                };
                up.min(left).min(diag) + c
            };
        }
    }

    let at = |i: usize, j: usize| q[i * m + j];
    let (mut i, mut j) = (n - 1, m - 1);
    let mut steps = vec![(i, j)];
    while (i, j) != (0, 0) {
        let mut best = (f64::INFINITY, (i, j));
        if i > 0 && j > 0 {
            best = (at(i - 1, j - 1), (i - 1, j - 1));
        }
        if j > 0 && at(i, j - 1) < best.0 {
            best = (at(i, j - 1), (i, j - 1));
        }
        if i > 0 && at(i - 1, j) < best.0 {
            best = (at(i - 1, j), (i - 1, j));
        }
        (i, j) = best.1;
        steps.push((i, j));
    }
    steps.reverse();
    (AlignmentPath { steps }, at(n - 1, m - 1))
}

/// First and last frame of every token row along the path.
pub fn path_to_spans(path: &AlignmentPath) -> Vec<(usize, usize)> {
    let mut spans: Vec<(usize, usize)> = Vec::new();
    for &(i, j) in &path.steps {
        if i == spans.len() {
            spans.push((j, j));
        } else if let Some(span) = spans.get_mut(i) {
            span.0 = span.0.min(j);
            span.1 = span.1.max(j);
        }
    }
    spans
}

/// Average the given heads, run DTW and read off word segments.
pub fn align_with_heads(dump: &AttentionDump, heads: &[HeadId]) -> Result<Vec<WordSegment>> {
    let avg = average_heads(dump, heads)?;
    let cost = build_cost(&avg, &dump.tokens)?;
    let (path, _) = dtw(&cost);
    let spans = path_to_spans(&path);
    let speech: Vec<TokenRecord> = dump.tokens.iter().filter(|t| !t.is_special()).cloned().collect();
    let tok = Tokenization::from_tokens(speech)?;
    group_tokens_to_words(&tok, &spans, dump.frame_duration())
}

/// Heads chosen for one dump by a strategy. Scores are computed only when the
/// strategy ranks heads.
pub fn choose_heads(dump: &AttentionDump, strategy: &SelectionStrategy, criterion: Criterion) -> Result<Vec<HeadId>> {
    let table = match strategy {
        SelectionStrategy::TopK(_) => score_all(dump, criterion)?,
        _ => HeadScoreTable {
            criterion,
            scores: Default::default(),
        },
    };
    select_heads(&table, strategy, dump)
}

/// Full pipeline for one utterance: score, select, average, DTW, group.
pub fn align_utterance(
    dump: &AttentionDump,
    strategy: &SelectionStrategy,
    criterion: Criterion,
) -> Result<Vec<WordSegment>> {
    let heads = choose_heads(dump, strategy, criterion)?;
    align_with_heads(dump, &heads)
}

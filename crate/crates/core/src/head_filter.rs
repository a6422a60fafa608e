//! Scoring attention heads and choosing which ones to align with.
//!
//! Every criterion is oriented so that a higher score means a more
//! alignment-like map. The default criterion sums the ℓ2 norms of all rows and
//! all columns: a row concentrated on one segment and a column attended by one
//! token both have large norms.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::attn_io::{AttentionDump, WordSegment};
use crate::error::{Error, Result};
use crate::map::AttentionMap;
use crate::par;

/// Floor applied to column coverage before taking its log.
pub const COVERAGE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

impl HeadId {
    pub const fn new(layer: usize, head: usize) -> Self {
        HeadId { layer, head }
    }
}

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.layer, self.head)
    }
}

impl FromStr for HeadId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (l, h) = s
            .split_once(':')
            .ok_or_else(|| Error::domain(format!("head {s:?} is not LAYER:HEAD")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::domain(format!("head {s:?} is not LAYER:HEAD")))
        };
        Ok(HeadId::new(parse(l)?, parse(h)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Criterion {
    /// Sum of row norms plus sum of column norms.
    NormSum,
    ColNorm,
    RowNorm,
    /// Negated mean row entropy (nats).
    RowEntropy,
    /// Sum over frames of log(min(column mass, 1)).
    Coverage,
}

impl Criterion {
    pub const ALL: [Criterion; 5] = [
        Criterion::NormSum,
        Criterion::ColNorm,
        Criterion::RowNorm,
        Criterion::RowEntropy,
        Criterion::Coverage,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Criterion::NormSum => "norm",
            Criterion::ColNorm => "col-norm",
            Criterion::RowNorm => "row-norm",
            Criterion::RowEntropy => "entropy",
            Criterion::Coverage => "coverage",
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Criterion::ALL.into_iter().find(|c| c.name() == s).ok_or_else(|| {
            Error::domain(format!(
                "unknown criterion {s:?} (expected norm, col-norm, row-norm, entropy or coverage)"
            ))
        })
    }
}

/// Sum in ascending order, so the result depends only on the multiset of terms.
fn canonical_sum(mut terms: Vec<f64>) -> f64 {
    terms.sort_by(f64::total_cmp);
    terms.iter().sum()
}

fn l2_norm(values: impl Iterator<Item = f64>) -> f64 {
    canonical_sum(values.map(|v| v * v).collect()).sqrt()
}

/// Shannon entropy in nats with 0·ln 0 = 0.
pub fn shannon_entropy(p: &[f64]) -> f64 {
    -canonical_sum(p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).collect())
}

/// Rényi entropy of order 2: −2·ln‖p‖₂.
pub fn renyi2_entropy(p: &[f64]) -> f64 {
    -2.0 * l2_norm(p.iter().copied()).ln()
}

fn row_norms(a: &AttentionMap) -> f64 {
    canonical_sum(a.iter_rows().map(|r| l2_norm(r.iter().copied())).collect())
}

fn col_norms(a: &AttentionMap) -> f64 {
    canonical_sum((0..a.cols()).map(|t| l2_norm(a.column(t))).collect())
}

pub fn score_head(a: &AttentionMap, criterion: Criterion) -> Result<f64> {
    if a.has_nan() {
        return Err(Error::domain("attention map contains NaN"));
    }
    let score = match criterion {
        Criterion::NormSum => row_norms(a) + col_norms(a),
        Criterion::RowNorm => row_norms(a),
        Criterion::ColNorm => col_norms(a),
        Criterion::RowEntropy => {
            let total = canonical_sum(a.iter_rows().map(shannon_entropy).collect());
            -total / a.rows() as f64
        }
        Criterion::Coverage => canonical_sum(
            (0..a.cols())
                .map(|t| {
                    let mass = canonical_sum(a.column(t).collect());
                    mass.clamp(COVERAGE_FLOOR, 1.0).ln()
                })
                .collect(),
        ),
    };
    Ok(score)
}

/// Per-head scores for one dump under one criterion.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadScoreTable {
    pub criterion: Criterion,
    pub scores: BTreeMap<HeadId, f64>,
}

impl HeadScoreTable {
    /// Heads sorted by descending score, ties by ascending (layer, head).
    pub fn ranked(&self) -> Vec<(HeadId, f64)> {
        let mut v: Vec<(HeadId, f64)> = self.scores.iter().map(|(&h, &s)| (h, s)).collect();
        v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        v
    }
}

/// Score every head of a dump. Special-token rows are left out.
pub fn score_all(dump: &AttentionDump, criterion: Criterion) -> Result<HeadScoreTable> {
    let rows = dump.speech_rows();
    if rows.is_empty() {
        return Err(Error::domain(format!(
            "{}: no speech tokens to score",
            dump.utterance_id
        )));
    }
    let heads: Vec<HeadId> = dump.heads().collect();
    let scores = par::map(&heads, |&h| {
        let map = dump.head_map_rows(h, &rows)?;
        score_head(&map, criterion)
            .map(|s| (h, s))
            .map_err(|e| Error::domain(format!("head {h}: {e}")))
    });
    Ok(HeadScoreTable {
        criterion,
        scores: scores.into_iter().collect::<Result<_>>()?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum SelectionStrategy {
    TopK(usize),
    /// Every head in layers ⌈L/2⌉..L.
    UpperHalf,
    Fixed(Vec<HeadId>),
    /// The single best head against reference segments.
    Oracle {
        reference: Vec<WordSegment>,
        tolerance: f64,
    },
}

impl SelectionStrategy {
    pub fn validate(&self, dump: &AttentionDump) -> Result<()> {
        match self {
            SelectionStrategy::TopK(0) => Err(Error::domain("top-k needs k >= 1")),
            SelectionStrategy::Fixed(heads) if heads.is_empty() => Err(Error::domain("fixed head set is empty")),
            SelectionStrategy::Fixed(heads) => match heads.iter().find(|h| !dump.contains(**h)) {
                Some(h) => Err(Error::domain(format!(
                    "fixed head {h} out of range for {} layers x {} heads",
                    dump.num_layers, dump.heads_per_layer
                ))),
                None => Ok(()),
            },
            SelectionStrategy::Oracle { tolerance, .. } if tolerance.is_nan() || *tolerance < 0.0 => {
                Err(Error::domain("oracle tolerance must be non-negative"))
            }
            _ => Ok(()),
        }
    }
}

pub fn select_heads(table: &HeadScoreTable, strategy: &SelectionStrategy, dump: &AttentionDump) -> Result<Vec<HeadId>> {
    strategy.validate(dump)?;
    match strategy {
        SelectionStrategy::TopK(k) => {
            let ranked = table.ranked();
            if *k > ranked.len() {
                log::warn!(
                    "{}: top-{k} requested but only {} heads exist; using all",
                    dump.utterance_id,
                    ranked.len()
                );
            }
            Ok(ranked.into_iter().take(*k).map(|(h, _)| h).collect())
        }
        SelectionStrategy::UpperHalf => {
            let first = dump.num_layers.div_ceil(2);
            Ok(dump.heads().filter(|h| h.layer >= first).collect())
        }
        SelectionStrategy::Fixed(heads) => Ok(heads.clone()),
        SelectionStrategy::Oracle { reference, tolerance } => {
            let best = crate::eval::oracle_head(dump, reference, *tolerance)?;
            Ok(vec![best.head])
        }
    }
}

/// Mean of the selected heads over all K rows.
pub fn average_heads(dump: &AttentionDump, heads: &[HeadId]) -> Result<AttentionMap> {
    if heads.is_empty() {
        return Err(Error::domain("cannot average an empty head list"));
    }
    let size = dump.num_tokens * dump.num_frames;
    let mut acc = vec![0.0f64; size];
    for &h in heads {
        for (a, &w) in acc.iter_mut().zip(dump.head_weights(h)?) {
            *a += f64::from(w);
        }
    }
    let n = heads.len() as f64;
    for a in &mut acc {
        *a /= n;
    }
    AttentionMap::new(dump.num_tokens, dump.num_frames, acc)
}

//! Boundary F1 with word-identity matching, tolerance sweeps, oracle-head
//! search and hit-rate statistics.
//!
//! A hypothesis word is a hit when it is paired with a reference word of the
//! same normalized spelling and its end time lies within the tolerance of the
//! reference end. Start times are not scored.

use std::collections::BTreeMap;

use crate::attn_io::{AttentionDump, WordSegment};
use crate::dtw_align::align_with_heads;
use crate::error::{Error, Result};
use crate::head_filter::{score_all, Criterion, HeadId};
use crate::par;
use crate::tokenization::strip_word;

/// Absorbs floating-point noise in |Δend| ≤ tolerance comparisons.
pub const TOLERANCE_SLACK: f64 = 1e-9;

/// Default sweep in seconds: 20, 40, 50, 60, 80 and 100 ms.
pub const DEFAULT_TOLERANCES: [f64; 6] = [0.020, 0.040, 0.050, 0.060, 0.080, 0.100];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub tolerance: f64,
    pub true_positives: usize,
    pub num_hyp_words: usize,
    pub num_ref_words: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

impl EvalReport {
    pub fn from_counts(tolerance: f64, true_positives: usize, num_hyp_words: usize, num_ref_words: usize) -> Self {
        let precision = ratio(true_positives, num_hyp_words);
        let recall = ratio(true_positives, num_ref_words);
        EvalReport {
            tolerance,
            true_positives,
            num_hyp_words,
            num_ref_words,
            precision,
            recall,
            f1: harmonic(precision, recall),
        }
    }
}

/// How per-utterance results are combined into one corpus figure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Averaging {
    /// Pool hits and word counts over utterances.
    #[default]
    Micro,
    /// Mean of per-utterance precision, recall and F1 (counts still pooled).
    Macro,
}

pub fn combine(reports: &[EvalReport], tolerance: f64, averaging: Averaging) -> EvalReport {
    let tp = reports.iter().map(|r| r.true_positives).sum();
    let nh = reports.iter().map(|r| r.num_hyp_words).sum();
    let nr = reports.iter().map(|r| r.num_ref_words).sum();
    let mut out = EvalReport::from_counts(tolerance, tp, nh, nr);
    if averaging == Averaging::Macro {
        let n = reports.len() as f64;
        if reports.is_empty() {
            out.precision = 0.0;
            out.recall = 0.0;
            out.f1 = 0.0;
        } else {
            out.precision = reports.iter().map(|r| r.precision).sum::<f64>() / n;
            out.recall = reports.iter().map(|r| r.recall).sum::<f64>() / n;
            out.f1 = reports.iter().map(|r| r.f1).sum::<f64>() / n;
        }
    }
    out
}

/// Lowercased word with punctuation removed, as used for identity matching.
pub fn normalize_word(word: &str) -> String {
    strip_word(&word.to_lowercase())
}

/// Pair hypothesis and reference words along a minimum edit-distance
/// alignment, returning only the pairs whose normalized words are equal.
pub fn match_words(hyp: &[WordSegment], reference: &[WordSegment]) -> Vec<(usize, usize)> {
    let h: Vec<String> = hyp.iter().map(|s| normalize_word(&s.word)).collect();
    let r: Vec<String> = reference.iter().map(|s| normalize_word(&s.word)).collect();
    let same = |i: usize, j: usize| !h[i].is_empty() && h[i] == r[j];
    let (n, m) = (h.len(), r.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for (j, cell) in d.iter_mut().take(w).enumerate() {
        *cell = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[(i - 1) * w + j - 1] + usize::from(!same(i - 1, j - 1));
            let del = d[(i - 1) * w + j] + 1;
            let ins = d[i * w + j - 1] + 1;
            d[i * w + j] = sub.min(del).min(ins);
        }
    }
    let mut pairs = Vec::new();
    let (mut i, mut j) = (n, m);
    while i > 0 && j > 0 {
        let here = d[i * w + j];
        let matched = same(i - 1, j - 1);
        if here == d[(i - 1) * w + j - 1] + usize::from(!matched) {
            if matched {
                pairs.push((i - 1, j - 1));
            }
            i -= 1;
            j -= 1;
        } else {
            let skip_hyp = here == d[(i - 1) * w + j] + 1;
            let skip_ref = here == d[i * w + j - 1] + 1;
            // when both are optimal, drop the word that ends later so the
            // result does not depend on which side is the hypothesis
            let drop_hyp = match (skip_hyp, skip_ref) {
                (true, true) => later(&hyp[i - 1], &h[i - 1], &reference[j - 1], &r[j - 1]).is_ge(),
                (hyp_only, _) => hyp_only,
            };
            if drop_hyp {
                i -= 1;
            } else {
                j -= 1;
            }
        }
    }
    pairs.reverse();
    pairs
}

fn later(a: &WordSegment, a_norm: &str, b: &WordSegment, b_norm: &str) -> std::cmp::Ordering {
    a.end
        .total_cmp(&b.end)
        .then(a.start.total_cmp(&b.start))
        .then_with(|| a_norm.cmp(b_norm))
        .then_with(|| a.word.cmp(&b.word))
}

pub fn boundary_f1(hyp: &[WordSegment], reference: &[WordSegment], tolerance: f64) -> EvalReport {
    let tp = match_words(hyp, reference)
        .into_iter()
        .filter(|&(i, j)| (hyp[i].end - reference[j].end).abs() <= tolerance + TOLERANCE_SLACK)
        .count();
    EvalReport::from_counts(tolerance, tp, hyp.len(), reference.len())
}

pub fn tolerance_sweep(hyp: &[WordSegment], reference: &[WordSegment], tolerances: &[f64]) -> Result<Vec<EvalReport>> {
    if tolerances.is_empty() {
        return Err(Error::domain("tolerance sweep needs at least one tolerance"));
    }
    if let Some(t) = tolerances.iter().find(|t| t.is_nan() || **t < 0.0) {
        return Err(Error::domain(format!("tolerance must be non-negative, got {t}")));
    }
    let pairs = match_words(hyp, reference);
    Ok(tolerances
        .iter()
        .map(|&tol| {
            let tp = pairs
                .iter()
                .filter(|&&(i, j)| (hyp[i].end - reference[j].end).abs() <= tol + TOLERANCE_SLACK)
                .count();
            EvalReport::from_counts(tol, tp, hyp.len(), reference.len())
        })
        .collect())
}

/// Tolerance sweep over many utterances, combined per tolerance.
pub fn corpus_sweep(
    pairs: &[(&[WordSegment], &[WordSegment])],
    tolerances: &[f64],
    averaging: Averaging,
) -> Result<Vec<EvalReport>> {
    let per_utt: Vec<Vec<EvalReport>> = pairs
        .iter()
        .map(|(h, r)| tolerance_sweep(h, r, tolerances))
        .collect::<Result<_>>()?;
    Ok(tolerances
        .iter()
        .enumerate()
        .map(|(k, &tol)| {
            let col: Vec<EvalReport> = per_utt.iter().map(|v| v[k]).collect();
            combine(&col, tol, averaging)
        })
        .collect())
}

/// Single-head alignment quality of every head for one utterance.
pub fn per_head_reports(
    dump: &AttentionDump,
    reference: &[WordSegment],
    tolerance: f64,
) -> Result<Vec<(HeadId, EvalReport)>> {
    let heads: Vec<HeadId> = dump.heads().collect();
    par::map(&heads, |&h| {
        let hyp = align_with_heads(dump, &[h])?;
        Ok((h, boundary_f1(&hyp, reference, tolerance)))
    })
    .into_iter()
    .collect()
}

/// The best single head for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceOracle {
    pub utterance_id: String,
    pub head: HeadId,
    pub report: EvalReport,
}

fn best_of(reports: &[(HeadId, EvalReport)]) -> Option<(HeadId, EvalReport)> {
    // strict comparison keeps the lowest (layer, head) on ties
    reports
        .iter()
        .fold(None, |best: Option<(HeadId, EvalReport)>, &(h, r)| match best {
            Some((_, b)) if r.f1 <= b.f1 => best,
            _ => Some((h, r)),
        })
}

/// Run the single-head pipeline for every head and keep the one with the
/// highest F1. Ties go to the lowest (layer, head).
pub fn oracle_head(dump: &AttentionDump, reference: &[WordSegment], tolerance: f64) -> Result<UtteranceOracle> {
    let reports = per_head_reports(dump, reference, tolerance)?;
    let (head, report) = best_of(&reports).ok_or_else(|| Error::domain("dump has no heads"))?;
    Ok(UtteranceOracle {
        utterance_id: dump.utterance_id.clone(),
        head,
        report,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    /// Most frequent per-utterance oracle head (ties: lowest index).
    pub head: HeadId,
    /// Corpus F1 when every utterance uses its own oracle head.
    pub f1: f64,
    pub report: EvalReport,
    pub per_utterance: BTreeMap<String, HeadId>,
    pub per_utterance_f1: BTreeMap<String, f64>,
}

impl OracleResult {
    pub fn from_utterances(utterances: &[UtteranceOracle], tolerance: f64) -> Result<Self> {
        let reports: Vec<EvalReport> = utterances.iter().map(|u| u.report).collect();
        let report = combine(&reports, tolerance, Averaging::Micro);
        let hist = oracle_histogram(utterances.iter().map(|u| u.head));
        let head = hist
            .first()
            .map(|&(h, _)| h)
            .ok_or_else(|| Error::domain("oracle search over an empty corpus"))?;
        Ok(OracleResult {
            head,
            f1: report.f1,
            report,
            per_utterance: utterances.iter().map(|u| (u.utterance_id.clone(), u.head)).collect(),
            per_utterance_f1: utterances
                .iter()
                .map(|u| (u.utterance_id.clone(), u.report.f1))
                .collect(),
        })
    }
}

pub fn oracle_search(items: &[(&AttentionDump, &[WordSegment])], tolerance: f64) -> Result<OracleResult> {
    let utterances: Vec<UtteranceOracle> = par::map(items, |(d, r)| oracle_head(d, r, tolerance))
        .into_iter()
        .collect::<Result<_>>()?;
    OracleResult::from_utterances(&utterances, tolerance)
}

/// Oracle-head counts, most frequent first (ties by ascending head).
pub fn oracle_histogram(heads: impl IntoIterator<Item = HeadId>) -> Vec<(HeadId, usize)> {
    let mut counts: BTreeMap<HeadId, usize> = BTreeMap::new();
    for h in heads {
        *counts.entry(h).or_default() += 1;
    }
    let mut v: Vec<(HeadId, usize)> = counts.into_iter().collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    v
}

/// Fraction of utterances whose oracle head is among the selected heads.
pub fn hit_rate(selected: &BTreeMap<String, Vec<HeadId>>, oracle: &BTreeMap<String, HeadId>) -> Result<f64> {
    if selected.len() != oracle.len() || selected.keys().any(|k| !oracle.contains_key(k)) {
        return Err(Error::domain(
            "selected heads and oracle heads cover different utterances",
        ));
    }
    if oracle.is_empty() {
        return Err(Error::domain("hit rate over an empty corpus"));
    }
    let hits = oracle
        .iter()
        .filter(|(utt, head)| selected[*utt].contains(head))
        .count();
    Ok(hits as f64 / oracle.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScatterPoint {
    pub head: HeadId,
    pub score: f64,
    pub f1: f64,
}

/// Score and single-head F1 for every head of one utterance.
pub fn head_score_scatter(
    dump: &AttentionDump,
    reference: &[WordSegment],
    criterion: Criterion,
    tolerance: f64,
) -> Result<Vec<ScatterPoint>> {
    let table = score_all(dump, criterion)?;
    let reports = per_head_reports(dump, reference, tolerance)?;
    Ok(reports
        .into_iter()
        .map(|(head, r)| ScatterPoint {
            head,
            score: table.scores[&head],
            f1: r.f1,
        })
        .collect())
}

/// Per-utterance results of aligning with the top-k heads for several k.
#[derive(Debug, Clone, PartialEq)]
pub struct TopKUtterance {
    pub utterance_id: String,
    pub oracle: HeadId,
    /// One entry per requested k: the selected heads and the resulting report.
    pub per_k: Vec<(Vec<HeadId>, EvalReport)>,
}

/// Rank heads once, then align with the top-k heads for every k in `ks`.
/// A k above the head count means all heads.
pub fn top_k_utterance(
    dump: &AttentionDump,
    reference: &[WordSegment],
    ks: &[usize],
    criterion: Criterion,
    tolerance: f64,
) -> Result<TopKUtterance> {
    let ranked = score_all(dump, criterion)?.ranked();
    let oracle = oracle_head(dump, reference, tolerance)?;
    let per_k = ks
        .iter()
        .map(|&k| {
            let k = k.clamp(1, ranked.len());
            let heads: Vec<HeadId> = ranked[..k].iter().map(|&(h, _)| h).collect();
            let hyp = align_with_heads(dump, &heads)?;
            Ok((heads, boundary_f1(&hyp, reference, tolerance)))
        })
        .collect::<Result<_>>()?;
    Ok(TopKUtterance {
        utterance_id: dump.utterance_id.clone(),
        oracle: oracle.head,
        per_k,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HitRateRow {
    pub k: usize,
    pub f1: f64,
    pub hit_rate: f64,
}

pub fn hit_rate_table(utterances: &[TopKUtterance], ks: &[usize], tolerance: f64) -> Result<Vec<HitRateRow>> {
    let oracle: BTreeMap<String, HeadId> = utterances.iter().map(|u| (u.utterance_id.clone(), u.oracle)).collect();
    ks.iter()
        .enumerate()
        .map(|(n, &k)| {
            let selected = utterances
                .iter()
                .map(|u| (u.utterance_id.clone(), u.per_k[n].0.clone()))
                .collect();
            let reports: Vec<EvalReport> = utterances.iter().map(|u| u.per_k[n].1).collect();
            Ok(HitRateRow {
                k,
                f1: combine(&reports, tolerance, Averaging::Micro).f1,
                hit_rate: hit_rate(&selected, &oracle)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seg(w: &str, s: f64, e: f64) -> WordSegment {
        WordSegment::new(w, s, e)
    }

    fn three() -> Vec<WordSegment> {
        vec![seg("she", 0.0, 0.3), seg("had", 0.3, 0.6), seg("your", 0.6, 0.9)]
    }

    #[test]
    fn identical_sequences_pair_up() {
        assert_eq!(match_words(&three(), &three()), [(0, 0), (1, 1), (2, 2)]);
    }

    #[test]
    fn insertion_keeps_other_pairs() {
        let mut hyp = three();
        hyp.insert(1, seg("uh", 0.3, 0.31));
        assert_eq!(match_words(&hyp, &three()), [(0, 0), (2, 1), (3, 2)]);
    }

    #[test]
    fn substitution_is_not_a_pair() {
        let mut hyp = three();
        hyp[1].word = "has".into();
        assert_eq!(match_words(&hyp, &three()), [(0, 0), (2, 2)]);
    }

    #[test]
    fn matching_normalizes_case_and_punctuation() {
        let hyp = vec![seg("Suit.", 0.0, 0.1)];
        let reference = vec![seg("suit", 0.0, 0.1)];
        assert_eq!(match_words(&hyp, &reference), [(0, 0)]);
    }

    #[test]
    fn self_evaluation_is_perfect() {
        for tol in [0.0, 0.02, 0.1] {
            let r = boundary_f1(&three(), &three(), tol);
            assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
        }
    }

    #[test]
    fn shift_past_tolerance_misses_everything() {
        let tol = 0.05;
        let hyp: Vec<_> = three()
            .into_iter()
            .map(|s| seg(&s.word, s.start, s.end + tol + 0.001))
            .collect();
        assert_eq!(boundary_f1(&hyp, &three(), tol).f1, 0.0);
        let hyp: Vec<_> = three()
            .into_iter()
            .map(|s| seg(&s.word, s.start, s.end + tol))
            .collect();
        assert_eq!(boundary_f1(&hyp, &three(), tol).f1, 1.0);
    }

    #[test]
    fn two_of_three_hits() {
        let mut hyp = three();
        hyp[2].end += 0.2;
        let r = boundary_f1(&hyp, &three(), 0.05);
        assert_eq!(r.true_positives, 2);
        assert_eq!(r.precision, 2.0 / 3.0);
        assert_eq!(r.recall, 2.0 / 3.0);
        assert_eq!(r.f1, 2.0 / 3.0);
    }

    #[test]
    fn empty_sides() {
        let r = boundary_f1(&[], &three(), 0.1);
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
        let r = boundary_f1(&[], &[], 0.1);
        assert_eq!(r.f1, 0.0);
    }

    #[test]
    fn sweep_shapes() {
        let sweep = tolerance_sweep(&three(), &three(), &[0.02, 0.04, 0.06, 0.08, 0.10]).unwrap();
        assert_eq!(sweep.len(), 5);
        let single = tolerance_sweep(&three(), &three(), &[0.05]).unwrap();
        assert_eq!(single[0], boundary_f1(&three(), &three(), 0.05));
        let empty = tolerance_sweep(&[], &three(), &DEFAULT_TOLERANCES).unwrap();
        assert!(empty.iter().all(|r| r.f1 == 0.0));
        assert!(tolerance_sweep(&three(), &three(), &[]).is_err());
    }

    #[test]
    fn micro_and_macro_differ() {
        let a = EvalReport::from_counts(0.05, 1, 1, 1);
        let b = EvalReport::from_counts(0.05, 0, 3, 3);
        assert_eq!(combine(&[a, b], 0.05, Averaging::Micro).f1, 0.25);
        assert_eq!(combine(&[a, b], 0.05, Averaging::Macro).f1, 0.5);
    }

    #[test]
    fn hit_rates() {
        let h = |l, x| HeadId::new(l, x);
        let oracle: BTreeMap<String, HeadId> = (0..4).map(|i| (format!("u{i}"), h(0, i))).collect();
        let all: BTreeMap<String, Vec<HeadId>> = (0..4)
            .map(|i| (format!("u{i}"), (0..4).map(|x| h(0, x)).collect()))
            .collect();
        assert_eq!(hit_rate(&all, &oracle).unwrap(), 1.0);
        let none: BTreeMap<String, Vec<HeadId>> = (0..4).map(|i| (format!("u{i}"), vec![h(1, 0)])).collect();
        assert_eq!(hit_rate(&none, &oracle).unwrap(), 0.0);
        let half: BTreeMap<String, Vec<HeadId>> = (0..4).map(|i| (format!("u{i}"), vec![h(0, 0), h(0, 1)])).collect();
        assert_eq!(hit_rate(&half, &oracle).unwrap(), 0.5);
        let mut wrong = half.clone();
        wrong.remove("u0");
        wrong.insert("zz".into(), vec![]);
        assert!(hit_rate(&wrong, &oracle).is_err());
    }

    #[test]
    fn histogram_orders_by_count() {
        let h = |l, x| HeadId::new(l, x);
        let hist = oracle_histogram([h(1, 1), h(0, 2), h(1, 1), h(0, 0), h(0, 2)]);
        assert_eq!(hist, [(h(0, 2), 2), (h(1, 1), 2), (h(0, 0), 1)]);
    }

    fn segments() -> impl Strategy<Value = Vec<WordSegment>> {
        prop::collection::vec(("[a-d]{1,2}", 0.0f64..0.3), 0..8).prop_map(|v| {
            let mut t = 0.0;
            v.into_iter()
                .map(|(w, d)| {
                    let s = t;
                    t += d;
                    WordSegment::new(w, s, t)
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn f1_is_monotone_in_tolerance(hyp in segments(), reference in segments()) {
            let sweep = tolerance_sweep(&hyp, &reference, &DEFAULT_TOLERANCES).unwrap();
            for w in sweep.windows(2) {
                prop_assert!(w[0].f1 <= w[1].f1);
            }
        }

        #[test]
        fn swapping_sides_swaps_precision_and_recall(hyp in segments(), reference in segments(), tol in 0.0f64..0.2) {
            let a = boundary_f1(&hyp, &reference, tol);
            let b = boundary_f1(&reference, &hyp, tol);
            prop_assert_eq!(a.true_positives, b.true_positives);
            prop_assert_eq!(a.precision, b.recall);
            prop_assert_eq!(a.recall, b.precision);
            prop_assert!((a.f1 - b.f1).abs() < 1e-12);
        }

        #[test]
        fn pairs_are_order_consistent(hyp in segments(), reference in segments()) {
            let pairs = match_words(&hyp, &reference);
            for w in pairs.windows(2) {
                prop_assert!(w[0].0 < w[1].0 && w[0].1 < w[1].1);
            }
        }

        #[test]
        fn self_evaluation(x in segments()) {
            let r = boundary_f1(&x, &x, 0.0);
            if !x.is_empty() {
                prop_assert_eq!(r.precision, 1.0);
                prop_assert_eq!(r.recall, 1.0);
            }
        }
    }
}

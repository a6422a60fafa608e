//! Synthetic utterances with known word boundaries, and an exhaustive DTW
//! used as a test oracle.
//!
//! Each utterance gets one planted alignment head and a configurable mix of
//! distractor heads. Timing is crude on purpose: every character of a word
//! lasts the same number of frames, words are separated by 0–3 silent frames,
//! and the last word ends on the last frame.
//!
//! Seeds: utterance `i` draws from `ChaCha8Rng::seed_from_u64(seed)` on stream
//! `i`; the corpus-level pool of planted heads uses stream `u64::MAX`. Output
//! therefore depends only on the seed and index, never on thread count.

use std::io::{BufRead, Write};
use std::ops::{Range, RangeInclusive};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attn_io::{AttentionDump, WordSegment};
use crate::dtw_align::{AlignmentPath, CostMatrix};
use crate::error::{Error, Result};
use crate::head_filter::HeadId;
use crate::par;
use crate::tokenization::to_characters;

/// Largest cost matrix the exhaustive search accepts.
pub const BRUTE_FORCE_MAX_ROWS: usize = 6;
pub const BRUTE_FORCE_MAX_COLS: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Ideal,
    Uniform,
    Noise,
    Shifted,
    Repeated,
    Blurry,
}

/// How many heads of each distractor kind an utterance gets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DistractorMix {
    pub uniform: usize,
    pub noise: usize,
    pub shifted: usize,
    pub repeated: usize,
    pub blurry: usize,
}

impl DistractorMix {
    pub fn total(&self) -> usize {
        self.uniform + self.noise + self.shifted + self.repeated + self.blurry
    }

    fn kinds(&self) -> Vec<HeadKind> {
        [
            (HeadKind::Uniform, self.uniform),
            (HeadKind::Noise, self.noise),
            (HeadKind::Shifted, self.shifted),
            (HeadKind::Repeated, self.repeated),
            (HeadKind::Blurry, self.blurry),
        ]
        .into_iter()
        .flat_map(|(k, n)| std::iter::repeat_n(k, n))
        .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub num_words: RangeInclusive<usize>,
    pub word_chars: RangeInclusive<usize>,
    pub frame_duration_ms: f32,
    pub chars_per_second: RangeInclusive<f64>,
    /// Concentration of the planted head's bumps; larger is sharper.
    pub ideal_sharpness: f64,
    /// Concentration used for SHIFTED and REPEATED distractors.
    pub distractor_sharpness: f64,
    pub distractors: DistractorMix,
    pub num_layers: usize,
    pub heads_per_layer: usize,
    /// Number of distinct heads the planted head is drawn from, taken from the
    /// upper half of the layers where possible.
    pub ideal_pool: usize,
    pub leading_silence_frames: RangeInclusive<usize>,
    pub word_gap_frames: RangeInclusive<usize>,
    /// Minimum |offset| in frames for SHIFTED and REPEATED bumps.
    pub min_shift_frames: usize,
    pub max_shift_frames: usize,
    /// Trailing box window widths for BLURRY heads.
    pub blur_width: RangeInclusive<usize>,
}

impl Default for SynthConfig {
    /// 4 layers × 8 heads: one planted head and 31 mixed distractors.
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            num_words: 4..=10,
            word_chars: 2..=7,
            frame_duration_ms: 20.0,
            chars_per_second: 10.0..=16.0,
            ideal_sharpness: 8.0,
            distractor_sharpness: 0.3,
            distractors: DistractorMix {
                uniform: 6,
                noise: 6,
                shifted: 6,
                repeated: 6,
                blurry: 7,
            },
            num_layers: 4,
            heads_per_layer: 8,
            ideal_pool: 3,
            leading_silence_frames: 0..=3,
            word_gap_frames: 0..=3,
            min_shift_frames: 3,
            max_shift_frames: 8,
            blur_width: 9..=15,
        }
    }
}

impl SynthConfig {
    pub fn num_heads(&self) -> usize {
        self.num_layers * self.heads_per_layer
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::domain(format!("infeasible synth config: {m}")));
        if self.num_layers == 0 || self.heads_per_layer == 0 {
            return bad("need at least one layer and one head per layer".into());
        }
        if self.num_heads() < self.distractors.total() + 1 {
            return bad(format!(
                "{} distractors plus the planted head exceed {} heads",
                self.distractors.total(),
                self.num_heads()
            ));
        }
        if self.num_words.is_empty() || *self.num_words.start() == 0 {
            return bad("num_words must be a non-empty range of positive counts".into());
        }
        if self.word_chars.is_empty() || *self.word_chars.start() == 0 {
            return bad("word_chars must be a non-empty range of positive lengths".into());
        }
        if self.chars_per_second.is_empty()
            || self.chars_per_second.start().is_nan()
            || *self.chars_per_second.start() <= 0.0
        {
            return bad("chars_per_second must be a non-empty positive range".into());
        }
        if self.leading_silence_frames.is_empty() || self.word_gap_frames.is_empty() || self.blur_width.is_empty() {
            return bad("silence, gap and blur ranges must be non-empty".into());
        }
        if !(self.frame_duration_ms.is_finite() && self.frame_duration_ms > 0.0) {
            return bad("frame duration must be positive".into());
        }
        if self.ideal_sharpness.is_nan() || self.ideal_sharpness < 1.0 {
            return bad("ideal sharpness must be at least 1".into());
        }
        if !(self.distractor_sharpness > 0.0 && self.distractor_sharpness.is_finite()) {
            return bad("distractor sharpness must be positive".into());
        }
        if self.min_shift_frames == 0 || self.min_shift_frames > self.max_shift_frames {
            return bad("shift range must satisfy 1 <= min <= max".into());
        }
        if self.ideal_pool == 0 || self.ideal_pool > self.num_heads() {
            return bad(format!("ideal_pool must be in 1..={}", self.num_heads()));
        }
        Ok(())
    }

    fn frame_duration(&self) -> f64 {
        f64::from(self.frame_duration_ms) / 1000.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthUtterance {
    pub dump: AttentionDump,
    pub truth: Vec<WordSegment>,
    pub ideal_head: HeadId,
    /// Kind of every head in (layer, head) order.
    pub kinds: Vec<HeadKind>,
}

/// Heads the planted head is drawn from for a whole corpus.
pub fn ideal_pool(config: &SynthConfig) -> Vec<HeadId> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(u64::MAX);
    let upper = config.num_layers.div_ceil(2).min(config.num_layers - 1);
    let mut candidates: Vec<HeadId> = (upper..config.num_layers)
        .flat_map(|l| (0..config.heads_per_layer).map(move |h| HeadId::new(l, h)))
        .collect();
    if candidates.len() < config.ideal_pool {
        candidates = (0..config.num_layers)
            .flat_map(|l| (0..config.heads_per_layer).map(move |h| HeadId::new(l, h)))
            .collect();
    }
    candidates.shuffle(&mut rng);
    candidates.truncate(config.ideal_pool);
    candidates.sort();
    candidates
}

pub fn generate(config: &SynthConfig, count: usize) -> Result<Vec<SynthUtterance>> {
    generate_range(config, 0..count)
}

/// Utterances `range.start..range.end` of the corpus `generate` would produce,
/// so large corpora can be written in chunks.
pub fn generate_range(config: &SynthConfig, range: Range<usize>) -> Result<Vec<SynthUtterance>> {
    config.validate()?;
    let pool = ideal_pool(config);
    let start = range.start;
    par::map_range(range.len(), |i| generate_one(config, &pool, start + i))
        .into_iter()
        .collect()
}

/// Per-token frame spans (inclusive) and the word truth.
struct Timing {
    words: Vec<String>,
    token_spans: Vec<(usize, usize)>,
    word_frames: Vec<(usize, usize)>,
    num_frames: usize,
}

fn draw_timing(config: &SynthConfig, rng: &mut ChaCha8Rng) -> Timing {
    let fd = config.frame_duration();
    let n = rng.random_range(config.num_words.clone());
    let mut words = Vec::with_capacity(n);
    let mut word_frames = Vec::with_capacity(n);
    let mut char_spans: Vec<Vec<(usize, usize)>> = Vec::with_capacity(n);
    let mut t = rng.random_range(config.leading_silence_frames.clone());
    for w in 0..n {
        if w > 0 {
            t += rng.random_range(config.word_gap_frames.clone());
        }
        let len = rng.random_range(config.word_chars.clone());
        let word: String = (0..len).map(|_| char::from(b'a' + rng.random_range(0..26u8))).collect();
        let rate = rng.random_range(config.chars_per_second.clone());
        let per_char = ((1.0 / (rate * fd)).round() as usize).max(1);
        let start = t;
        let spans = (0..len)
            .map(|c| (start + c * per_char, start + (c + 1) * per_char - 1))
            .collect();
        t = start + len * per_char;
        words.push(word);
        word_frames.push((start, t - 1));
        char_spans.push(spans);
    }

    let mut token_spans = Vec::new();
    for (w, spans) in char_spans.iter().enumerate() {
        if w > 0 {
            let prev_end = word_frames[w - 1].1;
            let next_start = word_frames[w].0;
            token_spans.push(if next_start > prev_end + 1 {
                (prev_end + 1, next_start - 1)
            } else {
                (prev_end, next_start)
            });
        }
        token_spans.extend_from_slice(spans);
    }
    Timing {
        words,
        token_spans,
        word_frames,
        num_frames: t,
    }
}

/// Bump over an inclusive span, peaked at the span's (floored) midpoint and
/// scaled by the span length.
fn add_bump(row: &mut [f64], span: (usize, usize), shift: isize, sharpness: f64, mass: f64) {
    let (a, b) = span;
    let center = (a + b) / 2;
    let half = (b - a + 1) as f64;
    let t = row.len() as isize;
    let raw: Vec<f64> = (a..=b)
        .map(|f| {
            let d = (f as f64 - center as f64) / half;
            (-sharpness * d * d).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    for (f, w) in (a..=b).zip(raw) {
        let dest = (f as isize + shift).rem_euclid(t) as usize;
        row[dest] += mass * w / total;
    }
}

/// Gaussian bump over the whole row, centred on the span's (floored) midpoint
/// with the span length as scale, then circularly shifted.
fn add_spread_bump(row: &mut [f64], span: (usize, usize), shift: isize, sharpness: f64, mass: f64) {
    let (a, b) = span;
    let center = (a + b) / 2;
    let half = (b - a + 1) as f64;
    let t = row.len() as isize;
    let raw: Vec<f64> = (0..row.len())
        .map(|f| {
            let d = (f as f64 - center as f64) / half;
            (-sharpness * d * d).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    for (f, w) in raw.into_iter().enumerate() {
        let dest = (f as isize + shift).rem_euclid(t) as usize;
        row[dest] += mass * w / total;
    }
}

fn normalize(row: &mut [f64]) {
    let s: f64 = row.iter().sum();
    row.iter_mut().for_each(|v| *v /= s);
}

fn random_shift(config: &SynthConfig, rng: &mut ChaCha8Rng) -> isize {
    let mag = rng.random_range(config.min_shift_frames..=config.max_shift_frames) as isize;
    if rng.random_bool(0.5) {
        mag
    } else {
        -mag
    }
}

fn render_head(kind: HeadKind, timing: &Timing, config: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let t = timing.num_frames;
    let k = timing.token_spans.len();
    let mut out = vec![0.0; k * t];
    match kind {
        HeadKind::Ideal => {
            for (row, &span) in out.chunks_mut(t).zip(&timing.token_spans) {
                add_bump(row, span, 0, config.ideal_sharpness, 1.0);
            }
        }
        HeadKind::Uniform => out.iter_mut().for_each(|v| *v = 1.0 / t as f64),
        HeadKind::Noise => {
            for row in out.chunks_mut(t) {
                row.iter_mut().for_each(|v| *v = -(1.0 - rng.random::<f64>()).ln());
                normalize(row);
            }
        }
        HeadKind::Shifted => {
            let shift = random_shift(config, rng);
            for (row, &span) in out.chunks_mut(t).zip(&timing.token_spans) {
                add_spread_bump(row, span, shift, config.distractor_sharpness, 1.0);
            }
        }
        HeadKind::Repeated => {
            // Both bumps sit on the same side of the token, neither on it.
            let near = random_shift(config, rng);
            let gap = rng.random_range(config.min_shift_frames..=config.max_shift_frames) as isize;
            let far = near + near.signum() * gap;
            let echo = rng.random_range(0.55..0.7);
            for (row, &span) in out.chunks_mut(t).zip(&timing.token_spans) {
                add_spread_bump(row, span, near, config.distractor_sharpness, 1.0 - echo);
                add_spread_bump(row, span, far, config.distractor_sharpness, echo);
            }
        }
        HeadKind::Blurry => {
            // Trailing window: each frame smears forward, so the mass lags.
            let width = rng.random_range(config.blur_width.clone());
            for (row, &span) in out.chunks_mut(t).zip(&timing.token_spans) {
                let mut sharp = vec![0.0; t];
                add_bump(&mut sharp, span, 0, config.ideal_sharpness, 1.0);
                for (f, v) in row.iter_mut().enumerate() {
                    let lo = (f + 1).saturating_sub(width);
                    *v = sharp[lo..=f].iter().sum::<f64>();
                }
                normalize(row);
            }
        }
    }
    out
}

fn generate_one(config: &SynthConfig, pool: &[HeadId], index: usize) -> Result<SynthUtterance> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index as u64);

    let timing = draw_timing(config, &mut rng);
    let tok = to_characters(&timing.words)?;
    let ideal_head = pool[rng.random_range(0..pool.len())];
    let hh = config.heads_per_layer;
    let ideal_flat = ideal_head.layer * hh + ideal_head.head;

    let mut others = config.distractors.kinds();
    others.resize(config.num_heads() - 1, HeadKind::Uniform);
    others.shuffle(&mut rng);
    let mut kinds = others;
    kinds.insert(ideal_flat, HeadKind::Ideal);

    let mut weights = Vec::with_capacity(kinds.len() * tok.tokens.len() * timing.num_frames);
    for &kind in &kinds {
        weights.extend(
            render_head(kind, &timing, config, &mut rng)
                .into_iter()
                .map(|v| v as f32),
        );
    }
    let fd = config.frame_duration();
    let truth = timing
        .words
        .iter()
        .zip(&timing.word_frames)
        .map(|(w, &(s, e))| WordSegment::new(w.clone(), s as f64 * fd, (e + 1) as f64 * fd))
        .collect();
    let dump = AttentionDump::new(
        format!("synth-{index:05}"),
        config.num_layers,
        hh,
        config.frame_duration_ms,
        tok.tokens,
        timing.num_frames,
        weights,
    )?;
    Ok(SynthUtterance {
        dump,
        truth,
        ideal_head,
        kinds,
    })
}

/// One manifest line: which head was planted in which utterance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub utterance_id: String,
    pub layer: usize,
    pub head: usize,
}

impl From<&SynthUtterance> for ManifestEntry {
    fn from(u: &SynthUtterance) -> Self {
        ManifestEntry {
            utterance_id: u.dump.utterance_id.clone(),
            layer: u.ideal_head.layer,
            head: u.ideal_head.head,
        }
    }
}

pub fn write_manifest<W: Write>(entries: &[ManifestEntry], mut sink: W) -> Result<()> {
    for e in entries {
        let line = serde_json::to_string(e).map_err(|err| Error::Data(err.to_string()))?;
        writeln!(sink, "{line}").map_err(|err| Error::io("writing manifest", err))?;
    }
    sink.flush().map_err(|err| Error::io("writing manifest", err))
}

pub fn read_manifest<R: BufRead>(source: R) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (n, line) in source.lines().enumerate() {
        let line = line.map_err(|e| Error::io("reading manifest", e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: n + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Exhaustive minimum over every monotone path with steps (0,1), (1,0) and
/// (1,1). Among equal-cost paths the one whose steps, read backwards from the
/// end, are lexicographically smallest under diagonal < horizontal < vertical
/// wins.
pub fn brute_force_dtw(cost: &CostMatrix) -> Result<(AlignmentPath, f64)> {
    let (n, m) = (cost.rows(), cost.cols());
    if n > BRUTE_FORCE_MAX_ROWS || m > BRUTE_FORCE_MAX_COLS {
        return Err(Error::domain(format!(
            "brute force DTW is limited to {BRUTE_FORCE_MAX_ROWS}x{BRUTE_FORCE_MAX_COLS}, got {n}x{m}"
        )));
    }

    /// Total cost, reversed step codes, path.
    type Candidate = (f64, Vec<u8>, Vec<(usize, usize)>);

    struct Search<'a> {
        cost: &'a CostMatrix,
        path: Vec<(usize, usize)>,
        best: Option<Candidate>,
    }

    fn step_code(from: (usize, usize), to: (usize, usize)) -> u8 {
        match (to.0 - from.0, to.1 - from.1) {
            (1, 1) => 0,
            (0, 1) => 1,
            _ => 2,
        }
    }

    impl Search<'_> {
        fn visit(&mut self, i: usize, j: usize, acc: f64) {
            let (n, m) = (self.cost.rows(), self.cost.cols());
            self.path.push((i, j));
            if (i, j) == (n - 1, m - 1) {
                let codes: Vec<u8> = self.path.windows(2).rev().map(|w| step_code(w[0], w[1])).collect();
                let better = match &self.best {
                    None => true,
                    Some((total, best_codes, _)) => acc < *total || (acc == *total && codes < *best_codes),
                };
                if better {
                    self.best = Some((acc, codes, self.path.clone()));
                }
            } else {
                for (di, dj) in [(1, 1), (0, 1), (1, 0)] {
                    let (ni, nj) = (i + di, j + dj);
                    if ni < n && nj < m {
                        self.visit(ni, nj, acc + self.cost.get(ni, nj));
                    }
                }
            }
            self.path.pop();
        }
    }

    let mut search = Search {
        cost,
        path: Vec::new(),
        best: None,
    };
    search.visit(0, 0, cost.get(0, 0));
    let (total, _, steps) = search.best.expect("at least one path exists");
    Ok((AlignmentPath { steps }, total))
}

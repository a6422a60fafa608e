use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use attnalign::attn_io::{write_dump_file, write_segments, SegmentsByUtterance};
use attnalign::dtw_align::align_utterance;
use attnalign::eval::{
    combine, corpus_sweep, head_score_scatter, hit_rate_table, oracle_head, oracle_histogram, tolerance_sweep,
    top_k_utterance, Averaging, OracleResult, ScatterPoint, UtteranceOracle,
};
use attnalign::head_filter::{Criterion, HeadId, SelectionStrategy};
use attnalign::synth::{generate_range, write_manifest, DistractorMix, ManifestEntry, SynthConfig};
use attnalign::{AttentionDump, EvalReport, WordSegment};

use crate::args::{
    AlignArgs, EvalArgs, HitRateArgs, OracleArgs, ScoringArgs, StrategyArgs, SweepArgs, SynthArgs, TopK,
};
use crate::inputs::{self, check_unreferenced, for_each_dump, lookup, Item};
use crate::UsageError;

pub const DEFAULT_TOP_K: usize = 10;
const HEADLINE_TOLERANCES: [f64; 2] = [0.050, 0.100];
const SYNTH_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok,
    /// Some dumps failed under `--keep-going`.
    Partial,
}

impl Status {
    fn from_failures(failed: usize) -> Self {
        if failed > 0 {
            Status::Partial
        } else {
            Status::Ok
        }
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn seconds(ms: f64, flag: &str) -> anyhow::Result<f64> {
    if !(ms.is_finite() && ms >= 0.0) {
        return Err(usage(format!(
            "{flag}: tolerance {ms} ms must be a non-negative number"
        )));
    }
    Ok(ms / 1000.0)
}

fn tolerances(scoring: &ScoringArgs) -> anyhow::Result<Vec<f64>> {
    if scoring.tolerances.is_empty() {
        return Err(usage("--tolerances: at least one tolerance is needed"));
    }
    scoring
        .tolerances
        .iter()
        .map(|&ms| seconds(ms, "--tolerances"))
        .collect()
}

fn averaging(scoring: &ScoringArgs) -> Averaging {
    if scoring.macro_average {
        Averaging::Macro
    } else {
        Averaging::Micro
    }
}

/// Data goes to `path` or stdout.
fn sink(path: Option<&Path>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("cannot create {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

/// Summaries go to stdout when the data went to a file, otherwise stderr.
fn summary(data_to_file: bool, line: &str) {
    if data_to_file {
        println!("{line}");
    } else {
        eprintln!("{line}");
    }
}

fn headline(reports: &[EvalReport]) -> String {
    format!("F1@50ms {:.4}  F1@100ms {:.4}", reports[0].f1, reports[1].f1)
}

fn write_sweep_csv(out: &mut dyn Write, ms: &[f64], reports: &[EvalReport]) -> anyhow::Result<()> {
    writeln!(out, "tolerance_ms,precision,recall,f1,tp,hyp_words,ref_words")?;
    for (ms, r) in ms.iter().zip(reports) {
        writeln!(
            out,
            "{ms},{:.6},{:.6},{:.6},{},{},{}",
            r.precision, r.recall, r.f1, r.true_positives, r.num_hyp_words, r.num_ref_words
        )?;
    }
    out.flush()?;
    Ok(())
}

enum Choice {
    TopK(usize),
    UpperHalf,
    Fixed(Vec<HeadId>),
    Oracle(SegmentsByUtterance, f64),
}

/// A head-selection strategy resolved from the flags.
struct Strategy {
    choice: Choice,
    criterion: Criterion,
}

impl Strategy {
    fn from_args(args: &StrategyArgs, reference: Option<&Path>) -> anyhow::Result<Self> {
        let set = [
            args.top_k.is_some(),
            args.upper_half,
            args.fixed_heads.is_some(),
            args.oracle,
        ];
        if set.iter().filter(|&&s| s).count() > 1 {
            return Err(usage("choose one of --top-k, --upper-half, --fixed-heads and --oracle"));
        }
        let choice = if args.upper_half {
            Choice::UpperHalf
        } else if let Some(heads) = &args.fixed_heads {
            if heads.is_empty() {
                return Err(usage("--fixed-heads needs at least one head"));
            }
            Choice::Fixed(heads.clone())
        } else if args.oracle {
            let Some(path) = reference else {
                return Err(usage("--oracle requires --reference"));
            };
            let tol = seconds(args.oracle_tolerance_ms, "--oracle-tolerance-ms")?;
            Choice::Oracle(inputs::reference(path)?, tol)
        } else {
            match args.top_k.unwrap_or(DEFAULT_TOP_K) {
                0 => return Err(usage("--top-k must be at least 1")),
                k => Choice::TopK(k),
            }
        };
        Ok(Strategy {
            choice,
            criterion: args.criterion,
        })
    }

    fn align(&self, dump: &AttentionDump) -> anyhow::Result<Item<Vec<WordSegment>>> {
        let strategy = match &self.choice {
            Choice::TopK(k) => SelectionStrategy::TopK(*k),
            Choice::UpperHalf => SelectionStrategy::UpperHalf,
            Choice::Fixed(h) => SelectionStrategy::Fixed(h.clone()),
            Choice::Oracle(reference, tolerance) => match lookup(reference, dump) {
                Some(r) => SelectionStrategy::Oracle {
                    reference: r.to_vec(),
                    tolerance: *tolerance,
                },
                None => return Ok(Item::Unreferenced),
            },
        };
        Ok(Item::Done(align_utterance(dump, &strategy, self.criterion)?))
    }
}

pub fn align(args: &AlignArgs) -> anyhow::Result<Status> {
    let strategy = Strategy::from_args(&args.strategy, args.reference.as_deref())?;
    let run = for_each_dump(&args.inputs, |d| strategy.align(d))?;
    check_unreferenced(&run.unreferenced, false)?;
    let words: usize = run.results.values().map(Vec::len).sum();
    let mut out = sink(args.out.as_deref())?;
    write_segments(&run.results, &mut out)?;
    out.flush()?;
    summary(
        args.out.is_some(),
        &format!("aligned {} utterances ({words} words)", run.results.len()),
    );
    Ok(Status::from_failures(run.failed))
}

pub fn eval(args: &EvalArgs) -> anyhow::Result<Status> {
    let secs = tolerances(&args.scoring)?;
    let predictions = inputs::reference(&args.predictions)?;
    let reference = inputs::reference(&args.reference)?;
    let unreferenced: Vec<String> = predictions
        .keys()
        .filter(|k| !reference.contains_key(*k))
        .cloned()
        .collect();
    check_unreferenced(&unreferenced, args.scoring.strict)?;
    let unpredicted = reference.keys().filter(|k| !predictions.contains_key(*k)).count();
    if unpredicted > 0 {
        log::warn!("{unpredicted} reference utterance(s) have no predictions and score as empty");
    }
    let empty: Vec<WordSegment> = Vec::new();
    let pairs: Vec<(&[WordSegment], &[WordSegment])> = reference
        .iter()
        .map(|(id, r)| (predictions.get(id).unwrap_or(&empty).as_slice(), r.as_slice()))
        .collect();
    let avg = averaging(&args.scoring);
    let reports = corpus_sweep(&pairs, &secs, avg)?;
    let heads = corpus_sweep(&pairs, &HEADLINE_TOLERANCES, avg)?;
    write_sweep_csv(&mut *sink(args.out.as_deref())?, &args.scoring.tolerances, &reports)?;
    summary(
        args.out.is_some(),
        &format!("{} utterances  {}", pairs.len(), headline(&heads)),
    );
    Ok(Status::Ok)
}

pub fn sweep(args: &SweepArgs) -> anyhow::Result<Status> {
    let secs = tolerances(&args.scoring)?;
    let strategy = Strategy::from_args(&args.align.strategy, Some(&args.align.reference))?;
    let reference = inputs::reference(&args.align.reference)?;
    let all: Vec<f64> = secs.iter().chain(&HEADLINE_TOLERANCES).copied().collect();
    let run = for_each_dump(&args.align.inputs, |d| {
        let Some(r) = lookup(&reference, d) else {
            return Ok(Item::Unreferenced);
        };
        let hyp = match strategy.align(d)? {
            Item::Done(h) => h,
            Item::Unreferenced => return Ok(Item::Unreferenced),
        };
        let reports = tolerance_sweep(&hyp, r, &all)?;
        Ok(Item::Done((hyp, reports)))
    })?;
    check_unreferenced(&run.unreferenced, args.scoring.strict)?;
    let avg = averaging(&args.scoring);
    let column = |k: usize, tol: f64| {
        let col: Vec<EvalReport> = run.results.values().map(|(_, r)| r[k]).collect();
        combine(&col, tol, avg)
    };
    let reports: Vec<EvalReport> = all.iter().enumerate().map(|(k, &t)| column(k, t)).collect();
    let (main, heads) = reports.split_at(secs.len());
    if let Some(path) = &args.predictions {
        let segs: SegmentsByUtterance = run.results.iter().map(|(id, (h, _))| (id.clone(), h.clone())).collect();
        attnalign::attn_io::write_segments_file(&segs, path)?;
    }
    write_sweep_csv(&mut *sink(args.out.as_deref())?, &args.scoring.tolerances, main)?;
    summary(
        args.out.is_some(),
        &format!("{} utterances  {}", run.results.len(), headline(heads)),
    );
    Ok(Status::from_failures(run.failed))
}

struct OracleItem {
    oracle: UtteranceOracle,
    num_layers: usize,
    scatter: Option<Vec<ScatterPoint>>,
}

pub fn oracle(args: &OracleArgs) -> anyhow::Result<Status> {
    let tol = seconds(args.tolerance_ms, "--tolerance-ms")?;
    let reference = inputs::reference(&args.reference)?;
    let run = for_each_dump(&args.inputs, |d| {
        let Some(r) = lookup(&reference, d) else {
            return Ok(Item::Unreferenced);
        };
        let scatter = match args.scatter {
            Some(_) => Some(head_score_scatter(d, r, args.criterion, tol)?),
            None => None,
        };
        Ok(Item::Done(OracleItem {
            oracle: oracle_head(d, r, tol)?,
            num_layers: d.num_layers,
            scatter,
        }))
    })?;
    check_unreferenced(&run.unreferenced, args.strict)?;
    if run.results.is_empty() {
        bail!("no utterances to analyse");
    }
    let utts: Vec<UtteranceOracle> = run.results.values().map(|i| i.oracle.clone()).collect();
    let result = OracleResult::from_utterances(&utts, tol)?;
    let hist = oracle_histogram(utts.iter().map(|u| u.head));
    let n = utts.len();

    let mut stdout = io::stdout().lock();
    writeln!(stdout, "utterance\toracle_head\tf1")?;
    for u in &utts {
        writeln!(stdout, "{}\t{}\t{:.4}", u.utterance_id, u.head, u.report.f1)?;
    }
    let top20: usize = hist.iter().take(20).map(|&(_, c)| c).sum();
    let upper = run
        .results
        .values()
        .filter(|i| i.oracle.head.layer >= i.num_layers.div_ceil(2))
        .count();
    writeln!(
        stdout,
        "corpus oracle F1@{}ms {:.4} over {n} utterances",
        args.tolerance_ms, result.f1
    )?;
    writeln!(
        stdout,
        "most frequent oracle head {} ({} utterances)",
        result.head, hist[0].1
    )?;
    writeln!(
        stdout,
        "top-20 oracle heads cover {:.1}% of utterances",
        100.0 * top20 as f64 / n as f64
    )?;
    writeln!(
        stdout,
        "oracle heads in the upper half of layers: {:.1}%",
        100.0 * upper as f64 / n as f64
    )?;
    stdout.flush()?;

    if let Some(path) = &args.histogram {
        let mut out = sink(Some(path))?;
        writeln!(out, "layer,head,count")?;
        for (h, c) in &hist {
            writeln!(out, "{},{},{c}", h.layer, h.head)?;
        }
        out.flush()?;
    }
    if let Some(path) = &args.table {
        let mut out = sink(Some(path))?;
        writeln!(out, "utterance_id,layer,head,f1")?;
        for u in &utts {
            writeln!(
                out,
                "{},{},{},{:.6}",
                u.utterance_id, u.head.layer, u.head.head, u.report.f1
            )?;
        }
        out.flush()?;
    }
    if let Some(path) = &args.scatter {
        let mut out = sink(Some(path))?;
        writeln!(out, "utterance_id,layer,head,score,f1")?;
        for (id, item) in &run.results {
            for p in item.scatter.iter().flatten() {
                writeln!(out, "{id},{},{},{:.9},{:.6}", p.head.layer, p.head.head, p.score, p.f1)?;
            }
        }
        out.flush()?;
    }
    Ok(Status::from_failures(run.failed))
}

pub fn hit_rate(args: &HitRateArgs) -> anyhow::Result<Status> {
    let tol = seconds(args.tolerance_ms, "--tolerance-ms")?;
    if args.ks.is_empty() {
        return Err(usage("--ks: at least one k is needed"));
    }
    let ks: Vec<usize> = args.ks.iter().map(|k| k.resolve()).collect();
    let reference = inputs::reference(&args.reference)?;
    let run = for_each_dump(&args.inputs, |d| match lookup(&reference, d) {
        Some(r) => Ok(Item::Done(top_k_utterance(d, r, &ks, args.criterion, tol)?)),
        None => Ok(Item::Unreferenced),
    })?;
    check_unreferenced(&run.unreferenced, args.strict)?;
    if run.results.is_empty() {
        bail!("no utterances to analyse");
    }
    let utts: Vec<_> = run.results.into_values().collect();
    let table = hit_rate_table(&utts, &ks, tol)?;
    let mut out = sink(args.out.as_deref())?;
    writeln!(out, "k,f1_{}ms,hit_rate", args.tolerance_ms)?;
    for (k, row) in args.ks.iter().zip(&table) {
        let label = match k {
            TopK::All => "all".to_string(),
            TopK::Count(n) => n.to_string(),
        };
        writeln!(out, "{label},{:.6},{:.6}", row.f1, row.hit_rate)?;
    }
    out.flush()?;
    summary(args.out.is_some(), &format!("hit rates over {} utterances", utts.len()));
    Ok(Status::from_failures(run.failed))
}

fn synth_config(args: &SynthArgs) -> SynthConfig {
    let base = SynthConfig::default();
    let mix = base.distractors;
    SynthConfig {
        seed: args.seed,
        num_layers: args.num_layers.unwrap_or(base.num_layers),
        heads_per_layer: args.heads_per_layer.unwrap_or(base.heads_per_layer),
        ideal_sharpness: args.ideal_sharpness.unwrap_or(base.ideal_sharpness),
        distractor_sharpness: args.distractor_sharpness.unwrap_or(base.distractor_sharpness),
        ideal_pool: args.ideal_pool.unwrap_or(base.ideal_pool),
        frame_duration_ms: args.frame_ms.unwrap_or(base.frame_duration_ms),
        distractors: DistractorMix {
            uniform: args.uniform.unwrap_or(mix.uniform),
            noise: args.noise.unwrap_or(mix.noise),
            shifted: args.shifted.unwrap_or(mix.shifted),
            repeated: args.repeated.unwrap_or(mix.repeated),
            blurry: args.blurry.unwrap_or(mix.blurry),
        },
        ..base
    }
}

pub fn synth(args: &SynthArgs) -> anyhow::Result<Status> {
    let config = synth_config(args);
    config.validate().map_err(|e| usage(e.to_string()))?;
    fs::create_dir_all(&args.out).with_context(|| format!("cannot create {}", args.out.display()))?;
    let mut truth: SegmentsByUtterance = BTreeMap::new();
    let mut manifest = Vec::with_capacity(args.count);
    let mut start = 0;
    while start < args.count {
        let end = (start + SYNTH_CHUNK).min(args.count);
        for u in generate_range(&config, start..end)? {
            let path: PathBuf = args.out.join(format!("{}.atnm", u.dump.utterance_id));
            write_dump_file(&u.dump, &path)?;
            manifest.push(ManifestEntry::from(&u));
            truth.insert(u.dump.utterance_id.clone(), u.truth);
        }
        start = end;
    }
    attnalign::attn_io::write_segments_file(&truth, args.out.join("reference.tsv"))?;
    let mut m = sink(Some(&args.out.join("manifest.jsonl")))?;
    write_manifest(&manifest, &mut m)?;
    m.flush()?;
    println!("wrote {} utterances to {}", args.count, args.out.display());
    Ok(Status::Ok)
}

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use attnalign::attn_io::{read_alignment_file, read_dump_file, SegmentsByUtterance};
use attnalign::{par, AttentionDump, WordSegment};

use crate::args::Inputs;

/// Expand directories to the `.atnm` files they hold, sorted by name.
pub fn expand(paths: &[PathBuf]) -> anyhow::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .with_context(|| format!("cannot list {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "atnm"))
                .collect();
            found.sort();
            if found.is_empty() {
                log::warn!("{} holds no .atnm files", p.display());
            }
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

pub fn reference(path: &Path) -> anyhow::Result<SegmentsByUtterance> {
    read_alignment_file(path).with_context(|| format!("reading {}", path.display()))
}

/// What one dump produced.
pub enum Item<R> {
    Done(R),
    /// No reference segments for this utterance.
    Unreferenced,
}

/// Results of running a command over every dump, keyed by utterance id.
pub struct Run<R> {
    pub results: BTreeMap<String, R>,
    pub unreferenced: Vec<String>,
    pub failed: usize,
}

/// Load each dump, apply `f`, and drop the dump before the next one on the
/// same worker. Per-file failures are reported; without `keep_going` any
/// failure is fatal once every file has been tried.
pub fn for_each_dump<R, F>(inputs: &Inputs, f: F) -> anyhow::Result<Run<R>>
where
    R: Send,
    F: Fn(&AttentionDump) -> anyhow::Result<Item<R>> + Sync + Send,
{
    let paths = expand(&inputs.dumps)?;
    let outcomes = par::map(&paths, |p| {
        let dump = read_dump_file(p)?;
        let id = dump.utterance_id.clone();
        Ok::<_, anyhow::Error>((id, f(&dump)?))
    });
    let mut run = Run {
        results: BTreeMap::new(),
        unreferenced: Vec::new(),
        failed: 0,
    };
    let mut sources: BTreeMap<String, &Path> = BTreeMap::new();
    for (path, outcome) in paths.iter().zip(outcomes) {
        match outcome {
            Ok((id, item)) => {
                if let Some(first) = sources.insert(id.clone(), path) {
                    bail!(
                        "utterance {id} appears in both {} and {}",
                        first.display(),
                        path.display()
                    );
                }
                match item {
                    Item::Done(r) => {
                        run.results.insert(id, r);
                    }
                    Item::Unreferenced => run.unreferenced.push(id),
                }
            }
            Err(e) => {
                eprintln!("error: {}: {e:#}", path.display());
                run.failed += 1;
            }
        }
    }
    if run.failed > 0 && !inputs.keep_going {
        bail!("{} of {} dumps failed", run.failed, paths.len());
    }
    Ok(run)
}

/// Warn about (or, when strict, reject) utterances that had no reference.
pub fn check_unreferenced(ids: &[String], strict: bool) -> anyhow::Result<()> {
    if ids.is_empty() {
        return Ok(());
    }
    let list = ids.join(", ");
    if strict {
        bail!("{} utterance(s) missing from the reference: {list}", ids.len());
    }
    log::warn!(
        "{} utterance(s) missing from the reference were excluded: {list}",
        ids.len()
    );
    Ok(())
}

pub fn lookup<'a>(reference: &'a SegmentsByUtterance, dump: &AttentionDump) -> Option<&'a [WordSegment]> {
    reference.get(&dump.utterance_id).map(Vec::as_slice)
}

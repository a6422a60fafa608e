//! `utterance_id<TAB>word<TAB>start<TAB>end` segment files.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::WordSegment;
use crate::error::{Error, Result};

pub type SegmentsByUtterance = BTreeMap<String, Vec<WordSegment>>;

/// Parse a segment TSV. Segments keep file order within each utterance;
/// `#` comment lines and blank lines are skipped.
pub fn read_reference_alignments<R: BufRead>(source: R) -> Result<SegmentsByUtterance> {
    let mut out = SegmentsByUtterance::new();
    for (n, line) in source.lines().enumerate() {
        let line_no = n + 1;
        let line = line.map_err(|e| Error::io(format!("reading line {line_no}"), e))?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 4 tab-separated columns, found {}", fields.len()),
            });
        }
        let time = |s: &str, what: &str| -> Result<f64> {
            match s.trim().parse::<f64>() {
                Ok(v) if v.is_finite() && v >= 0.0 => Ok(v),
                _ => Err(Error::Parse {
                    line: line_no,
                    message: format!("invalid {what} time {s:?}"),
                }),
            }
        };
        let start = time(fields[2], "start")?;
        let end = time(fields[3], "end")?;
        if end < start {
            return Err(Error::Parse {
                line: line_no,
                message: format!("end {end} precedes start {start}"),
            });
        }
        out.entry(fields[0].to_string())
            .or_default()
            .push(WordSegment::new(fields[1], start, end));
    }
    Ok(out)
}

pub fn read_alignment_file(path: impl AsRef<Path>) -> Result<SegmentsByUtterance> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    read_reference_alignments(BufReader::new(file))
}

/// Write segments ordered by utterance id, then start time, with times at
/// millisecond precision.
pub fn write_segments<W: Write>(segments: &SegmentsByUtterance, mut sink: W) -> Result<()> {
    let mut write = || -> std::io::Result<()> {
        for (utt, segs) in segments {
            let mut ordered: Vec<&WordSegment> = segs.iter().collect();
            ordered.sort_by(|a, b| a.start.total_cmp(&b.start));
            for s in ordered {
                writeln!(sink, "{utt}\t{}\t{:.3}\t{:.3}", s.word, s.start, s.end)?;
            }
        }
        sink.flush()
    };
    write().map_err(|e| Error::io("writing segments", e))
}

pub fn write_segments_file(segments: &SegmentsByUtterance, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    write_segments(segments, BufWriter::new(file))
}

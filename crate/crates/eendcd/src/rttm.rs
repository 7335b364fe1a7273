//! RTTM speaker-segment files.
//!
//! Each line reads `SPEAKER <file-id> 1 <tbeg> <tdur> <NA> <NA> <speaker> <NA> <NA>`.
//! Times are written with three decimals.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use eendcd_core::eval::{DiarizationHypothesis, Segment};

use crate::error::{Error, Result};

/// Hypotheses keyed by file id.
pub type RttmFile = BTreeMap<String, DiarizationHypothesis>;

pub fn format_rttm(file_id: &str, hyp: &DiarizationHypothesis) -> String {
    let mut out = String::new();
    for s in &hyp.segments {
        writeln!(
            out,
            "SPEAKER {file_id} 1 {:.3} {:.3} <NA> <NA> {} <NA> <NA>",
            s.start,
            s.end - s.start,
            s.speaker
        )
        .expect("writing to a String");
    }
    out
}

pub fn write_rttm(path: impl AsRef<Path>, file_id: &str, hyp: &DiarizationHypothesis) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_rttm(file_id, hyp)).map_err(Error::io(path))
}

/// Parses RTTM text. Blank lines, `#` comments and non-`SPEAKER` records
/// are skipped. `origin` only labels errors.
pub fn parse_rttm(text: &str, origin: &Path) -> Result<RttmFile> {
    let mut out = RttmFile::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |detail: String| Error::Parse {
            path: origin.to_path_buf(),
            line: i + 1,
            detail,
        };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f[0] != "SPEAKER" {
            continue;
        }
        if f.len() < 8 {
            return Err(err(format!("expected at least 8 fields, got {}", f.len())));
        }
        let num = |s: &str, what: &str| {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(format!("invalid {what} {s:?}")))
        };
        let start = num(f[3], "onset")?;
        let dur = num(f[4], "duration")?;
        if dur <= 0.0 {
            return Err(err(format!("duration must be positive, got {dur}")));
        }
        if start < 0.0 {
            return Err(err(format!("onset must be non-negative, got {start}")));
        }
        let seg = Segment::new(start, start + dur, f[7]).map_err(|e| err(e.to_string()))?;
        out.entry(f[1].to_string()).or_default().segments.push(seg);
    }
    Ok(out)
}

pub fn read_rttm(path: impl AsRef<Path>) -> Result<RttmFile> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
    parse_rttm(&text, path)
}

/// Reads a file expected to describe one recording and returns all of its
/// segments regardless of file id.
pub fn read_single(path: impl AsRef<Path>) -> Result<DiarizationHypothesis> {
    let path = path.as_ref();
    let file = read_rttm(path)?;
    if file.len() > 1 {
        return Err(Error::invalid(path, format!("{} file ids in one file", file.len())));
    }
    Ok(file.into_values().next().unwrap_or_default())
}

/// Rounds segment times to the precision RTTM stores.
pub fn quantize(hyp: &DiarizationHypothesis) -> DiarizationHypothesis {
    let q = |v: f64| (v * 1000.0).round() / 1000.0;
    DiarizationHypothesis::new(
        hyp.segments
            .iter()
            .map(|s| Segment {
                start: q(s.start),
                end: q(s.start) + q(s.end - s.start),
                speaker: s.speaker.clone(),
            })
            .collect(),
    )
}

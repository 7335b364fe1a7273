//! Frame-free diarization error rate.
//!
//! Every segment boundary and collar edge splits the timeline into
//! elementary intervals with a constant set of active reference and
//! hypothesis speakers. Speakers are mapped one-to-one by maximizing their
//! total co-active time, then each interval contributes
//! `max(0, n_ref - n_hyp)` missed, `max(0, n_hyp - n_ref)` false-alarm and
//! `min(n_ref, n_hyp) - n_correct` confused speaker-seconds.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::segments::DiarizationHypothesis;
use crate::assign::max_weight_assignment;
use crate::error::{Error, Result};

pub const DEFAULT_COLLAR_S: f64 = 0.25;

/// Error rates in percent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DerReport {
    pub der: f64,
    pub ms: f64,
    pub fa: f64,
    pub cf: f64,
    /// Missed speech on the speech/non-speech projection, relative to
    /// reference speech time.
    pub sad_ms: f64,
    pub sad_fa: f64,
    /// Reference speaker-time scored (the DER denominator), seconds.
    pub total_scored_s: f64,
}

impl DerReport {
    pub fn sad(&self) -> f64 {
        self.sad_ms + self.sad_fa
    }
}

struct Timeline {
    names: Vec<String>,
    intervals: Vec<Vec<(f64, f64)>>,
}

impl Timeline {
    fn from(h: &DiarizationHypothesis) -> Self {
        let (names, intervals) = h.merged().into_iter().unzip();
        Self { names, intervals }
    }
}

/// Tracks which of a set of sorted interval lists contain a point, for
/// points visited in increasing order.
struct Cursor {
    pos: Vec<usize>,
}

impl Cursor {
    fn new(n: usize) -> Self {
        Self { pos: vec![0; n] }
    }

    fn active(&mut self, lists: &[Vec<(f64, f64)>], x: f64, out: &mut Vec<usize>) {
        out.clear();
        for (i, list) in lists.iter().enumerate() {
            let p = &mut self.pos[i];
            while *p < list.len() && list[*p].1 <= x {
                *p += 1;
            }
            if *p < list.len() && list[*p].0 <= x {
                out.push(i);
            }
        }
    }
}

fn union(mut iv: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    iv.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out: Vec<(f64, f64)> = Vec::with_capacity(iv.len());
    for (a, b) in iv {
        match out.last_mut() {
            Some(last) if a <= last.1 => last.1 = last.1.max(b),
            _ => out.push((a, b)),
        }
    }
    out
}

struct Piece {
    dur: f64,
    refs: Vec<usize>,
    hyps: Vec<usize>,
}

/// Scores `hyp` against `reference`. Regions within `collar_s` of any
/// reference segment boundary are excluded; overlapping speech is scored.
pub fn der_score(reference: &DiarizationHypothesis, hyp: &DiarizationHypothesis, collar_s: f64) -> Result<DerReport> {
    if !(collar_s.is_finite() && collar_s >= 0.0) {
        return Err(Error::Scoring(format!("invalid collar {collar_s}")));
    }
    if reference.is_empty() {
        return Err(Error::Scoring("empty reference: DER is undefined".into()));
    }
    for s in reference.segments.iter().chain(&hyp.segments) {
        if !(s.start.is_finite() && s.end.is_finite() && s.start < s.end) {
            return Err(Error::Scoring(format!("invalid segment [{}, {})", s.start, s.end)));
        }
    }
    let r = Timeline::from(reference);
    let h = Timeline::from(hyp);

    let mut excluded = Vec::new();
    if collar_s > 0.0 {
        for &(a, b) in r.intervals.iter().flatten() {
            excluded.push((a - collar_s, a + collar_s));
            excluded.push((b - collar_s, b + collar_s));
        }
    }
    let excluded = vec![union(excluded)];

    let mut cuts: Vec<f64> = r
        .intervals
        .iter()
        .chain(&h.intervals)
        .chain(&excluded)
        .flatten()
        .flat_map(|&(a, b)| [a, b])
        .collect();
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();

    let mut pieces = Vec::new();
    let (mut rc, mut hc, mut xc) = (Cursor::new(r.names.len()), Cursor::new(h.names.len()), Cursor::new(1));
    let mut skip = Vec::new();
    for w in cuts.windows(2) {
        let (a, b) = (w[0], w[1]);
        let mid = 0.5 * (a + b);
        xc.active(&excluded, mid, &mut skip);
        if !skip.is_empty() {
            continue;
        }
        let mut refs = Vec::new();
        let mut hyps = Vec::new();
        rc.active(&r.intervals, mid, &mut refs);
        hc.active(&h.intervals, mid, &mut hyps);
        if refs.is_empty() && hyps.is_empty() {
            continue;
        }
        pieces.push(Piece { dur: b - a, refs, hyps });
    }

    let (nr, nh) = (r.names.len(), h.names.len());
    let mut overlap = vec![0.0; nr * nh];
    for p in &pieces {
        for &i in &p.refs {
            for &j in &p.hyps {
                overlap[i * nh + j] += p.dur;
            }
        }
    }
    let mapping = if nh == 0 { vec![None; nr] } else { max_weight_assignment(&overlap, nr, nh) };

    let (mut total, mut ms, mut fa, mut cf) = (0.0, 0.0, 0.0, 0.0);
    let (mut speech, mut sad_ms, mut sad_fa) = (0.0, 0.0, 0.0);
    for p in &pieces {
        let (n_ref, n_hyp) = (p.refs.len(), p.hyps.len());
        let correct = p
            .refs
            .iter()
            .filter(|&&i| mapping[i].is_some_and(|j| p.hyps.contains(&j)))
            .count();
        total += p.dur * n_ref as f64;
        ms += p.dur * n_ref.saturating_sub(n_hyp) as f64;
        fa += p.dur * n_hyp.saturating_sub(n_ref) as f64;
        cf += p.dur * (n_ref.min(n_hyp) - correct) as f64;
        match (n_ref > 0, n_hyp > 0) {
            (true, true) => speech += p.dur,
            (true, false) => {
                speech += p.dur;
                sad_ms += p.dur;
            }
            (false, true) => sad_fa += p.dur,
            (false, false) => {}
        }
    }
    if total <= 0.0 {
        return Err(Error::Scoring("no scorable reference speech outside the collar".into()));
    }
    let pct = |x: f64, d: f64| 100.0 * x / d;
    Ok(DerReport {
        der: pct(ms + fa + cf, total),
        ms: pct(ms, total),
        fa: pct(fa, total),
        cf: pct(cf, total),
        sad_ms: pct(sad_ms, speech),
        sad_fa: pct(sad_fa, speech),
        total_scored_s: total,
    })
}

//! Speaker segments and conversion from frame-level decisions.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::frontend::FRAME_RATE;
use crate::losses::LabelMatrix;
use crate::numerics::{Scalar, Tensor};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_MEDIAN: usize = 11;

/// `[start, end)` in seconds.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub start: f64,
    pub end: f64,
    pub speaker: String,
}

impl Segment {
    pub fn new(start: f64, end: f64, speaker: impl Into<String>) -> Result<Self> {
        if !(start.is_finite() && end.is_finite() && start < end) {
            return Err(Error::Scoring(format!("invalid segment [{start}, {end})")));
        }
        Ok(Self {
            start,
            end,
            speaker: speaker.into(),
        })
    }

    pub fn duration(&self) -> f64 {
        self.end - self.start
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DiarizationHypothesis {
    pub segments: Vec<Segment>,
}

impl DiarizationHypothesis {
    pub fn new(segments: Vec<Segment>) -> Self {
        Self { segments }
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Per-speaker sorted, non-overlapping intervals (touching or
    /// overlapping segments of one speaker are merged).
    pub fn merged(&self) -> BTreeMap<String, Vec<(f64, f64)>> {
        let mut by: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
        for s in &self.segments {
            by.entry(s.speaker.clone()).or_default().push((s.start, s.end));
        }
        for iv in by.values_mut() {
            iv.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
            let mut out: Vec<(f64, f64)> = Vec::with_capacity(iv.len());
            for &(a, b) in iv.iter() {
                match out.last_mut() {
                    Some(last) if a <= last.1 => last.1 = last.1.max(b),
                    _ => out.push((a, b)),
                }
            }
            *iv = out;
        }
        by
    }

    pub fn speakers(&self) -> Vec<String> {
        self.merged().into_keys().collect()
    }

    /// Sum of per-speaker speaking time after merging.
    pub fn speaker_time(&self) -> f64 {
        self.merged().values().flatten().map(|(a, b)| b - a).sum()
    }

    /// Same segments with merged per-speaker runs, ordered by start.
    pub fn normalized(&self) -> Self {
        let mut segments: Vec<Segment> = self
            .merged()
            .into_iter()
            .flat_map(|(spk, iv)| {
                iv.into_iter().map(move |(start, end)| Segment {
                    start,
                    end,
                    speaker: spk.clone(),
                })
            })
            .collect();
        segments.sort_by(|a, b| a.start.total_cmp(&b.start).then_with(|| a.speaker.cmp(&b.speaker)));
        Self { segments }
    }
}

/// Binary median filter with an odd window of `width` frames, truncated at
/// the edges (a frame stays on when more than half of its window is on).
pub fn median_filter(active: &[bool], width: usize) -> Vec<bool> {
    let half = width / 2;
    if half == 0 {
        return active.to_vec();
    }
    let mut prefix = Vec::with_capacity(active.len() + 1);
    prefix.push(0usize);
    for &a in active {
        prefix.push(prefix.last().unwrap() + a as usize);
    }
    (0..active.len())
        .map(|t| {
            let lo = t.saturating_sub(half);
            let hi = (t + half + 1).min(active.len());
            2 * (prefix[hi] - prefix[lo]) > hi - lo
        })
        .collect()
}

fn runs(active: &[bool], speaker: &str, out: &mut Vec<Segment>) {
    let mut t = 0;
    while t < active.len() {
        if active[t] {
            let s = t;
            while t < active.len() && active[t] {
                t += 1;
            }
            out.push(Segment {
                start: s as f64 / FRAME_RATE,
                end: t as f64 / FRAME_RATE,
                speaker: speaker.to_string(),
            });
        } else {
            t += 1;
        }
    }
}

fn sort_segments(segments: &mut [Segment]) {
    segments.sort_by(|a, b| a.start.total_cmp(&b.start).then_with(|| a.speaker.cmp(&b.speaker)));
}

/// Thresholds each slot column, median-filters it and turns runs of active
/// frames into segments on the 100 ms grid. Slot `s` is labelled `"s"`.
pub fn posterior_to_segments<T: Scalar>(probs: &Tensor<T>, threshold: f64, median_w: usize) -> Result<DiarizationHypothesis> {
    let (t, s) = probs.dims2()?;
    let mut segments = Vec::new();
    for slot in 0..s {
        let on: Vec<bool> = (0..t).map(|i| probs.at(i, slot).to_f64() > threshold).collect();
        runs(&median_filter(&on, median_w), &slot.to_string(), &mut segments);
    }
    sort_segments(&mut segments);
    Ok(DiarizationHypothesis { segments })
}

/// Reference segments from a label matrix; column `k` is labelled `"k"`.
pub fn labels_to_hypothesis(labels: &LabelMatrix) -> DiarizationHypothesis {
    let mut segments = Vec::new();
    for k in 0..labels.width() {
        let on: Vec<bool> = (0..labels.frames()).map(|t| labels.is_active(t, k)).collect();
        runs(&on, &k.to_string(), &mut segments);
    }
    sort_segments(&mut segments);
    DiarizationHypothesis { segments }
}

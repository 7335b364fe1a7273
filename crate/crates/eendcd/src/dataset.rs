//! On-disk datasets: one WAV and one reference RTTM per recording, listed
//! in `manifest.csv` (`id,split,wav,rttm,duration_s`, paths relative to the
//! dataset directory).

use std::path::{Path, PathBuf};

use eendcd_core::eval::{labels_to_hypothesis, DiarizationHypothesis};
use eendcd_core::frontend::{WindowTensor, FRAME_RATE};
use eendcd_core::losses::LabelMatrix;
use eendcd_core::pipeline::{synth_mixture, Example};
use serde::{Deserialize, Serialize};

use crate::config::SynthPlan;
use crate::error::{Error, Result};
use crate::features::extract_windows;
use crate::rttm::{read_single, write_rttm};
use crate::wav::{load_wav, write_wav};

pub const MANIFEST: &str = "manifest.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: String,
    pub wav: String,
    pub rttm: String,
    pub duration_s: f64,
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = dir.as_ref().join(MANIFEST);
    if !path.is_file() {
        return Err(Error::invalid(&path, "manifest not found"));
    }
    let mut r = csv::Reader::from_path(&path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

pub fn write_manifest(dir: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let mut w = csv::Writer::from_path(dir.as_ref().join(MANIFEST))?;
    for e in entries {
        w.serialize(e)?;
    }
    w.flush().map_err(Error::io(dir.as_ref().join(MANIFEST)))
}

/// Synthesizes every recording of `plan` into `out`, writing
/// `<split>/<id>.wav`, `<split>/<id>.rttm` and the manifest.
pub fn synthesize(plan: &SynthPlan, out: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let out = out.as_ref();
    let mut entries = Vec::new();
    for set in &plan.set {
        let dir = out.join(&set.split);
        std::fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
        for spec in set.specs() {
            let rec = synth_mixture(&spec)?;
            let wav = format!("{}/{}.wav", set.split, rec.id);
            let rttm = format!("{}/{}.rttm", set.split, rec.id);
            write_wav(out.join(&wav), &rec.clip)?;
            write_rttm(out.join(&rttm), &rec.id, &labels_to_hypothesis(&rec.labels))?;
            entries.push(ManifestEntry {
                id: rec.id.clone(),
                split: set.split.clone(),
                wav,
                rttm,
                duration_s: rec.clip.duration_s(),
            });
        }
    }
    write_manifest(out, &entries)?;
    Ok(entries)
}

/// Label matrix at the window rate: frame `t` is active for a speaker when
/// the frame centre `(t + 0.5) / 10` s lies inside one of its segments.
/// Columns follow sorted speaker names.
pub fn labels_from_segments(hyp: &DiarizationHypothesis, frames: usize) -> LabelMatrix {
    let merged = hyp.merged();
    let mut labels = LabelMatrix::silent(frames, merged.len());
    for (k, segs) in merged.values().enumerate() {
        for &(a, b) in segs {
            let first = ((a * FRAME_RATE - 0.5).ceil().max(0.0)) as usize;
            for t in first..frames {
                let c = (t as f64 + 0.5) / FRAME_RATE;
                if c >= b {
                    break;
                }
                if c >= a {
                    labels.set(t, k, true);
                }
            }
        }
    }
    labels
}

/// A recording ready for training or scoring.
#[derive(Clone, Debug)]
pub struct Recording {
    pub example: Example,
    pub reference: DiarizationHypothesis,
    pub wav: PathBuf,
}

pub fn load_recording(dir: &Path, entry: &ManifestEntry) -> Result<Recording> {
    let wav = dir.join(&entry.wav);
    let clip = load_wav(&wav)?;
    let windows: WindowTensor = extract_windows(&clip)?;
    let reference = read_single(dir.join(&entry.rttm))?;
    let labels = labels_from_segments(&reference, windows.num_windows());
    Ok(Recording {
        example: Example::new(entry.id.clone(), windows, labels)?,
        reference,
        wav,
    })
}

/// All recordings of one split, in manifest order.
pub fn load_split(dir: impl AsRef<Path>, split: &str) -> Result<Vec<Recording>> {
    let dir = dir.as_ref();
    read_manifest(dir)?
        .iter()
        .filter(|e| e.split == split)
        .map(|e| load_recording(dir, e))
        .collect()
}

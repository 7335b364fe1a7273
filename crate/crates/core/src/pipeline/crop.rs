//! Random contiguous crops aligned to the 100 ms label grid.

use rand::Rng;

use super::synth::{LabeledRecording, SAMPLES_PER_FRAME};
use crate::error::{Error, Result};
use crate::frontend::{samples_for_windows, AudioClip, FRAME_RATE};

/// A crop expressed in label frames (equivalently, windows).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropRange {
    pub start: usize,
    pub frames: usize,
}

/// Label frames covered by a crop of `crop_s` seconds.
pub fn crop_frames(crop_s: f64) -> Result<usize> {
    let n = libm::round(crop_s * FRAME_RATE);
    if !(n >= 1.0) {
        return Err(Error::Config(alloc::format!("crop of {crop_s} s is shorter than one frame")));
    }
    Ok(n as usize)
}

/// Draws a crop of `crop_s` seconds out of `total` frames. Recordings not
/// longer than the crop are used whole.
pub fn crop_range(total: usize, crop_s: f64, rng: &mut impl Rng) -> Result<CropRange> {
    let n = crop_frames(crop_s)?;
    if n >= total {
        return Ok(CropRange { start: 0, frames: total });
    }
    Ok(CropRange {
        start: rng.random_range(0..=total - n),
        frames: n,
    })
}

/// Cuts `range` out of a recording. The audio spans exactly the samples
/// whose windows produce `range.frames` label frames starting at
/// `range.start`.
pub fn apply_crop(rec: &LabeledRecording, range: CropRange) -> Result<LabeledRecording> {
    let total = rec.labels.frames();
    if range.frames == 0 || range.start + range.frames > total {
        return Err(Error::Dimension {
            op: "crop",
            lhs: alloc::vec![range.start, range.frames],
            rhs: alloc::vec![total],
        });
    }
    if range.start == 0 && range.frames == total {
        return Ok(rec.clone());
    }
    let a = range.start * SAMPLES_PER_FRAME;
    let b = a + samples_for_windows(range.frames);
    Ok(LabeledRecording {
        id: rec.id.clone(),
        clip: AudioClip::new(rec.clip.samples[a..b].to_vec()),
        labels: rec.labels.slice_frames(range.start, range.frames),
    })
}

pub fn crop_sample(rec: &LabeledRecording, crop_s: f64, rng: &mut impl Rng) -> Result<LabeledRecording> {
    let range = crop_range(rec.labels.frames(), crop_s, rng)?;
    apply_crop(rec, range)
}

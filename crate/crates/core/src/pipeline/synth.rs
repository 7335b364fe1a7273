//! Synthetic multi-speaker mixtures with exact activity labels.
//!
//! Each speaker is a harmonic source with its own pitch band and formant
//! envelope. Utterances sit on the 100 ms label grid, so a label frame is
//! active exactly when an utterance of that speaker covers it.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::frontend::{mel_frame_count, window_count, AudioClip, MEL_WIN_SAMPLES, SAMPLE_RATE, WINDOW_HOP, MEL_HOP_SAMPLES};
use crate::losses::LabelMatrix;

/// Samples per label frame (100 ms).
pub const SAMPLES_PER_FRAME: usize = WINDOW_HOP * MEL_HOP_SAMPLES;

pub const MAX_SPEAKERS: usize = 4;

/// Pitch bands (Hz), one per speaker index.
const F0_BANDS: [(f64, f64); MAX_SPEAKERS] = [(95.0, 125.0), (165.0, 215.0), (260.0, 320.0), (360.0, 440.0)];

/// Accepted deviation between requested and measured overlap fraction.
pub const OVERLAP_TOLERANCE: f64 = 0.05;
const MAX_ATTEMPTS: usize = 32;

const UTT_FRAMES: (usize, usize) = (10, 40);
const PAUSE_FRAMES: (usize, usize) = (3, 15);
const PAUSE_PROB: f64 = 0.3;
const FADE_SAMPLES: usize = 80;
const UTT_RMS: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct MixtureSpec {
    pub n_speakers: usize,
    pub duration_s: f64,
    /// Target fraction of speech frames with two or more active speakers.
    pub overlap_ratio: f64,
    pub noise_snr_db: f64,
    pub seed: u64,
}

impl MixtureSpec {
    pub fn validate(&self) -> Result<()> {
        if !(1..=MAX_SPEAKERS).contains(&self.n_speakers) {
            return Err(Error::Config(format!(
                "n_speakers must be in 1..={MAX_SPEAKERS}, got {}",
                self.n_speakers
            )));
        }
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return Err(Error::Config(format!("invalid duration {}", self.duration_s)));
        }
        if !(0.0..=1.0).contains(&self.overlap_ratio) {
            return Err(Error::Config(format!("overlap_ratio {} outside [0, 1]", self.overlap_ratio)));
        }
        if !self.noise_snr_db.is_finite() {
            return Err(Error::Config("noise_snr_db must be finite".into()));
        }
        Ok(())
    }
}

/// Audio plus labels at the window rate.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledRecording {
    pub id: String,
    pub clip: AudioClip,
    pub labels: LabelMatrix,
}

impl LabeledRecording {
    /// Label frames must equal the window count the front end produces.
    pub fn check_alignment(&self) -> Result<()> {
        let t = window_count(mel_frame_count(self.clip.len(), MEL_WIN_SAMPLES));
        if t != self.labels.frames() {
            return Err(Error::Dimension {
                op: "recording",
                lhs: vec![t],
                rhs: vec![self.labels.frames()],
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Utterance {
    speaker: usize,
    start: usize,
    end: usize,
}

#[derive(Clone, Debug)]
struct Voice {
    f0: f64,
    formants: [(f64, f64); 3],
    gain: f64,
}

impl Voice {
    fn draw(speaker: usize, rng: &mut impl Rng) -> Self {
        let (lo, hi) = F0_BANDS[speaker];
        Self {
            f0: rng.random_range(lo..hi),
            formants: [
                (rng.random_range(300.0..800.0), rng.random_range(80.0..160.0)),
                (rng.random_range(900.0..2200.0), rng.random_range(120.0..250.0)),
                (rng.random_range(2300.0..3300.0), rng.random_range(150.0..300.0)),
            ],
            gain: rng.random_range(0.8..1.2),
        }
    }

    fn envelope(&self, f: f64) -> f64 {
        let peaks: f64 = self
            .formants
            .iter()
            .map(|&(c, bw)| {
                let z = (f - c) / bw;
                libm::exp(-0.5 * z * z)
            })
            .sum();
        peaks + 0.05
    }
}

/// Overlap fraction of a label matrix: overlapped frames / speech frames.
pub fn overlap_fraction(labels: &LabelMatrix) -> f64 {
    let speech = labels.speech_frames();
    if speech == 0 {
        0.0
    } else {
        labels.overlap_frames() as f64 / speech as f64
    }
}

/// Generates one mixture. Deterministic in `spec`.
pub fn synth_mixture(spec: &MixtureSpec) -> Result<LabeledRecording> {
    spec.validate()?;
    let n_samples = libm::round(spec.duration_s * SAMPLE_RATE as f64) as usize;
    let frames = window_count(mel_frame_count(n_samples, MEL_WIN_SAMPLES));
    if frames == 0 {
        return Err(Error::InsufficientAudio {
            needed: crate::frontend::samples_for_windows(1),
            got: n_samples,
            unit: "samples",
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let voices: Vec<Voice> = (0..spec.n_speakers).map(|s| Voice::draw(s, &mut rng)).collect();

    let mut placed = None;
    let mut last = 0.0;
    for _ in 0..MAX_ATTEMPTS {
        let (labels, utts) = place_utterances(spec, frames, &mut rng);
        last = overlap_fraction(&labels);
        if (last - spec.overlap_ratio).abs() <= OVERLAP_TOLERANCE {
            placed = Some((labels, utts));
            break;
        }
    }
    let (labels, utts) = placed.ok_or_else(|| {
        Error::Generation(format!(
            "could not reach overlap {:.2} in {:.1} s with {} speaker(s) after {MAX_ATTEMPTS} attempts (last {last:.3})",
            spec.overlap_ratio, spec.duration_s, spec.n_speakers
        ))
    })?;

    let mut mix = vec![0.0f64; n_samples];
    for u in &utts {
        let a = u.start * SAMPLES_PER_FRAME;
        let b = (u.end * SAMPLES_PER_FRAME).min(n_samples);
        let wave = render(&voices[u.speaker], b - a, &mut rng);
        for (m, w) in mix[a..b].iter_mut().zip(wave) {
            *m += w;
        }
    }

    let power = mix.iter().map(|v| v * v).sum::<f64>() / n_samples as f64;
    let power = if power > 0.0 { power } else { 1e-4 };
    let sigma = libm::sqrt(power / libm::pow(10.0, spec.noise_snr_db / 10.0));
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::Generation(format!("{e}")))?;
    let samples = mix
        .iter()
        .map(|&v| (v + noise.sample(&mut rng)).clamp(-1.0, 1.0) as f32)
        .collect();

    Ok(LabeledRecording {
        id: format!("synth-{}", spec.seed),
        clip: AudioClip::new(samples),
        labels,
    })
}

/// Places utterances turn by turn. At each speaker change the new turn
/// either follows a pause or starts inside the previous turn, with the
/// overlap length chosen to steer the running overlap fraction toward the
/// target.
fn place_utterances(spec: &MixtureSpec, frames: usize, rng: &mut impl Rng) -> (LabelMatrix, Vec<Utterance>) {
    let n = spec.n_speakers;
    let r = spec.overlap_ratio;
    let mut labels = LabelMatrix::silent(frames, n);
    let mut utts: Vec<Utterance> = Vec::new();
    let mut ends = vec![0usize; n];
    let mut active = vec![0u8; frames];
    let (mut speech, mut overlap) = (0usize, 0usize);
    let lead = rng.random_range(0..=10usize);

    loop {
        let len = rng.random_range(UTT_FRAMES.0..=UTT_FRAMES.1);
        let (speaker, start) = match utts.last() {
            None => (rng.random_range(0..n), lead),
            Some(prev) => {
                let speaker = if n == 1 {
                    0
                } else {
                    let s = rng.random_range(0..n - 1);
                    if s >= prev.speaker {
                        s + 1
                    } else {
                        s
                    }
                };
                let want = (r * (speech + len) as f64 - overlap as f64) / (1.0 + r);
                let max_ov = len.min(prev.end - prev.start).saturating_sub(1);
                let ov = if n > 1 { libm::round(want).clamp(0.0, max_ov as f64) as usize } else { 0 };
                let start = if ov >= 1 && !rng.random_bool(PAUSE_PROB) {
                    prev.end - ov
                } else {
                    prev.end + rng.random_range(PAUSE_FRAMES.0..=PAUSE_FRAMES.1)
                };
                (speaker, start)
            }
        };
        let start = start.max(ends[speaker]);
        if start + UTT_FRAMES.0 / 2 > frames {
            break;
        }
        let end = (start + len).min(frames);
        for t in start..end {
            match active[t] {
                0 => speech += 1,
                1 => overlap += 1,
                _ => {}
            }
            active[t] += 1;
            labels.set(t, speaker, true);
        }
        ends[speaker] = end;
        utts.push(Utterance { speaker, start, end });
    }
    (labels, utts)
}

/// One utterance of `len` samples: harmonic source shaped by the voice's
/// formant envelope, with vibrato, a syllable-rate amplitude envelope and
/// short fades.
fn render(voice: &Voice, len: usize, rng: &mut impl Rng) -> Vec<f64> {
    let sr = SAMPLE_RATE as f64;
    let f0 = voice.f0 * rng.random_range(0.95..1.05);
    let vib_rate = rng.random_range(3.0..6.0);
    let vib_phase = rng.random_range(0.0..2.0 * PI);
    let syl_rate = rng.random_range(3.0..5.0);
    let syl_phase = rng.random_range(0.0..2.0 * PI);
    let glide = rng.random_range(-0.1..0.1);
    let n_harm = ((0.45 * sr) / f0) as usize;
    let weights: Vec<f64> = (1..=n_harm).map(|h| voice.envelope(h as f64 * f0) / libm::sqrt(h as f64)).collect();

    let mut out = Vec::with_capacity(len);
    let mut phase = 0.0f64;
    for i in 0..len {
        let t = i as f64 / sr;
        let frac = i as f64 / len.max(1) as f64;
        let f = f0 * (1.0 + glide * frac) * (1.0 + 0.02 * libm::sin(2.0 * PI * vib_rate * t + vib_phase));
        phase = (phase + 2.0 * PI * f / sr) % (2.0 * PI);
        // sin(hθ) by the Chebyshev recurrence
        let (s1, c1) = (libm::sin(phase), libm::cos(phase));
        let (mut prev, mut cur) = (0.0, s1);
        let mut v = 0.0;
        for (h, w) in weights.iter().enumerate() {
            v += w * cur;
            if h + 1 < weights.len() {
                let next = 2.0 * c1 * cur - prev;
                prev = cur;
                cur = next;
            }
        }
        let am = 0.8 + 0.2 * libm::sin(2.0 * PI * syl_rate * t + syl_phase);
        let fade = ((i.min(len - 1 - i) + 1) as f64 / FADE_SAMPLES as f64).min(1.0);
        out.push(v * am * fade);
    }
    let rms = libm::sqrt(out.iter().map(|v| v * v).sum::<f64>() / len.max(1) as f64);
    if rms > 0.0 {
        let k = UTT_RMS * voice.gain / rms;
        out.iter_mut().for_each(|v| *v *= k);
    }
    out
}

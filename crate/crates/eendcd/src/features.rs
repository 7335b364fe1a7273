//! Log-mel filterbank features.

use std::f64::consts::PI;
use std::sync::Arc;

use eendcd_core::frontend::{
    mel_frame_count, window_stack, AudioClip, MelFrames, WindowTensor, MEL_HOP_SAMPLES, MEL_WIN_SAMPLES, N_MELS,
    SAMPLE_RATE,
};
use eendcd_core::numerics::Tensor;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::Result;

pub const FFT_SIZE: usize = 256;
pub const LOG_FLOOR: f32 = 1e-10;

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters evenly spaced on the mel scale between 0 Hz and
/// Nyquist.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    /// `n_mels x (FFT_SIZE / 2 + 1)`, row-major.
    weights: Vec<f32>,
    edges_hz: Vec<f64>,
    n_mels: usize,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, sample_rate: u32) -> Self {
        let nyquist = sample_rate as f64 / 2.0;
        let top = hz_to_mel(nyquist);
        let edges_hz: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
            .collect();
        let n_bins = FFT_SIZE / 2 + 1;
        let mut weights = vec![0.0f32; n_mels * n_bins];
        for m in 0..n_mels {
            let (lo, mid, hi) = (edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]);
            for k in 0..n_bins {
                let f = k as f64 * sample_rate as f64 / FFT_SIZE as f64;
                let w = if f > lo && f <= mid {
                    (f - lo) / (mid - lo)
                } else if f > mid && f < hi {
                    (hi - f) / (hi - mid)
                } else {
                    0.0
                };
                weights[m * n_bins + k] = w as f32;
            }
        }
        Self {
            weights,
            edges_hz,
            n_mels,
        }
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    /// Peak frequency of each filter.
    pub fn centers_hz(&self) -> &[f64] {
        &self.edges_hz[1..=self.n_mels]
    }

    pub fn weight(&self, mel: usize, bin: usize) -> f32 {
        self.weights[mel * (FFT_SIZE / 2 + 1) + bin]
    }

    fn apply(&self, power: &[f32], out: &mut [f32]) {
        for (m, o) in out.iter_mut().enumerate() {
            let row = &self.weights[m * power.len()..(m + 1) * power.len()];
            *o = row.iter().zip(power).map(|(w, p)| w * p).sum();
        }
    }
}

/// Reusable extractor: Hamming window, 256-point FFT, power spectrum, mel
/// filterbank, natural log with a floor.
pub struct LogMel {
    fft: Arc<dyn Fft<f32>>,
    window: Vec<f32>,
    bank: MelFilterbank,
}

impl Default for LogMel {
    fn default() -> Self {
        Self::new()
    }
}

impl LogMel {
    pub fn new() -> Self {
        Self::with_window(MEL_WIN_SAMPLES).expect("default window fits the FFT")
    }

    /// Extractor with a custom analysis window length in samples, at most
    /// the FFT size.
    pub fn with_window(win_samples: usize) -> Result<Self> {
        if !(2..=FFT_SIZE).contains(&win_samples) {
            return Err(eendcd_core::Error::Config(format!(
                "analysis window of {win_samples} samples must lie in 2..={FFT_SIZE}"
            ))
            .into());
        }
        let fft = FftPlanner::new().plan_fft_forward(FFT_SIZE);
        let window = (0..win_samples)
            .map(|n| (0.54 - 0.46 * (2.0 * PI * n as f64 / (win_samples - 1) as f64).cos()) as f32)
            .collect();
        Ok(Self {
            fft,
            window,
            bank: MelFilterbank::new(N_MELS, SAMPLE_RATE),
        })
    }

    pub fn window_len(&self) -> usize {
        self.window.len()
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.bank
    }

    /// Frames of `window_len()` samples every 10 ms, no padding.
    pub fn compute(&self, clip: &AudioClip) -> Result<MelFrames> {
        let win = self.window.len();
        let t0 = mel_frame_count(clip.len(), win);
        if t0 == 0 {
            return Err(eendcd_core::Error::InsufficientAudio {
                needed: win,
                got: clip.len(),
                unit: "samples",
            }
            .into());
        }
        let n_bins = FFT_SIZE / 2 + 1;
        let mut buf = vec![Complex::new(0.0f32, 0.0); FFT_SIZE];
        let mut power = vec![0.0f32; n_bins];
        let mut data = vec![0.0f32; t0 * N_MELS];
        for (t, out) in data.chunks_exact_mut(N_MELS).enumerate() {
            let frame = &clip.samples[t * MEL_HOP_SAMPLES..t * MEL_HOP_SAMPLES + win];
            for (i, b) in buf.iter_mut().enumerate() {
                let v = if i < win { frame[i] * self.window[i] } else { 0.0 };
                *b = Complex::new(v, 0.0);
            }
            self.fft.process(&mut buf);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            self.bank.apply(&power, out);
            for v in out.iter_mut() {
                *v = v.max(LOG_FLOOR).ln();
            }
        }
        Ok(MelFrames {
            frames: Tensor::new(&[t0, N_MELS], data)?,
        })
    }
}

pub fn log_mel(clip: &AudioClip) -> Result<MelFrames> {
    LogMel::new().compute(clip)
}

/// Per-recording mean and variance normalization of each mel bin.
pub fn normalize(mel: &MelFrames) -> MelFrames {
    let t0 = mel.num_frames();
    let src = mel.frames.data();
    let mut data = src.to_vec();
    for m in 0..N_MELS {
        let col = || (0..t0).map(|t| src[t * N_MELS + m] as f64);
        let mean = col().sum::<f64>() / t0 as f64;
        let var = col().map(|v| (v - mean) * (v - mean)).sum::<f64>() / t0 as f64;
        let inv = 1.0 / var.sqrt().max(1e-5);
        for t in 0..t0 {
            data[t * N_MELS + m] = ((src[t * N_MELS + m] as f64 - mean) * inv) as f32;
        }
    }
    MelFrames {
        frames: Tensor::new(mel.frames.shape(), data).expect("shape unchanged"),
    }
}

/// Model input for a clip: normalized log-mel frames stacked into windows.
pub fn extract_windows(clip: &AudioClip) -> Result<WindowTensor> {
    let mel = log_mel(clip)?;
    Ok(window_stack(&normalize(&mel))?)
}

//! Audio containers, window stacking and the CNN window encoder.
//!
//! Log-mel extraction needs an FFT and lives in the `eendcd` crate; this
//! module starts from [`MelFrames`].

use alloc::string::ToString;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::init::{uniform_tensor, Init};
use crate::numerics::{Bound, Conv2dSpec, Graph, ParamId, ParamStore, Scalar, Tensor, Var};

pub const SAMPLE_RATE: u32 = 8000;
pub const N_MELS: usize = 23;
/// Mel frame hop (10 ms at 8 kHz).
pub const MEL_HOP_SAMPLES: usize = 80;
/// Default analysis window (25 ms at 8 kHz).
pub const MEL_WIN_SAMPLES: usize = 200;
pub const WINDOW_FRAMES: usize = 15;
pub const WINDOW_HOP: usize = 10;
/// Label / embedding frames per second (one per window hop).
pub const FRAME_RATE: f64 = 10.0;

/// Mono audio at [`SAMPLE_RATE`].
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>) -> Self {
        Self { samples }
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / SAMPLE_RATE as f64
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// `T₀ x 23` log-mel energies at a 10 ms hop.
#[derive(Clone, Debug, PartialEq)]
pub struct MelFrames {
    pub frames: Tensor<f32>,
}

impl MelFrames {
    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }
}

/// `T x 15 x 23` stacked windows, hop 10 frames.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowTensor {
    pub windows: Tensor<f32>,
}

impl WindowTensor {
    pub fn num_windows(&self) -> usize {
        self.windows.shape()[0]
    }

    /// Windows `start..start + len`.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        let per = WINDOW_FRAMES * N_MELS;
        let t = self.num_windows();
        if start + len > t || len == 0 {
            return Err(Error::Dimension {
                op: "window_slice",
                lhs: self.windows.shape().to_vec(),
                rhs: alloc::vec![start, len],
            });
        }
        let data = self.windows.data()[start * per..(start + len) * per].to_vec();
        Ok(Self {
            windows: Tensor::new(&[len, WINDOW_FRAMES, N_MELS], data)?,
        })
    }
}

/// Number of mel frames for `samples` samples (no padding).
pub fn mel_frame_count(samples: usize, win: usize) -> usize {
    if samples < win {
        0
    } else {
        (samples - win) / MEL_HOP_SAMPLES + 1
    }
}

/// Number of stacked windows for `mel_frames` mel frames.
pub fn window_count(mel_frames: usize) -> usize {
    if mel_frames < WINDOW_FRAMES {
        0
    } else {
        (mel_frames - WINDOW_FRAMES) / WINDOW_HOP + 1
    }
}

/// Samples needed to produce exactly `windows` windows with the default
/// analysis window.
pub fn samples_for_windows(windows: usize) -> usize {
    if windows == 0 {
        return 0;
    }
    let mel = (windows - 1) * WINDOW_HOP + WINDOW_FRAMES;
    (mel - 1) * MEL_HOP_SAMPLES + MEL_WIN_SAMPLES
}

/// Stacks 15-frame windows with a 10-frame hop (5 frames of overlap).
pub fn window_stack(mel: &MelFrames) -> Result<WindowTensor> {
    let (t0, bins) = mel.frames.dims2()?;
    if bins != N_MELS {
        return Err(Error::Dimension {
            op: "window_stack",
            lhs: mel.frames.shape().to_vec(),
            rhs: alloc::vec![t0, N_MELS],
        });
    }
    let t = window_count(t0);
    if t == 0 {
        return Err(Error::InsufficientAudio {
            needed: WINDOW_FRAMES,
            got: t0,
            unit: "mel frames",
        });
    }
    let mut data = Vec::with_capacity(t * WINDOW_FRAMES * N_MELS);
    for w in 0..t {
        let start = w * WINDOW_HOP * N_MELS;
        data.extend_from_slice(&mel.frames.data()[start..start + WINDOW_FRAMES * N_MELS]);
    }
    Ok(WindowTensor {
        windows: Tensor::new(&[t, WINDOW_FRAMES, N_MELS], data)?,
    })
}

/// Five-layer CNN mapping each `1 x 15 x 23` window to one embedding,
/// followed by RMSNorm.
///
/// Layers 1-4 are 3x3, stride 2, same padding (15x23 → 8x12 → 4x6 → 2x3 →
/// 1x2) with ReLU; layer 5 is a 1x2 valid convolution collapsing to 1x1.
#[derive(Clone, Debug)]
pub struct CnnEncoder {
    convs: Vec<(ParamId, ParamId, Conv2dSpec)>,
    norm_gain: ParamId,
    out_dim: usize,
}

pub const CNN_LAYERS: usize = 5;

impl CnnEncoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, channels: &[usize; CNN_LAYERS], rng: &mut impl Rng) -> Self {
        let mut convs = Vec::with_capacity(CNN_LAYERS);
        let mut cin = 1;
        for (i, &cout) in channels.iter().enumerate() {
            let spec = if i + 1 < CNN_LAYERS {
                Conv2dSpec {
                    kernel: (3, 3),
                    stride: (2, 2),
                    padding: (1, 1),
                }
            } else {
                Conv2dSpec {
                    kernel: (1, 2),
                    stride: (1, 1),
                    padding: (0, 0),
                }
            };
            let (kh, kw) = spec.kernel;
            let fan_in = kh * kw * cin;
            let w = uniform_tensor(&[kh, kw, cin, cout], Init::fan_in(fan_in), rng);
            let wid = store.add(alloc::format!("frontend.conv{i}.weight"), w);
            let bid = store.add(alloc::format!("frontend.conv{i}.bias"), Tensor::zeros(&[cout]));
            convs.push((wid, bid, spec));
            cin = cout;
        }
        let norm_gain = store.add("frontend.norm.gain".to_string(), Tensor::full(&[cin], T::one()));
        Self {
            convs,
            norm_gain,
            out_dim: cin,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// `windows` is a `[T, 15, 23]` node; returns `[T, E]`.
    pub fn encode<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, windows: Var) -> Result<Var> {
        let shape = g.shape(windows).to_vec();
        let (t, h, w) = match shape.as_slice() {
            &[t, h, w] => (t, h, w),
            _ => {
                return Err(Error::Rank {
                    op: "cnn_encode",
                    expected: 3,
                    shape,
                })
            }
        };
        let mut x = g.reshape(windows, &[t, h, w, 1])?;
        for (i, &(wid, bid, spec)) in self.convs.iter().enumerate() {
            let (wv, bv) = (p.var(wid), p.var(bid));
            let ws = g.shape(wv);
            if ws[2] != g.shape(x)[3] {
                return Err(Error::Config(alloc::format!(
                    "conv{i} expects {} input channels, got {}",
                    ws[2],
                    g.shape(x)[3]
                )));
            }
            x = g.conv2d(x, wv, bv, spec)?;
            if i + 1 < self.convs.len() {
                x = g.relu(x)?;
            }
        }
        let s = g.shape(x).to_vec();
        if s[1] != 1 || s[2] != 1 {
            return Err(Error::Config(alloc::format!(
                "window {h}x{w} does not collapse to 1x1 (got {}x{})",
                s[1],
                s[2]
            )));
        }
        let flat = g.reshape(x, &[t, self.out_dim])?;
        g.rms_norm(flat, p.var(self.norm_gain))
    }

    pub fn conv_params(&self) -> impl Iterator<Item = (ParamId, ParamId)> + '_ {
        self.convs.iter().map(|&(w, b, _)| (w, b))
    }
}

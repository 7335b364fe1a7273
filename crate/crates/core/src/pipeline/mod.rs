//! Synthetic data, cropping, optimizer, schedule and the training loop.

pub mod adamw;
pub mod crop;
pub mod schedule;
pub mod synth;
pub mod train;

pub use adamw::{clip_grad_norm, global_norm, AdamW, AdamWConfig};
pub use crop::{apply_crop, crop_range, crop_sample, CropRange};
pub use schedule::{one_cycle_lr, OneCycle};
pub use synth::{overlap_fraction, synth_mixture, LabeledRecording, MixtureSpec};
pub use train::{CheckpointKind, Example, MemorySink, MetricRecord, Split, TrainConfig, TrainSink, TrainSummary, Trainer};

//! Training loop over precomputed window tensors.
//!
//! Features are extracted once per recording; crops slice the window
//! tensor and the labels at the same frame offsets, which is equivalent to
//! cropping the audio (see [`super::crop::apply_crop`]).

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adamw::{clip_grad_norm, AdamW, AdamWConfig};
use super::crop::{crop_frames, crop_range, CropRange};
use super::schedule::OneCycle;
use crate::error::{Error, Result};
use crate::frontend::WindowTensor;
use crate::losses::{total_loss, DpclMode, LabelMatrix, LossBundle, LossConfig, LossInputs, LossWeights, DPCL_PAIR_BUDGET};
use crate::model::EendCd;
use crate::numerics::{Graph, ParamStore, Tensor};

/// One recording's features and labels, frame-aligned.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub windows: WindowTensor,
    pub labels: LabelMatrix,
}

impl Example {
    pub fn new(id: impl Into<String>, windows: WindowTensor, labels: LabelMatrix) -> Result<Self> {
        if windows.num_windows() != labels.frames() {
            return Err(Error::Dimension {
                op: "example",
                lhs: windows.windows.shape().to_vec(),
                rhs: alloc::vec![labels.frames(), labels.width()],
            });
        }
        Ok(Self {
            id: id.into(),
            windows,
            labels,
        })
    }

    pub fn frames(&self) -> usize {
        self.labels.frames()
    }

    pub fn crop(&self, range: CropRange) -> Result<Self> {
        Ok(Self {
            id: self.id.clone(),
            windows: self.windows.slice(range.start, range.frames)?,
            labels: self.labels.slice_frames(range.start, range.frames),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub max_lr: f64,
    pub crop_s: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub dpcl_mode: DpclMode,
    /// Validation runs every this many epochs and after the last one.
    pub validate_every: usize,
    pub clip_norm: f64,
    pub adamw: AdamWConfig,
    pub schedule: OneCycle,
    pub pair_budget: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 200,
            max_lr: 1e-3,
            crop_s: 50.0,
            seed: 0,
            weights: LossWeights::default(),
            dpcl_mode: DpclMode::default(),
            validate_every: 10,
            clip_norm: 5.0,
            adamw: AdamWConfig::default(),
            schedule: OneCycle::default(),
            pair_budget: DPCL_PAIR_BUDGET,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.max_lr.is_finite() && self.max_lr > 0.0) {
            return bad(alloc::format!("max_lr must be positive, got {}", self.max_lr));
        }
        crop_frames(self.crop_s)?;
        if self.validate_every == 0 {
            return bad("validate_every must be positive".into());
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive".into());
        }
        if self.pair_budget == 0 {
            return bad("pair_budget must be positive".into());
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n_train: usize) -> usize {
        n_train.div_ceil(self.batch_size)
    }

    fn loss_config(&self, step: usize) -> LossConfig {
        LossConfig {
            weights: self.weights,
            mode: self.dpcl_mode,
            pair_budget: self.pair_budget,
            seed: self.seed ^ (step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "val",
        }
    }
}

/// One row of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricRecord {
    pub step: usize,
    pub epoch: usize,
    pub split: Split,
    pub loss: LossBundle,
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointKind {
    /// Lowest validation loss so far.
    Best,
    /// Parameters at the end of training, or the last finite parameters
    /// before a divergence.
    Last,
}

/// Receives metrics and checkpoints as training progresses.
pub trait TrainSink {
    fn record(&mut self, _rec: &MetricRecord) -> Result<()> {
        Ok(())
    }

    fn checkpoint(&mut self, _kind: CheckpointKind, _step: usize, _params: &ParamStore<f32>) -> Result<()> {
        Ok(())
    }
}

impl TrainSink for () {}

/// Keeps every record in memory.
#[derive(Clone, Debug, Default)]
pub struct MemorySink {
    pub records: Vec<MetricRecord>,
    pub checkpoints: Vec<(CheckpointKind, usize)>,
}

impl TrainSink for MemorySink {
    fn record(&mut self, rec: &MetricRecord) -> Result<()> {
        self.records.push(*rec);
        Ok(())
    }

    fn checkpoint(&mut self, kind: CheckpointKind, step: usize, _params: &ParamStore<f32>) -> Result<()> {
        self.checkpoints.push((kind, step));
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainSummary {
    pub steps: usize,
    pub skipped: usize,
    pub best_val: Option<(usize, f64)>,
}

fn mean_bundle(bundles: &[LossBundle]) -> LossBundle {
    let n = bundles.len().max(1) as f64;
    let sum = |f: fn(&LossBundle) -> f64| bundles.iter().map(f).sum::<f64>() / n;
    LossBundle {
        bce: sum(|b| b.bce),
        dpcl: sum(|b| b.dpcl),
        ortho: sum(|b| b.ortho),
        suppress: sum(|b| b.suppress),
        total: sum(|b| b.total),
        weights: bundles.first().map(|b| b.weights).unwrap_or_default(),
    }
}

pub struct Trainer {
    model: EendCd,
    params: ParamStore<f32>,
    opt: AdamW<f32>,
    config: TrainConfig,
}

impl Trainer {
    pub fn new(model: EendCd, params: ParamStore<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        model.check_params(&params)?;
        let opt = AdamW::new(config.adamw, params.tensors());
        Ok(Self {
            model,
            params,
            opt,
            config,
        })
    }

    pub fn model(&self) -> &EendCd {
        &self.model
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn into_params(self) -> ParamStore<f32> {
        self.params
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Loss components on one example without updating anything.
    pub fn evaluate(&self, ex: &Example) -> Result<LossBundle> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g)?;
        let w = g.constant(ex.windows.windows.clone())?;
        let out = self.model.forward(&mut g, &p, w)?;
        let obj = total_loss(&mut g, LossInputs::from(&out), &ex.labels, &self.config.loss_config(0))?;
        Ok(obj.bundle)
    }

    /// Batch-mean gradients and loss components.
    fn batch_gradients(&self, batch: &[Example], step: usize) -> Result<(Vec<Tensor<f32>>, LossBundle)> {
        let mut acc: Vec<Tensor<f32>> = self.params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        let mut bundles = Vec::with_capacity(batch.len());
        let inv = 1.0 / batch.len() as f32;
        for ex in batch {
            let mut g = Graph::new();
            let p = self.params.bind(&mut g)?;
            let w = g.constant(ex.windows.windows.clone())?;
            let out = self.model.forward(&mut g, &p, w)?;
            let obj = total_loss(&mut g, LossInputs::from(&out), &ex.labels, &self.config.loss_config(step))?;
            let mut grads = g.backward(obj.total)?;
            for (a, gr) in acc.iter_mut().zip(p.gradients(&mut grads)) {
                for (x, y) in a.data_mut().iter_mut().zip(gr.data()) {
                    *x += y * inv;
                }
            }
            bundles.push(obj.bundle);
        }
        Ok((acc, mean_bundle(&bundles)))
    }

    fn validate(&self, val: &[Example]) -> Result<LossBundle> {
        let bundles = val.iter().map(|ex| self.evaluate(ex)).collect::<Result<Vec<_>>>()?;
        Ok(mean_bundle(&bundles))
    }

    /// Runs `config.epochs` epochs. Each step draws `batch_size` recordings
    /// (shuffled per epoch) and one random crop from each.
    pub fn run(&mut self, train: &[Example], val: &[Example], sink: &mut dyn TrainSink) -> Result<TrainSummary> {
        let cfg = self.config.clone();
        let mut summary = TrainSummary {
            steps: 0,
            skipped: 0,
            best_val: None,
        };
        if cfg.epochs == 0 {
            sink.checkpoint(CheckpointKind::Last, 0, &self.params)?;
            return Ok(summary);
        }
        if train.is_empty() {
            return Err(Error::Config("no training examples".into()));
        }
        let per_epoch = cfg.steps_per_epoch(train.len());
        let total = cfg.epochs * per_epoch;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut step = 0;
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch_size) {
                let batch = chunk
                    .iter()
                    .map(|&i| {
                        let range = crop_range(train[i].frames(), cfg.crop_s, &mut rng)?;
                        train[i].crop(range)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let lr = cfg.schedule.lr(step, total, cfg.max_lr)?;
                let (mut grads, bundle) = match self.batch_gradients(&batch, step) {
                    Ok(r) if r.1.total.is_finite() => r,
                    Ok(_) | Err(Error::NonFinite { .. }) => {
                        sink.checkpoint(CheckpointKind::Last, step, &self.params)?;
                        return Err(Error::Divergence { step });
                    }
                    Err(e) => return Err(e),
                };
                clip_grad_norm(&mut grads, cfg.clip_norm);
                self.opt.step(self.params.tensors_mut(), &grads, lr)?;
                sink.record(&MetricRecord {
                    step,
                    epoch,
                    split: Split::Train,
                    loss: bundle,
                    lr,
                })?;
                step += 1;
            }
            let last_epoch = epoch + 1 == cfg.epochs;
            if !val.is_empty() && ((epoch + 1) % cfg.validate_every == 0 || last_epoch) {
                let bundle = self.validate(val)?;
                sink.record(&MetricRecord {
                    step,
                    epoch,
                    split: Split::Validation,
                    loss: bundle,
                    lr: 0.0,
                })?;
                if summary.best_val.is_none_or(|(_, b)| bundle.total < b) {
                    summary.best_val = Some((step, bundle.total));
                    sink.checkpoint(CheckpointKind::Best, step, &self.params)?;
                }
            }
        }
        summary.steps = step;
        summary.skipped = self.opt.skipped();
        sink.checkpoint(CheckpointKind::Last, step, &self.params)?;
        Ok(summary)
    }
}

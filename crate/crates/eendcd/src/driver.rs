//! Training runs on disk: dataset in, metrics CSV and checkpoints out.

use std::fs::File;
use std::path::{Path, PathBuf};

use eendcd_core::eval::{der_score, posterior_to_segments, DerReport, DiarizationHypothesis};
use eendcd_core::model::EendCd;
use eendcd_core::numerics::ParamStore;
use eendcd_core::pipeline::{CheckpointKind, Example, MetricRecord, TrainSink, TrainSummary, Trainer};

use crate::checkpoint::save_checkpoint;
use crate::config::RunConfig;
use crate::dataset::{load_split, Recording};
use crate::error::{Error, Result};

pub const METRICS_FILE: &str = "metrics.csv";
pub const BEST_CKPT: &str = "best.ckpt";
pub const LAST_CKPT: &str = "last.ckpt";
pub const TRAIN_SPLIT: &str = "train";
pub const VAL_SPLIT: &str = "val";

/// Writes `metrics.csv` and the best/last checkpoints into a directory.
pub struct DirSink {
    dir: PathBuf,
    model: eendcd_core::model::ModelConfig,
    metrics: csv::Writer<File>,
}

impl DirSink {
    pub fn create(dir: impl Into<PathBuf>, model: &EendCd) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
        let mut metrics = csv::Writer::from_path(dir.join(METRICS_FILE))?;
        metrics.write_record(["step", "epoch", "split", "bce", "dpcl", "ortho", "suppress", "total", "lr"])?;
        Ok(Self {
            dir,
            model: model.config().clone(),
            metrics,
        })
    }

    fn sink_err(e: impl std::fmt::Display) -> eendcd_core::Error {
        eendcd_core::Error::Sink(e.to_string())
    }
}

impl TrainSink for DirSink {
    fn record(&mut self, rec: &MetricRecord) -> eendcd_core::Result<()> {
        let l = &rec.loss;
        let row = [
            rec.step.to_string(),
            rec.epoch.to_string(),
            rec.split.as_str().to_string(),
            l.bce.to_string(),
            l.dpcl.to_string(),
            l.ortho.to_string(),
            l.suppress.to_string(),
            l.total.to_string(),
            rec.lr.to_string(),
        ];
        self.metrics.write_record(&row).map_err(Self::sink_err)?;
        self.metrics.flush().map_err(Self::sink_err)
    }

    fn checkpoint(&mut self, kind: CheckpointKind, step: usize, params: &ParamStore<f32>) -> eendcd_core::Result<()> {
        let name = match kind {
            CheckpointKind::Best => BEST_CKPT,
            CheckpointKind::Last => LAST_CKPT,
        };
        save_checkpoint(self.dir.join(name), &self.model, params, step).map_err(Self::sink_err)
    }
}

pub struct TrainOutcome {
    pub summary: TrainSummary,
    pub model: EendCd,
    pub params: ParamStore<f32>,
}

/// Initializes a model from `cfg.train.seed` and trains it on in-memory
/// examples, logging into `out`.
pub fn train_examples(cfg: &RunConfig, train: &[Example], val: &[Example], out: &Path) -> Result<TrainOutcome> {
    let (model, params) = EendCd::init::<f32>(cfg.model.clone(), cfg.train.seed)?;
    let mut sink = DirSink::create(out, &model)?;
    let mut trainer = Trainer::new(model.clone(), params, cfg.train.clone())?;
    let summary = trainer.run(train, val, &mut sink)?;
    Ok(TrainOutcome {
        summary,
        model,
        params: trainer.into_params(),
    })
}

/// Trains on the `train` split of a dataset directory, validating on `val`.
pub fn train_dir(cfg: &RunConfig, data: &Path, out: &Path) -> Result<TrainOutcome> {
    let train = examples(load_split(data, TRAIN_SPLIT)?);
    let val = examples(load_split(data, VAL_SPLIT)?);
    if train.is_empty() && cfg.train.epochs > 0 {
        return Err(Error::invalid(data, "no recordings in the train split"));
    }
    train_examples(cfg, &train, &val, out)
}

fn examples(recs: Vec<Recording>) -> Vec<Example> {
    recs.into_iter().map(|r| r.example).collect()
}

/// Thresholded, median-filtered speaker segments for one window tensor.
pub fn diarize(
    model: &EendCd,
    params: &ParamStore<f32>,
    windows: &eendcd_core::frontend::WindowTensor,
    threshold: f64,
    median: usize,
) -> Result<DiarizationHypothesis> {
    let probs = model.predict(params, &windows.windows)?;
    Ok(posterior_to_segments(&probs, threshold, median)?)
}

/// Scores several recordings as one corpus: error and scored times are
/// summed before taking the ratio.
pub fn corpus_der(reports: &[DerReport]) -> DerReport {
    let total: f64 = reports.iter().map(|r| r.total_scored_s).sum();
    let pooled = |f: fn(&DerReport) -> f64| {
        if total > 0.0 {
            reports.iter().map(|r| f(r) * r.total_scored_s).sum::<f64>() / total
        } else {
            0.0
        }
    };
    DerReport {
        der: pooled(|r| r.der),
        ms: pooled(|r| r.ms),
        fa: pooled(|r| r.fa),
        cf: pooled(|r| r.cf),
        sad_ms: pooled(|r| r.sad_ms),
        sad_fa: pooled(|r| r.sad_fa),
        total_scored_s: total,
    }
}

/// Diarizes each recording and scores it against its reference.
pub fn score_recordings(
    model: &EendCd,
    params: &ParamStore<f32>,
    recs: &[Recording],
    threshold: f64,
    median: usize,
    collar_s: f64,
) -> Result<Vec<DerReport>> {
    recs.iter()
        .map(|r| {
            let hyp = diarize(model, params, &r.example.windows, threshold, median)?;
            Ok(der_score(&r.reference, &hyp, collar_s)?)
        })
        .collect()
}

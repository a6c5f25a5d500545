//! Training loops: losses, Adam with reduce-on-plateau, epoch bookkeeping
//! and best-checkpoint retention.

pub mod data;
mod loss;
mod plateau;

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use data::{BatchTarget, Dataset, LoadedCrop, Sample, Target};
pub use loss::{cls_loss, seg_loss, soft_dice, CE_FLOOR, P_CLAMP};
pub use plateau::{plateau_step, PlateauConfig, PlateauState};

use crate::metrics::{roc_auc, DiceCounts, MetricsError};
use crate::rng;
use crate::sampler::SamplerError;
use crate::slide_io::SlideError;
use crate::tensor::{adam_step, AdamState, Mode, ModelGraph, TensorError};
use crate::zoo::{CheckpointMeta, ZooError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Zoo(#[from] ZooError),
    #[error(transparent)]
    Slide(#[from] SlideError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("the {0} split is empty")]
    EmptySplit(&'static str),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    NonFinite(String),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

/// Key under which the plateau state travels in checkpoint notes.
pub const PLATEAU_NOTE: &str = "plateau";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub plateau: PlateauConfig,
    pub batch_size: usize,
    /// Total epochs, counted across resumes.
    pub max_epochs: usize,
    pub seed: u64,
    pub augment: bool,
}

impl TrainConfig {
    pub fn new(batch_size: usize, max_epochs: usize, seed: u64) -> Self {
        TrainConfig { plateau: PlateauConfig::default(), batch_size, max_epochs, seed, augment: true }
    }

    pub fn validate(&self) -> Result<()> {
        self.plateau.validate().map_err(TrainError::Config)?;
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
    pub lr: f64,
}

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut s = String::from("epoch,train_loss,val_metric,lr\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.epoch, r.train_loss, r.val_metric, r.lr);
    }
    s
}

/// Per-epoch training statistics beyond the history row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub row: HistoryRow,
    /// Soft Dice pooled over the epoch's train-mode outputs (segmentation).
    pub train_soft_dice: Option<f64>,
    pub improved: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best validation weights of this run; `None` if no epoch beat the
    /// metric carried in by a resumed checkpoint.
    pub best: Option<(ModelGraph, CheckpointMeta)>,
    /// Weights after the last completed epoch.
    pub last: (ModelGraph, CheckpointMeta),
    pub history: Vec<HistoryRow>,
    /// Diagnostic when training stopped on a non-finite loss.
    pub aborted: Option<String>,
}

/// Owns one model for the duration of a run.
pub struct Trainer<'a> {
    model: ModelGraph,
    meta: CheckpointMeta,
    adam: AdamState<f32>,
    plateau: PlateauState,
    cfg: TrainConfig,
    train: &'a Dataset,
    val: &'a Dataset,
    best: Option<(ModelGraph, CheckpointMeta)>,
    history: Vec<HistoryRow>,
}

impl<'a> Trainer<'a> {
    /// `meta.epoch` is the number of epochs already completed; a resumed
    /// checkpoint's plateau state is restored from its notes.
    pub fn new(
        model: ModelGraph,
        meta: CheckpointMeta,
        train: &'a Dataset,
        val: &'a Dataset,
        cfg: TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(TrainError::EmptySplit("train"));
        }
        if val.is_empty() {
            return Err(TrainError::EmptySplit("val"));
        }
        if train.is_segmentation() != val.is_segmentation() {
            return Err(TrainError::Data("train and val targets differ in kind".into()));
        }
        let plateau = match meta.notes.get(PLATEAU_NOTE) {
            Some(s) => serde_json::from_str(s).map_err(|e| TrainError::Data(format!("bad plateau note: {e}")))?,
            None => PlateauState::new(&cfg.plateau),
        };
        Ok(Trainer {
            model,
            meta,
            adam: AdamState::new(plateau.lr),
            plateau,
            cfg,
            train,
            val,
            best: None,
            history: Vec::new(),
        })
    }

    pub fn model(&self) -> &ModelGraph {
        &self.model
    }

    pub fn epochs_done(&self) -> usize {
        self.meta.epoch
    }

    pub fn plateau(&self) -> &PlateauState {
        &self.plateau
    }

    fn snapshot_meta(&self) -> CheckpointMeta {
        let mut m = self.meta.clone();
        m.lr = self.plateau.lr;
        m.notes.insert(PLATEAU_NOTE.into(), serde_json::to_string(&self.plateau).expect("plateau state serializes"));
        m
    }

    /// One pass over the training split. Returns the mean loss and, for
    /// segmentation, the pooled soft Dice.
    fn train_pass(&mut self, epoch: usize) -> Result<(f64, Option<f64>)> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut rng::stream(self.cfg.seed, &format!("shuffle/{epoch}")));
        let seed = self.cfg.seed;
        let aug = move |i: usize| rng::derive_seed(seed, &format!("augment/{epoch}/{i}"));
        let aug: Option<&dyn Fn(usize) -> u64> = if self.cfg.augment { Some(&aug) } else { None };
        self.adam.lr = self.plateau.lr;
        let (mut loss_sum, mut dice) = (0.0, [0.0f64; 3]);
        for batch in order.chunks(self.cfg.batch_size) {
            let (x, target) = self.train.batch(batch, aug)?;
            self.model.zero_grad();
            let y = match self.model.forward(&x, Mode::Train) {
                Ok(y) => y,
                Err(TensorError::NonFinite { layer, kind }) => {
                    return Err(TrainError::NonFinite(format!("non-finite activation in layer {layer} ({kind})")))
                }
                Err(e) => return Err(e.into()),
            };
            let (loss, gy) = match &target {
                BatchTarget::Masks(m) => {
                    for (&p, &g) in y.data().iter().zip(m.data()) {
                        dice[0] += (p * g) as f64;
                        dice[1] += p as f64;
                        dice[2] += g as f64;
                    }
                    seg_loss(&y, m)?
                }
                BatchTarget::Classes(c) => cls_loss(&y, c)?,
            };
            if !loss.is_finite() {
                return Err(TrainError::NonFinite(format!("loss is {loss} at epoch {epoch}")));
            }
            self.model.backward(&gy)?;
            adam_step(&mut self.model, &mut self.adam)?;
            loss_sum += loss * batch.len() as f64;
        }
        let soft = self.train.is_segmentation().then(|| (2.0 * dice[0] + 1.0) / (dice[1] + dice[2] + 1.0));
        Ok((loss_sum / self.train.len() as f64, soft))
    }

    /// Runs one epoch; a non-finite loss or activation is reported as
    /// `Err(diagnostic)` with the model rolled back to the epoch start.
    pub fn step_epoch(&mut self) -> Result<std::result::Result<EpochStats, String>> {
        let epoch = self.meta.epoch + 1;
        let start = self.model.clone();
        let (train_loss, train_soft_dice) = match self.train_pass(epoch) {
            Ok(v) => v,
            Err(TrainError::NonFinite(msg)) => {
                self.model = start;
                return Ok(Err(msg));
            }
            Err(e) => return Err(e),
        };
        let lr = self.plateau.lr;
        let metric = evaluate(&self.model, self.val, self.cfg.batch_size)?;
        if !metric.is_finite() {
            self.model = start;
            return Ok(Err(format!("validation metric is {metric} at epoch {epoch}")));
        }
        self.plateau = plateau_step(self.plateau, metric, &self.cfg.plateau);
        self.meta.epoch = epoch;
        let improved = self.meta.best_metric.is_none_or(|b| metric > b);
        if improved {
            self.meta.best_metric = Some(metric);
        }
        let row = HistoryRow { epoch, train_loss, val_metric: metric, lr };
        self.history.push(row);
        if improved {
            self.best = Some((self.model.clone(), self.snapshot_meta()));
        }
        Ok(Ok(EpochStats { row, train_soft_dice, improved }))
    }

    pub fn finish(self, aborted: Option<String>) -> TrainOutcome {
        let meta = self.snapshot_meta();
        TrainOutcome { best: self.best, last: (self.model, meta), history: self.history, aborted }
    }
}

/// Trains until `cfg.max_epochs` epochs are complete in total.
pub fn train(
    model: ModelGraph,
    meta: CheckpointMeta,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let mut t = Trainer::new(model, meta, train, val, cfg.clone())?;
    while t.epochs_done() < cfg.max_epochs {
        if let Err(diag) = t.step_epoch()? {
            return Ok(t.finish(Some(diag)));
        }
    }
    Ok(t.finish(None))
}

/// Monitored validation metric: pooled hard Dice at 0.5 for segmentation,
/// tumor-class AUC for classification (accuracy if the split has one class).
pub fn evaluate(model: &ModelGraph, data: &Dataset, batch_size: usize) -> Result<f64> {
    let mut counts = DiceCounts::default();
    let (mut scores, mut labels) = (Vec::new(), Vec::new());
    let idx: Vec<usize> = (0..data.len()).collect();
    for batch in idx.chunks(batch_size.max(1)) {
        let (x, target) = data.batch(batch, None)?;
        let y = model.infer(&x)?;
        match target {
            BatchTarget::Masks(m) => {
                let pred: Vec<u8> = y.data().iter().map(|&p| (p >= 0.5) as u8).collect();
                let gt: Vec<u8> = m.data().iter().map(|&g| (g >= 0.5) as u8).collect();
                counts.add(&pred, &gt)?;
            }
            BatchTarget::Classes(c) => {
                let k = y.dims()[1];
                for (row, &class) in y.data().chunks(k).zip(&c) {
                    scores.push(row[1.min(k - 1)] as f64);
                    labels.push(class == 1);
                }
            }
        }
    }
    if data.is_segmentation() {
        return Ok(counts.dice());
    }
    match roc_auc(&scores, &labels) {
        Ok(c) => Ok(c.auc),
        Err(MetricsError::SingleClass) => {
            let right = scores.iter().zip(&labels).filter(|(&s, &l)| (s >= 0.5) == l).count();
            Ok(right as f64 / scores.len() as f64)
        }
        Err(e) => Err(e.into()),
    }
}

//! Dice, tie-aware ROC/AUC, confusion counts and slide aggregation.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::rng;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {0} predictions vs {1} targets")]
    Length(usize, usize),
    #[error("AUC is undefined when only one class is present")]
    SingleClass,
    #[error("no valid patches to aggregate")]
    NoValidPatches,
    #[error("non-finite score at index {0}")]
    NonFinite(usize),
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

/// Overlap counts for binary masks; accumulate across images for pooled Dice.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiceCounts {
    pub intersection: u64,
    pub predicted: u64,
    pub target: u64,
}

impl DiceCounts {
    pub fn add(&mut self, pred: &[u8], target: &[u8]) -> Result<()> {
        if pred.len() != target.len() {
            return Err(MetricsError::Length(pred.len(), target.len()));
        }
        for (&p, &t) in pred.iter().zip(target) {
            let (p, t) = (p != 0, t != 0);
            self.intersection += (p && t) as u64;
            self.predicted += p as u64;
            self.target += t as u64;
        }
        Ok(())
    }

    /// `2|P∩T| / (|P|+|T|)`; two empty masks score 1.
    pub fn dice(&self) -> f64 {
        let denom = self.predicted + self.target;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.intersection as f64 / denom as f64
        }
    }
}

pub fn dice(pred: &[u8], target: &[u8]) -> Result<f64> {
    let mut c = DiceCounts::default();
    c.add(pred, target)?;
    Ok(c.dice())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Scores at or above this are called positive; the first point uses +∞.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

impl RocCurve {
    /// `threshold,fpr,tpr` rows followed by `AUC,<value>`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,fpr,tpr\n");
        for p in &self.points {
            s.push_str(&format!("{},{},{}\n", p.threshold, p.fpr, p.tpr));
        }
        s.push_str(&format!("AUC,{}\n", self.auc));
        s
    }
}

/// ROC with one point per distinct score (descending); tied scores move
/// together, so the trapezoidal area equals the Mann-Whitney statistic
/// with ties counted one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(MetricsError::Length(scores.len(), labels.len()));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(MetricsError::NonFinite(i));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricsError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint { threshold: f64::INFINITY, fpr: 0.0, tpr: 0.0 }];
    let (mut tp, mut fp) = (0u64, 0u64);
    // Twice the area in units of (1/neg)·(1/pos), kept integral for exactness.
    let mut area2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area2 += ((fp - fp0) as u128) * ((tp + tp0) as u128);
        points.push(RocPoint { threshold: s, fpr: fp as f64 / neg as f64, tpr: tp as f64 / pos as f64 });
    }
    let auc = area2 as f64 / (2.0 * pos as f64 * neg as f64);
    Ok(RocCurve { points, auc })
}

pub const PIXEL_AUC_MAX_SAMPLES: usize = 1_000_000;

/// Pixel-level AUC, uniformly subsampled to at most `max_samples` pixels.
pub fn pixel_auc(probs: &[f32], mask: &[u8], max_samples: usize, seed: u64) -> Result<f64> {
    if probs.len() != mask.len() {
        return Err(MetricsError::Length(probs.len(), mask.len()));
    }
    let (scores, labels): (Vec<f64>, Vec<bool>) = if probs.len() <= max_samples {
        probs.iter().zip(mask).map(|(&p, &m)| (p as f64, m != 0)).unzip()
    } else {
        let mut r = rng::stream(seed, "pixel-auc");
        sample(&mut r, probs.len(), max_samples).into_iter().map(|i| (probs[i] as f64, mask[i] != 0)).unzip()
    };
    Ok(roc_auc(&scores, &labels)?.auc)
}

/// How patch probabilities become one slide score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    #[default]
    Max,
    /// Share of valid patches whose probability reaches the threshold.
    TumorFraction { threshold: f64 },
}

pub fn aggregate_slide(probs: &[f64], valid: &[bool]) -> Result<f64> {
    aggregate_slide_with(probs, valid, Aggregation::Max)
}

pub fn aggregate_slide_with(probs: &[f64], valid: &[bool], how: Aggregation) -> Result<f64> {
    if probs.len() != valid.len() {
        return Err(MetricsError::Length(probs.len(), valid.len()));
    }
    let kept: Vec<f64> = probs.iter().zip(valid).filter(|(_, &v)| v).map(|(&p, _)| p).collect();
    if kept.is_empty() {
        return Err(MetricsError::NoValidPatches);
    }
    Ok(match how {
        Aggregation::Max => kept.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        Aggregation::TumorFraction { threshold } => {
            kept.iter().filter(|&&p| p >= threshold).count() as f64 / kept.len() as f64
        }
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Confusion {
    pub fn from_scores(scores: &[f64], labels: &[bool], threshold: f64) -> Self {
        let mut c = Confusion::default();
        for (&s, &l) in scores.iter().zip(labels) {
            match (s >= threshold, l) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// One classification task's score: `auc` is `None` when undefined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub auc: Option<f64>,
    pub confusion: Confusion,
    pub samples: usize,
}

impl TaskScore {
    pub fn from_scores(scores: &[f64], labels: &[bool]) -> (Self, Option<RocCurve>) {
        let roc = roc_auc(scores, labels).ok();
        (
            TaskScore {
                auc: roc.as_ref().map(|r| r.auc),
                confusion: Confusion::from_scores(scores, labels, 0.5),
                samples: scores.len(),
            },
            roc,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegScore {
    pub dice: f64,
    pub pixel_auc: Option<f64>,
    pub counts: DiceCounts,
    pub images: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tumor_seg: Option<SegScore>,
    pub artifact_seg: Option<SegScore>,
    pub patch_cls: Option<TaskScore>,
    pub slide_cls: Option<TaskScore>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dice_examples() {
        assert_eq!(dice(&[1, 1, 0], &[1, 1, 0]).unwrap(), 1.0);
        assert_eq!(dice(&[1, 0, 0], &[0, 1, 0]).unwrap(), 0.0);
        assert_eq!(dice(&[1, 1, 0], &[0, 1, 1]).unwrap(), 0.5);
        assert_eq!(dice(&[0, 0], &[0, 0]).unwrap(), 1.0);
        assert!(dice(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.9, 0.1], &[true, false]).unwrap().auc, 1.0);
        assert_eq!(roc_auc(&[0.3; 6], &[true, false, true, false, false, true]).unwrap().auc, 0.5);
        let c = roc_auc(&[0.8, 0.7, 0.6, 0.5], &[true, false, true, false]).unwrap();
        assert_eq!(c.auc, 0.75);
        assert_eq!(c.points.last().map(|p| (p.fpr, p.tpr)), Some((1.0, 1.0)));
        assert_eq!(roc_auc(&[0.1, 0.2], &[true, true]), Err(MetricsError::SingleClass));
    }

    #[test]
    fn aggregation_examples() {
        assert_eq!(aggregate_slide(&[0.1, 0.9, 0.3], &[true; 3]).unwrap(), 0.9);
        assert_eq!(aggregate_slide(&[0.2], &[true]).unwrap(), 0.2);
        assert_eq!(aggregate_slide(&[0.1, 0.99, 0.1], &[true, false, true]).unwrap(), 0.1);
        assert_eq!(aggregate_slide(&[0.5], &[false]), Err(MetricsError::NoValidPatches));
    }

    #[test]
    fn pixel_auc_examples() {
        let mask = [0u8, 1, 1, 0];
        let probs = [0.0f32, 1.0, 1.0, 0.0];
        assert_eq!(pixel_auc(&probs, &mask, 10, 0).unwrap(), 1.0);
        assert_eq!(pixel_auc(&[0.4; 4], &mask, 10, 0).unwrap(), 0.5);
    }

    #[test]
    fn roc_csv_ends_with_auc() {
        let c = roc_auc(&[0.9, 0.1], &[true, false]).unwrap();
        assert!(c.to_csv().ends_with("AUC,1\n"));
    }
}

use std::collections::BTreeMap;

use serde::Serialize;

use super::models::{Ensemble, OracleModels, SlideModels};
use super::{analyze, patch_truth, PipelineConfig, ProbMap, Result, Verdict};
use crate::metrics::{
    pixel_auc, DiceCounts, EvalReport, MetricsError, RocCurve, RocPoint, SegScore, TaskScore, PIXEL_AUC_MAX_SAMPLES,
};
use crate::slide_io::{downscale_mask2x, read_masks, read_rgb, Mask, MaskPair, SlideRecord};

/// Models to evaluate: trained networks, or ground-truth stubs.
#[derive(Debug, Clone, Copy)]
pub enum ModelChoice<'a> {
    Trained(&'a Ensemble),
    Oracle { inverted: bool },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlideEval {
    pub slide_id: String,
    pub has_tumor: bool,
    pub score: Option<f64>,
    pub verdict: Verdict,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: EvalReport,
    /// ROC curves keyed by task: `tumor-pixel`, `artifact-pixel`, `patch`,
    /// `slide`. Undefined curves are absent.
    pub curves: BTreeMap<String, RocCurve>,
    pub slides: Vec<SlideEval>,
}

#[derive(Default)]
struct PixelPool {
    counts: DiceCounts,
    probs: Vec<f32>,
    labels: Vec<u8>,
    images: usize,
}

impl PixelPool {
    fn add(&mut self, probs: Vec<f32>, pred: &Mask, truth: &Mask) -> Result<()> {
        self.counts.add(&pred.data, &truth.data)?;
        self.probs.extend(probs);
        self.labels.extend_from_slice(&truth.data);
        self.images += 1;
        Ok(())
    }

    fn finish(self, seed: u64, name: &str, curves: &mut BTreeMap<String, RocCurve>) -> Result<Option<SegScore>> {
        if self.images == 0 {
            return Ok(None);
        }
        let auc = match pixel_auc(&self.probs, &self.labels, PIXEL_AUC_MAX_SAMPLES, seed) {
            Ok(a) => Some(a),
            Err(MetricsError::SingleClass) => None,
            Err(e) => return Err(e.into()),
        };
        if auc.is_some() {
            curves.insert(name.into(), pixel_curve(&self.probs, &self.labels));
        }
        Ok(Some(SegScore { dice: self.counts.dice(), pixel_auc: auc, counts: self.counts, images: self.images }))
    }
}

/// Full-population curve from a 256-bin histogram; maps are 8-bit so the
/// binning loses nothing. Both classes must be present.
fn pixel_curve(probs: &[f32], labels: &[u8]) -> RocCurve {
    let mut pos = [0u64; 256];
    let mut neg = [0u64; 256];
    for (&p, &l) in probs.iter().zip(labels) {
        let q = ProbMap::quantize(p) as usize;
        if l != 0 {
            pos[q] += 1;
        } else {
            neg[q] += 1;
        }
    }
    let (p_total, n_total) = (pos.iter().sum::<u64>() as f64, neg.iter().sum::<u64>() as f64);
    let mut points = vec![RocPoint { threshold: f64::INFINITY, fpr: 0.0, tpr: 0.0 }];
    let (mut tp, mut fp, mut area2) = (0u64, 0u64, 0u128);
    for q in (0..256).rev().filter(|&q| pos[q] + neg[q] > 0) {
        let tp0 = tp;
        tp += pos[q];
        fp += neg[q];
        area2 += neg[q] as u128 * (tp + tp0) as u128;
        points.push(RocPoint { threshold: q as f64 / 255.0, fpr: fp as f64 / n_total, tpr: tp as f64 / p_total });
    }
    RocCurve { points, auc: area2 as f64 / (2.0 * p_total * n_total) }
}

fn task_score(
    scores: &[f64],
    labels: &[bool],
    name: &str,
    curves: &mut BTreeMap<String, RocCurve>,
) -> Option<TaskScore> {
    if scores.is_empty() {
        return None;
    }
    let (score, roc) = TaskScore::from_scores(scores, labels);
    if let Some(r) = roc {
        curves.insert(name.into(), r);
    }
    Some(score)
}

fn load_truth(r: &SlideRecord, width: usize, height: usize) -> Result<MaskPair> {
    Ok(match &r.mask_ref {
        Some(p) => {
            let m = read_masks(p)?;
            MaskPair { tumor: downscale_mask2x(&m.tumor)?, artifact: downscale_mask2x(&m.artifact)? }
        }
        None => MaskPair { tumor: Mask::zeros(width, height), artifact: Mask::zeros(width, height) },
    })
}

/// Runs the pipeline over labelled crops and scores every level: pixel
/// Dice and AUC per segmentation class, patch AUC and slide AUC.
pub fn evaluate_split(records: &[SlideRecord], models: ModelChoice<'_>, cfg: &PipelineConfig) -> Result<Evaluation> {
    let mut tumor = PixelPool::default();
    let mut artifact = PixelPool::default();
    let (mut patch_scores, mut patch_labels) = (Vec::new(), Vec::new());
    let (mut slide_scores, mut slide_labels) = (Vec::new(), Vec::new());
    let mut slides = Vec::with_capacity(records.len());
    for r in records {
        let image = read_rgb(&r.image_ref)?;
        let (aw, ah) = (image.width() as usize / 2, image.height() as usize / 2);
        let truth = load_truth(r, aw, ah)?;
        let oracle;
        let m: &dyn SlideModels = match models {
            ModelChoice::Trained(e) => e,
            ModelChoice::Oracle { inverted } => {
                oracle = OracleModels { truth: truth.clone(), inverted };
                &oracle
            }
        };
        let a = analyze(&r.id, &image, m, cfg)?;
        drop(image);
        if let Some(map) = &a.tumor_map {
            tumor.add(map.probs(), &map.mask(cfg.tumor_threshold), &truth.tumor)?;
        }
        if let Some(full) = a.artifact_full() {
            artifact.add(full.probs(), &full.mask(cfg.artifact_threshold), &truth.artifact)?;
        }
        for p in a.patches.iter().filter(|p| p.valid) {
            if let (Some(prob), Some(label)) = (p.tumor_prob, patch_truth(&truth.tumor, p.x, p.y, cfg.patch_size)?) {
                patch_scores.push(prob);
                patch_labels.push(label);
            }
        }
        let has_tumor = truth.tumor.count() > 0;
        if m.has_classifier() {
            // A slide without scorable tissue cannot be called positive.
            slide_scores.push(a.score.unwrap_or(0.0));
            slide_labels.push(has_tumor);
        }
        slides.push(SlideEval { slide_id: r.id.clone(), has_tumor, score: a.score, verdict: a.verdict });
    }
    let mut curves = BTreeMap::new();
    let report = EvalReport {
        tumor_seg: tumor.finish(cfg.seed, "tumor-pixel", &mut curves)?,
        artifact_seg: artifact.finish(cfg.seed, "artifact-pixel", &mut curves)?,
        patch_cls: task_score(&patch_scores, &patch_labels, "patch", &mut curves),
        slide_cls: task_score(&slide_scores, &slide_labels, "slide", &mut curves),
    };
    Ok(Evaluation { report, curves, slides })
}

//! Whole-slide ensemble inference: artifact segmentation on the resized
//! image, tumor segmentation and classification on tissue patches, fused
//! into probability maps, an overlay and a slide verdict.
//!
//! Maps are kept at analysis resolution (half the stored slide size, where
//! the models operate) and quantized to 8 bits; the artifact map stays at
//! the artifact model's resolution and is sampled nearest-neighbour.

mod eval;
mod memory;
mod models;
mod overlay;
mod source;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use eval::{evaluate_split, Evaluation, ModelChoice, SlideEval};
pub use memory::{Charge, MemoryMeter};
pub use models::{Ensemble, OracleModels, SlideModels};
pub use overlay::render_overlay;
pub use source::{analysis_region, analysis_rgb, SlideSource};

use crate::metrics::{aggregate_slide_with, Aggregation, MetricsError};
use crate::sampler::{grid_windows, is_tissue, SamplerError, NON_TISSUE_BELOW, PATCH_SIZE, POSITIVE_THRESHOLD};
use crate::slide_io::{resize_bilinear_with, FloatImage, Mask, SlideError};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Slide(#[from] SlideError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{model} expects input {expected:?}, got {got:?}")]
    ModelShape { model: &'static str, expected: Vec<usize>, got: Vec<usize> },
    #[error("no {0} model loaded")]
    MissingModel(&'static str),
    #[error("{0}")]
    Dims(String),
    #[error("invalid pipeline configuration: {0}")]
    Config(String),
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub tumor_threshold: f64,
    pub artifact_threshold: f64,
    pub classifier_threshold: f64,
    /// Patches with a smaller tissue fraction are skipped.
    pub tissue_threshold: f64,
    pub patch_size: usize,
    pub batch_size: usize,
    pub threads: usize,
    pub aggregation: Aggregation,
    /// When set, patches whose predicted artifact fraction exceeds this
    /// value do not count towards the slide score.
    pub artifact_suppression: Option<f64>,
    /// Seed for pixel-AUC subsampling during evaluation.
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            tumor_threshold: 0.5,
            artifact_threshold: 0.5,
            classifier_threshold: 0.5,
            tissue_threshold: NON_TISSUE_BELOW,
            patch_size: PATCH_SIZE,
            batch_size: 8,
            threads: 1,
            aggregation: Aggregation::Max,
            artifact_suppression: None,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if ![self.tumor_threshold, self.artifact_threshold, self.classifier_threshold, self.tissue_threshold]
            .into_iter()
            .all(unit)
        {
            return Err(PipelineError::Config("thresholds must lie in [0, 1]".into()));
        }
        if self.patch_size == 0 || self.batch_size == 0 || self.threads == 0 {
            return Err(PipelineError::Config("patch size, batch size and threads must be positive".into()));
        }
        Ok(())
    }
}

/// Probabilities in [0,1] stored as `round(p·255)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl ProbMap {
    pub fn zeros(width: usize, height: usize) -> Self {
        ProbMap { width, height, data: vec![0; width * height] }
    }

    #[inline]
    pub fn quantize(p: f32) -> u8 {
        (p.clamp(0.0, 1.0) * 255.0).round() as u8
    }

    pub fn from_probs(width: usize, height: usize, probs: &[f32]) -> Result<Self> {
        if probs.len() != width * height {
            return Err(PipelineError::Dims(format!("{} values for a {width}x{height} map", probs.len())));
        }
        Ok(ProbMap { width, height, data: probs.iter().map(|&p| Self::quantize(p)).collect() })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x] as f32 / 255.0
    }

    pub fn probs(&self) -> Vec<f32> {
        self.data.iter().map(|&q| q as f32 / 255.0).collect()
    }

    pub fn mask(&self, threshold: f64) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&q| (q as f64 / 255.0 >= threshold) as u8).collect(),
        }
    }

    /// Nearest-neighbour value at `(x, y)` of a `width`×`height` grid.
    #[inline]
    pub fn sample(&self, x: usize, y: usize, width: usize, height: usize) -> u8 {
        let sx = (((x as f64 + 0.5) * self.width as f64 / width as f64) as usize).min(self.width - 1);
        let sy = (((y as f64 + 0.5) * self.height as f64 / height as f64) as usize).min(self.height - 1);
        self.data[sy * self.width + sx]
    }

    pub fn resize_nearest(&self, width: usize, height: usize) -> ProbMap {
        if (width, height) == (self.width, self.height) {
            return self.clone();
        }
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(self.sample(x, y, width, height));
            }
        }
        ProbMap { width, height, data }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Tumor,
    NonTumor,
    NoTissue,
    /// Tissue was found but no classifier was loaded.
    Unscored,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchResult {
    /// Origin at analysis resolution.
    pub x: usize,
    pub y: usize,
    pub tissue_fraction: f64,
    /// Tissue patch; only these are run through the patch models.
    pub tissue: bool,
    pub tumor_prob: Option<f64>,
    pub artifact_fraction: Option<f64>,
    /// Counted towards the slide score.
    pub valid: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub artifact_ms: f64,
    pub patches_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MemoryStats {
    pub cache_peak_bytes: usize,
    pub buffers_peak_bytes: usize,
    /// Upper bound on resident image memory: cache peak plus buffer peak.
    pub peak_image_bytes: usize,
    pub budget_bytes: usize,
    pub model_bytes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlideAnalysis {
    pub slide_id: String,
    /// Analysis-resolution extent.
    pub width: usize,
    pub height: usize,
    /// At the artifact model's resolution.
    pub artifact_map: Option<ProbMap>,
    pub tumor_map: Option<ProbMap>,
    pub patches: Vec<PatchResult>,
    pub score: Option<f64>,
    pub verdict: Verdict,
    pub timings: Timings,
    pub memory: MemoryStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSummary {
    pub slide_id: String,
    pub score: Option<f64>,
    pub verdict: Verdict,
    pub patch_count: usize,
    pub tissue_patch_count: usize,
    pub timings: Timings,
    pub memory: MemoryStats,
}

impl SlideAnalysis {
    pub fn summary(&self) -> AnalysisSummary {
        AnalysisSummary {
            slide_id: self.slide_id.clone(),
            score: self.score,
            verdict: self.verdict,
            patch_count: self.patches.len(),
            tissue_patch_count: self.patches.iter().filter(|p| p.tissue).count(),
            timings: self.timings,
            memory: self.memory,
        }
    }

    /// Artifact probability map resampled to analysis resolution.
    pub fn artifact_full(&self) -> Option<ProbMap> {
        self.artifact_map.as_ref().map(|m| m.resize_nearest(self.width, self.height))
    }
}

/// Work item: one chunk of windows within a band.
struct ChunkOut {
    tissue: Vec<f64>,
    /// Indices (within the chunk) of tissue windows, in order.
    kept: Vec<usize>,
    seg: Option<Vec<f32>>,
    cls: Option<Vec<f64>>,
}

fn run_chunk(
    src: &dyn SlideSource,
    models: &dyn SlideModels,
    windows: &[(usize, usize)],
    cfg: &PipelineConfig,
    meter: &MemoryMeter,
) -> Result<ChunkOut> {
    let p = cfg.patch_size;
    let patch_bytes = p * p * 3 * 4;
    let mut tissue = Vec::with_capacity(windows.len());
    let mut kept = Vec::new();
    let mut tensors = Vec::new();
    let mut charges = Vec::new();
    for (i, &(x, y)) in windows.iter().enumerate() {
        let img = {
            let _raw = meter.charge(4 * p * p * 3);
            let _img = meter.charge(patch_bytes);
            analysis_region(src, x, y, p, p)?
        };
        let n = img.data.len() / 3;
        let t = img.data.chunks_exact(3).filter(|c| is_tissue([c[0], c[1], c[2]])).count() as f64 / n as f64;
        tissue.push(t);
        if t >= cfg.tissue_threshold {
            charges.push(meter.charge(patch_bytes));
            tensors.push(img.to_tensor());
            kept.push(i);
        }
    }
    if kept.is_empty() {
        return Ok(ChunkOut { tissue, kept, seg: None, cls: None });
    }
    let _batch = meter.charge(patch_bytes * tensors.len());
    let batch = Tensor::stack(&tensors)?;
    drop(tensors);
    drop(charges);
    let origins: Vec<(usize, usize)> = kept.iter().map(|&i| windows[i]).collect();
    let seg = if models.has_tumor_seg() {
        let _out = meter.charge(kept.len() * p * p * 4);
        let y = models.segment_tumor(&batch, &origins)?;
        if y.dims() != [kept.len(), 1, p, p] {
            return Err(PipelineError::ModelShape {
                model: "tumor-seg",
                expected: vec![kept.len(), 1, p, p],
                got: y.dims().to_vec(),
            });
        }
        Some(y.into_data())
    } else {
        None
    };
    let cls = if models.has_classifier() {
        let c = models.classify(&batch, &origins)?;
        if c.len() != kept.len() {
            return Err(PipelineError::Dims(format!(
                "classifier returned {} scores for {} patches",
                c.len(),
                kept.len()
            )));
        }
        Some(c)
    } else {
        None
    };
    Ok(ChunkOut { tissue, kept, seg, cls })
}

/// Bilinear resize of the analysis image to `dw`×`dh`, reading two
/// analysis rows at a time.
fn stream_resize(
    src: &dyn SlideSource,
    aw: usize,
    ah: usize,
    dw: usize,
    dh: usize,
    meter: &MemoryMeter,
) -> Result<FloatImage> {
    let _rows = meter.charge(2 * aw * 3 * 4 + 4 * aw * 3);
    let mut rows: [Option<(usize, FloatImage)>; 2] = [None, None];
    let mut failure: Option<SlideError> = None;
    let out = resize_bilinear_with(aw, ah, dw, dh, |x, y| {
        if failure.is_some() {
            return [0.0; 3];
        }
        if let Some((_, r)) = rows.iter().flatten().find(|(ry, _)| *ry == y) {
            return r.pixel(x, 0);
        }
        match analysis_region(src, 0, y, aw, 1) {
            Ok(r) => {
                let px = r.pixel(x, 0);
                let slot = match (&rows[0], &rows[1]) {
                    (None, _) => 0,
                    (_, None) => 1,
                    (Some((a, _)), Some((b, _))) => usize::from(b < a),
                };
                rows[slot] = Some((y, r));
                let lowest = rows.iter().flatten().map(|(ry, _)| *ry).min().unwrap_or(y);
                src.release_above(2 * lowest);
                px
            }
            Err(e) => {
                failure = Some(e);
                [0.0; 3]
            }
        }
    })?;
    match failure {
        Some(e) => Err(e.into()),
        None => Ok(out),
    }
}

/// Runs the ensemble over one slide, sweeping it top to bottom so that at
/// most a band of tiles plus one batch of patches is resident at a time.
pub fn analyze(
    slide_id: &str,
    src: &dyn SlideSource,
    models: &dyn SlideModels,
    cfg: &PipelineConfig,
) -> Result<SlideAnalysis> {
    cfg.validate()?;
    let started = Instant::now();
    let meter = MemoryMeter::default();
    let (w, h) = src.dims();
    let (aw, ah) = (w / 2, h / 2);
    let p = cfg.patch_size;
    let windows = grid_windows(aw, ah, p, p)?;

    let artifact_map = match models.artifact_input((ah, aw)) {
        Some((mh, mw)) => {
            let img = stream_resize(src, aw, ah, mw, mh, &meter)?;
            let _img = meter.charge(img.data.len() * 4 * 2);
            let y = models.segment_artifact(&img.to_tensor())?;
            if y.dims() != [1, 1, mh, mw] {
                return Err(PipelineError::ModelShape {
                    model: "artifact-seg",
                    expected: vec![1, 1, mh, mw],
                    got: y.dims().to_vec(),
                });
            }
            Some(ProbMap::from_probs(mw, mh, y.data())?)
        }
        None => None,
    };
    src.release_above(h);
    let _artifact_map = meter.charge(artifact_map.as_ref().map_or(0, |m| m.data.len()));
    let artifact_ms = started.elapsed().as_secs_f64() * 1e3;

    let patch_start = Instant::now();
    let mut tumor_map = models.has_tumor_seg().then(|| ProbMap::zeros(aw, ah));
    let _tumor_map = meter.charge(tumor_map.as_ref().map_or(0, |m| m.data.len()));
    let mut patches = Vec::with_capacity(windows.len());
    let mut band_start = 0;
    while band_start < windows.len() {
        let band_y = windows[band_start].1;
        let band_end =
            windows[band_start..].iter().position(|w| w.1 != band_y).map_or(windows.len(), |n| band_start + n);
        let band = &windows[band_start..band_end];
        let chunks: Vec<&[(usize, usize)]> = band.chunks(cfg.batch_size).collect();
        let results: Vec<Mutex<Option<Result<ChunkOut>>>> = chunks.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let work = || loop {
            let i = next.fetch_add(1, Ordering::SeqCst);
            if i >= chunks.len() {
                break;
            }
            let r = run_chunk(src, models, chunks[i], cfg, &meter);
            *results[i].lock().expect("result slot") = Some(r);
        };
        let workers = cfg.threads.min(chunks.len());
        if workers <= 1 {
            work();
        } else {
            std::thread::scope(|s| {
                for _ in 0..workers {
                    s.spawn(work);
                }
            });
        }
        // Stitch in window order; later windows overwrite overlaps.
        for (chunk, slot) in chunks.iter().zip(results) {
            let out = slot.into_inner().expect("result slot").expect("every chunk ran")?;
            let mut kept = out.kept.iter().enumerate().peekable();
            for (i, &(x, y)) in chunk.iter().enumerate() {
                let mut r = PatchResult {
                    x,
                    y,
                    tissue_fraction: out.tissue[i],
                    tissue: false,
                    tumor_prob: None,
                    artifact_fraction: None,
                    valid: false,
                };
                if let Some(&(k, _)) = kept.peek().filter(|(_, &ci)| ci == i) {
                    kept.next();
                    r.tissue = true;
                    r.valid = true;
                    r.tumor_prob = out.cls.as_ref().map(|c| c[k]);
                    if let (Some(map), Some(seg)) = (tumor_map.as_mut(), out.seg.as_ref()) {
                        let probs = &seg[k * p * p..(k + 1) * p * p];
                        for row in 0..p {
                            let dst = &mut map.data[(y + row) * aw + x..(y + row) * aw + x + p];
                            for (d, &v) in dst.iter_mut().zip(&probs[row * p..(row + 1) * p]) {
                                *d = ProbMap::quantize(v);
                            }
                        }
                    }
                    if let Some(am) = &artifact_map {
                        let mut hits = 0usize;
                        for yy in y..y + p {
                            for xx in x..x + p {
                                hits += (am.sample(xx, yy, aw, ah) as f64 / 255.0 >= cfg.artifact_threshold) as usize;
                            }
                        }
                        let f = hits as f64 / (p * p) as f64;
                        r.artifact_fraction = Some(f);
                        if cfg.artifact_suppression.is_some_and(|limit| f > limit) {
                            r.valid = false;
                        }
                    }
                }
                patches.push(r);
            }
        }
        band_start = band_end;
        let next_y = windows.get(band_start).map_or(ah, |w| w.1);
        src.release_above(2 * next_y);
    }
    let patches_ms = patch_start.elapsed().as_secs_f64() * 1e3;

    let any_tissue = patches.iter().any(|r| r.tissue);
    let (score, verdict) = if !any_tissue {
        (None, Verdict::NoTissue)
    } else if !models.has_classifier() {
        (None, Verdict::Unscored)
    } else {
        let probs: Vec<f64> = patches.iter().map(|r| r.tumor_prob.unwrap_or(0.0)).collect();
        let valid: Vec<bool> = patches.iter().map(|r| r.valid && r.tumor_prob.is_some()).collect();
        match aggregate_slide_with(&probs, &valid, cfg.aggregation) {
            Ok(s) => (Some(s), if s >= cfg.classifier_threshold { Verdict::Tumor } else { Verdict::NonTumor }),
            Err(MetricsError::NoValidPatches) => (None, Verdict::NoTissue),
            Err(e) => return Err(e.into()),
        }
    };
    let cache_peak = src.cache_stats().map_or(0, |s| s.peak_bytes);
    Ok(SlideAnalysis {
        slide_id: slide_id.to_string(),
        width: aw,
        height: ah,
        artifact_map,
        tumor_map,
        patches,
        score,
        verdict,
        timings: Timings { artifact_ms, patches_ms, total_ms: started.elapsed().as_secs_f64() * 1e3 },
        memory: MemoryStats {
            cache_peak_bytes: cache_peak,
            buffers_peak_bytes: meter.peak(),
            peak_image_bytes: cache_peak + meter.peak(),
            budget_bytes: src.budget_bytes(),
            model_bytes: models.footprint_bytes(),
        },
    })
}

/// Tumor label of a patch from ground truth, as the classifier is trained.
pub fn patch_truth(truth: &Mask, x: usize, y: usize, size: usize) -> Result<Option<bool>> {
    let f = truth.crop(x, y, size, size)?.fraction();
    Ok(if f >= POSITIVE_THRESHOLD {
        Some(true)
    } else if f == 0.0 {
        Some(false)
    } else {
        None
    })
}

//! Tissue detection, patch grids, labels, augmentation and dataset splits.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng;
use crate::slide_io::{resize_bilinear_with, ClassHint, FloatImage, Mask, SlideRecord, Split};

pub const PATCH_SIZE: usize = 256;
/// Luminance at or below this is tissue.
pub const TISSUE_LUMINANCE: f32 = 0.90;
/// Channel spread at or above this is tissue.
pub const TISSUE_SPREAD: f32 = 0.08;
/// Patches with a smaller tissue fraction are non-tissue.
pub const NON_TISSUE_BELOW: f64 = 0.05;
/// Tumor fraction at or above this labels a patch tumor.
pub const POSITIVE_THRESHOLD: f64 = 0.05;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SamplerError {
    #[error("slide {width}x{height} is smaller than the {size}px window")]
    TooSmall { width: usize, height: usize, size: usize },
    #[error("augmentation needs a square patch, got {width}x{height}")]
    NotSquare { width: usize, height: usize },
    #[error("image and mask sizes differ")]
    MaskDims,
    #[error("invalid split fractions {0:?}: each must be in [0,1] and they must sum to 1")]
    Fractions((f64, f64, f64)),
    #[error("{class} stratum ({count} crops) cannot cover every split with a nonzero fraction")]
    Stratum { class: ClassHint, count: usize },
    #[error("need at least 3 records carrying both class hints")]
    TooFewRecords,
}

pub type Result<T, E = SamplerError> = std::result::Result<T, E>;

#[inline]
pub fn is_tissue(rgb: [f32; 3]) -> bool {
    let lum = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2];
    let spread = rgb.iter().copied().fold(f32::MIN, f32::max) - rgb.iter().copied().fold(f32::MAX, f32::min);
    lum <= TISSUE_LUMINANCE || spread >= TISSUE_SPREAD
}

/// Fraction of tissue pixels in a normalized RGB patch.
pub fn tissue_fraction(patch: &FloatImage) -> f64 {
    let n = patch.width * patch.height;
    if n == 0 {
        return 0.0;
    }
    let tissue = patch.data.chunks_exact(3).filter(|p| is_tissue([p[0], p[1], p[2]])).count();
    tissue as f64 / n as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PatchLabel {
    Tumor,
    NonTumor,
    Excluded,
}

pub fn derive_label(tumor_fraction: f64) -> PatchLabel {
    if tumor_fraction >= POSITIVE_THRESHOLD {
        PatchLabel::Tumor
    } else if tumor_fraction == 0.0 {
        PatchLabel::NonTumor
    } else {
        PatchLabel::Excluded
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub slide_id: String,
    pub x: usize,
    pub y: usize,
    pub tissue_fraction: f64,
    pub tumor_fraction: f64,
    pub label: PatchLabel,
    pub rng_seed: u64,
}

/// Window origins along one axis: a regular grid whose last window is
/// shifted inward to end at the edge.
pub fn window_starts(len: usize, size: usize, stride: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..).map(|i| i * stride).take_while(|&s| s + size <= len).collect();
    if let Some(&last) = v.last() {
        if last + size < len {
            v.push(len - size);
        }
    }
    v
}

/// (x, y) window origins in row-major order.
pub fn grid_windows(width: usize, height: usize, size: usize, stride: usize) -> Result<Vec<(usize, usize)>> {
    if width < size || height < size || size == 0 || stride == 0 {
        return Err(SamplerError::TooSmall { width, height, size });
    }
    let xs = window_starts(width, size, stride);
    Ok(window_starts(height, size, stride).into_iter().flat_map(|y| xs.iter().map(move |&x| (x, y))).collect())
}

/// Seed for the stochastic steps of one patch, independent of iteration order.
pub fn patch_seed(seed: u64, slide_id: &str, x: usize, y: usize) -> u64 {
    rng::derive_seed(seed, &format!("patch/{slide_id}/{x}/{y}"))
}

/// Grid patches with tissue and tumor fractions. Without a tumor mask every
/// tumor fraction is zero.
pub fn grid_patches(
    slide_id: &str,
    image: &FloatImage,
    tumor: Option<&Mask>,
    size: usize,
    stride: usize,
    seed: u64,
) -> Result<Vec<PatchRecord>> {
    if let Some(m) = tumor {
        if (m.width, m.height) != (image.width, image.height) {
            return Err(SamplerError::MaskDims);
        }
    }
    let windows = grid_windows(image.width, image.height, size, stride)?;
    Ok(windows
        .into_iter()
        .map(|(x, y)| {
            let patch = image.crop(x, y, size, size).expect("window inside image");
            let tumor_fraction = tumor.map_or(0.0, |m| m.crop(x, y, size, size).expect("inside").fraction());
            PatchRecord {
                slide_id: slide_id.to_string(),
                x,
                y,
                tissue_fraction: tissue_fraction(&patch),
                tumor_fraction,
                label: derive_label(tumor_fraction),
                rng_seed: patch_seed(seed, slide_id, x, y),
            }
        })
        .collect())
}

/// Drops each non-tissue patch with probability `rate`; tissue patches are
/// always kept. Each patch draws from its own seeded stream.
pub fn exclude_nontissue(patches: Vec<PatchRecord>, rate: f64, seed: u64) -> Vec<PatchRecord> {
    let rate = rate.clamp(0.0, 1.0);
    patches
        .into_iter()
        .filter(|p| {
            if p.tissue_fraction >= NON_TISSUE_BELOW {
                return true;
            }
            let mut r = rng::stream(seed, &format!("exclude/{}/{}/{}", p.slide_id, p.x, p.y));
            r.random::<f64>() >= rate
        })
        .collect()
}

/// Audit export, ordered by (slide_id, y, x).
pub fn write_patches_jsonl(path: &Path, patches: &[PatchRecord]) -> std::io::Result<()> {
    let mut sorted: Vec<&PatchRecord> = patches.iter().collect();
    sorted.sort_by(|a, b| (&a.slide_id, a.y, a.x).cmp(&(&b.slide_id, b.y, b.x)));
    let mut out = Vec::new();
    for p in sorted {
        serde_json::to_writer(&mut out, p).map_err(std::io::Error::other)?;
        out.push(b'\n');
    }
    std::fs::File::create(path)?.write_all(&out)
}

pub fn read_patches_jsonl(path: &Path) -> std::io::Result<Vec<PatchRecord>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(std::io::Error::other))
        .collect()
}

/// Geometric augmentation drawn from a seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AugmentParams {
    /// Counter-clockwise quarter turns, 0..=3.
    pub quarter_turns: u8,
    pub hflip: bool,
    pub vflip: bool,
    pub zoom: f64,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams { quarter_turns: 0, hflip: false, vflip: false, zoom: 1.0 };

    /// `zoom_range` (lo, hi); `(1.0, 1.0)` disables zoom.
    pub fn sample(seed: u64, zoom_range: (f64, f64)) -> Self {
        let mut r = rng::stream(seed, "augment");
        let quarter_turns = r.random_range(0..4u8);
        let hflip = r.random_bool(0.5);
        let vflip = r.random_bool(0.5);
        let u: f64 = r.random();
        AugmentParams { quarter_turns, hflip, vflip, zoom: zoom_range.0 + u * (zoom_range.1 - zoom_range.0) }
    }
}

pub const ZOOM_RANGE: (f64, f64) = (0.9, 1.1);

/// Source coordinate for output pixel (x, y) under rotation then flips.
fn source_of(p: &AugmentParams, n: usize, x: usize, y: usize) -> (usize, usize) {
    let m = n - 1;
    let (x, y) = (if p.hflip { m - x } else { x }, if p.vflip { m - y } else { y });
    match p.quarter_turns % 4 {
        0 => (x, y),
        1 => (m - y, x),
        2 => (m - x, m - y),
        _ => (y, m - x),
    }
}

fn zoom_window(n: usize, zoom: f64) -> (isize, usize) {
    // Window of side n/zoom centred on the patch; larger than n pads by
    // edge replication.
    let side = ((n as f64 / zoom).round() as usize).max(1);
    let off = (n as isize - side as isize) / 2;
    (off, side)
}

/// Applies identical geometric transforms to a square image and mask.
pub fn apply_augment(p: &AugmentParams, image: &FloatImage, mask: Option<&Mask>) -> Result<(FloatImage, Option<Mask>)> {
    let n = image.width;
    if image.height != n {
        return Err(SamplerError::NotSquare { width: image.width, height: image.height });
    }
    if let Some(m) = mask {
        if (m.width, m.height) != (n, n) {
            return Err(SamplerError::MaskDims);
        }
    }
    let mut img = FloatImage::filled(n, n, [0.0; 3]);
    let mut out_mask = mask.map(|_| Mask::zeros(n, n));
    for y in 0..n {
        for x in 0..n {
            let (sx, sy) = source_of(p, n, x, y);
            let i = (y * n + x) * 3;
            img.data[i..i + 3].copy_from_slice(&image.data[(sy * n + sx) * 3..(sy * n + sx) * 3 + 3]);
            if let (Some(o), Some(m)) = (out_mask.as_mut(), mask) {
                o.data[y * n + x] = m.data[sy * n + sx];
            }
        }
    }
    if p.zoom == 1.0 {
        return Ok((img, out_mask));
    }
    let (off, side) = zoom_window(n, p.zoom);
    let clamp = |v: isize| v.clamp(0, n as isize - 1) as usize;
    let src = &img;
    let zoomed =
        resize_bilinear_with(side, side, n, n, |x, y| src.pixel(clamp(x as isize + off), clamp(y as isize + off)))
            .expect("non-empty");
    let zoomed_mask = out_mask.map(|m| {
        let mut o = Mask::zeros(n, n);
        for y in 0..n {
            let sy = ((y as f64 + 0.5) * side as f64 / n as f64) as isize;
            for x in 0..n {
                let sx = ((x as f64 + 0.5) * side as f64 / n as f64) as isize;
                o.data[y * n + x] = m.data[clamp(sy + off) * n + clamp(sx + off)];
            }
        }
        o
    });
    Ok((zoomed, zoomed_mask))
}

/// Rotation, flips and zoom drawn from `seed`.
pub fn augment(image: &FloatImage, mask: Option<&Mask>, seed: u64) -> Result<(FloatImage, Option<Mask>)> {
    apply_augment(&AugmentParams::sample(seed, ZOOM_RANGE), image, mask)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitAssignment {
    pub splits: BTreeMap<String, Split>,
    pub fractions: (f64, f64, f64),
    pub seed: u64,
    pub by_patient: bool,
}

impl SplitAssignment {
    /// (train, val, test) counts.
    pub fn counts(&self) -> (usize, usize, usize) {
        let mut c = (0, 0, 0);
        for s in self.splits.values() {
            match s {
                Split::Train => c.0 += 1,
                Split::Val => c.1 += 1,
                Split::Test => c.2 += 1,
                Split::Unassigned => {}
            }
        }
        c
    }

    pub fn apply(&self, records: &mut [SlideRecord]) {
        for r in records {
            r.split = self.splits.get(&r.id).copied().unwrap_or_default();
        }
    }
}

/// Per-stratum (val, test) quotas whose totals equal the global floor rule.
fn quotas(sizes: &[usize], frac: f64, total: usize) -> Vec<usize> {
    let target = (frac * total as f64 + 1e-9).floor() as usize;
    let exact: Vec<f64> = sizes.iter().map(|&n| frac * n as f64).collect();
    let mut q: Vec<usize> = exact.iter().map(|v| (v + 1e-9).floor() as usize).collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - q[b] as f64).total_cmp(&(exact[a] - q[a] as f64)).then(a.cmp(&b)));
    let mut missing = target.saturating_sub(q.iter().sum());
    for &i in order.iter().cycle().take(sizes.len() * 2) {
        if missing == 0 {
            break;
        }
        if q[i] < sizes[i] {
            q[i] += 1;
            missing -= 1;
        }
    }
    q
}

/// Seeded, class-stratified split. Counts follow the floor rule
/// (`test = ⌊f_test·N⌋`, `val = ⌊f_val·N⌋`, train the rest). With
/// `by_patient`, whole patients move together and counts are approximate.
pub fn split_dataset(
    records: &[SlideRecord],
    fractions: (f64, f64, f64),
    seed: u64,
    by_patient: bool,
) -> Result<SplitAssignment> {
    let (ft, fv, fs) = fractions;
    if [ft, fv, fs].iter().any(|f| !(0.0..=1.0).contains(f)) || (ft + fv + fs - 1.0).abs() > 1e-9 {
        return Err(SamplerError::Fractions(fractions));
    }
    let classes = [ClassHint::Artifact, ClassHint::Tumor];
    if records.len() < 3 || classes.iter().any(|c| !records.iter().any(|r| r.class_hint == *c)) {
        return Err(SamplerError::TooFewRecords);
    }
    let mut r = rng::stream(seed, "split");
    let mut splits = BTreeMap::new();
    if by_patient {
        split_by_patient(records, fractions, &mut r, &mut splits)?;
    } else {
        let strata: Vec<Vec<&SlideRecord>> = classes
            .iter()
            .map(|c| {
                let mut v: Vec<&SlideRecord> = records.iter().filter(|r| r.class_hint == *c).collect();
                v.sort_by(|a, b| a.id.cmp(&b.id));
                v
            })
            .collect();
        let sizes: Vec<usize> = strata.iter().map(Vec::len).collect();
        let test_q = quotas(&sizes, fs, records.len());
        let val_q = quotas(&sizes, fv, records.len());
        for (i, mut stratum) in strata.into_iter().enumerate() {
            let (nt, nv) = (test_q[i], val_q[i]);
            let short = (fs > 0.0 && nt == 0) || (fv > 0.0 && nv == 0) || (ft > 0.0 && nt + nv >= stratum.len());
            if short {
                return Err(SamplerError::Stratum { class: classes[i], count: stratum.len() });
            }
            stratum.shuffle(&mut r);
            for (k, rec) in stratum.into_iter().enumerate() {
                let s = if k < nt {
                    Split::Test
                } else if k < nt + nv {
                    Split::Val
                } else {
                    Split::Train
                };
                splits.insert(rec.id.clone(), s);
            }
        }
    }
    Ok(SplitAssignment { splits, fractions, seed, by_patient })
}

fn split_by_patient(
    records: &[SlideRecord],
    (ft, fv, fs): (f64, f64, f64),
    r: &mut rng::Rng,
    splits: &mut BTreeMap<String, Split>,
) -> Result<()> {
    let mut patients: BTreeMap<&str, Vec<&SlideRecord>> = BTreeMap::new();
    for rec in records {
        patients.entry(rec.patient_id.as_str()).or_default().push(rec);
    }
    let mut groups: Vec<Vec<&SlideRecord>> = patients.into_values().collect();
    groups.shuffle(r);
    let n = records.len() as f64;
    let targets = [(Split::Test, (fs * n).floor() as usize), (Split::Val, (fv * n).floor() as usize)];
    let mut filled: HashMap<Split, usize> = HashMap::new();
    for g in groups {
        let dest =
            targets.iter().find(|(s, t)| filled.get(s).copied().unwrap_or(0) < *t).map_or(Split::Train, |(s, _)| *s);
        *filled.entry(dest).or_default() += g.len();
        for rec in g {
            splits.insert(rec.id.clone(), dest);
        }
    }
    for (split, f) in [(Split::Train, ft), (Split::Val, fv), (Split::Test, fs)] {
        if f == 0.0 {
            continue;
        }
        for class in [ClassHint::Artifact, ClassHint::Tumor] {
            let present = records.iter().any(|rec| rec.class_hint == class && splits.get(&rec.id) == Some(&split));
            if !present {
                return Err(SamplerError::Stratum {
                    class,
                    count: records.iter().filter(|rec| rec.class_hint == class).count(),
                });
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tissue_examples() {
        assert_eq!(tissue_fraction(&FloatImage::filled(8, 8, [1.0; 3])), 0.0);
        assert_eq!(tissue_fraction(&FloatImage::filled(8, 8, [0.8, 0.4, 0.6])), 1.0);
        let mut half = FloatImage::filled(8, 8, [1.0; 3]);
        for i in 0..32 {
            half.data[i * 3..i * 3 + 3].copy_from_slice(&[0.8, 0.4, 0.6]);
        }
        assert_eq!(tissue_fraction(&half), 0.5);
    }

    #[test]
    fn grid_examples() {
        assert_eq!(grid_windows(512, 512, 256, 256).unwrap(), vec![(0, 0), (256, 0), (0, 256), (256, 256)]);
        let w = grid_windows(600, 512, 256, 256).unwrap();
        assert_eq!(w.len(), 6);
        assert_eq!(w[2], (344, 0));
        assert_eq!(grid_windows(256, 256, 256, 256).unwrap().len(), 1);
        assert!(grid_windows(255, 300, 256, 256).is_err());
    }

    #[test]
    fn labels() {
        assert_eq!(derive_label(0.5), PatchLabel::Tumor);
        assert_eq!(derive_label(0.0), PatchLabel::NonTumor);
        assert_eq!(derive_label(0.01), PatchLabel::Excluded);
    }

    #[test]
    fn identity_and_half_turn_involution() {
        let img = FloatImage::new(4, 4, (0..48).map(|v| v as f32).collect()).unwrap();
        let (same, _) = apply_augment(&AugmentParams::IDENTITY, &img, None).unwrap();
        assert_eq!(same, img);
        let half = AugmentParams { quarter_turns: 2, ..AugmentParams::IDENTITY };
        let (once, _) = apply_augment(&half, &img, None).unwrap();
        let (twice, _) = apply_augment(&half, &once, None).unwrap();
        assert_ne!(once, img);
        assert_eq!(twice, img);
        assert!(apply_augment(&half, &FloatImage::filled(4, 3, [0.0; 3]), None).is_err());
    }

    #[test]
    fn split_floor_rule() {
        let recs: Vec<SlideRecord> = (0..20)
            .map(|i| SlideRecord {
                id: format!("s{i:02}"),
                patient_id: format!("p{}", i / 3),
                image_ref: "x.png".into(),
                mask_ref: None,
                width: 512,
                height: 512,
                class_hint: if i % 2 == 0 { ClassHint::Tumor } else { ClassHint::Artifact },
                split: Split::Unassigned,
            })
            .collect();
        let a = split_dataset(&recs, (0.7, 0.15, 0.15), 1, false).unwrap();
        assert_eq!(a.counts(), (14, 3, 3));
        assert_eq!(a, split_dataset(&recs, (0.7, 0.15, 0.15), 1, false).unwrap());
        assert!(split_dataset(&recs, (0.7, 0.2, 0.2), 1, false).is_err());
        let p = split_dataset(&recs, (0.7, 0.15, 0.15), 1, true).unwrap();
        let (tr, va, te) = p.counts();
        assert_eq!(tr + va + te, 20);
    }
}

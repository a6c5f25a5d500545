//! Turning manifest crops into training samples.

use rand::Rng as _;

use super::{Result, TrainError};
use crate::rng;
use crate::sampler::{
    apply_augment, exclude_nontissue, grid_patches, AugmentParams, PatchLabel, PatchRecord, PATCH_SIZE, ZOOM_RANGE,
};
use crate::slide_io::{
    downscale2x, downscale_mask2x, normalize, read_masks, read_rgb, resize_fixed, resize_mask_nearest, FloatImage,
    Mask, MaskPair, SlideRecord,
};
use crate::tensor::Tensor;

/// Fraction of non-tissue patches dropped before training.
pub const DEFAULT_EXCLUSION_RATE: f64 = 0.8;

/// A crop at analysis resolution (half the stored size).
#[derive(Debug, Clone)]
pub struct LoadedCrop {
    pub record: SlideRecord,
    pub image: FloatImage,
    pub masks: MaskPair,
}

/// Decodes, normalizes and halves a crop and its annotation. A record
/// without a mask file gets empty masks.
pub fn load_crop(record: &SlideRecord) -> Result<LoadedCrop> {
    let image = downscale2x(&normalize(&read_rgb(&record.image_ref)?))?;
    let masks = match &record.mask_ref {
        Some(path) => {
            let m = read_masks(path)?;
            MaskPair { tumor: downscale_mask2x(&m.tumor)?, artifact: downscale_mask2x(&m.artifact)? }
        }
        None => {
            MaskPair { tumor: Mask::zeros(image.width, image.height), artifact: Mask::zeros(image.width, image.height) }
        }
    };
    if (masks.tumor.width, masks.tumor.height) != (image.width, image.height) {
        return Err(TrainError::Data(format!("{}: mask and image sizes differ", record.id)));
    }
    Ok(LoadedCrop { record: record.clone(), image, masks })
}

/// Grid patches of one crop after non-tissue exclusion.
pub fn crop_patches(crop: &LoadedCrop, exclusion_rate: f64, seed: u64) -> Result<Vec<PatchRecord>> {
    let all = grid_patches(&crop.record.id, &crop.image, Some(&crop.masks.tumor), PATCH_SIZE, PATCH_SIZE, seed)?;
    Ok(exclude_nontissue(all, exclusion_rate, seed))
}

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Mask(Mask),
    Class(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: FloatImage,
    pub target: Target,
}

/// Which random geometric transforms training applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Augmentation {
    None,
    /// Right-angle rotation, flips and zoom; square samples only.
    Full,
    /// Horizontal and vertical flips, for non-square images.
    Flips,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub augmentation: Augmentation,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Segmentation if the first sample carries a mask.
    pub fn is_segmentation(&self) -> bool {
        matches!(self.samples.first().map(|s| &s.target), Some(Target::Mask(_)))
    }

    /// Input batch (N×3×H×W) for the given sample indices, augmented with
    /// `aug_seed(index)` when augmentation is on.
    pub fn batch(&self, indices: &[usize], aug_seed: Option<&dyn Fn(usize) -> u64>) -> Result<(Tensor, BatchTarget)> {
        let mut images = Vec::with_capacity(indices.len());
        let mut masks = Vec::new();
        let mut classes = Vec::new();
        for &i in indices {
            let s = &self.samples[i];
            let mask = match &s.target {
                Target::Mask(m) => Some(m),
                Target::Class(c) => {
                    classes.push(*c);
                    None
                }
            };
            let (img, mask) = match (aug_seed, self.augmentation) {
                (Some(f), Augmentation::Full) => {
                    let p = AugmentParams::sample(f(i), ZOOM_RANGE);
                    let (img, m) = apply_augment(&p, &s.image, mask)?;
                    (img, m)
                }
                (Some(f), Augmentation::Flips) => flip(&s.image, mask, f(i)),
                _ => (s.image.clone(), mask.cloned()),
            };
            images.push(img.to_tensor());
            if let Some(m) = mask {
                masks.push(m.to_tensor());
            }
        }
        let x = Tensor::stack(&images)?;
        let target =
            if masks.is_empty() { BatchTarget::Classes(classes) } else { BatchTarget::Masks(Tensor::stack(&masks)?) };
        Ok((x, target))
    }
}

#[derive(Debug, Clone)]
pub enum BatchTarget {
    Masks(Tensor),
    Classes(Vec<usize>),
}

fn flip(image: &FloatImage, mask: Option<&Mask>, seed: u64) -> (FloatImage, Option<Mask>) {
    let mut r = rng::stream(seed, "flip");
    let (h, v): (bool, bool) = (r.random(), r.random());
    let (w, ht) = (image.width, image.height);
    let src = |x: usize, y: usize| (if h { w - 1 - x } else { x }, if v { ht - 1 - y } else { y });
    let mut img = image.clone();
    let mut out = mask.cloned();
    for y in 0..ht {
        for x in 0..w {
            let (sx, sy) = src(x, y);
            let (d, s) = ((y * w + x) * 3, (sy * w + sx) * 3);
            img.data[d..d + 3].copy_from_slice(&image.data[s..s + 3]);
            if let (Some(o), Some(m)) = (out.as_mut(), mask) {
                o.data[y * w + x] = m.data[sy * w + sx];
            }
        }
    }
    (img, out)
}

/// Tumor-segmentation samples: the listed patches of tumor-bearing crops.
pub fn tumor_seg_samples(crops: &[LoadedCrop], patches: &[PatchRecord]) -> Result<Dataset> {
    let mut samples = Vec::new();
    for p in patches {
        let Some(c) = crops.iter().find(|c| c.record.id == p.slide_id) else {
            return Err(TrainError::Data(format!("patch refers to unknown crop {}", p.slide_id)));
        };
        samples.push(Sample {
            id: format!("{}@{},{}", p.slide_id, p.x, p.y),
            image: c.image.crop(p.x, p.y, PATCH_SIZE, PATCH_SIZE)?,
            target: Target::Mask(c.masks.tumor.crop(p.x, p.y, PATCH_SIZE, PATCH_SIZE)?),
        });
    }
    Ok(Dataset { samples, augmentation: Augmentation::Full })
}

/// Artifact-segmentation samples: whole crops resized to `height`×`width`.
pub fn artifact_seg_samples(crops: &[LoadedCrop], height: usize, width: usize) -> Result<Dataset> {
    let samples = crops
        .iter()
        .map(|c| {
            Ok(Sample {
                id: c.record.id.clone(),
                image: resize_fixed(&c.image, height, width)?,
                target: Target::Mask(resize_mask_nearest(&c.masks.artifact, height, width)),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { samples, augmentation: Augmentation::Flips })
}

/// Classifier samples: class 1 for tumor patches, 0 for non-tumor;
/// excluded-label patches are skipped.
pub fn classifier_samples(crops: &[LoadedCrop], patches: &[PatchRecord]) -> Result<Dataset> {
    let mut samples = Vec::new();
    for p in patches {
        let class = match p.label {
            PatchLabel::Tumor => 1,
            PatchLabel::NonTumor => 0,
            PatchLabel::Excluded => continue,
        };
        let Some(c) = crops.iter().find(|c| c.record.id == p.slide_id) else {
            return Err(TrainError::Data(format!("patch refers to unknown crop {}", p.slide_id)));
        };
        samples.push(Sample {
            id: format!("{}@{},{}", p.slide_id, p.x, p.y),
            image: c.image.crop(p.x, p.y, PATCH_SIZE, PATCH_SIZE)?,
            target: Target::Class(class),
        });
    }
    Ok(Dataset { samples, augmentation: Augmentation::Full })
}

//! Slide crops, annotation masks and the preprocessing applied before any
//! model sees a pixel.

mod image_ops;
mod manifest;
mod tiled;

use std::path::PathBuf;

pub use image_ops::{
    downscale2x, downscale_mask2x, extract_masks, normalize, read_masks, read_rgb, render_annotation,
    resize_bilinear_with, resize_fixed, resize_mask_nearest, FloatImage, Mask, MaskPair,
};
pub use manifest::{load_manifest, write_manifest, ClassHint, SlideRecord, Split};
pub use tiled::{write_tiled, TileCacheStats, TiledSlide, MTS_MAGIC};

#[derive(Debug, thiserror::Error)]
pub enum SlideError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    ManifestLine { path: PathBuf, line: usize, message: String },
    #[error("duplicate slide id `{0}`")]
    DuplicateId(String),
    #[error("missing files: {}", .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    MissingFiles(Vec<PathBuf>),
    #[error("cannot decode {path}: {message}")]
    Decode { path: PathBuf, message: String },
    #[error("expected an RGB image, got {0}")]
    NotRgb(String),
    #[error("image has a zero extent ({width}x{height})")]
    EmptyImage { width: usize, height: usize },
    #[error("dimension mismatch: {0}")]
    Dims(String),
    #[error("corrupt tiled container: {0}")]
    CorruptContainer(String),
    #[error("region {x},{y} {w}x{h} exceeds slide {width}x{height}")]
    OutOfBounds { x: usize, y: usize, w: usize, h: usize, width: usize, height: usize },
}

impl SlideError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SlideError::Io { path: path.into(), source }
    }
}

pub type Result<T, E = SlideError> = std::result::Result<T, E>;

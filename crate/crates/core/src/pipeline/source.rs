use image::RgbImage;

use crate::slide_io::{FloatImage, SlideError, TileCacheStats, TiledSlide};

/// Random-access RGB pixels of a slide at full resolution.
pub trait SlideSource: Sync {
    /// (width, height) in pixels.
    fn dims(&self) -> (usize, usize);
    /// Row-major interleaved RGB bytes.
    fn read_region(&self, x: usize, y: usize, w: usize, h: usize) -> Result<Vec<u8>, SlideError>;
    /// Hint that rows above `y` will not be read again.
    fn release_above(&self, _y: usize) {}
    fn cache_stats(&self) -> Option<TileCacheStats> {
        None
    }
    /// Upper bound on cache residency in bytes; zero for in-memory images.
    fn budget_bytes(&self) -> usize {
        0
    }
}

impl SlideSource for TiledSlide {
    fn dims(&self) -> (usize, usize) {
        (self.width(), self.height())
    }
    fn read_region(&self, x: usize, y: usize, w: usize, h: usize) -> Result<Vec<u8>, SlideError> {
        if self.channels() != 3 {
            return Err(SlideError::NotRgb(format!("{} channels", self.channels())));
        }
        TiledSlide::read_region(self, x, y, w, h)
    }
    fn release_above(&self, y: usize) {
        TiledSlide::release_above(self, y)
    }
    fn cache_stats(&self) -> Option<TileCacheStats> {
        Some(self.stats())
    }
    fn budget_bytes(&self) -> usize {
        self.budget() * self.tile_bytes()
    }
}

impl SlideSource for RgbImage {
    fn dims(&self) -> (usize, usize) {
        (self.width() as usize, self.height() as usize)
    }
    fn read_region(&self, x: usize, y: usize, w: usize, h: usize) -> Result<Vec<u8>, SlideError> {
        let (width, height) = SlideSource::dims(self);
        if x + w > width || y + h > height {
            return Err(SlideError::OutOfBounds { x, y, w, h, width, height });
        }
        let raw = self.as_raw();
        let mut out = Vec::with_capacity(w * h * 3);
        for row in y..y + h {
            let start = (row * width + x) * 3;
            out.extend_from_slice(&raw[start..start + w * 3]);
        }
        Ok(out)
    }
}

/// Analysis-resolution pixels (normalized, 2×2-averaged) of the region at
/// analysis coordinates `x, y, w, h`. Arithmetic matches
/// `downscale2x(normalize(..))` bit for bit.
pub fn analysis_region(
    src: &dyn SlideSource,
    x: usize,
    y: usize,
    w: usize,
    h: usize,
) -> Result<FloatImage, SlideError> {
    let raw = src.read_region(2 * x, 2 * y, 2 * w, 2 * h)?;
    let stride = 2 * w * 3;
    let n = |v: u8| v as f32 / 255.0;
    let mut data = Vec::with_capacity(w * h * 3);
    for yy in 0..h {
        let r0 = &raw[2 * yy * stride..];
        let r1 = &raw[(2 * yy + 1) * stride..];
        for xx in 0..w {
            for c in 0..3 {
                let i = 6 * xx + c;
                data.push((n(r0[i]) + n(r0[i + 3]) + n(r1[i]) + n(r1[i + 3])) * 0.25);
            }
        }
    }
    FloatImage::new(w, h, data)
}

/// The whole slide at analysis resolution as 8-bit RGB, built in bands.
pub fn analysis_rgb(src: &dyn SlideSource) -> Result<RgbImage, SlideError> {
    let (w, h) = src.dims();
    let (aw, ah) = (w / 2, h / 2);
    if aw == 0 || ah == 0 {
        return Err(SlideError::EmptyImage { width: w, height: h });
    }
    let mut out = RgbImage::new(aw as u32, ah as u32);
    let band = 64;
    for y0 in (0..ah).step_by(band) {
        let bh = band.min(ah - y0);
        let part = analysis_region(src, 0, y0, aw, bh)?.to_rgb8();
        let start = y0 * aw * 3;
        let dst: &mut [u8] = &mut out;
        dst[start..start + part.as_raw().len()].copy_from_slice(part.as_raw());
        src.release_above(2 * (y0 + bh));
    }
    Ok(out)
}

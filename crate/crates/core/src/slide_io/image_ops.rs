use std::path::Path;

use image::{DynamicImage, ImageReader, RgbImage};

use super::{Result, SlideError};
use crate::tensor::Tensor;

/// Interleaved RGB image with `f32` channels, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl FloatImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(SlideError::Dims(format!("{} values for a {width}x{height} RGB image", data.len())));
        }
        Ok(FloatImage { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        FloatImage { width, height, data: rgb.iter().copied().cycle().take(width * height * 3).collect() }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<FloatImage> {
        if x + w > self.width || y + h > self.height {
            return Err(SlideError::OutOfBounds { x, y, w, h, width: self.width, height: self.height });
        }
        let mut data = Vec::with_capacity(w * h * 3);
        for row in y..y + h {
            let start = (row * self.width + x) * 3;
            data.extend_from_slice(&self.data[start..start + w * 3]);
        }
        Ok(FloatImage { width: w, height: h, data })
    }

    /// 1×3×H×W planar tensor.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let plane = self.width * self.height;
        let mut out = vec![0.0; plane * 3];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            out[i] = px[0];
            out[plane + i] = px[1];
            out[2 * plane + i] = px[2];
        }
        Tensor::new(&[1, 3, self.height, self.width], out).expect("consistent dims")
    }

    /// Inverse of [`FloatImage::to_tensor`] for a single 3-channel item.
    pub fn from_planar(width: usize, height: usize, planar: &[f32]) -> Result<FloatImage> {
        let plane = width * height;
        if planar.len() != plane * 3 {
            return Err(SlideError::Dims(format!("{} planar values for {width}x{height}", planar.len())));
        }
        let mut data = Vec::with_capacity(plane * 3);
        for i in 0..plane {
            data.extend_from_slice(&[planar[i], planar[plane + i], planar[2 * plane + i]]);
        }
        Ok(FloatImage { width, height, data })
    }

    /// Rounds [0,1] values back to 8-bit.
    pub fn to_rgb8(&self) -> RgbImage {
        let bytes = self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        RgbImage::from_raw(self.width as u32, self.height as u32, bytes).expect("consistent dims")
    }
}

/// Binary mask, one byte per pixel holding 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn zeros(width: usize, height: usize) -> Self {
        Mask { width, height, data: vec![0; width * height] }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn fraction(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.count() as f64 / self.data.len() as f64
        }
    }

    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<Mask> {
        if x + w > self.width || y + h > self.height {
            return Err(SlideError::OutOfBounds { x, y, w, h, width: self.width, height: self.height });
        }
        let mut data = Vec::with_capacity(w * h);
        for row in y..y + h {
            let start = row * self.width + x;
            data.extend_from_slice(&self.data[start..start + w]);
        }
        Ok(Mask { width: w, height: h, data })
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(&[1, 1, self.height, self.width], self.data.iter().map(|&v| v as f32).collect())
            .expect("consistent dims")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPair {
    pub tumor: Mask,
    pub artifact: Mask,
}

/// Splits a red/green annotation image into tumor and artifact masks.
pub fn extract_masks(annotation: &DynamicImage) -> Result<MaskPair> {
    let (w, h) = (annotation.width() as usize, annotation.height() as usize);
    let mut tumor = Mask::zeros(w, h);
    let mut artifact = Mask::zeros(w, h);
    let mut classify = |i: usize, r: u8, g: u8, b: u8| {
        tumor.data[i] = (r > 127 && g <= 127 && b <= 127) as u8;
        artifact.data[i] = (g > 127 && r <= 127 && b <= 127) as u8;
    };
    match annotation {
        DynamicImage::ImageRgb8(img) => {
            for (i, p) in img.pixels().enumerate() {
                classify(i, p[0], p[1], p[2]);
            }
        }
        DynamicImage::ImageRgba8(img) => {
            for (i, p) in img.pixels().enumerate() {
                classify(i, p[0], p[1], p[2]);
            }
        }
        other => return Err(SlideError::NotRgb(format!("{:?}", other.color()))),
    }
    Ok(MaskPair { tumor, artifact })
}

fn decode(path: &Path) -> Result<DynamicImage> {
    let reader = ImageReader::open(path).and_then(|r| r.with_guessed_format()).map_err(|e| SlideError::io(path, e))?;
    reader.decode().map_err(|e| SlideError::Decode { path: path.to_path_buf(), message: e.to_string() })
}

/// Decodes a crop image; an alpha channel is dropped.
pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    match decode(path)? {
        DynamicImage::ImageRgb8(img) => Ok(img),
        DynamicImage::ImageRgba8(img) => Ok(DynamicImage::ImageRgba8(img).to_rgb8()),
        other => Err(SlideError::NotRgb(format!("{:?}", other.color()))),
    }
}

/// Decodes an annotation file into tumor and artifact masks.
pub fn read_masks(path: &Path) -> Result<MaskPair> {
    extract_masks(&decode(path)?)
}

/// Paints tumor red and artifact green on black. Where both are set the
/// pixel is red, so overlapping masks do not survive this encoding.
pub fn render_annotation(masks: &MaskPair) -> Result<RgbImage> {
    let (w, h) = (masks.tumor.width, masks.tumor.height);
    if (masks.artifact.width, masks.artifact.height) != (w, h) {
        return Err(SlideError::Dims("tumor and artifact masks differ in size".into()));
    }
    let mut img = RgbImage::new(w as u32, h as u32);
    for (i, p) in img.pixels_mut().enumerate() {
        if masks.tumor.data[i] != 0 {
            *p = image::Rgb([255, 0, 0]);
        } else if masks.artifact.data[i] != 0 {
            *p = image::Rgb([0, 255, 0]);
        }
    }
    Ok(img)
}

/// 8-bit → [0,1] per channel.
pub fn normalize(img: &RgbImage) -> FloatImage {
    FloatImage {
        width: img.width() as usize,
        height: img.height() as usize,
        data: img.as_raw().iter().map(|&v| v as f32 / 255.0).collect(),
    }
}

/// 2×2 mean pooling. An odd trailing row or column is dropped.
pub fn downscale2x(img: &FloatImage) -> Result<FloatImage> {
    let (w, h) = (img.width / 2, img.height / 2);
    if w == 0 || h == 0 {
        return Err(SlideError::EmptyImage { width: img.width, height: img.height });
    }
    let stride = img.width * 3;
    let mut data = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        let r0 = &img.data[2 * y * stride..];
        let r1 = &img.data[(2 * y + 1) * stride..];
        for x in 0..w {
            for c in 0..3 {
                let i = 6 * x + c;
                // Pairwise sums keep constant regions exactly constant.
                data.push(((r0[i] + r0[i + 3]) + (r1[i] + r1[i + 3])) * 0.25);
            }
        }
    }
    Ok(FloatImage { width: w, height: h, data })
}

/// 2×2 block majority for masks: a block mean of at least one half is set.
pub fn downscale_mask2x(mask: &Mask) -> Result<Mask> {
    let (w, h) = (mask.width / 2, mask.height / 2);
    if w == 0 || h == 0 {
        return Err(SlideError::EmptyImage { width: mask.width, height: mask.height });
    }
    let mut out = Mask::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let s = mask.get(2 * x, 2 * y) as u8
                + mask.get(2 * x + 1, 2 * y) as u8
                + mask.get(2 * x, 2 * y + 1) as u8
                + mask.get(2 * x + 1, 2 * y + 1) as u8;
            out.set(x, y, s >= 2);
        }
    }
    Ok(out)
}

#[inline]
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + (b - a) * t
}

/// Source taps along one axis for pixel-centre-aligned bilinear sampling.
fn taps(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|j| {
            let s = ((j as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, (s - i0 as f64) as f32)
        })
        .collect()
}

/// Bilinear resize over an arbitrary pixel source, visited row by row so a
/// streaming source only needs two source rows at a time.
pub fn resize_bilinear_with(
    src_w: usize,
    src_h: usize,
    dst_w: usize,
    dst_h: usize,
    mut sample: impl FnMut(usize, usize) -> [f32; 3],
) -> Result<FloatImage> {
    if src_w == 0 || src_h == 0 || dst_w == 0 || dst_h == 0 {
        return Err(SlideError::EmptyImage { width: src_w.min(dst_w), height: src_h.min(dst_h) });
    }
    let xs = taps(src_w, dst_w);
    let ys = taps(src_h, dst_h);
    let mut data = Vec::with_capacity(dst_w * dst_h * 3);
    for &(y0, y1, ty) in &ys {
        for &(x0, x1, tx) in &xs {
            let (a, b, c, d) = (sample(x0, y0), sample(x1, y0), sample(x0, y1), sample(x1, y1));
            for ch in 0..3 {
                data.push(lerp(lerp(a[ch], b[ch], tx), lerp(c[ch], d[ch], tx), ty));
            }
        }
    }
    Ok(FloatImage { width: dst_w, height: dst_h, data })
}

/// Bilinear resize to exactly `height` rows × `width` columns.
pub fn resize_fixed(img: &FloatImage, height: usize, width: usize) -> Result<FloatImage> {
    if img.width == width && img.height == height {
        return Ok(img.clone());
    }
    resize_bilinear_with(img.width, img.height, width, height, |x, y| img.pixel(x, y))
}

/// Nearest-neighbour resize; output stays binary.
pub fn resize_mask_nearest(mask: &Mask, height: usize, width: usize) -> Mask {
    let pick = |src: usize, dst: usize, j: usize| (((j as f64 + 0.5) * src as f64 / dst as f64) as usize).min(src - 1);
    let mut out = Mask::zeros(width, height);
    for y in 0..height {
        let sy = pick(mask.height, height, y);
        for x in 0..width {
            out.data[y * width + x] = mask.data[sy * mask.width + pick(mask.width, width, x)];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_channel_rules() {
        let mut img = RgbImage::new(4, 1);
        img.put_pixel(0, 0, image::Rgb([255, 0, 0]));
        img.put_pixel(1, 0, image::Rgb([0, 255, 0]));
        img.put_pixel(2, 0, image::Rgb([0, 0, 0]));
        img.put_pixel(3, 0, image::Rgb([200, 200, 0]));
        let m = extract_masks(&DynamicImage::ImageRgb8(img)).unwrap();
        assert_eq!(m.tumor.data, vec![1, 0, 0, 0]);
        assert_eq!(m.artifact.data, vec![0, 1, 0, 0]);
    }

    #[test]
    fn grayscale_annotation_is_rejected() {
        let img = DynamicImage::ImageLuma8(image::GrayImage::new(2, 2));
        assert!(matches!(extract_masks(&img), Err(SlideError::NotRgb(_))));
    }

    #[test]
    fn normalize_examples() {
        let img = RgbImage::from_raw(1, 1, vec![0, 255, 51]).unwrap();
        assert_eq!(normalize(&img).data, vec![0.0, 1.0, 0.2]);
    }

    #[test]
    fn downscale_block_mean() {
        let img = FloatImage::new(2, 2, [0.0, 0.0, 1.0, 1.0].iter().flat_map(|&v| [v; 3]).collect()).unwrap();
        assert_eq!(downscale2x(&img).unwrap().data, vec![0.5; 3]);
        let odd = FloatImage::filled(5, 3, [0.25, 0.5, 0.75]);
        let d = downscale2x(&odd).unwrap();
        assert_eq!((d.width, d.height), (2, 1));
        assert!(downscale2x(&FloatImage::filled(0, 4, [0.0; 3])).is_err());
    }

    #[test]
    fn crop_sizes_follow_documented_scale() {
        let img = FloatImage::filled(2048, 1024, [0.3, 0.6, 0.9]);
        let d = downscale2x(&img).unwrap();
        assert_eq!((d.width, d.height), (1024, 512));
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = FloatImage::new(3, 2, (0..18).map(|v| v as f32 / 17.0).collect()).unwrap();
        assert_eq!(resize_fixed(&img, 2, 3).unwrap(), img);
        let c = FloatImage::filled(64, 32, [0.1, 0.2, 0.3]);
        let r = resize_fixed(&c, 16, 32).unwrap();
        assert!(r.data.chunks(3).all(|p| p == [0.1, 0.2, 0.3]));
        let r = resize_bilinear_with(4, 4, 4, 4, |x, y| [(x + 4 * y) as f32; 3]).unwrap();
        assert_eq!(r.pixel(3, 2), [11.0; 3]);
    }

    #[test]
    fn nearest_mask_resize_stays_binary() {
        let mut m = Mask::zeros(5, 3);
        m.set(2, 1, true);
        let r = resize_mask_nearest(&m, 7, 11);
        assert!(r.data.iter().all(|&v| v <= 1));
        assert!(r.count() > 0);
    }

    #[test]
    fn mask_downscale_majority() {
        let mut m = Mask::zeros(4, 2);
        m.set(0, 0, true);
        m.set(2, 0, true);
        m.set(3, 1, true);
        assert_eq!(downscale_mask2x(&m).unwrap().data, vec![0, 1]);
    }

    #[test]
    fn planar_round_trip() {
        let img = FloatImage::new(2, 2, (0..12).map(|v| v as f32).collect()).unwrap();
        let t = img.to_tensor();
        assert_eq!(FloatImage::from_planar(2, 2, t.data()).unwrap(), img);
    }
}

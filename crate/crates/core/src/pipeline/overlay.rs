use image::{RgbImage, Rgba, RgbaImage};

use super::{PipelineConfig, PipelineError, Result, SlideAnalysis};

const RED: [f64; 3] = [255.0, 0.0, 0.0];
const GREEN: [f64; 3] = [0.0, 255.0, 0.0];

/// Tints tumor pixels red and artifact pixels green over `base` (the slide
/// at analysis resolution). A pixel in both masks is tinted red.
pub fn render_overlay(
    analysis: &SlideAnalysis,
    base: &RgbImage,
    alpha: f64,
    cfg: &PipelineConfig,
) -> Result<RgbaImage> {
    let (w, h) = (analysis.width, analysis.height);
    if (base.width() as usize, base.height() as usize) != (w, h) {
        return Err(PipelineError::Dims(format!(
            "overlay base is {}x{}, analysis is {w}x{h}",
            base.width(),
            base.height()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(PipelineError::Config(format!("alpha {alpha} outside [0, 1]")));
    }
    let tumor_q = analysis.tumor_map.as_ref();
    let artifact = analysis.artifact_map.as_ref();
    let hit = |q: u8, t: f64| q as f64 / 255.0 >= t;
    let mut out = RgbaImage::new(w as u32, h as u32);
    for (x, y, px) in out.enumerate_pixels_mut() {
        let (xu, yu) = (x as usize, y as usize);
        let b = base.get_pixel(x, y).0;
        let tint = if tumor_q.is_some_and(|m| hit(m.data[yu * w + xu], cfg.tumor_threshold)) {
            Some(RED)
        } else if artifact.is_some_and(|m| hit(m.sample(xu, yu, w, h), cfg.artifact_threshold)) {
            Some(GREEN)
        } else {
            None
        };
        *px = match tint {
            None => Rgba([b[0], b[1], b[2], 255]),
            Some(t) => {
                let mix = |c: usize| ((1.0 - alpha) * b[c] as f64 + alpha * t[c]).round().clamp(0.0, 255.0) as u8;
                Rgba([mix(0), mix(1), mix(2), 255])
            }
        };
    }
    Ok(out)
}

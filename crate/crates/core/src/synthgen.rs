//! Procedural H&E-like slides with planted tumor and artifact ground truth.
//!
//! A [`Scene`] is a list of shapes plus noise parameters; pixels and masks are
//! pure functions of position, so any region renders independently. Tumor
//! and artifact masks never overlap (artifacts are painted over tumor), which
//! keeps the red/green annotation encoding lossless.

use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng;
use crate::slide_io::{self, render_annotation, ClassHint, Mask, MaskPair, SlideRecord, Split};

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("synthetic slides must be at least 256x256, got {width}x{height}")]
    TooSmall { width: usize, height: usize },
    #[error("invalid spec: {0}")]
    Spec(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Slide(#[from] slide_io::SlideError),
}

pub type Result<T, E = SynthError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub width: usize,
    pub height: usize,
    /// Target fraction of all pixels that are tumor; 0 plants none.
    pub tumor_fraction: f64,
    /// Number of tumor blobs sharing that area.
    pub tumor_blobs: usize,
    pub bubbles: usize,
    pub folds: usize,
    /// Separate tissue islands; 1 gives a crop-like field.
    pub tissue_islands: usize,
    /// Amplitude of the eosin texture noise.
    pub texture_noise: f32,
    pub seed: u64,
}

impl SynthSpec {
    /// Blank tissue field of the given size.
    pub fn plain(width: usize, height: usize, seed: u64) -> Self {
        SynthSpec {
            width,
            height,
            tumor_fraction: 0.0,
            tumor_blobs: 0,
            bubbles: 0,
            folds: 0,
            tissue_islands: 1,
            texture_noise: 0.06,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f32,
    cy: f32,
    rx: f32,
    ry: f32,
    cos: f32,
    sin: f32,
    /// Boundary perturbation noise seed and wavelength.
    wobble_seed: u64,
    wobble_scale: f32,
}

impl Ellipse {
    /// Normalized radial distance (1 on the nominal boundary) with scale `s`.
    #[inline]
    fn dist(&self, x: f32, y: f32, s: f32) -> f32 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (dx * self.cos + dy * self.sin) / (self.rx * s);
        let v = (-dx * self.sin + dy * self.cos) / (self.ry * s);
        (u * u + v * v).sqrt()
    }

    fn bbox(&self, s: f32, margin: f32) -> (f32, f32, f32, f32) {
        let r = self.rx.max(self.ry) * s * margin;
        (self.cx - r, self.cy - r, self.cx + r, self.cy + r)
    }

    #[inline]
    fn inside(&self, x: f32, y: f32, s: f32) -> bool {
        let d = self.dist(x, y, s);
        if d > 1.35 {
            return false;
        }
        let n = value_noise(self.wobble_seed, x / (self.wobble_scale * s), y / (self.wobble_scale * s));
        d + 0.5 * (n - 0.5) < 1.0
    }
}

#[derive(Debug, Clone, Copy)]
struct Bubble {
    cx: f32,
    cy: f32,
    r: f32,
}

#[derive(Debug, Clone, Copy)]
struct Fold {
    x0: f32,
    y0: f32,
    x1: f32,
    y1: f32,
    half_width: f32,
}

impl Fold {
    /// (distance to the axis segment, position along it in [0,1]).
    #[inline]
    fn axis(&self, x: f32, y: f32) -> (f32, f32) {
        let (dx, dy) = (self.x1 - self.x0, self.y1 - self.y0);
        let len2 = dx * dx + dy * dy;
        let t = (((x - self.x0) * dx + (y - self.y0) * dy) / len2).clamp(0.0, 1.0);
        let (px, py) = (self.x0 + t * dx - x, self.y0 + t * dy - y);
        ((px * px + py * py).sqrt(), t)
    }

    fn bbox(&self) -> (f32, f32, f32, f32) {
        let h = self.half_width + 2.0;
        (self.x0.min(self.x1) - h, self.y0.min(self.y1) - h, self.x0.max(self.x1) + h, self.y0.max(self.y1) + h)
    }
}

/// A fully placed synthetic slide.
#[derive(Debug, Clone)]
pub struct Scene {
    pub spec: SynthSpec,
    islands: Vec<Ellipse>,
    tumors: Vec<Ellipse>,
    tumor_scale: f32,
    bubbles: Vec<Bubble>,
    folds: Vec<Fold>,
    noise_seed: u64,
}

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[inline]
fn hash2(seed: u64, ix: i64, iy: i64) -> u64 {
    mix64(seed ^ mix64((ix as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (iy as u64).rotate_left(32)))
}

#[inline]
fn unit(h: u64) -> f32 {
    (h >> 40) as f32 / (1u64 << 24) as f32
}

/// Smooth lattice value noise in [0,1].
#[inline]
fn value_noise(seed: u64, x: f32, y: f32) -> f32 {
    let (fx, fy) = (x.floor(), y.floor());
    let (ix, iy) = (fx as i64, fy as i64);
    let (tx, ty) = (x - fx, y - fy);
    let (sx, sy) = (tx * tx * (3.0 - 2.0 * tx), ty * ty * (3.0 - 2.0 * ty));
    let v = |dx, dy| unit(hash2(seed, ix + dx, iy + dy));
    let a = v(0, 0) + (v(1, 0) - v(0, 0)) * sx;
    let b = v(0, 1) + (v(1, 1) - v(0, 1)) * sx;
    a + (b - a) * sy
}

fn fbm(seed: u64, x: f32, y: f32, base: f32) -> f32 {
    let mut amp = 0.5;
    let mut f = 1.0 / base;
    let mut sum = 0.0;
    let mut norm = 0.0;
    for o in 0..3 {
        sum += amp * value_noise(seed.wrapping_add(o), x * f, y * f);
        norm += amp;
        amp *= 0.5;
        f *= 2.0;
    }
    sum / norm
}

/// Darkness in [0,1] from round nuclei scattered on a jittered grid.
#[inline]
fn nuclei(seed: u64, x: f32, y: f32, cell: f32, density: f32, radius: f32) -> f32 {
    let (cx, cy) = ((x / cell).floor() as i64, (y / cell).floor() as i64);
    let mut best = 0.0f32;
    for dy in -1..=1 {
        for dx in -1..=1 {
            let h = hash2(seed, cx + dx, cy + dy);
            if unit(h) >= density {
                continue;
            }
            let h2 = mix64(h);
            let nx = ((cx + dx) as f32 + 0.15 + 0.7 * unit(h2)) * cell;
            let ny = ((cy + dy) as f32 + 0.15 + 0.7 * unit(mix64(h2))) * cell;
            let r = radius * (0.75 + 0.5 * unit(mix64(h2 ^ 0xabc)));
            let d = ((x - nx).powi(2) + (y - ny).powi(2)).sqrt();
            best = best.max((1.0 - (d - r + 0.5).max(0.0)).clamp(0.0, 1.0));
        }
    }
    best
}

const GLASS: [f32; 3] = [0.95, 0.95, 0.96];
const EOSIN: [f32; 3] = [0.91, 0.62, 0.76];
const NUCLEUS: [f32; 3] = [0.36, 0.20, 0.50];
const TUMOR: [f32; 3] = [0.50, 0.33, 0.62];
const BUBBLE: [f32; 3] = [0.86, 0.88, 0.95];
const BUBBLE_RIM: [f32; 3] = [0.42, 0.46, 0.58];
const FOLD: [f32; 3] = [0.66, 0.24, 0.50];

#[inline]
fn lerp3(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

/// What sits at a pixel, before texturing.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Cover {
    Glass,
    Tissue,
    Tumor,
    Bubble { rim: bool },
    Fold { along: f32, across: f32 },
}

impl Scene {
    pub fn new(spec: SynthSpec) -> Result<Scene> {
        if spec.width < 256 || spec.height < 256 {
            return Err(SynthError::TooSmall { width: spec.width, height: spec.height });
        }
        if !(0.0..0.6).contains(&spec.tumor_fraction) || spec.tissue_islands == 0 {
            return Err(SynthError::Spec(format!(
                "tumor_fraction {} must be in [0, 0.6) and at least one tissue island is needed",
                spec.tumor_fraction
            )));
        }
        let mut r = rng::stream(spec.seed, "synth/scene");
        let (w, h) = (spec.width as f32, spec.height as f32);
        let mut islands = Vec::new();
        if spec.tissue_islands == 1 {
            islands.push(Ellipse {
                cx: w * r.random_range(0.45..0.55),
                cy: h * r.random_range(0.45..0.55),
                rx: w * 0.62,
                ry: h * 0.62,
                cos: 1.0,
                sin: 0.0,
                wobble_seed: r.random(),
                wobble_scale: w.min(h) * 0.25,
            });
        } else {
            for _ in 0..spec.tissue_islands {
                let a: f32 = r.random_range(0.0..std::f32::consts::PI);
                let s = w.min(h);
                islands.push(Ellipse {
                    cx: w * r.random_range(0.2..0.8),
                    cy: h * r.random_range(0.2..0.8),
                    rx: s * r.random_range(0.18..0.3),
                    ry: s * r.random_range(0.12..0.22),
                    cos: a.cos(),
                    sin: a.sin(),
                    wobble_seed: r.random(),
                    wobble_scale: s * 0.12,
                });
            }
        }
        let mut scene = Scene {
            spec: spec.clone(),
            islands,
            tumors: Vec::new(),
            tumor_scale: 1.0,
            bubbles: Vec::new(),
            folds: Vec::new(),
            noise_seed: r.random(),
        };

        let s = w.min(h);
        for _ in 0..spec.bubbles {
            let r_b = s * r.random_range(0.05..0.12);
            scene.bubbles.push(Bubble { cx: r.random_range(r_b..w - r_b), cy: r.random_range(r_b..h - r_b), r: r_b });
        }
        for _ in 0..spec.folds {
            let (cx, cy) = scene.tissue_point(&mut r);
            let a: f32 = r.random_range(0.0..std::f32::consts::PI);
            let half_len = s * r.random_range(0.12..0.3);
            scene.folds.push(Fold {
                x0: cx - a.cos() * half_len,
                y0: cy - a.sin() * half_len,
                x1: cx + a.cos() * half_len,
                y1: cy + a.sin() * half_len,
                half_width: s * r.random_range(0.02..0.04),
            });
        }
        if spec.tumor_fraction > 0.0 && spec.tumor_blobs > 0 {
            let area = spec.tumor_fraction as f32 * w * h / spec.tumor_blobs as f32;
            for _ in 0..spec.tumor_blobs {
                let (cx, cy) = scene.tissue_point(&mut r);
                let aspect: f32 = r.random_range(0.6..1.0);
                let rx = (area / (std::f32::consts::PI * aspect)).sqrt();
                let a: f32 = r.random_range(0.0..std::f32::consts::PI);
                scene.tumors.push(Ellipse {
                    cx,
                    cy,
                    rx,
                    ry: rx * aspect,
                    cos: a.cos(),
                    sin: a.sin(),
                    wobble_seed: r.random(),
                    wobble_scale: rx * 0.5,
                });
            }
            scene.fit_tumor_scale();
        }
        Ok(scene)
    }

    fn tissue_point(&self, r: &mut rng::Rng) -> (f32, f32) {
        let (w, h) = (self.spec.width as f32, self.spec.height as f32);
        for _ in 0..200 {
            let (x, y) = (r.random_range(0.1 * w..0.9 * w), r.random_range(0.1 * h..0.9 * h));
            if self.in_tissue(x, y) {
                return (x, y);
            }
        }
        (w / 2.0, h / 2.0)
    }

    #[inline]
    fn in_tissue(&self, x: f32, y: f32) -> bool {
        self.islands.iter().any(|e| e.inside(x, y, 1.0))
    }

    #[inline]
    fn cover(&self, x: f32, y: f32) -> Cover {
        for b in &self.bubbles {
            let d = ((x - b.cx).powi(2) + (y - b.cy).powi(2)).sqrt();
            if d <= b.r {
                return Cover::Bubble { rim: d > b.r - (b.r * 0.12).max(2.5) };
            }
        }
        for f in &self.folds {
            let (d, t) = f.axis(x, y);
            if d <= f.half_width {
                return Cover::Fold { along: t, across: d / f.half_width };
            }
        }
        if !self.in_tissue(x, y) {
            return Cover::Glass;
        }
        if self.tumors.iter().any(|e| e.inside(x, y, self.tumor_scale)) {
            return Cover::Tumor;
        }
        Cover::Tissue
    }

    /// Chooses the blob scale so planted tumor area hits the target.
    fn fit_tumor_scale(&mut self) {
        let (w, h) = (self.spec.width, self.spec.height);
        let step = ((w * h) as f64 / 250_000.0).sqrt().max(1.0) as usize;
        let target = self.spec.tumor_fraction;
        let fraction = |scene: &Scene| {
            let (mut hit, mut n) = (0usize, 0usize);
            for y in (step / 2..h).step_by(step) {
                for x in (step / 2..w).step_by(step) {
                    n += 1;
                    hit += (scene.cover(x as f32 + 0.5, y as f32 + 0.5) == Cover::Tumor) as usize;
                }
            }
            hit as f64 / n as f64
        };
        let (mut lo, mut hi) = (0.0f32, 1.0f32);
        self.tumor_scale = hi;
        while fraction(self) < target && hi < 8.0 {
            lo = hi;
            hi *= 1.5;
            self.tumor_scale = hi;
        }
        for _ in 0..22 {
            self.tumor_scale = 0.5 * (lo + hi);
            if fraction(self) < target {
                lo = self.tumor_scale;
            } else {
                hi = self.tumor_scale;
            }
        }
        self.tumor_scale = 0.5 * (lo + hi);
    }

    #[inline]
    fn shade(&self, cover: Cover, x: f32, y: f32) -> [f32; 3] {
        let seed = self.noise_seed;
        let amp = self.spec.texture_noise;
        let grain = (value_noise(seed ^ 7, x / 2.0, y / 2.0) - 0.5) * 0.04;
        match cover {
            Cover::Glass => {
                let n = grain * 0.5;
                [GLASS[0] + n, GLASS[1] + n, GLASS[2] + n]
            }
            Cover::Tissue => {
                let t = (fbm(seed, x, y, 48.0) - 0.5) * 2.0 * amp;
                let base = [EOSIN[0] + t * 0.5, EOSIN[1] + t, EOSIN[2] + t * 0.7];
                let fibre = (fbm(seed ^ 11, x * 0.5, y * 2.0, 10.0) - 0.5) * amp;
                let base = [base[0] + fibre, base[1] + fibre, base[2] + fibre];
                let dark = nuclei(seed ^ 0x51, x, y, 22.0, 0.35, 2.6);
                let c = lerp3(base, NUCLEUS, dark * 0.85);
                [c[0] + grain, c[1] + grain, c[2] + grain]
            }
            Cover::Tumor => {
                let t = (fbm(seed ^ 3, x, y, 24.0) - 0.5) * 2.0 * amp;
                let base = [TUMOR[0] + t, TUMOR[1] + t, TUMOR[2] + t * 0.6];
                let dark = nuclei(seed ^ 0x77, x, y, 8.0, 0.9, 3.0);
                let c = lerp3(base, [0.22, 0.12, 0.38], dark * 0.8);
                [c[0] + grain, c[1] + grain, c[2] + grain]
            }
            Cover::Bubble { rim } => {
                if rim {
                    [BUBBLE_RIM[0] + grain, BUBBLE_RIM[1] + grain, BUBBLE_RIM[2] + grain]
                } else {
                    let n = (value_noise(seed ^ 19, x / 30.0, y / 30.0) - 0.5) * 0.03 + grain * 0.5;
                    [BUBBLE[0] + n, BUBBLE[1] + n, BUBBLE[2] + n]
                }
            }
            Cover::Fold { along, across } => {
                let stripe = ((along * 60.0).sin() * 0.5 + 0.5) * 0.08;
                let edge = across * across * 0.12;
                let t = (fbm(seed ^ 5, x, y, 20.0) - 0.5) * amp;
                [
                    FOLD[0] + edge - stripe + t + grain,
                    FOLD[1] + edge * 1.5 - stripe + t + grain,
                    FOLD[2] + edge - stripe * 0.5 + t + grain,
                ]
            }
        }
    }

    /// RGB bytes of a region, row-major and interleaved.
    pub fn render_region(&self, x0: usize, y0: usize, w: usize, h: usize) -> Vec<u8> {
        let sub = self.subset(x0, y0, w, h);
        let mut out = Vec::with_capacity(w * h * 3);
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
                let c = sub.shade(sub.cover(fx, fy), fx, fy);
                out.extend(c.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
            }
        }
        out
    }

    /// (tumor, artifact) mask bytes of a region, one byte per pixel.
    pub fn masks_region(&self, x0: usize, y0: usize, w: usize, h: usize) -> (Vec<u8>, Vec<u8>) {
        let sub = self.subset(x0, y0, w, h);
        let mut tumor = Vec::with_capacity(w * h);
        let mut artifact = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                let c = sub.cover(x as f32 + 0.5, y as f32 + 0.5);
                tumor.push((c == Cover::Tumor) as u8);
                artifact.push(matches!(c, Cover::Bubble { .. } | Cover::Fold { .. }) as u8);
            }
        }
        (tumor, artifact)
    }

    /// Copy keeping only shapes whose bounding box meets the region.
    fn subset(&self, x0: usize, y0: usize, w: usize, h: usize) -> Scene {
        let (rx0, ry0, rx1, ry1) = (x0 as f32, y0 as f32, (x0 + w) as f32, (y0 + h) as f32);
        let meets = |b: (f32, f32, f32, f32)| b.0 <= rx1 && b.2 >= rx0 && b.1 <= ry1 && b.3 >= ry0;
        Scene {
            spec: self.spec.clone(),
            islands: self.islands.iter().filter(|e| meets(e.bbox(1.0, 1.4))).copied().collect(),
            tumors: self.tumors.iter().filter(|e| meets(e.bbox(self.tumor_scale, 1.4))).copied().collect(),
            tumor_scale: self.tumor_scale,
            bubbles: self
                .bubbles
                .iter()
                .filter(|b| meets((b.cx - b.r, b.cy - b.r, b.cx + b.r, b.cy + b.r)))
                .copied()
                .collect(),
            folds: self.folds.iter().filter(|f| meets(f.bbox())).copied().collect(),
            noise_seed: self.noise_seed,
        }
    }

    pub fn has_tumor(&self) -> bool {
        !self.tumors.is_empty()
    }
}

/// Renders a whole slide and its ground truth in memory.
pub fn generate(spec: &SynthSpec) -> Result<(RgbImage, MaskPair)> {
    let scene = Scene::new(spec.clone())?;
    let (w, h) = (spec.width, spec.height);
    let img = RgbImage::from_raw(w as u32, h as u32, scene.render_region(0, 0, w, h)).expect("sized");
    let (t, a) = scene.masks_region(0, 0, w, h);
    Ok((
        img,
        MaskPair { tumor: Mask { width: w, height: h, data: t }, artifact: Mask { width: w, height: h, data: a } },
    ))
}

/// Streams a slide into the tiled container without holding it in memory.
pub fn write_tiled_slide(spec: &SynthSpec, path: &Path, tile_size: usize) -> Result<Scene> {
    let scene = Scene::new(spec.clone())?;
    slide_io::write_tiled(path, spec.width, spec.height, 3, tile_size, |x, y, w, h| scene.render_region(x, y, w, h))?;
    Ok(scene)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n: usize,
    /// (artifact, tumor) share of crops.
    pub mix: (f64, f64),
    pub seed: u64,
    /// Level-0 crop size.
    pub width: usize,
    pub height: usize,
}

impl DatasetSpec {
    /// Crops of 2048×1024 with the 88/12 artifact/tumor mix.
    pub fn new(n: usize, seed: u64) -> Self {
        DatasetSpec { n, mix: (0.88, 0.12), seed, width: 2048, height: 1024 }
    }

    /// (artifact, tumor) crop counts.
    pub fn counts(&self) -> (usize, usize) {
        let total = self.mix.0 + self.mix.1;
        let tumor = ((self.n as f64 * self.mix.1 / total) + 0.5).floor() as usize;
        (self.n - tumor.min(self.n), tumor.min(self.n))
    }
}

/// Per-crop spec: tumor crops carry only tumor, artifact crops only
/// artifacts, matching single-class annotations.
pub fn crop_spec(ds: &DatasetSpec, index: usize, class: ClassHint) -> SynthSpec {
    let seed = rng::derive_seed(ds.seed, &format!("synth/crop/{index}"));
    let mut r = rng::stream(seed, "synth/crop-params");
    let mut spec = SynthSpec::plain(ds.width, ds.height, seed);
    spec.texture_noise = r.random_range(0.04..0.08);
    match class {
        ClassHint::Tumor => {
            spec.tumor_fraction = r.random_range(0.06..0.2);
            spec.tumor_blobs = r.random_range(1..=4);
        }
        ClassHint::Artifact => {
            spec.bubbles = r.random_range(2..=5);
            spec.folds = r.random_range(1..=2);
        }
    }
    spec
}

/// Writes `images/`, `masks/` and `manifest.jsonl` under `out`.
pub fn generate_dataset(ds: &DatasetSpec, out: &Path) -> Result<Vec<SlideRecord>> {
    let images = out.join("images");
    let masks = out.join("masks");
    for d in [out, &images, &masks] {
        std::fs::create_dir_all(d).map_err(io_err(d))?;
    }
    let (n_art, n_tum) = ds.counts();
    let mut classes: Vec<ClassHint> =
        std::iter::repeat_n(ClassHint::Artifact, n_art).chain(std::iter::repeat_n(ClassHint::Tumor, n_tum)).collect();
    classes.shuffle(&mut rng::stream(ds.seed, "synth/order"));
    let mut records = Vec::with_capacity(ds.n);
    for (i, &class) in classes.iter().enumerate() {
        let id = format!("crop{i:04}");
        let spec = crop_spec(ds, i, class);
        let (img, pair) = generate(&spec)?;
        let image_ref = images.join(format!("{id}.png"));
        let mask_ref = masks.join(format!("{id}.png"));
        img.save(&image_ref)
            .map_err(|e| SynthError::Io { path: image_ref.clone(), source: std::io::Error::other(e) })?;
        render_annotation(&pair)?
            .save(&mask_ref)
            .map_err(|e| SynthError::Io { path: mask_ref.clone(), source: std::io::Error::other(e) })?;
        records.push(SlideRecord {
            id,
            patient_id: format!("P{:03}", i / 14),
            image_ref,
            mask_ref: Some(mask_ref),
            width: ds.width,
            height: ds.height,
            class_hint: class,
            split: Split::Unassigned,
        });
    }
    slide_io::write_manifest(&out.join("manifest.jsonl"), &records)?;
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_spec_has_empty_masks() {
        let (_, m) = generate(&SynthSpec::plain(256, 256, 1)).unwrap();
        assert_eq!(m.tumor.count() + m.artifact.count(), 0);
    }

    #[test]
    fn too_small_is_rejected() {
        assert!(matches!(generate(&SynthSpec::plain(255, 300, 1)), Err(SynthError::TooSmall { .. })));
    }

    #[test]
    fn regions_match_full_render() {
        let spec =
            SynthSpec { tumor_fraction: 0.1, tumor_blobs: 2, bubbles: 2, folds: 1, ..SynthSpec::plain(300, 280, 9) };
        let scene = Scene::new(spec).unwrap();
        let full = scene.render_region(0, 0, 300, 280);
        let part = scene.render_region(40, 100, 70, 33);
        for row in 0..33 {
            let a = &full[((100 + row) * 300 + 40) * 3..((100 + row) * 300 + 110) * 3];
            assert_eq!(a, &part[row * 210..(row + 1) * 210]);
        }
    }

    #[test]
    fn counts_follow_mix() {
        assert_eq!(DatasetSpec::new(100, 0).counts(), (88, 12));
        assert_eq!(DatasetSpec::new(0, 0).counts(), (0, 0));
    }
}

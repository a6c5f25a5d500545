//! Annotation encoding, downscaling and the tiled container under random
//! inputs and access traces.

use image::{DynamicImage, Rgb, RgbImage};
use mohs_core::slide_io::{
    downscale2x, extract_masks, render_annotation, write_tiled, FloatImage, Mask, MaskPair, TiledSlide,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Disjoint tumor/artifact masks: 0 = neither, 1 = tumor, 2 = artifact.
fn mask_pair(w: usize, h: usize, labels: &[u8]) -> MaskPair {
    let mut tumor = Mask::zeros(w, h);
    let mut artifact = Mask::zeros(w, h);
    for (i, &l) in labels.iter().enumerate() {
        tumor.data[i] = (l == 1) as u8;
        artifact.data[i] = (l == 2) as u8;
    }
    MaskPair { tumor, artifact }
}

fn pixel_bytes(x: usize, y: usize, c: usize) -> u8 {
    ((x * 31 + y * 17 + c * 101) % 251) as u8
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn annotation_round_trip_is_identity(
        (w, h, labels) in (1usize..40, 1usize..40).prop_flat_map(|(w, h)| {
            (Just(w), Just(h), proptest::collection::vec(0u8..3, w * h))
        }),
        base_seed in any::<u64>(),
    ) {
        let masks = mask_pair(w, h, &labels);
        let rendered = render_annotation(&masks).unwrap();
        prop_assert_eq!(&extract_masks(&DynamicImage::ImageRgb8(rendered)).unwrap(), &masks);

        // Painting saturated colours over an unsaturated base recovers the
        // same masks.
        let mut r = ChaCha8Rng::seed_from_u64(base_seed);
        let mut painted = RgbImage::from_fn(w as u32, h as u32, |_, _| Rgb([r.random_range(0..=127), r.random_range(0..=127), r.random_range(0..=127)]));
        for (i, p) in painted.pixels_mut().enumerate() {
            match labels[i] {
                1 => *p = Rgb([255, 0, 0]),
                2 => *p = Rgb([0, 255, 0]),
                _ => {}
            }
        }
        prop_assert_eq!(&extract_masks(&DynamicImage::ImageRgb8(painted)).unwrap(), &masks);
    }

    #[test]
    fn downscale_keeps_constants_and_means(
        (w, h) in (1usize..24, 1usize..24),
        c in 0.0f32..=1.0,
        seed in any::<u64>(),
    ) {
        let (w, h) = (2 * w, 2 * h);
        let flat = downscale2x(&FloatImage::filled(w, h, [c, 1.0 - c, c * 0.5])).unwrap();
        prop_assert!(flat.data.chunks(3).all(|p| p == [c, 1.0 - c, c * 0.5]));

        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let img = FloatImage::new(w, h, (0..w * h * 3).map(|_| r.random::<f32>()).collect()).unwrap();
        let small = downscale2x(&img).unwrap();
        let mean = |d: &[f32]| d.iter().map(|&v| v as f64).sum::<f64>() / d.len() as f64;
        prop_assert!((mean(&img.data) - mean(&small.data)).abs() <= 1e-6);
    }

    #[test]
    fn tiles_reassemble_exactly_within_budget(
        (w, h) in (1usize..90, 1usize..90),
        tile in 4usize..24,
        budget in 1usize..6,
        trace in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0), 1..30),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.mts");
        write_tiled(&path, w, h, 3, tile, |x0, y0, tw, th| {
            let mut v = Vec::with_capacity(tw * th * 3);
            for y in y0..y0 + th {
                for x in x0..x0 + tw {
                    v.extend((0..3).map(|c| pixel_bytes(x, y, c)));
                }
            }
            v
        })
        .unwrap();
        let slide = TiledSlide::open(&path, budget).unwrap();
        for (fx, fy, fw, fh) in trace {
            let x = (fx * w as f64) as usize;
            let y = (fy * h as f64) as usize;
            let rw = 1 + (fw * (w - x - 1) as f64) as usize;
            let rh = 1 + (fh * (h - y - 1) as f64) as usize;
            let got = slide.read_region(x, y, rw, rh).unwrap();
            let mut want = Vec::with_capacity(rw * rh * 3);
            for yy in y..y + rh {
                for xx in x..x + rw {
                    want.extend((0..3).map(|c| pixel_bytes(xx, yy, c)));
                }
            }
            prop_assert!(got == want, "region ({x},{y}) {rw}x{rh} differs");
            prop_assert!(slide.stats().resident <= budget);
        }
        prop_assert!(slide.stats().peak_resident <= budget);
    }
}

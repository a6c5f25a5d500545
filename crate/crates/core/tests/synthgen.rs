//! Tumor contrast, determinism and annotation round trips of generated slides.

use mohs_core::sampler::is_tissue;
use mohs_core::slide_io::{normalize, read_masks, render_annotation};
use mohs_core::synthgen::{generate, SynthSpec};
use proptest::prelude::*;

fn spec(seed: u64, tumor_fraction: f64, blobs: usize, bubbles: usize, folds: usize) -> SynthSpec {
    SynthSpec { tumor_fraction, tumor_blobs: blobs, bubbles, folds, ..SynthSpec::plain(256, 320, seed) }
}

fn luminance(p: [f32; 3]) -> f64 {
    (0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]) as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn tumor_is_darker_than_surrounding_tissue(seed in any::<u64>(), fraction in 0.06f64..0.2, blobs in 1usize..4) {
        let (img, masks) = generate(&spec(seed, fraction, blobs, 0, 0)).unwrap();
        prop_assert!(masks.tumor.count() > 0);
        let f = normalize(&img);
        let (mut inside, mut n_in, mut outside, mut n_out) = (0.0, 0usize, 0.0, 0usize);
        for y in 0..f.height {
            for x in 0..f.width {
                let p = f.pixel(x, y);
                if masks.tumor.get(x, y) {
                    inside += luminance(p);
                    n_in += 1;
                } else if is_tissue(p) {
                    outside += luminance(p);
                    n_out += 1;
                }
            }
        }
        prop_assert!(n_out > 0);
        prop_assert!(inside / (n_in as f64) < outside / (n_out as f64));
    }

    #[test]
    fn annotation_file_round_trips_masks(seed in any::<u64>(), bubbles in 0usize..3, folds in 0usize..2) {
        let (_, masks) = generate(&spec(seed, 0.1, 2, bubbles, folds)).unwrap();
        // Artifacts are painted over tumor, so the two labels never share a pixel.
        prop_assert!(masks.tumor.data.iter().zip(&masks.artifact.data).all(|(&t, &a)| t == 0 || a == 0));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.png");
        render_annotation(&masks).unwrap().save(&path).unwrap();
        prop_assert_eq!(read_masks(&path).unwrap(), masks);
    }

    #[test]
    fn same_seed_renders_identical_slides(seed in any::<u64>()) {
        let s = spec(seed, 0.1, 2, 1, 1);
        let (a, ma) = generate(&s).unwrap();
        let (b, mb) = generate(&s).unwrap();
        prop_assert_eq!(a.as_raw(), b.as_raw());
        prop_assert_eq!(ma, mb);
    }
}

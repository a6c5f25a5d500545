//! Output shapes over valid input sizes and checkpoint fidelity.

use mohs_core::tensor::{Mode, Tensor};
use mohs_core::zoo::{
    read_checkpoint, write_checkpoint, CheckpointMeta, ClassifierConfig, ModelKind, ModelSpec, UNetConfig,
};
use proptest::prelude::*;

fn input(seed: u64, dims: &[usize]) -> Tensor<f32> {
    Tensor::from_fn(dims, |i| ((i as u64).wrapping_mul(seed | 1) % 97) as f32 / 97.0).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn unet_maps_every_valid_size_to_a_same_size_probability_map(
        seed in any::<u64>(),
        (h, w) in (1usize..5, 1usize..5),
        stages in 1usize..5,
    ) {
        let mut cfg = UNetConfig::desk(16 * h, 16 * w, seed);
        cfg.stage_blocks = vec![1; stages];
        let g = ModelSpec::Unet { kind: ModelKind::TumorSeg, config: cfg }.build().unwrap();
        let y = g.infer(&input(seed, &[1, 3, 16 * h, 16 * w])).unwrap();
        prop_assert_eq!(y.dims(), &[1, 1, 16 * h, 16 * w]);
        prop_assert!(y.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn sizes_off_the_divisor_are_rejected(seed in any::<u64>(), h in 1usize..80) {
        prop_assume!(h % 16 != 0);
        let cfg = UNetConfig::desk(h, 32, seed);
        let spec = ModelSpec::Unet { kind: ModelKind::ArtifactSeg, config: cfg };
        prop_assert!(spec.build().is_err());
    }

    #[test]
    fn checkpoint_round_trip_preserves_eval_forward(seed in any::<u64>(), classifier in any::<bool>()) {
        let spec = if classifier {
            ModelSpec::Classifier { config: ClassifierConfig { height: 32, width: 32, ..ClassifierConfig::desk(seed) } }
        } else {
            ModelSpec::Unet { kind: ModelKind::TumorSeg, config: UNetConfig::desk(32, 32, seed) }
        };
        let mut g = spec.build().unwrap();
        let x = input(seed, &[2, 3, 32, 32]);
        // One training pass moves BN running statistics off their defaults.
        g.forward(&x, Mode::Train).unwrap();
        let bytes = write_checkpoint(&g, &CheckpointMeta::new(spec)).unwrap();
        let (restored, _) = read_checkpoint(&bytes).unwrap();
        let (a, b) = (g.infer(&x).unwrap(), restored.infer(&x).unwrap());
        prop_assert_eq!(a.data(), b.data());
    }
}

//! Forward-pass examples and shape/range properties of the layer set.

use mohs_core::tensor::{BatchNorm2d, Conv2d, Dense, Layer, Mode, ModelGraph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(seed: u64, dims: &[usize], scale: f32) -> Tensor<f32> {
    let mut r = rng(seed);
    Tensor::from_fn(dims, |_| scale * r.sample::<f32, _>(StandardNormal)).unwrap()
}

fn graph(dims: &[usize], layers: Vec<Layer<f32>>) -> ModelGraph<f32> {
    ModelGraph::new("t", dims[1..].to_vec(), layers).unwrap()
}

#[test]
fn ones_kernel_counts_in_bounds_neighbours() {
    let mut g = graph(&[1, 1, 4, 5], vec![Layer::Conv2d(Conv2d::new("c", 1, 1, 3, 1, true, &mut rng(0)).unwrap())]);
    g.visit_params_mut(&mut |p| {
        let fill = if p.name.ends_with("weight") { 1.0 } else { 0.0 };
        p.value.data_mut().fill(fill);
    });
    let y = g.infer(&Tensor::full(&[1, 1, 4, 5], 1.0).unwrap()).unwrap();
    assert_eq!(y.dims(), &[1, 1, 4, 5]);
    #[rustfmt::skip]
    let expected = [
        4.0, 6.0, 6.0, 6.0, 4.0,
        6.0, 9.0, 9.0, 9.0, 6.0,
        6.0, 9.0, 9.0, 9.0, 6.0,
        4.0, 6.0, 6.0, 6.0, 4.0,
    ];
    assert_eq!(y.data(), &expected);
}

#[test]
fn maxpool_and_global_pool_examples() {
    let x = Tensor::new(&[1, 1, 2, 4], vec![1.0, 5.0, -2.0, 0.0, 3.0, 2.0, -1.0, -3.0]).unwrap();
    let pooled = graph(&[1, 1, 2, 4], vec![Layer::MaxPool2x2]).infer(&x).unwrap();
    assert_eq!(pooled.dims(), &[1, 1, 1, 2]);
    assert_eq!(pooled.data(), &[5.0, 0.0]);
    let mean = graph(&[1, 1, 2, 4], vec![Layer::GlobalAvgPool]).infer(&x).unwrap();
    assert_eq!(mean.dims(), &[1, 1]);
    assert_eq!(mean.data(), &[0.625]);
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let x = Tensor::full(&[2, 4], 3.0f32).unwrap();
    let y = graph(&[2, 4], vec![Layer::Softmax]).infer(&x).unwrap();
    assert!(y.data().iter().all(|&p| p == 0.25));
}

fn mixed_layers(seed: u64) -> Vec<Layer<f32>> {
    let r = &mut rng(seed);
    vec![
        Layer::Conv2d(Conv2d::new("c1", 3, 4, 3, 1, true, r).unwrap()),
        Layer::BatchNorm2d(BatchNorm2d::new("bn", 4)),
        Layer::Relu,
        Layer::MaxPool2x2,
        Layer::Conv2d(Conv2d::new("c2", 4, 6, 3, 2, false, r).unwrap()),
        Layer::GlobalAvgPool,
        Layer::Dense(Dense::new("fc", 6, 3, r)),
        Layer::Softmax,
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn forward_is_bit_identical_across_runs(seed in any::<u64>(), n in 1usize..4) {
        let dims = [n, 3, 12, 12];
        let x = random(seed, &dims, 1.0);
        let mut a = graph(&dims, mixed_layers(seed));
        let mut b = graph(&dims, mixed_layers(seed));
        let (ea, eb) = (a.infer(&x).unwrap(), b.infer(&x).unwrap());
        prop_assert_eq!(ea.data(), eb.data());
        let ya = a.forward(&x, Mode::Train).unwrap();
        let yb = b.forward(&x, Mode::Train).unwrap();
        prop_assert_eq!(ya.data(), yb.data());
    }

    #[test]
    fn same_padding_conv_preserves_extent(
        seed in any::<u64>(),
        k in prop::sample::select(vec![1usize, 3, 5]),
        h in 1usize..20,
        w in 1usize..20,
    ) {
        let dims = [1, 2, h, w];
        let mut g = graph(&dims, vec![Layer::Conv2d(Conv2d::new("c", 2, 3, k, 1, true, &mut rng(seed)).unwrap())]);
        let y = g.forward(&random(seed, &dims, 1.0), Mode::Train).unwrap();
        prop_assert_eq!(y.dims(), &[1, 3, h, w]);
        // Kernels wider than the input must still route gradients cleanly.
        let gx = g.backward(&Tensor::full(y.dims(), 1.0).unwrap()).unwrap();
        prop_assert_eq!(gx.dims(), &dims);
    }

    #[test]
    fn maxpool_halves_even_extents(seed in any::<u64>(), h in 1usize..16, w in 1usize..16) {
        let dims = [2, 3, 2 * h, 2 * w];
        let x = random(seed, &dims, 1.0);
        let y = graph(&dims, vec![Layer::MaxPool2x2]).infer(&x).unwrap();
        prop_assert_eq!(y.dims(), &[2, 3, h, w]);
    }

    #[test]
    fn sigmoid_outputs_are_probabilities(seed in any::<u64>(), scale in 0.1f32..60.0) {
        let dims = [2, 2, 5, 5];
        let y = graph(&dims, vec![Layer::Sigmoid]).infer(&random(seed, &dims, scale)).unwrap();
        prop_assert!(y.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn softmax_rows_sum_to_one(seed in any::<u64>(), rows in 1usize..8, k in 2usize..12, scale in 0.1f32..60.0) {
        let y = graph(&[rows, k], vec![Layer::Softmax]).infer(&random(seed, &[rows, k], scale)).unwrap();
        for row in y.data().chunks(k) {
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            let sum: f64 = row.iter().map(|&p| p as f64).sum();
            prop_assert!((sum - 1.0).abs() <= 1e-6, "row sums to {sum}");
        }
    }
}

//! Analytic gradients against central finite differences, 64-bit mode.

use mohs_core::tensor::gradcheck::{grad_check, Differentiable, GradCheckConfig, GradCheckReport, Reduction};
use mohs_core::tensor::{BatchNorm2d, Conv2d, Dense, Layer, Mode, ModelGraph, Param, ResidualBlock, Tensor, Upsample};
use mohs_core::zoo::{build_classifier, build_unet, ClassifierConfig, UNetConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn random_input(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(dims, |_| rng.sample(StandardNormal)).unwrap()
}

fn check(layers: Vec<Layer<f64>>, dims: &[usize], seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let x = random_input(&mut rng, dims);
    let mut g = ModelGraph::new("probe", dims[1..].to_vec(), layers).unwrap();
    let cfg = GradCheckConfig { seed, reduction: Reduction::RandomWeights(seed + 1), ..GradCheckConfig::default() };
    let report = grad_check(&mut g, &x, &cfg).unwrap();
    assert!(
        report.passed,
        "seed {seed}: max rel error {:.3e} at {:?} ({} checked, {} kinks)",
        report.max_rel_error, report.worst_param, report.checked, report.skipped_kinks
    );
    report
}

fn conv(rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize, k: usize, stride: usize, bias: bool) -> Layer<f64> {
    Layer::Conv2d(Conv2d::new(name, cin, cout, k, stride, bias, rng).unwrap())
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 20, ..ProptestConfig::default() })]

    #[test]
    fn conv2d(seed in any::<u64>(), k in prop::sample::select(vec![1usize, 3, 5]), stride in 1usize..=2) {
        let mut r = rng(seed);
        let layers = vec![conv(&mut r, "c", 2, 3, k, stride, true)];
        check(layers, &[1, 2, 6, 6], seed);
    }

    #[test]
    fn transposed_upsample(seed in any::<u64>()) {
        let mut r = rng(seed);
        let layers = vec![Layer::Upsample(Upsample::new("up", 2, 3, &mut r).unwrap())];
        check(layers, &[2, 2, 3, 3], seed);
    }

    #[test]
    fn maxpool2x2(seed in any::<u64>()) {
        let mut r = rng(seed);
        let layers = vec![conv(&mut r, "c", 2, 2, 3, 1, true), Layer::MaxPool2x2];
        check(layers, &[1, 2, 6, 6], seed);
    }

    #[test]
    fn batchnorm2d(seed in any::<u64>()) {
        let mut r = rng(seed);
        let layers = vec![
            conv(&mut r, "c", 2, 3, 3, 1, false),
            Layer::BatchNorm2d(BatchNorm2d::new("bn", 3)),
        ];
        check(layers, &[2, 2, 4, 4], seed);
    }

    #[test]
    fn relu(seed in any::<u64>()) {
        let mut r = rng(seed);
        let layers = vec![conv(&mut r, "c", 2, 2, 3, 1, true), Layer::Relu];
        check(layers, &[1, 2, 5, 5], seed);
    }

    #[test]
    fn sigmoid(seed in any::<u64>()) {
        let mut r = rng(seed);
        let layers = vec![conv(&mut r, "c", 2, 2, 3, 1, true), Layer::Sigmoid];
        check(layers, &[1, 2, 5, 5], seed);
    }

    #[test]
    fn dense_and_softmax(seed in any::<u64>()) {
        let mut r = rng(seed);
        let layers = vec![Layer::Dense(Dense::new("fc", 6, 4, &mut r)), Layer::Softmax];
        check(layers, &[3, 6], seed);
    }

    #[test]
    fn global_avg_pool(seed in any::<u64>()) {
        let mut r = rng(seed);
        let layers = vec![
            conv(&mut r, "c", 2, 3, 3, 1, true),
            Layer::GlobalAvgPool,
            Layer::Dense(Dense::new("fc", 3, 2, &mut r)),
        ];
        check(layers, &[2, 2, 4, 4], seed);
    }

    #[test]
    fn residual_basic(seed in any::<u64>(), stride in 1usize..=2, cout in 2usize..=3) {
        let mut r = rng(seed);
        let block = ResidualBlock::basic("res", 2, cout, stride, &mut r).unwrap();
        check(vec![Layer::Residual(Box::new(block))], &[2, 2, 4, 4], seed);
    }

    #[test]
    fn residual_bottleneck(seed in any::<u64>()) {
        let mut r = rng(seed);
        let block = ResidualBlock::bottleneck("res", 4, 2, 4, 2, &mut r).unwrap();
        check(vec![Layer::Residual(Box::new(block))], &[2, 4, 4, 4], seed);
    }

    #[test]
    fn concat_skip(seed in any::<u64>()) {
        let mut r = rng(seed);
        let layers = vec![
            conv(&mut r, "a", 2, 2, 3, 1, true),
            Layer::Relu,
            conv(&mut r, "b", 2, 3, 3, 1, true),
            Layer::ConcatSkip { from: 0 },
            conv(&mut r, "c", 5, 2, 1, 1, true),
        ];
        check(layers, &[1, 2, 4, 4], seed);
    }
}

#[test]
fn dense_only_graph_is_very_accurate() {
    let mut r = rng(3);
    let layers = vec![Layer::Dense(Dense::new("fc1", 5, 7, &mut r)), Layer::Dense(Dense::new("fc2", 7, 3, &mut r))];
    let x = random_input(&mut r, &[4, 5]);
    let mut g = ModelGraph::new("dense", vec![5], layers).unwrap();
    let cfg = GradCheckConfig { tolerance: 1e-7, ..GradCheckConfig::default() };
    let report = grad_check(&mut g, &x, &cfg).unwrap();
    assert!(report.passed, "{report:?}");
    assert!(report.max_rel_error < 1e-7);
}

fn check_graph(mut g: ModelGraph<f64>, dims: &[usize], seed: u64) -> GradCheckReport {
    let x = random_input(&mut rng(seed ^ 0xfeed), dims);
    let cfg = GradCheckConfig { seed, reduction: Reduction::RandomWeights(seed + 1), ..GradCheckConfig::default() };
    grad_check(&mut g, &x, &cfg).unwrap()
}

#[test]
fn full_desk_unet_over_twenty_seeds() {
    for seed in 0..20 {
        let g = build_unet(&UNetConfig::desk(32, 32, seed)).unwrap().cast::<f64>();
        let r = check_graph(g, &[1, 3, 32, 32], seed);
        assert!(r.passed, "seed {seed}: {r:?}");
    }
}

#[test]
fn full_desk_classifier_over_twenty_seeds() {
    for seed in 0..20 {
        let cfg = ClassifierConfig { height: 32, width: 32, ..ClassifierConfig::desk(seed) };
        let g = build_classifier(&cfg).unwrap().cast::<f64>();
        let r = check_graph(g, &[2, 3, 32, 32], seed);
        assert!(r.passed, "seed {seed}: {r:?}");
    }
}

/// Scales every parameter gradient after an otherwise correct backward.
struct Corrupted(ModelGraph<f64>);

impl Differentiable for Corrupted {
    fn forward_train(&mut self, x: &Tensor<f64>) -> mohs_core::tensor::Result<Tensor<f64>> {
        self.0.forward(x, Mode::Train)
    }
    fn backward(&mut self, gy: &Tensor<f64>) -> mohs_core::tensor::Result<Tensor<f64>> {
        let gx = self.0.backward(gy)?;
        self.0.visit_params_mut(&mut |p| {
            let g: Vec<f64> = p.value.grad().unwrap().iter().map(|v| v * 1.1).collect();
            p.value.set_grad(g).unwrap();
        });
        Ok(gx)
    }
    fn kink_pattern(&self) -> Option<u64> {
        self.0.kink_pattern()
    }
    fn for_each_param(&mut self, f: &mut dyn FnMut(&mut Param<f64>)) {
        self.0.visit_params_mut(f);
    }
}

#[test]
fn corrupted_backward_is_caught() {
    let mut r = rng(7);
    let layers = vec![conv(&mut r, "c", 2, 3, 3, 1, true), Layer::Sigmoid];
    let mut model = Corrupted(ModelGraph::new("bad", vec![2, 5, 5], layers).unwrap());
    let x = random_input(&mut r, &[1, 2, 5, 5]);
    let report = grad_check(&mut model, &x, &GradCheckConfig::default()).unwrap();
    assert!(!report.passed);
    assert!(report.max_rel_error > 1e-2, "{report:?}");
}

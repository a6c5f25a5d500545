//! Analytic-vs-numeric gradient verification.
//!
//! Central differences are compared against the backward pass for a sampled
//! subset of parameter scalars. A sample is discarded (and counted) when the
//! ±h perturbation moves any ReLU or max-pool into a different linear region,
//! since the function is not differentiable across that step.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use super::graph::Param;
use super::{Mode, ModelGraph, Result, Tensor};

/// Minimal interface a model needs for gradient checking.
pub trait Differentiable {
    fn forward_train(&mut self, x: &Tensor<f64>) -> Result<Tensor<f64>>;
    fn backward(&mut self, gy: &Tensor<f64>) -> Result<Tensor<f64>>;
    fn kink_pattern(&self) -> Option<u64>;
    fn for_each_param(&mut self, f: &mut dyn FnMut(&mut Param<f64>));
}

impl Differentiable for ModelGraph<f64> {
    fn forward_train(&mut self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        self.forward(x, Mode::Train)
    }
    fn backward(&mut self, gy: &Tensor<f64>) -> Result<Tensor<f64>> {
        ModelGraph::backward(self, gy)
    }
    fn kink_pattern(&self) -> Option<u64> {
        ModelGraph::kink_pattern(self)
    }
    fn for_each_param(&mut self, f: &mut dyn FnMut(&mut Param<f64>)) {
        self.visit_params_mut(f);
    }
}

/// Scalar reduction of the model output used as the loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Reduction {
    Sum,
    HalfSumSquares,
    /// Σ wᵢ yᵢ with standard-normal weights drawn from the seed.
    RandomWeights(u64),
}

impl Reduction {
    /// Loss value and its gradient with respect to `y`.
    pub fn eval(&self, y: &Tensor<f64>) -> (f64, Tensor<f64>) {
        let (value, grad): (f64, Vec<f64>) = match *self {
            Reduction::Sum => (y.data().iter().sum(), vec![1.0; y.len()]),
            Reduction::HalfSumSquares => (0.5 * y.data().iter().map(|v| v * v).sum::<f64>(), y.data().to_vec()),
            Reduction::RandomWeights(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let w: Vec<f64> = (0..y.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
                (y.data().iter().zip(&w).map(|(a, b)| a * b).sum(), w)
            }
        };
        (value, Tensor::from_parts(y.dims().to_vec(), grad))
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub h: f64,
    pub tolerance: f64,
    /// Parameter scalars to compare; the same number of input scalars is
    /// added when `include_input` is set.
    pub samples: usize,
    /// Denominator floor of the relative error. Central differences at
    /// h = 1e-5 carry rounding noise near ε·|loss|/h (about 1e-9 for the
    /// desk networks), so gradients below the floor are held to an
    /// absolute error of `tolerance · abs_floor` instead.
    pub abs_floor: f64,
    pub seed: u64,
    pub reduction: Reduction,
    /// Also sample scalars of the input tensor (dLoss/dInput).
    pub include_input: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            h: 1e-5,
            tolerance: 1e-5,
            samples: 32,
            abs_floor: 1e-3,
            seed: 0,
            reduction: Reduction::RandomWeights(17),
            include_input: true,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
    pub worst_param: Option<String>,
    /// (analytic, numeric) at the worst scalar.
    pub worst_values: Option<(f64, f64)>,
    pub passed: bool,
}

/// Parameter index used for scalars of the input tensor.
const INPUT: usize = usize::MAX;

fn with_scalar<M: Differentiable + ?Sized>(
    model: &mut M,
    x: &mut Tensor<f64>,
    target: (usize, usize),
    f: &mut dyn FnMut(&mut f64),
) {
    if target.0 == INPUT {
        f(&mut x.data_mut()[target.1]);
        return;
    }
    let mut pi = 0;
    model.for_each_param(&mut |p| {
        if pi == target.0 {
            f(&mut p.value.data_mut()[target.1]);
        }
        pi += 1;
    });
}

fn loss_at<M: Differentiable + ?Sized>(model: &mut M, x: &Tensor<f64>, red: Reduction) -> Result<(f64, Option<u64>)> {
    let y = model.forward_train(x)?;
    let pattern = model.kink_pattern();
    Ok((red.eval(&y).0, pattern))
}

/// Compares analytic gradients with central differences.
pub fn grad_check<M: Differentiable + ?Sized>(
    model: &mut M,
    input: &Tensor<f64>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let mut x = input.clone();
    x.clear_grad();
    model.for_each_param(&mut |p| p.value.clear_grad());
    let y = model.forward_train(&x)?;
    let base_pattern = model.kink_pattern();
    let (_, gy) = cfg.reduction.eval(&y);
    let gx = model.backward(&gy)?;

    let mut analytic: Vec<Vec<f64>> = Vec::new();
    let mut names: Vec<String> = Vec::new();
    model.for_each_param(&mut |p| {
        analytic.push(p.value.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.value.len()]));
        names.push(p.name.clone());
    });

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut param_pool: Vec<(usize, usize)> =
        analytic.iter().enumerate().flat_map(|(pi, g)| (0..g.len()).map(move |ei| (pi, ei))).collect();
    param_pool.shuffle(&mut rng);
    let mut input_pool: Vec<(usize, usize)> =
        if cfg.include_input { (0..x.len()).map(|ei| (INPUT, ei)).collect() } else { Vec::new() };
    input_pool.shuffle(&mut rng);
    let input_grad = gx.into_data();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped_kinks: 0,
        worst_param: None,
        worst_values: None,
        passed: false,
    };
    let mut required = 0;
    // Up to `samples` parameter scalars, then up to `samples` input scalars.
    for pool in [&param_pool, &input_pool] {
        required += cfg.samples.min(pool.len());
        let mut done = 0;
        for &(pi, ei) in pool.iter() {
            if done >= cfg.samples {
                break;
            }
            let mut orig = 0.0;
            with_scalar(model, &mut x, (pi, ei), &mut |v| orig = *v);
            with_scalar(model, &mut x, (pi, ei), &mut |v| *v = orig + cfg.h);
            let (plus, pat_plus) = loss_at(model, &x, cfg.reduction)?;
            with_scalar(model, &mut x, (pi, ei), &mut |v| *v = orig - cfg.h);
            let (minus, pat_minus) = loss_at(model, &x, cfg.reduction)?;
            with_scalar(model, &mut x, (pi, ei), &mut |v| *v = orig);
            if pat_plus != base_pattern || pat_minus != base_pattern {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * cfg.h);
            let a = if pi == INPUT { input_grad[ei] } else { analytic[pi][ei] };
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.abs_floor);
            if rel >= report.max_rel_error {
                report.max_rel_error = rel;
                let name = if pi == INPUT { "input" } else { &names[pi] };
                report.worst_param = Some(format!("{name}[{ei}]"));
                report.worst_values = Some((a, numeric));
            }
            done += 1;
            report.checked += 1;
        }
    }
    model.for_each_param(&mut |p| p.value.clear_grad());
    report.passed = report.checked >= required && report.max_rel_error < cfg.tolerance;
    Ok(report)
}

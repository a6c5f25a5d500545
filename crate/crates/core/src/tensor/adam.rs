use super::graph::Param;
use super::{Element, ModelGraph, Result, TensorError};

/// Adam with bias correction. Moments are allocated on the first step and
/// matched to parameters by name and visiting order afterwards.
#[derive(Debug, Clone)]
pub struct AdamState<T: Element> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    moments: Vec<Moment<T>>,
}

#[derive(Debug, Clone)]
struct Moment<T> {
    name: String,
    first: Vec<T>,
    second: Vec<T>,
}

impl<T: Element> AdamState<T> {
    pub fn new(lr: f64) -> Self {
        AdamState { lr, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, step: 0, moments: Vec::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// Anything that exposes trainable parameters.
pub trait ParamSet<T: Element> {
    fn for_each_param(&mut self, f: &mut dyn FnMut(&mut Param<T>));
}

impl<T: Element> ParamSet<T> for ModelGraph<T> {
    fn for_each_param(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.visit_params_mut(f);
    }
}

impl<T: Element> ParamSet<T> for [Param<T>] {
    fn for_each_param(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.iter_mut().for_each(f);
    }
}

impl<T: Element> ParamSet<T> for Vec<Param<T>> {
    fn for_each_param(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.iter_mut().for_each(f);
    }
}

/// One bias-corrected Adam update. Gradients are read, not cleared.
pub fn adam_step<T: Element, P: ParamSet<T> + ?Sized>(params: &mut P, state: &mut AdamState<T>) -> Result<()> {
    // Validate everything before touching any parameter.
    let mut problem: Option<TensorError> = None;
    let mut idx = 0;
    let fresh = state.moments.is_empty();
    params.for_each_param(&mut |p| {
        if problem.is_some() {
            return;
        }
        if p.value.grad().is_none() {
            problem = Some(TensorError::MissingGrad(p.name.clone()));
        } else if !fresh {
            match state.moments.get(idx) {
                Some(m) if m.name == p.name && m.first.len() == p.value.len() => {}
                _ => problem = Some(TensorError::StateMismatch(p.name.clone())),
            }
        }
        idx += 1;
    });
    if let Some(e) = problem {
        return Err(e);
    }
    if !fresh && idx != state.moments.len() {
        return Err(TensorError::StateMismatch(format!("{} moments for {idx} parameters", state.moments.len())));
    }
    if fresh {
        params.for_each_param(&mut |p| {
            state.moments.push(Moment {
                name: p.name.clone(),
                first: vec![T::zero(); p.value.len()],
                second: vec![T::zero(); p.value.len()],
            })
        });
    }

    state.step += 1;
    let t = state.step as i32;
    let b1 = T::from_f64_lossy(state.beta1);
    let b2 = T::from_f64_lossy(state.beta2);
    let c1 = T::from_f64_lossy(1.0 - state.beta1.powi(t));
    let c2 = T::from_f64_lossy(1.0 - state.beta2.powi(t));
    let lr = T::from_f64_lossy(state.lr);
    let eps = T::from_f64_lossy(state.epsilon);
    let one = T::one();
    let mut i = 0;
    let moments = &mut state.moments;
    params.for_each_param(&mut |p| {
        let m = &mut moments[i];
        i += 1;
        let grad = p.value.grad().expect("checked above").to_vec();
        for (((w, g), m1), m2) in
            p.value.data_mut().iter_mut().zip(grad).zip(m.first.iter_mut()).zip(m.second.iter_mut())
        {
            *m1 = b1 * *m1 + (one - b1) * g;
            *m2 = b2 * *m2 + (one - b2) * g * g;
            let mhat = *m1 / c1;
            let vhat = *m2 / c2;
            *w = *w - lr * mhat / (vhat.sqrt() + eps);
        }
    });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar(name: &str, w: f64, g: Option<f64>) -> Param<f64> {
        let mut t = Tensor::new(&[1], vec![w]).unwrap();
        if let Some(g) = g {
            t.set_grad(vec![g]).unwrap();
        }
        Param::new(name, t)
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut ps = vec![scalar("a", 0.3, Some(0.0)), scalar("b", -2.0, Some(0.0))];
        let mut st = AdamState::new(0.1);
        for _ in 0..5 {
            adam_step(&mut ps, &mut st).unwrap();
        }
        assert_eq!(ps[0].value.data(), &[0.3]);
        assert_eq!(ps[1].value.data(), &[-2.0]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // t=1: m̂ = g, v̂ = g², update = lr·g/(|g|+ε).
        let mut ps = vec![scalar("w", 0.0, Some(1.0))];
        let mut st = AdamState::new(0.1);
        adam_step(&mut ps, &mut st).unwrap();
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((ps[0].value.data()[0] - expected).abs() < 1e-15);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn identical_params_get_identical_updates() {
        let mut ps = vec![scalar("a", 0.5, Some(0.7)), scalar("b", 0.5, Some(0.7))];
        let mut st = AdamState::new(0.01);
        for _ in 0..3 {
            adam_step(&mut ps, &mut st).unwrap();
        }
        assert_eq!(ps[0].value.data(), ps[1].value.data());
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let mut ps = vec![scalar("a", 1.25, Some(3.0))];
        let mut st = AdamState::new(0.0);
        adam_step(&mut ps, &mut st).unwrap();
        assert_eq!(ps[0].value.data(), &[1.25]);
    }

    #[test]
    fn missing_gradient_names_parameter() {
        let mut ps = vec![scalar("a", 1.0, Some(1.0)), scalar("lonely", 1.0, None)];
        let mut st = AdamState::new(0.1);
        assert_eq!(adam_step(&mut ps, &mut st), Err(TensorError::MissingGrad("lonely".into())));
        // Nothing was applied.
        assert_eq!(ps[0].value.data(), &[1.0]);
        assert_eq!(st.step_count(), 0);
    }

    #[test]
    fn moment_shape_mismatch_is_rejected() {
        let mut ps = vec![scalar("a", 1.0, Some(1.0))];
        let mut st = AdamState::new(0.1);
        adam_step(&mut ps, &mut st).unwrap();
        let mut other = vec![scalar("b", 1.0, Some(1.0))];
        assert!(matches!(adam_step(&mut other, &mut st), Err(TensorError::StateMismatch(_))));
    }

    #[test]
    fn step_decreases_quadratic_loss() {
        // f(w) = (w - 3)², small lr.
        let mut ps = vec![scalar("w", 0.0, None)];
        let mut st = AdamState::new(1e-3);
        let mut prev = 9.0;
        for _ in 0..10 {
            let w = ps[0].value.data()[0];
            ps[0].value.set_grad(vec![2.0 * (w - 3.0)]).unwrap();
            adam_step(&mut ps, &mut st).unwrap();
            let w = ps[0].value.data()[0];
            let loss = (w - 3.0) * (w - 3.0);
            assert!(loss < prev);
            prev = loss;
        }
    }
}

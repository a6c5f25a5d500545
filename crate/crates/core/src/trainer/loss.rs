use crate::tensor::{Tensor, TensorError};

/// Probabilities are clamped to `[P_CLAMP, 1 - P_CLAMP]` inside the log.
pub const P_CLAMP: f64 = 1e-7;
/// Floor for the target-class probability in cross-entropy.
pub const CE_FLOOR: f64 = 1e-12;

fn same_dims(pred: &Tensor, target: &Tensor) -> Result<(), TensorError> {
    if pred.dims() != target.dims() {
        return Err(TensorError::GradShape { expected: pred.dims().to_vec(), got: target.dims().to_vec() });
    }
    Ok(())
}

/// Smoothed Dice coefficient `(2Σpg+1)/(Σp+Σg+1)` over the whole tensor.
pub fn soft_dice(pred: &Tensor, target: &Tensor) -> Result<f64, TensorError> {
    same_dims(pred, target)?;
    let (mut i, mut sp, mut sg) = (0.0f64, 0.0f64, 0.0f64);
    for (&p, &g) in pred.data().iter().zip(target.data()) {
        let (p, g) = (p as f64, g as f64);
        i += p * g;
        sp += p;
        sg += g;
    }
    Ok((2.0 * i + 1.0) / (sp + sg + 1.0))
}

/// Mean binary cross-entropy plus soft-Dice loss, equally weighted.
/// Returns the loss and its gradient with respect to `pred`.
pub fn seg_loss(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor), TensorError> {
    same_dims(pred, target)?;
    let n = pred.len().max(1) as f64;
    let (mut bce, mut i, mut sp, mut sg) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for (&p, &g) in pred.data().iter().zip(target.data()) {
        let (p, g) = (p as f64, g as f64);
        let pc = p.clamp(P_CLAMP, 1.0 - P_CLAMP);
        bce -= g * pc.ln() + (1.0 - g) * (1.0 - pc).ln();
        i += p * g;
        sp += p;
        sg += g;
    }
    let denom = sp + sg + 1.0;
    let dice = 1.0 - (2.0 * i + 1.0) / denom;
    let loss = bce / n + dice;
    let num = 2.0 * i + 1.0;
    let grad = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &g)| {
            let (p, g) = (p as f64, g as f64);
            let pc = p.clamp(P_CLAMP, 1.0 - P_CLAMP);
            let d_bce = (-(g / pc) + (1.0 - g) / (1.0 - pc)) / n;
            let d_dice = -(2.0 * g * denom - num) / (denom * denom);
            (d_bce + d_dice) as f32
        })
        .collect();
    Ok((loss, Tensor::new(pred.dims(), grad)?))
}

/// Mean negative log-likelihood of softmax rows (N×K) at the target classes.
pub fn cls_loss(probs: &Tensor, targets: &[usize]) -> Result<(f64, Tensor), TensorError> {
    let [n, k] = *probs.dims() else {
        return Err(TensorError::BadDims(probs.dims().to_vec()));
    };
    if targets.len() != n || targets.iter().any(|&t| t >= k) {
        return Err(TensorError::GradShape { expected: vec![n], got: vec![targets.len()] });
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0f32; n * k];
    for (row, &t) in targets.iter().enumerate() {
        let p = (probs.data()[row * k + t] as f64).max(CE_FLOOR);
        loss -= p.ln();
        grad[row * k + t] = (-1.0 / (p * n as f64)) as f32;
    }
    Ok((loss / n as f64, Tensor::new(probs.dims(), grad)?))
}

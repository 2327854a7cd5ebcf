use crate::{Scalar, Tensor, TensorError};

/// Softmax over the channel axis of `[n, k, h, w]` scores.
pub fn softmax_channels<T: Scalar>(scores: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let (n, k, h, w) = scores.dims4()?;
    let plane = h * w;
    let mut out = Tensor::zeros(scores.shape());
    let sd = scores.data();
    for b in 0..n {
        let base = b * k * plane;
        for p in 0..plane {
            let mut m = T::neg_infinity();
            for c in 0..k {
                m = m.max(sd[base + c * plane + p]);
            }
            let mut z = T::zero();
            for c in 0..k {
                let e = (sd[base + c * plane + p] - m).exp();
                out.data_mut()[base + c * plane + p] = e;
                z += e;
            }
            for c in 0..k {
                out.data_mut()[base + c * plane + p] /= z;
            }
        }
    }
    Ok(out)
}

/// Result of a per-pixel weighted cross entropy.
pub struct CrossEntropy<T> {
    pub loss: T,
    /// Gradient with respect to the scores.
    pub grad: Tensor<T>,
    /// Pixels that contributed (labels other than the ignore index).
    pub counted: usize,
}

/// Mean over non-ignored pixels of `-weight[label] * log softmax(scores)[label]`.
///
/// `labels` is `[n, h, w]` flattened. When every pixel is ignored the loss is 0
/// and `counted` is 0.
pub fn weighted_cross_entropy<T: Scalar>(
    scores: &Tensor<T>,
    labels: &[u8],
    ignore_index: u8,
    class_weights: &[T],
) -> Result<CrossEntropy<T>, TensorError> {
    let (n, k, h, w) = scores.dims4()?;
    let plane = h * w;
    if labels.len() != n * plane {
        return Err(TensorError::Shape(format!(
            "cross entropy: {} labels for scores {:?}",
            labels.len(),
            scores.shape()
        )));
    }
    if class_weights.len() != k {
        return Err(TensorError::Shape(format!("{} class weights for {k} classes", class_weights.len())));
    }
    let probs = softmax_channels(scores)?;
    let mut grad = Tensor::zeros(scores.shape());
    let mut total = T::zero();
    let mut counted = 0usize;
    for b in 0..n {
        for p in 0..plane {
            let lbl = labels[b * plane + p];
            if lbl == ignore_index {
                continue;
            }
            let lbl = lbl as usize;
            if lbl >= k {
                return Err(TensorError::Invalid(format!("label {lbl} outside {k} classes")));
            }
            counted += 1;
            let base = b * k * plane + p;
            let wt = class_weights[lbl];
            // log-softmax computed from scores for accuracy at saturation
            let mut m = T::neg_infinity();
            for c in 0..k {
                m = m.max(scores.data()[base + c * plane]);
            }
            let mut z = T::zero();
            for c in 0..k {
                z += (scores.data()[base + c * plane] - m).exp();
            }
            let logp = scores.data()[base + lbl * plane] - m - z.ln();
            total -= wt * logp;
            for c in 0..k {
                let pc = probs.data()[base + c * plane];
                grad.data_mut()[base + c * plane] = wt * (pc - if c == lbl { T::one() } else { T::zero() });
            }
        }
    }
    if counted == 0 {
        return Ok(CrossEntropy { loss: T::zero(), grad, counted });
    }
    let inv = T::one() / T::lit(counted as f64);
    for v in grad.data_mut() {
        *v *= inv;
    }
    Ok(CrossEntropy { loss: total * inv, grad, counted })
}

/// Binary cross entropy with logits, summed over classes and averaged over the
/// batch. Returns the loss and the gradient with respect to the logits.
pub fn bce_with_logits<T: Scalar>(logits: &Tensor<T>, targets: &Tensor<T>) -> Result<(T, Tensor<T>), TensorError> {
    logits.expect_same_shape(targets)?;
    let n = match logits.shape() {
        [n, _] => *n,
        s => return Err(TensorError::Shape(format!("bce expects [n, classes], got {s:?}"))),
    };
    let inv = T::one() / T::lit(n as f64);
    let mut total = T::zero();
    let mut grad = Tensor::zeros(logits.shape());
    for (i, (&x, &t)) in logits.data().iter().zip(targets.data()).enumerate() {
        total += per_class_bce(x, t);
        let sig = T::one() / (T::one() + (-x).exp());
        grad.data_mut()[i] = (sig - t) * inv;
    }
    Ok((total * inv, grad))
}

/// `max(x, 0) - x*t + ln(1 + exp(-|x|))`, stable for large `|x|`.
pub fn per_class_bce<T: Scalar>(x: T, t: T) -> T {
    x.max(T::zero()) - x * t + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_scores_give_log_k() {
        let scores = Tensor::<f64>::zeros(&[1, 4, 2, 2]);
        let ce = weighted_cross_entropy(&scores, &[0, 1, 2, 3], 255, &[1.0; 4]).unwrap();
        assert!((ce.loss - 4f64.ln()).abs() < 1e-12);
        assert_eq!(ce.counted, 4);
    }

    #[test]
    fn all_ignored_is_zero() {
        let scores = Tensor::<f32>::zeros(&[1, 2, 1, 2]);
        let ce = weighted_cross_entropy(&scores, &[255, 255], 255, &[1.0; 2]).unwrap();
        assert_eq!(ce.loss, 0.0);
        assert_eq!(ce.counted, 0);
    }

    #[test]
    fn saturated_bce_is_tiny() {
        let logits = Tensor::<f64>::from_vec(&[1, 2], vec![20.0, -20.0]).unwrap();
        let targets = Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap();
        for (x, t) in logits.data().iter().zip(targets.data()) {
            assert!(per_class_bce(*x, *t) <= 1e-8);
        }
    }
}

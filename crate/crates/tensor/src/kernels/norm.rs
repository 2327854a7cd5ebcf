//! Per-channel batch normalization over `[n, c, h, w]`.

use crate::{Scalar, Tensor, TensorError};

pub const BN_EPS: f64 = 1e-5;

/// Saved state of a training-mode forward pass.
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased variance, used for normalization.
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
    /// Normalized input before the affine transform.
    pub xhat: Tensor<T>,
}

impl<T: Scalar> BatchStats<T> {
    /// Unbiased variance, which is what running statistics track.
    pub fn unbiased_var(&self, count: usize) -> Vec<T> {
        let f = if count > 1 { T::lit(count as f64 / (count as f64 - 1.0)) } else { T::one() };
        self.var.iter().map(|&v| v * f).collect()
    }
}

fn check_affine<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<(usize, usize, usize), TensorError> {
    let (n, c, h, w) = x.dims4()?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(TensorError::Shape(format!(
            "batch norm over {c} channels with affine {:?}/{:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    Ok((n, c, h * w))
}

pub fn batch_norm_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<(Tensor<T>, BatchStats<T>), TensorError> {
    let (n, c, plane) = check_affine(x, gamma, beta)?;
    let count = T::lit((n * plane) as f64);
    let eps = T::lit(BN_EPS);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    let xd = x.data();
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            let off = (b * c + ch) * plane;
            s += xd[off..off + plane].iter().copied().sum::<T>();
        }
        let m = s / count;
        let mut ss = T::zero();
        for b in 0..n {
            let off = (b * c + ch) * plane;
            for &v in &xd[off..off + plane] {
                ss += (v - m) * (v - m);
            }
        }
        mean[ch] = m;
        var[ch] = ss / count;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let (m, is, g, be) = (mean[ch], inv_std[ch], gamma.data()[ch], beta.data()[ch]);
            for i in off..off + plane {
                let h = (xd[i] - m) * is;
                xhat.data_mut()[i] = h;
                y.data_mut()[i] = g * h + be;
            }
        }
    }
    Ok((y, BatchStats { mean, var, inv_std, xhat }))
}

/// Returns `(dx, dgamma, dbeta)` for a training-mode forward.
pub fn batch_norm_train_backward<T: Scalar>(
    dy: &Tensor<T>,
    gamma: &Tensor<T>,
    stats: &BatchStats<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, c, h, w) = dy.dims4().expect("rank-4 upstream");
    let plane = h * w;
    let m = T::lit((n * plane) as f64);
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    let (dyd, xh) = (dy.data(), stats.xhat.data());
    for ch in 0..c {
        let (mut sg, mut sb) = (T::zero(), T::zero());
        for b in 0..n {
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                sg += dyd[i] * xh[i];
                sb += dyd[i];
            }
        }
        dgamma.data_mut()[ch] = sg;
        dbeta.data_mut()[ch] = sb;
    }
    let mut dx = Tensor::zeros(dy.shape());
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let k = gamma.data()[ch] * stats.inv_std[ch] / m;
            let (sg, sb) = (dgamma.data()[ch], dbeta.data()[ch]);
            for i in off..off + plane {
                dx.data_mut()[i] = k * (m * dyd[i] - sb - xh[i] * sg);
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub fn batch_norm_eval<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    let (n, c, plane) = check_affine(x, gamma, beta)?;
    if running_mean.shape() != [c] || running_var.shape() != [c] {
        return Err(TensorError::Shape("batch norm running statistics shape".into()));
    }
    let eps = T::lit(BN_EPS);
    let mut y = Tensor::zeros(x.shape());
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let is = T::one() / (running_var.data()[ch] + eps).sqrt();
            let (m, g, be) = (running_mean.data()[ch], gamma.data()[ch], beta.data()[ch]);
            for i in off..off + plane {
                y.data_mut()[i] = g * (x.data()[i] - m) * is + be;
            }
        }
    }
    Ok(y)
}

pub fn batch_norm_eval_backward<T: Scalar>(
    x: &Tensor<T>,
    dy: &Tensor<T>,
    gamma: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, c, h, w) = dy.dims4().expect("rank-4 upstream");
    let plane = h * w;
    let eps = T::lit(BN_EPS);
    let mut dx = Tensor::zeros(dy.shape());
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let is = T::one() / (running_var.data()[ch] + eps).sqrt();
            let (m, g) = (running_mean.data()[ch], gamma.data()[ch]);
            for i in off..off + plane {
                let d = dy.data()[i];
                dx.data_mut()[i] = d * g * is;
                dgamma.data_mut()[ch] += d * (x.data()[i] - m) * is;
                dbeta.data_mut()[ch] += d;
            }
        }
    }
    (dx, dgamma, dbeta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn train_mode_normalizes_each_channel() {
        let x = Tensor::<f64>::from_fn(&[3, 2, 2, 2], |i| (i as f64 * 1.3).cos() * 4.0 + 1.0);
        let g = Tensor::ones(&[2]);
        let b = Tensor::zeros(&[2]);
        let (y, _) = batch_norm_train(&x, &g, &b).unwrap();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..3)
                .flat_map(|n| (0..4).map(move |i| (n, i)))
                .map(|(n, i)| y.at4(n, ch, i / 2, i % 2))
                .collect();
            let m: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let v: f64 = vals.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn train_backward_matches_finite_differences() {
        let x = Tensor::<f64>::from_fn(&[2, 2, 2, 3], |i| (i as f64 * 0.77).sin());
        let gamma = Tensor::from_vec(&[2], vec![1.3, -0.4]).unwrap();
        let beta = Tensor::from_vec(&[2], vec![0.2, 0.1]).unwrap();
        let proj = Tensor::<f64>::from_fn(x.shape(), |i| (i as f64 * 0.31).cos());
        let loss = |x: &Tensor<f64>| {
            let (y, _) = batch_norm_train(x, &gamma, &beta).unwrap();
            y.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, stats) = batch_norm_train(&x, &gamma, &beta).unwrap();
        let (dx, _, _) = batch_norm_train_backward(&proj, &gamma, &stats);
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += 1e-6;
            let mut xm = x.clone();
            xm.data_mut()[i] -= 1e-6;
            let fd = (loss(&xp) - loss(&xm)) / 2e-6;
            assert!((fd - dx.data()[i]).abs() < 1e-6, "coord {i}: {fd} vs {}", dx.data()[i]);
        }
    }
}

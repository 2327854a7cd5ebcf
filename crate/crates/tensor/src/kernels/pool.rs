use crate::{Scalar, Tensor, TensorError};

/// Row (or column) range `[start, end)` averaged into output cell `i` of an
/// `r`-cell adaptive pooling grid over an axis of length `len`.
///
/// Boundaries are `floor(i*len/r)` and `floor((i+1)*len/r)`. When `r > len`
/// that range can be empty; it is widened to the single cell at `start`.
pub fn adaptive_bin(i: usize, len: usize, r: usize) -> (usize, usize) {
    let start = i * len / r;
    let end = ((i + 1) * len / r).max(start + 1);
    (start, end)
}

pub fn adaptive_avg_pool<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>, TensorError> {
    if r == 0 {
        return Err(TensorError::Invalid("pool size must be at least 1".into()));
    }
    let (n, c, h, w) = x.dims4()?;
    let rows: Vec<_> = (0..r).map(|i| adaptive_bin(i, h, r)).collect();
    let cols: Vec<_> = (0..r).map(|j| adaptive_bin(j, w, r)).collect();
    let mut out = Tensor::zeros(&[n, c, r, r]);
    let xd = x.data();
    let od = out.data_mut();
    for p in 0..n * c {
        let plane = &xd[p * h * w..(p + 1) * h * w];
        for (i, &(r0, r1)) in rows.iter().enumerate() {
            for (j, &(c0, c1)) in cols.iter().enumerate() {
                let mut s = T::zero();
                for y in r0..r1 {
                    s += plane[y * w + c0..y * w + c1].iter().copied().sum::<T>();
                }
                od[(p * r + i) * r + j] = s / T::lit(((r1 - r0) * (c1 - c0)) as f64);
            }
        }
    }
    Ok(out)
}

pub fn adaptive_avg_pool_backward<T: Scalar>(dy: &Tensor<T>, input_shape: &[usize]) -> Tensor<T> {
    let (n, c, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    let r = dy.shape()[2];
    let rows: Vec<_> = (0..r).map(|i| adaptive_bin(i, h, r)).collect();
    let cols: Vec<_> = (0..r).map(|j| adaptive_bin(j, w, r)).collect();
    let mut dx = Tensor::zeros(input_shape);
    let dd = dx.data_mut();
    for p in 0..n * c {
        for (i, &(r0, r1)) in rows.iter().enumerate() {
            for (j, &(c0, c1)) in cols.iter().enumerate() {
                let g = dy.data()[(p * r + i) * r + j] / T::lit(((r1 - r0) * (c1 - c0)) as f64);
                for y in r0..r1 {
                    for v in &mut dd[p * h * w + y * w + c0..p * h * w + y * w + c1] {
                        *v += g;
                    }
                }
            }
        }
    }
    dx
}

/// Max pooling with a square window; returns the output and the flat argmax
/// index (within each input plane) of every output cell.
pub fn max_pool<T: Scalar>(
    x: &Tensor<T>,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, Vec<usize>), TensorError> {
    let (n, c, h, w) = x.dims4()?;
    if k == 0 || stride == 0 || padding >= k {
        return Err(TensorError::Invalid(format!("max pool k={k} stride={stride} padding={padding}")));
    }
    if h + 2 * padding < k || w + 2 * padding < k {
        return Err(TensorError::Shape(format!("max pool window {k} larger than padded input {h}x{w}")));
    }
    let oh = (h + 2 * padding - k) / stride + 1;
    let ow = (w + 2 * padding - k) / stride + 1;
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut arg = vec![0usize; n * c * oh * ow];
    for p in 0..n * c {
        let plane = &x.data()[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_i = 0;
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = iy as usize * w + ix as usize;
                        if plane[idx] > best {
                            best = plane[idx];
                            best_i = idx;
                        }
                    }
                }
                let o = (p * oh + oy) * ow + ox;
                out.data_mut()[o] = best;
                arg[o] = best_i;
            }
        }
    }
    Ok((out, arg))
}

pub fn max_pool_backward<T: Scalar>(dy: &Tensor<T>, argmax: &[usize], input_shape: &[usize]) -> Tensor<T> {
    let plane_in = input_shape[2] * input_shape[3];
    let (_, _, oh, ow) = dy.dims4().expect("rank-4 upstream");
    let mut dx = Tensor::zeros(input_shape);
    for (o, (&g, &a)) in dy.data().iter().zip(argmax).enumerate() {
        let p = o / (oh * ow);
        dx.data_mut()[p * plane_in + a] += g;
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bins_cover_axis_when_pooling_down() {
        for len in 1..20 {
            for r in 1..=len {
                let mut next = 0;
                for i in 0..r {
                    let (s, e) = adaptive_bin(i, len, r);
                    assert_eq!(s, next);
                    assert!(e > s);
                    next = e;
                }
                assert_eq!(next, len);
            }
        }
    }

    #[test]
    fn bins_are_nonempty_when_grid_exceeds_input() {
        for (len, r) in [(4, 16), (8, 16), (3, 6), (5, 7)] {
            for i in 0..r {
                let (s, e) = adaptive_bin(i, len, r);
                assert_eq!(e, s + 1);
                assert!(e <= len);
            }
        }
    }

    #[test]
    fn pooling_gradient_sums_to_upstream() {
        let x = Tensor::<f64>::from_fn(&[1, 2, 5, 7], |i| i as f64);
        let y = adaptive_avg_pool(&x, 3).unwrap();
        let dy = Tensor::<f64>::ones(y.shape());
        let dx = adaptive_avg_pool_backward(&dy, x.shape());
        assert!((dx.sum() - dy.sum()).abs() < 1e-12);
    }

    #[test]
    fn max_pool_picks_window_maximum() {
        let x = Tensor::<f32>::from_fn(&[1, 1, 4, 4], |i| i as f32);
        let (y, _) = max_pool(&x, 3, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[5.0, 7.0, 13.0, 15.0]);
    }
}

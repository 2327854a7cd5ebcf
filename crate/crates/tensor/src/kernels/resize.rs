//! Bilinear resampling with half-pixel centers (no corner alignment).

use crate::{Scalar, Tensor, TensorError};

#[derive(Clone, Copy, Debug)]
struct Tap<T> {
    i0: usize,
    i1: usize,
    w0: T,
    w1: T,
}

fn taps<T: Scalar>(src: usize, dst: usize) -> Vec<Tap<T>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let frac = pos - i0 as f64;
            let frac = if i1 == i0 { 0.0 } else { frac };
            Tap { i0, i1, w0: T::lit(1.0 - frac), w1: T::lit(frac) }
        })
        .collect()
}

/// Resizes the two trailing axes of a rank-4 tensor. Equal sizes pass through unchanged.
pub fn resize_bilinear<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize) -> Result<Tensor<T>, TensorError> {
    let (n, c, h, w) = x.dims4()?;
    if oh == 0 || ow == 0 {
        return Err(TensorError::Invalid("resize target must be non-empty".into()));
    }
    if (oh, ow) == (h, w) {
        return Ok(x.clone());
    }
    let ty = taps::<T>(h, oh);
    let tx = taps::<T>(w, ow);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut row = vec![T::zero(); ow];
    for p in 0..n * c {
        let plane = &x.data()[p * h * w..(p + 1) * h * w];
        for (oy, t) in ty.iter().enumerate() {
            for (ox, s) in tx.iter().enumerate() {
                // Lerp form: exact when both neighbours are equal.
                let (a0, a1) = (plane[t.i0 * w + s.i0], plane[t.i0 * w + s.i1]);
                let (b0, b1) = (plane[t.i1 * w + s.i0], plane[t.i1 * w + s.i1]);
                let a = a0 + (a1 - a0) * s.w1;
                let b = b0 + (b1 - b0) * s.w1;
                row[ox] = a + (b - a) * t.w1;
            }
            out.data_mut()[(p * oh + oy) * ow..(p * oh + oy + 1) * ow].copy_from_slice(&row);
        }
    }
    Ok(out)
}

pub fn resize_bilinear_backward<T: Scalar>(dy: &Tensor<T>, input_shape: &[usize]) -> Tensor<T> {
    let (n, c, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    let (_, _, oh, ow) = dy.dims4().expect("rank-4 upstream");
    if (oh, ow) == (h, w) {
        return dy.clone();
    }
    let ty = taps::<T>(h, oh);
    let tx = taps::<T>(w, ow);
    let mut dx = Tensor::zeros(input_shape);
    for p in 0..n * c {
        let g = &dy.data()[p * oh * ow..(p + 1) * oh * ow];
        let plane = &mut dx.data_mut()[p * h * w..(p + 1) * h * w];
        for (oy, t) in ty.iter().enumerate() {
            for (ox, s) in tx.iter().enumerate() {
                let v = g[oy * ow + ox];
                plane[t.i0 * w + s.i0] += v * t.w0 * s.w0;
                plane[t.i0 * w + s.i1] += v * t.w0 * s.w1;
                plane[t.i1 * w + s.i0] += v * t.w1 * s.w0;
                plane[t.i1 * w + s.i1] += v * t.w1 * s.w1;
            }
        }
    }
    dx
}

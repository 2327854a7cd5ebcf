//! 2-D convolution through im2col + GEMM over the whole batch.

use crate::{gemm, Scalar, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Self { stride: 1, padding: 0, dilation: 1 }
    }
}

impl Conv2dSpec {
    /// Stride 1, padding chosen so a `k x k` kernel at `dilation` keeps the spatial size.
    pub fn same(k: usize, dilation: usize) -> Self {
        Self { stride: 1, padding: dilation * (k - 1) / 2, dilation }
    }

    pub fn out_size(&self, input: usize, k: usize) -> Result<usize, TensorError> {
        if self.stride == 0 || self.dilation == 0 {
            return Err(TensorError::Invalid("stride and dilation must be positive".into()));
        }
        let span = self.dilation * (k - 1) + 1;
        let padded = input + 2 * self.padding;
        if padded < span {
            return Err(TensorError::Shape(format!(
                "input extent {input} (padding {}) smaller than kernel span {span}",
                self.padding
            )));
        }
        Ok((padded - span) / self.stride + 1)
    }

    fn is_pointwise(&self, kh: usize, kw: usize) -> bool {
        kh == 1 && kw == 1 && self.stride == 1 && self.padding == 0
    }
}

struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    spec: Conv2dSpec,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Output columns `[lo, hi)` whose input column `ox * s + shift` lies in `[0, w)`.
fn valid_range(ow: usize, w: usize, s: isize, shift: isize) -> (usize, usize) {
    // ox * s + shift >= 0  <=>  ox >= ceil(-shift / s)
    let lo = if shift >= 0 { 0 } else { ((-shift + s - 1) / s) as usize };
    // ox * s + shift <= w - 1
    let top = w as isize - 1 - shift;
    let hi = if top < 0 { 0 } else { (top / s + 1) as usize };
    let hi = hi.min(ow);
    (lo.min(hi), hi)
}

/// Writes sample columns into `cols`, whose rows are `ld` wide; this
/// sample's block starts at column `offset`.
fn im2col<T: Scalar>(x: &[T], g: &Geometry, cols: &mut [T], ld: usize, offset: usize) {
    let s = g.spec.stride as isize;
    let p = g.spec.padding as isize;
    let d = g.spec.dilation as isize;
    let ncols = g.cols();
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let out = &mut cols[row * ld + offset..row * ld + offset + ncols];
                for oy in 0..g.oh {
                    let iy = oy as isize * s - p + ki as isize * d;
                    let dst = &mut out[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let (lo, hi) = valid_range(g.ow, g.w, s, kj as isize * d - p);
                    dst[..lo].fill(T::zero());
                    dst[hi..].fill(T::zero());
                    if lo == hi {
                        continue;
                    }
                    let x0 = (lo as isize * s + kj as isize * d - p) as usize;
                    if s == 1 {
                        dst[lo..hi].copy_from_slice(&src[x0..x0 + (hi - lo)]);
                    } else {
                        for (k, v) in dst[lo..hi].iter_mut().enumerate() {
                            *v = src[x0 + k * s as usize];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &Geometry, dx: &mut [T], ld: usize, offset: usize) {
    let s = g.spec.stride as isize;
    let p = g.spec.padding as isize;
    let d = g.spec.dilation as isize;
    let ncols = g.cols();
    for ci in 0..g.c {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ld + offset..row * ld + offset + ncols];
                for oy in 0..g.oh {
                    let iy = oy as isize * s - p + ki as isize * d;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let (lo, hi) = valid_range(g.ow, g.w, s, kj as isize * d - p);
                    if lo == hi {
                        continue;
                    }
                    let x0 = (lo as isize * s + kj as isize * d - p) as usize;
                    let row = &src[oy * g.ow + lo..oy * g.ow + hi];
                    if s == 1 {
                        for (o, &v) in dst[x0..x0 + row.len()].iter_mut().zip(row) {
                            *o += v;
                        }
                    } else {
                        for (k, &v) in row.iter().enumerate() {
                            dst[x0 + k * s as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn geometry<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, spec: Conv2dSpec) -> Result<(usize, usize, Geometry), TensorError> {
    let (n, c, h, wd) = x.dims4()?;
    let (o, wc, kh, kw) = w.dims4()?;
    if wc != c {
        return Err(TensorError::Shape(format!(
            "conv2d: input has {c} channels, weight expects {wc}"
        )));
    }
    let oh = spec.out_size(h, kh)?;
    let ow = spec.out_size(wd, kw)?;
    Ok((n, o, Geometry { c, h, w: wd, kh, kw, oh, ow, spec }))
}

/// Column matrix of the whole batch: `rows x (n * cols)`, samples side by side.
fn batch_columns<T: Scalar>(x: &Tensor<T>, n: usize, g: &Geometry) -> Vec<T> {
    let (rows, ncols) = (g.rows(), g.cols());
    let in_per = g.c * g.h * g.w;
    let ld = n * ncols;
    let mut cols = vec![T::zero(); rows * ld];
    for b in 0..n {
        let xs = &x.data()[b * in_per..(b + 1) * in_per];
        if g.spec.is_pointwise(g.kh, g.kw) {
            for r in 0..rows {
                cols[r * ld + b * ncols..r * ld + (b + 1) * ncols].copy_from_slice(&xs[r * ncols..(r + 1) * ncols]);
            }
        } else {
            im2col(xs, g, &mut cols, ld, b * ncols);
        }
    }
    cols
}

pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: Conv2dSpec,
) -> Result<Tensor<T>, TensorError> {
    let (n, o, g) = geometry(x, w, spec)?;
    if let Some(b) = bias {
        if b.shape() != [o] {
            return Err(TensorError::Shape(format!("conv2d: bias {:?} for {o} outputs", b.shape())));
        }
    }
    let (rows, ncols) = (g.rows(), g.cols());
    let ld = n * ncols;
    let mut out = Tensor::zeros(&[n, o, g.oh, g.ow]);
    if n == 1 && spec.is_pointwise(g.kh, g.kw) {
        gemm(false, false, o, ncols, rows, T::one(), w.data(), x.data(), T::zero(), out.data_mut());
    } else {
        let cols = batch_columns(x, n, &g);
        let mut wide = vec![T::zero(); o * ld];
        gemm(false, false, o, ld, rows, T::one(), w.data(), &cols, T::zero(), &mut wide);
        let od = out.data_mut();
        for b in 0..n {
            for oc in 0..o {
                od[(b * o + oc) * ncols..(b * o + oc + 1) * ncols]
                    .copy_from_slice(&wide[oc * ld + b * ncols..oc * ld + (b + 1) * ncols]);
            }
        }
    }
    if let Some(bias) = bias {
        let od = out.data_mut();
        for b in 0..n {
            for (oc, &bv) in bias.data().iter().enumerate() {
                for v in &mut od[(b * o + oc) * ncols..(b * o + oc + 1) * ncols] {
                    *v += bv;
                }
            }
        }
    }
    Ok(out)
}

pub struct Conv2dGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    spec: Conv2dSpec,
    need: [bool; 3],
) -> Result<Conv2dGrads<T>, TensorError> {
    let (n, o, g) = geometry(x, w, spec)?;
    if dy.shape() != [n, o, g.oh, g.ow] {
        return Err(TensorError::Shape(format!("conv2d backward: bad upstream {:?}", dy.shape())));
    }
    let (rows, ncols) = (g.rows(), g.cols());
    let ld = n * ncols;
    let in_per = g.c * g.h * g.w;
    // Upstream gradient laid out as `o x (n * cols)`.
    let mut wide = vec![T::zero(); o * ld];
    for b in 0..n {
        for oc in 0..o {
            wide[oc * ld + b * ncols..oc * ld + (b + 1) * ncols]
                .copy_from_slice(&dy.data()[(b * o + oc) * ncols..(b * o + oc + 1) * ncols]);
        }
    }
    let weight = need[1].then(|| {
        let cols = batch_columns(x, n, &g);
        let mut dw = Tensor::zeros(w.shape());
        gemm(false, true, o, rows, ld, T::one(), &wide, &cols, T::zero(), dw.data_mut());
        dw
    });
    let input = need[0].then(|| {
        let mut dcols = vec![T::zero(); rows * ld];
        gemm(true, false, rows, ld, o, T::one(), w.data(), &wide, T::zero(), &mut dcols);
        let mut dx = Tensor::zeros(x.shape());
        for b in 0..n {
            let dxs = &mut dx.data_mut()[b * in_per..(b + 1) * in_per];
            if spec.is_pointwise(g.kh, g.kw) {
                for r in 0..rows {
                    dxs[r * ncols..(r + 1) * ncols].copy_from_slice(&dcols[r * ld + b * ncols..r * ld + (b + 1) * ncols]);
                }
            } else {
                col2im(&dcols, &g, dxs, ld, b * ncols);
            }
        }
        dx
    });
    let bias = need[2].then(|| {
        let mut db = Tensor::zeros(&[o]);
        for oc in 0..o {
            db.data_mut()[oc] = wide[oc * ld..(oc + 1) * ld].iter().copied().sum::<T>();
        }
        db
    });
    Ok(Conv2dGrads { input, weight, bias })
}

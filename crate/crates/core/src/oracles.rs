//! Brute-force reference implementations and a finite-difference gradient
//! checker.
//!
//! Nothing here calls into the tensor kernels: every oracle is a plain nested
//! loop over `f64` values, written from the operation's definition. Parameters
//! are looked up by name in a [`ParamStore`], so the oracles also pin the
//! naming scheme of the layers they check.

use dca_tensor::{ParamKind, ParamStore, Scalar, Tape, Tensor, Var};

use crate::dca::DcaConfig;
use crate::error::{invalid, DcaError, Result};

const BN_EPS: f64 = 1e-5;

/// Dense `[n, c, h, w]` array of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w, data: vec![0.0; n * c * h * w] }
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        if s.len() != 4 {
            return Err(invalid(format!("oracle expects a rank-4 array, got {s:?}")));
        }
        Ok(Self { n: s[0], c: s[1], h: s[2], w: s[3], data: t.data().iter().map(|v| v.as_f64()).collect() })
    }

    pub fn to_tensor(&self) -> Tensor<f64> {
        Tensor::from_vec(&[self.n, self.c, self.h, self.w], self.data.clone()).expect("consistent dims")
    }

    fn idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(n, c, y, x)]
    }

    fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f64) {
        let i = self.idx(n, c, y, x);
        self.data[i] = v;
    }
}

/// Average of rows `[floor(i*h/r), floor((i+1)*h/r))` and the matching
/// columns for each output cell; an empty range falls back to its first row
/// or column.
pub fn oracle_context_pool<T: Scalar>(f: &Tensor<T>, r: usize) -> Result<Tensor<f64>> {
    if r < 1 {
        return Err(invalid("oracle pool size must be at least 1"));
    }
    let g = Grid::from_tensor(f)?;
    let mut out = Grid::zeros(g.n, g.c, r, r);
    let bounds = |i: usize, len: usize| -> (usize, usize) {
        let lo = ((i * len) as f64 / r as f64).floor() as usize;
        let hi = (((i + 1) * len) as f64 / r as f64).floor() as usize;
        if hi <= lo {
            (lo, lo + 1)
        } else {
            (lo, hi)
        }
    };
    for n in 0..g.n {
        for c in 0..g.c {
            for i in 0..r {
                for j in 0..r {
                    let (y0, y1) = bounds(i, g.h);
                    let (x0, x1) = bounds(j, g.w);
                    let mut sum = 0.0;
                    let mut count = 0usize;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            sum += g.at(n, c, y, x);
                            count += 1;
                        }
                    }
                    out.set(n, c, i, j, sum / count as f64);
                }
            }
        }
    }
    Ok(out.to_tensor())
}

/// `fs + mask * fs_t`, element by element.
pub fn oracle_dca_update<T: Scalar>(fs: &Tensor<T>, mask: &Tensor<T>, fs_t: &Tensor<T>) -> Result<Tensor<f64>> {
    if fs.shape() != mask.shape() || fs.shape() != fs_t.shape() {
        return Err(invalid(format!(
            "oracle update shapes differ: {:?}, {:?}, {:?}",
            fs.shape(),
            mask.shape(),
            fs_t.shape()
        )));
    }
    let (a, m, t) = (Grid::from_tensor(fs)?, Grid::from_tensor(mask)?, Grid::from_tensor(fs_t)?);
    let mut out = Grid::zeros(a.n, a.c, a.h, a.w);
    for n in 0..a.n {
        for c in 0..a.c {
            for y in 0..a.h {
                for x in 0..a.w {
                    out.set(n, c, y, x, m.at(n, c, y, x) * t.at(n, c, y, x) + a.at(n, c, y, x));
                }
            }
        }
    }
    Ok(out.to_tensor())
}

fn param<T: Scalar>(store: &ParamStore<T>, prefix: &str, name: &str) -> Result<Vec<f64>> {
    let full = if prefix.is_empty() { name.to_string() } else { format!("{prefix}.{name}") };
    let id = store.id(&full)?;
    Ok(store.get(id).data().iter().map(|v| v.as_f64()).collect())
}

fn conv(x: &Grid, w: &[f64], bias: Option<&[f64]>, out_c: usize, k: usize, pad: usize) -> Grid {
    let oh = x.h + 2 * pad - k + 1;
    let ow = x.w + 2 * pad - k + 1;
    let mut out = Grid::zeros(x.n, out_c, oh, ow);
    for n in 0..x.n {
        for o in 0..out_c {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = bias.map_or(0.0, |b| b[o]);
                    for c in 0..x.c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y + ky) as isize - pad as isize;
                                let ix = (xx + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                    continue;
                                }
                                acc += w[((o * x.c + c) * k + ky) * k + kx] * x.at(n, c, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.set(n, o, y, xx, acc);
                }
            }
        }
    }
    out
}

/// Batch norm with the stored running statistics.
fn batch_norm(x: &Grid, gamma: &[f64], beta: &[f64], mean: &[f64], var: &[f64]) -> Grid {
    let mut out = x.clone();
    for n in 0..x.n {
        for c in 0..x.c {
            let s = 1.0 / (var[c] + BN_EPS).sqrt();
            for y in 0..x.h {
                for xx in 0..x.w {
                    out.set(n, c, y, xx, (x.at(n, c, y, xx) - mean[c]) * s * gamma[c] + beta[c]);
                }
            }
        }
    }
    out
}

fn relu(mut x: Grid) -> Grid {
    for v in &mut x.data {
        *v = v.max(0.0);
    }
    x
}

fn conv_bn<T: Scalar>(store: &ParamStore<T>, prefix: &str, x: &Grid, out_c: usize, k: usize, act: bool) -> Result<Grid> {
    let w = param(store, prefix, "conv.weight")?;
    let y = conv(x, &w, None, out_c, k, k / 2);
    let y = batch_norm(
        &y,
        &param(store, prefix, "bn.gamma")?,
        &param(store, prefix, "bn.beta")?,
        &param(store, prefix, "bn.running_mean")?,
        &param(store, prefix, "bn.running_var")?,
    );
    Ok(if act { relu(y) } else { y })
}

/// Bilinear resize with half-pixel sample positions, clamped at the borders.
fn resize(x: &Grid, oh: usize, ow: usize) -> Grid {
    let mut out = Grid::zeros(x.n, x.c, oh, ow);
    let coord = |d: usize, src: usize, dst: usize| -> (usize, usize, f64) {
        let s = ((d as f64 + 0.5) * src as f64 / dst as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(src - 1);
        let i1 = (i0 + 1).min(src - 1);
        (i0, i1, s - i0 as f64)
    };
    for n in 0..x.n {
        for c in 0..x.c {
            for y in 0..oh {
                let (y0, y1, fy) = coord(y, x.h, oh);
                for xx in 0..ow {
                    let (x0, x1, fx) = coord(xx, x.w, ow);
                    let top = x.at(n, c, y0, x0) * (1.0 - fx) + x.at(n, c, y0, x1) * fx;
                    let bottom = x.at(n, c, y1, x0) * (1.0 - fx) + x.at(n, c, y1, x1) * fx;
                    out.set(n, c, y, xx, top * (1.0 - fy) + bottom * fy);
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct OracleDcaOutput {
    pub context: Tensor<f64>,
    pub spatial: Tensor<f64>,
    pub mask: Tensor<f64>,
    pub semantic_logits: Option<Tensor<f64>>,
}

/// Straight-line composition of a whole DCA module in inference mode, with
/// parameters read from `store` under `prefix`.
pub fn oracle_dca_forward<T: Scalar>(
    store: &ParamStore<T>,
    prefix: &str,
    cfg: &DcaConfig,
    fc: &Tensor<T>,
    fs: &Tensor<T>,
) -> Result<OracleDcaOutput> {
    let (fc, fs) = (Grid::from_tensor(fc)?, Grid::from_tensor(fs)?);
    if fc.c != cfg.in_channels_context || fs.c != cfg.in_channels_spatial {
        return Err(invalid("oracle input channels disagree with the module config"));
    }
    let sub = |s: &str| if prefix.is_empty() { s.to_string() } else { format!("{prefix}.{s}") };
    let w = cfg.width;

    let pooled = Grid::from_tensor(&oracle_context_pool(&fc.to_tensor(), cfg.context_scale)?)?;
    let g = conv_bn(store, &sub("conv_c.0"), &pooled, w, 1, true)?;
    let g = conv_bn(store, &sub("conv_c.1"), &g, w, 3, false)?;
    let g = if (g.h, g.w) == (fs.h, fs.w) { g } else { resize(&g, fs.h, fs.w) };

    let mut mask = g.clone();
    for v in &mut mask.data {
        *v = 1.0 / (1.0 + (-*v).exp());
    }

    let first = conv_bn(store, &sub("conv_s.0"), &fs, w, 3, true)?;
    let transformed = conv_bn(store, &sub("conv_s.1"), &first, w, 3, false)?;
    let residual = if fs.c == w { fs } else { first };
    let spatial =
        Grid::from_tensor(&oracle_dca_update(&residual.to_tensor(), &mask.to_tensor(), &transformed.to_tensor())?)?;

    let mut context = Grid::zeros(g.n, 2 * w, g.h, g.w);
    for n in 0..g.n {
        for c in 0..2 * w {
            for y in 0..g.h {
                for x in 0..g.w {
                    let v = if c < w { g.at(n, c, y, x) } else { spatial.at(n, c - w, y, x) };
                    context.set(n, c, y, x, v);
                }
            }
        }
    }

    let semantic_logits = if cfg.semantic_supervision {
        let p = sub("semantic");
        let sw = cfg.semantic_width;
        let red = relu(conv(
            &context,
            &param(store, &p, "reduce.weight")?,
            Some(&param(store, &p, "reduce.bias")?),
            sw,
            1,
            0,
        ));
        let fc_w = param(store, &p, "fc.weight")?;
        let fc_b = param(store, &p, "fc.bias")?;
        let k = cfg.num_classes;
        let mut logits = vec![0.0; red.n * k];
        for n in 0..red.n {
            let pooled: Vec<f64> = (0..sw)
                .map(|c| {
                    let mut s = 0.0;
                    for y in 0..red.h {
                        for x in 0..red.w {
                            s += red.at(n, c, y, x);
                        }
                    }
                    s / (red.h * red.w) as f64
                })
                .collect();
            for j in 0..k {
                logits[n * k + j] = fc_b[j] + (0..sw).map(|c| fc_w[j * sw + c] * pooled[c]).sum::<f64>();
            }
        }
        Some(Tensor::from_vec(&[red.n, k], logits)?)
    } else {
        None
    };

    Ok(OracleDcaOutput {
        context: context.to_tensor(),
        spatial: spatial.to_tensor(),
        mask: mask.to_tensor(),
        semantic_logits,
    })
}

/// Options of [`grad_check`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error, so gradients that are zero up
    /// to rounding compare by absolute error.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { epsilon: 1e-5, tolerance: 1e-4, floor: 1e-6 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Label of the coordinate with the largest relative error.
    pub worst: String,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }

    fn merge(&mut self, other: GradCheckReport) {
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
            self.analytic = other.analytic;
            self.numeric = other.numeric;
        }
        self.checked += other.checked;
    }
}

pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares `analytic` with central differences of `f` at `point`.
///
/// Fails with [`DcaError::NonFiniteProbe`] when `f` is not finite at a probe
/// and with [`DcaError::NotDifferentiable`] when the one-sided differences
/// disagree in a way that does not shrink with the step (a kink).
pub fn grad_check(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    point: &[f64],
    analytic: &[f64],
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    grad_check_labeled(&mut f, point, analytic, opts, |i| format!("x[{i}]"))
}

fn grad_check_labeled(
    f: &mut dyn FnMut(&[f64]) -> Result<f64>,
    point: &[f64],
    analytic: &[f64],
    opts: GradCheckOptions,
    label: impl Fn(usize) -> String,
) -> Result<GradCheckReport> {
    if point.len() != analytic.len() {
        return Err(invalid("gradient and point lengths differ"));
    }
    let mut x = point.to_vec();
    let mut probe = |x: &[f64], what: String| -> Result<f64> {
        let v = f(x)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(DcaError::NonFiniteProbe { probe: what })
        }
    };
    let f0 = probe(&x, "the base point".into())?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        tolerance: opts.tolerance,
    };
    let eps = opts.epsilon;
    for i in 0..x.len() {
        let x0 = x[i];
        let mut side = |x: &mut Vec<f64>, h: f64| -> Result<f64> {
            x[i] = x0 + h;
            let v = probe(x, format!("{} {:+e}", label(i), h));
            x[i] = x0;
            v
        };
        let fp = side(&mut x, eps)?;
        let fm = side(&mut x, -eps)?;
        let numeric = (fp - fm) / (2.0 * eps);
        let (fwd, bwd) = ((fp - f0) / eps, (f0 - fm) / eps);
        let gap = (fwd - bwd).abs();
        if gap > 1e-3 * numeric.abs().max(1.0) {
            // A smooth function's gap shrinks with the step; a kink's does not.
            let e2 = eps / 10.0;
            let fp2 = side(&mut x, e2)?;
            let fm2 = side(&mut x, -e2)?;
            let gap2 = ((fp2 - f0) / e2 - (f0 - fm2) / e2).abs();
            if gap2 > 0.5 * gap {
                return Err(DcaError::NotDifferentiable { probe: label(i) });
            }
        }
        let err = relative_error(analytic[i], numeric, opts.floor);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_empty() {
            report.max_rel_error = err;
            report.worst = label(i);
            report.analytic = analytic[i];
            report.numeric = numeric;
        }
    }
    Ok(report)
}

/// Scalar objective built on a tape from the parameters and the given input
/// variables.
pub type Objective<'a> = dyn Fn(&Tape<f64>, &ParamStore<f64>, &[Var]) -> Result<Var> + 'a;

/// Checks the tape's gradients of `objective` for every trainable parameter
/// in `store` and every entry of `inputs`, using inference-mode tapes.
pub fn check_gradients(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    objective: &Objective<'_>,
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    let eval = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::inference();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone(), false)).collect();
        let loss = objective(&tape, store, &vars)?;
        Ok(tape.value(loss).data()[0])
    };

    let tape = Tape::inference();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone(), true)).collect();
    let loss = objective(&tape, store, &vars)?;
    let grads = tape.backward(loss)?;
    let param_grads = grads.params();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        tolerance: opts.tolerance,
    };

    let mut work = store.clone();
    for id in store.ids().filter(|&id| store.kind(id) == ParamKind::Trainable) {
        let point = store.get(id).data().to_vec();
        let analytic = match param_grads.get(&id) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; point.len()],
        };
        let name = store.name(id).to_string();
        let mut f = |x: &[f64]| -> Result<f64> {
            work.get_mut(id).data_mut().copy_from_slice(x);
            eval(&work, inputs)
        };
        let r = grad_check_labeled(&mut f, &point, &analytic, opts, |i| format!("{name}[{i}]"))?;
        work.get_mut(id).data_mut().copy_from_slice(&point);
        report.merge(r);
    }

    for (k, input) in inputs.iter().enumerate() {
        let point = input.data().to_vec();
        let analytic = grads.of(vars[k]).map_or_else(|| vec![0.0; point.len()], |g| g.data().to_vec());
        let mut f = |x: &[f64]| -> Result<f64> {
            let mut perturbed = inputs.to_vec();
            perturbed[k].data_mut().copy_from_slice(x);
            eval(store, &perturbed)
        };
        let r = grad_check_labeled(&mut f, &point, &analytic, opts, |i| format!("input{k}[{i}]"))?;
        report.merge(r);
    }
    Ok(report)
}

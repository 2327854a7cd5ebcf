use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use crate::kernels::{self, Conv2dSpec};
use crate::{BnIds, ParamId, ParamStore, Scalar, Tensor, TensorError};

type Backward<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

struct Node<T> {
    value: Arc<Tensor<T>>,
    parents: Vec<usize>,
    backward: Option<Backward<T>>,
    param: Option<ParamId>,
    needs_grad: bool,
}

/// Batch statistics observed by a training-mode batch norm, to be folded
/// into the running statistics after the step.
#[derive(Clone, Debug)]
pub struct BnUpdate<T> {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

/// Records one forward evaluation so it can be differentiated.
///
/// A tape is single-use and single-threaded; concurrent inference uses one
/// tape per call.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    training: bool,
    bn_updates: RefCell<Vec<BnUpdate<T>>>,
}

/// Gradients of leaf values (inputs created with `requires_grad` and parameters).
pub struct Gradients<T> {
    leaves: HashMap<usize, Tensor<T>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn of(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v.0)
    }

    /// Gradient per parameter, summed over every place it was used.
    pub fn params(&self) -> HashMap<ParamId, Tensor<T>> {
        let mut out: HashMap<ParamId, Tensor<T>> = HashMap::new();
        for &(id, node) in &self.params {
            if let Some(g) = self.leaves.get(&node) {
                match out.get_mut(&id) {
                    Some(acc) => acc.add_assign(g).expect("same parameter, same shape"),
                    None => {
                        out.insert(id, g.clone());
                    }
                }
            }
        }
        out
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g).expect("gradient shape matches value"),
        None => *slot = Some(g),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new(training: bool) -> Self {
        Self { nodes: RefCell::new(Vec::new()), training, bn_updates: RefCell::new(Vec::new()) }
    }

    pub fn inference() -> Self {
        Self::new(false)
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, parents: &[Var], backward: Option<Backward<T>>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = parents.iter().any(|p| nodes[p.0].needs_grad);
        let id = nodes.len();
        nodes.push(Node {
            value: Arc::new(value),
            parents: parents.iter().map(|p| p.0).collect(),
            backward: if needs_grad { backward } else { None },
            param: None,
            needs_grad,
        });
        Var(id)
    }

    fn leaf(&self, value: Arc<Tensor<T>>, needs_grad: bool, param: Option<ParamId>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { value, parents: Vec::new(), backward: None, param, needs_grad });
        Var(id)
    }

    pub fn input(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.leaf(Arc::new(value), requires_grad, None)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.input(value, false)
    }

    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.leaf(store.shared(id), true, Some(id))
    }

    pub fn value(&self, v: Var) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn take_bn_updates(&self) -> Vec<BnUpdate<T>> {
        std::mem::take(&mut self.bn_updates.borrow_mut())
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return Err(TensorError::Shape(format!(
                "backward needs a scalar, got {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(nodes[loss.0].value.shape()));
        let mut leaves = HashMap::new();
        let mut params = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.backward {
                Some(back) => {
                    let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].needs_grad).collect();
                    let parent_grads = back(&g, &needs);
                    for (&p, pg) in node.parents.iter().zip(parent_grads) {
                        if let Some(pg) = pg {
                            if nodes[p].needs_grad {
                                accumulate(&mut grads[p], pg);
                            }
                        }
                    }
                }
                None => {
                    if let Some(id) = node.param {
                        params.push((id, i));
                    }
                    leaves.insert(i, g);
                }
            }
        }
        Ok(Gradients { leaves, params })
    }

    // ----- ops -----

    pub fn conv2d(&self, x: Var, w: Var, bias: Option<Var>, spec: Conv2dSpec) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = bias.map(|b| self.value(b));
        let y = kernels::conv2d_forward(&xv, &wv, bv.as_deref(), spec)?;
        let mut parents = vec![x, w];
        parents.extend(bias);
        let has_bias = bias.is_some();
        Ok(self.push(
            y,
            &parents,
            Some(Box::new(move |dy, needs| {
                let need_b = has_bias && needs[2];
                let g = kernels::conv2d_backward(&xv, &wv, dy, spec, [needs[0], needs[1], need_b])
                    .expect("shapes validated in forward");
                let mut out = vec![g.input, g.weight];
                if has_bias {
                    out.push(g.bias);
                }
                out
            })),
        ))
    }

    /// Batch normalization. Training tapes normalize with batch statistics and
    /// record a [`BnUpdate`]; inference tapes use the stored running statistics.
    pub fn batch_norm(&self, x: Var, store: &ParamStore<T>, ids: &BnIds) -> Result<Var, TensorError> {
        let gamma = self.param(store, ids.gamma);
        let beta = self.param(store, ids.beta);
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        if self.training {
            let (y, stats) = kernels::batch_norm_train(&xv, &gv, &bv)?;
            let (n, _, h, w) = xv.dims4()?;
            self.bn_updates.borrow_mut().push(BnUpdate {
                running_mean: ids.running_mean,
                running_var: ids.running_var,
                batch_mean: stats.mean.clone(),
                batch_var: stats.unbiased_var(n * h * w),
            });
            Ok(self.push(
                y,
                &[x, gamma, beta],
                Some(Box::new(move |dy, _| {
                    let (dx, dg, db) = kernels::batch_norm_train_backward(dy, &gv, &stats);
                    vec![Some(dx), Some(dg), Some(db)]
                })),
            ))
        } else {
            let rm = store.shared(ids.running_mean);
            let rv = store.shared(ids.running_var);
            let y = kernels::batch_norm_eval(&xv, &gv, &bv, &rm, &rv)?;
            Ok(self.push(
                y,
                &[x, gamma, beta],
                Some(Box::new(move |dy, _| {
                    let (dx, dg, db) = kernels::batch_norm_eval_backward(&xv, dy, &gv, &rm, &rv);
                    vec![Some(dx), Some(dg), Some(db)]
                })),
            ))
        }
    }

    pub fn relu(&self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.max(T::zero()));
        let yc = Arc::new(y.clone());
        self.push(
            y,
            &[x],
            Some(Box::new(move |dy, _| {
                let dx = dy.zip_map(&yc, |g, y| if y > T::zero() { g } else { T::zero() }).expect("same shape");
                vec![Some(dx)]
            })),
        )
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        let y = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        let yc = Arc::new(y.clone());
        self.push(
            y,
            &[x],
            Some(Box::new(move |dy, _| {
                vec![Some(dy.zip_map(&yc, |g, s| g * s * (T::one() - s)).expect("same shape"))]
            })),
        )
    }

    pub fn tanh(&self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.tanh());
        let yc = Arc::new(y.clone());
        self.push(
            y,
            &[x],
            Some(Box::new(move |dy, _| {
                vec![Some(dy.zip_map(&yc, |g, t| g * (T::one() - t * t)).expect("same shape"))]
            })),
        )
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let y = self.value(a).zip_map(&self.value(b), |x, y| x + y)?;
        Ok(self.push(y, &[a, b], Some(Box::new(|dy, _| vec![Some(dy.clone()), Some(dy.clone())]))))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let av = self.value(a);
        let bv = self.value(b);
        let y = av.zip_map(&bv, |x, y| x * y)?;
        Ok(self.push(
            y,
            &[a, b],
            Some(Box::new(move |dy, needs| {
                vec![
                    needs[0].then(|| dy.zip_map(&bv, |g, v| g * v).expect("same shape")),
                    needs[1].then(|| dy.zip_map(&av, |g, v| g * v).expect("same shape")),
                ]
            })),
        ))
    }

    pub fn scale(&self, x: Var, s: T) -> Var {
        let y = self.value(x).scale(s);
        self.push(y, &[x], Some(Box::new(move |dy, _| vec![Some(dy.scale(s))])))
    }

    /// Concatenation along the channel axis, in argument order.
    pub fn concat_channels(&self, parts: &[Var]) -> Result<Var, TensorError> {
        let values: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let first = values.first().ok_or_else(|| TensorError::Invalid("concat of nothing".into()))?;
        let (n, _, h, w) = first.dims4()?;
        let mut widths = Vec::with_capacity(values.len());
        for v in &values {
            let (vn, vc, vh, vw) = v.dims4()?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(TensorError::Shape(format!(
                    "concat: {:?} does not align with {:?}",
                    v.shape(),
                    first.shape()
                )));
            }
            widths.push(vc);
        }
        let total: usize = widths.iter().sum();
        let plane = h * w;
        let mut data = Vec::with_capacity(n * total * plane);
        for b in 0..n {
            for (v, &c) in values.iter().zip(&widths) {
                data.extend_from_slice(&v.data()[b * c * plane..(b + 1) * c * plane]);
            }
        }
        let y = Tensor::from_vec(&[n, total, h, w], data)?;
        Ok(self.push(
            y,
            parts,
            Some(Box::new(move |dy, needs| {
                let mut start = 0;
                widths
                    .iter()
                    .zip(needs)
                    .map(|(&c, &need)| {
                        let g = need.then(|| dy.channels(start, start + c).expect("in range"));
                        start += c;
                        g
                    })
                    .collect()
            })),
        ))
    }

    pub fn adaptive_avg_pool(&self, x: Var, r: usize) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let y = kernels::adaptive_avg_pool(&xv, r)?;
        let shape = xv.shape().to_vec();
        Ok(self.push(
            y,
            &[x],
            Some(Box::new(move |dy, _| vec![Some(kernels::adaptive_avg_pool_backward(dy, &shape))])),
        ))
    }

    pub fn max_pool(&self, x: Var, k: usize, stride: usize, padding: usize) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let (y, arg) = kernels::max_pool(&xv, k, stride, padding)?;
        let shape = xv.shape().to_vec();
        Ok(self.push(
            y,
            &[x],
            Some(Box::new(move |dy, _| vec![Some(kernels::max_pool_backward(dy, &arg, &shape))])),
        ))
    }

    /// Bilinear resize; an identity (no node) when the size already matches.
    pub fn resize_bilinear(&self, x: Var, oh: usize, ow: usize) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let (_, _, h, w) = xv.dims4()?;
        if (h, w) == (oh, ow) {
            return Ok(x);
        }
        let y = kernels::resize_bilinear(&xv, oh, ow)?;
        let shape = xv.shape().to_vec();
        Ok(self.push(
            y,
            &[x],
            Some(Box::new(move |dy, _| vec![Some(kernels::resize_bilinear_backward(dy, &shape))])),
        ))
    }

    /// `[n, ...]` to `[n, prod(...)]`.
    pub fn flatten(&self, x: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let n = *shape.first().ok_or_else(|| TensorError::Shape("flatten of a scalar".into()))?;
        let y = (*xv).clone().reshape(&[n, xv.len() / n.max(1)])?;
        Ok(self.push(
            y,
            &[x],
            Some(Box::new(move |dy, _| vec![Some(dy.clone().reshape(&shape).expect("same size"))])),
        ))
    }

    /// `x [n, f] * w^T [f, k] + b [k]`.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        let (n, f) = match *xv.shape() {
            [n, f] => (n, f),
            _ => return Err(TensorError::Shape(format!("linear input {:?}", xv.shape()))),
        };
        let k = match *wv.shape() {
            [k, wf] if wf == f => k,
            _ => return Err(TensorError::Shape(format!("linear weight {:?} for {f} features", wv.shape()))),
        };
        if bv.shape() != [k] {
            return Err(TensorError::Shape(format!("linear bias {:?}", bv.shape())));
        }
        let mut y = Tensor::zeros(&[n, k]);
        for row in y.data_mut().chunks_mut(k) {
            row.copy_from_slice(bv.data());
        }
        crate::gemm(false, true, n, k, f, T::one(), xv.data(), wv.data(), T::one(), y.data_mut());
        Ok(self.push(
            y,
            &[x, w, b],
            Some(Box::new(move |dy, needs| {
                let dx = needs[0].then(|| {
                    let mut dx = Tensor::zeros(&[n, f]);
                    crate::gemm(false, false, n, f, k, T::one(), dy.data(), wv.data(), T::zero(), dx.data_mut());
                    dx
                });
                let dw = needs[1].then(|| {
                    let mut dw = Tensor::zeros(&[k, f]);
                    crate::gemm(true, false, k, f, n, T::one(), dy.data(), xv.data(), T::zero(), dw.data_mut());
                    dw
                });
                let db = needs[2].then(|| {
                    let mut db = Tensor::zeros(&[k]);
                    for row in dy.data().chunks(k) {
                        for (a, &g) in db.data_mut().iter_mut().zip(row) {
                            *a += g;
                        }
                    }
                    db
                });
                vec![dx, dw, db]
            })),
        ))
    }

    /// Weighted softmax cross entropy over `[n, k, h, w]` scores, averaged over
    /// counted pixels. Returns the scalar loss and the number of counted pixels.
    pub fn cross_entropy(
        &self,
        scores: Var,
        labels: &[u8],
        ignore_index: u8,
        class_weights: &[T],
    ) -> Result<(Var, usize), TensorError> {
        let sv = self.value(scores);
        let ce = kernels::weighted_cross_entropy(&sv, labels, ignore_index, class_weights)?;
        let grad = ce.grad;
        let var = self.push(
            Tensor::scalar(ce.loss),
            &[scores],
            Some(Box::new(move |dy, _| vec![Some(grad.scale(dy.data()[0]))])),
        );
        Ok((var, ce.counted))
    }

    pub fn bce_with_logits(&self, logits: Var, targets: &Tensor<T>) -> Result<Var, TensorError> {
        let (loss, grad) = kernels::bce_with_logits(&self.value(logits), targets)?;
        Ok(self.push(
            Tensor::scalar(loss),
            &[logits],
            Some(Box::new(move |dy, _| vec![Some(grad.scale(dy.data()[0]))])),
        ))
    }

    /// `sum_i w_i * x_i` over single-element values.
    pub fn weighted_sum(&self, terms: &[(Var, T)]) -> Result<Var, TensorError> {
        let mut total = T::zero();
        for &(v, w) in terms {
            let val = self.value(v);
            if val.len() != 1 {
                return Err(TensorError::Shape(format!("weighted_sum term {:?} is not a scalar", val.shape())));
            }
            total += w * val.data()[0];
        }
        let parents: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let weights: Vec<T> = terms.iter().map(|t| t.1).collect();
        Ok(self.push(
            Tensor::scalar(total),
            &parents,
            Some(Box::new(move |dy, _| {
                let g = dy.data()[0];
                weights.iter().map(|&w| Some(Tensor::scalar(g * w))).collect()
            })),
        ))
    }

    /// `<x, c>` for a constant tensor `c`; handy for projecting outputs to a scalar.
    pub fn dot_const(&self, x: Var, c: &Tensor<T>) -> Result<Var, TensorError> {
        let xv = self.value(x);
        xv.expect_same_shape(c)?;
        let s = xv.data().iter().zip(c.data()).map(|(&a, &b)| a * b).sum::<T>();
        let c = c.clone();
        Ok(self.push(
            Tensor::scalar(s),
            &[x],
            Some(Box::new(move |dy, _| vec![Some(c.scale(dy.data()[0]))])),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ParamKind;

    fn fd_check(f: impl Fn(&Tensor<f64>) -> f64, x: &Tensor<f64>, analytic: &Tensor<f64>) {
        for i in 0..x.len() {
            let mut p = x.clone();
            p.data_mut()[i] += 1e-6;
            let mut m = x.clone();
            m.data_mut()[i] -= 1e-6;
            let fd = (f(&p) - f(&m)) / 2e-6;
            let a = analytic.data()[i];
            assert!((fd - a).abs() <= 1e-6 * (1.0 + a.abs()), "coord {i}: fd {fd} vs {a}");
        }
    }

    #[test]
    fn composite_graph_gradients_match_finite_differences() {
        let x0 = Tensor::<f64>::from_fn(&[2, 3, 5, 4], |i| (i as f64 * 0.37).sin());
        let proj = Tensor::<f64>::from_fn(&[2, 6, 5, 4], |i| (i as f64 * 0.13).cos());
        let run = |x: &Tensor<f64>| -> (f64, Option<Tensor<f64>>) {
            let tape = Tape::new(false);
            let xv = tape.input(x.clone(), true);
            let pooled = tape.adaptive_avg_pool(xv, 2).unwrap();
            let up = tape.resize_bilinear(pooled, 5, 4).unwrap();
            let gate = tape.sigmoid(up);
            let gated = tape.mul(gate, xv).unwrap();
            let sum = tape.add(gated, xv).unwrap();
            let cat = tape.concat_channels(&[sum, up]).unwrap();
            let loss = tape.dot_const(cat, &proj).unwrap();
            let val = tape.value(loss).data()[0];
            let grads = tape.backward(loss).unwrap();
            (val, grads.of(xv).cloned())
        };
        let (_, g) = run(&x0);
        fd_check(|x| run(x).0, &x0, &g.unwrap());
    }

    #[test]
    fn linear_and_bce_gradients() {
        let mut ps = ParamStore::<f64>::new();
        let w = ps.insert("w", ParamKind::Trainable, Tensor::from_fn(&[3, 4], |i| (i as f64).sin())).unwrap();
        let b = ps.insert("b", ParamKind::Trainable, Tensor::from_vec(&[3], vec![0.1, -0.2, 0.3]).unwrap()).unwrap();
        let x0 = Tensor::<f64>::from_fn(&[2, 4], |i| (i as f64 * 0.5).cos());
        let targets = Tensor::from_vec(&[2, 3], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let run = |x: &Tensor<f64>| {
            let tape = Tape::new(false);
            let xv = tape.input(x.clone(), true);
            let (wv, bv) = (tape.param(&ps, w), tape.param(&ps, b));
            let y = tape.linear(xv, wv, bv).unwrap();
            let l = tape.bce_with_logits(y, &targets).unwrap();
            let val = tape.value(l).data()[0];
            (val, tape.backward(l).unwrap().of(xv).cloned().unwrap())
        };
        let (_, g) = run(&x0);
        fd_check(|x| run(x).0, &x0, &g);
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let s0 = Tensor::<f64>::from_fn(&[1, 3, 2, 2], |i| (i as f64 * 0.9).sin() * 2.0);
        let labels = [0u8, 2, 255, 1];
        let weights = [0.5, 1.0, 2.0];
        let run = |s: &Tensor<f64>| {
            let tape = Tape::new(false);
            let sv = tape.input(s.clone(), true);
            let (l, counted) = tape.cross_entropy(sv, &labels, 255, &weights).unwrap();
            assert_eq!(counted, 3);
            let val = tape.value(l).data()[0];
            (val, tape.backward(l).unwrap().of(sv).cloned().unwrap())
        };
        let (_, g) = run(&s0);
        fd_check(|s| run(s).0, &s0, &g);
    }

    #[test]
    fn batch_norm_records_updates_only_when_training() {
        let mut ps = ParamStore::<f32>::new();
        let ids = BnIds {
            gamma: ps.insert("g", ParamKind::Trainable, Tensor::ones(&[2])).unwrap(),
            beta: ps.insert("b", ParamKind::Trainable, Tensor::zeros(&[2])).unwrap(),
            running_mean: ps.insert("m", ParamKind::Buffer, Tensor::zeros(&[2])).unwrap(),
            running_var: ps.insert("v", ParamKind::Buffer, Tensor::ones(&[2])).unwrap(),
        };
        let x = Tensor::from_fn(&[2, 2, 2, 2], |i| i as f32);
        let train = Tape::new(true);
        let xv = train.input(x.clone(), false);
        train.batch_norm(xv, &ps, &ids).unwrap();
        assert_eq!(train.take_bn_updates().len(), 1);
        let eval = Tape::new(false);
        let xv = eval.input(x.clone(), false);
        let y = eval.batch_norm(xv, &ps, &ids).unwrap();
        assert!(eval.take_bn_updates().is_empty());
        let expected = x.scale(1.0 / (1.0f32 + 1e-5).sqrt());
        assert!(eval.value(y).max_abs_diff(&expected).unwrap() < 1e-6);
    }

    #[test]
    fn parameter_used_twice_gets_summed_gradient() {
        let mut ps = ParamStore::<f64>::new();
        let w = ps.insert("w", ParamKind::Trainable, Tensor::scalar(3.0)).unwrap();
        let tape = Tape::new(false);
        let a = tape.param(&ps, w);
        let b = tape.param(&ps, w);
        let y = tape.mul(a, b).unwrap();
        let g = tape.backward(y).unwrap().params();
        assert_eq!(g[&w].data()[0], 6.0);
    }
}

//! Parameterized building blocks shared by the backbone, the DCA structures
//! and the heads. Layers only hold [`ParamId`]s; values live in a
//! [`ParamStore`] so the same architecture runs in `f32` or `f64`.

use dca_tensor::{BnIds, Conv2dSpec, ParamId, ParamKind, ParamStore, Scalar, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dca::ForwardOptions;
use crate::error::Result;

/// Everything a forward pass needs besides its inputs.
pub struct Ctx<'a, T: Scalar> {
    pub tape: &'a Tape<T>,
    pub params: &'a ParamStore<T>,
    pub options: ForwardOptions,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(tape: &'a Tape<T>, params: &'a ParamStore<T>) -> Self {
        Self { tape, params, options: ForwardOptions::default() }
    }

    pub fn with_options(mut self, options: ForwardOptions) -> Self {
        self.options = options;
        self
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.tape.param(self.params, id)
    }
}

/// Parameter initializer with a hierarchical name prefix.
pub struct Init<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Scalar> Init<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Self { store, rng, prefix: String::new() }
    }

    pub fn scope(&mut self, name: &str) -> Init<'_, T> {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        Init { store: &mut *self.store, rng: &mut *self.rng, prefix }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn add(&mut self, name: &str, kind: ParamKind, value: Tensor<T>) -> Result<ParamId> {
        let full = self.full_name(name);
        Ok(self.store.insert(full, kind, value)?)
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        Tensor::from_fn(shape, |_| T::lit(self.rng.sample::<f64, _>(StandardNormal) * std))
    }

    pub fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor<T> {
        Tensor::from_fn(shape, |_| T::lit(self.rng.random_range(-bound..bound)))
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: Conv2dSpec,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv2d {
    /// He-normal weights; bias (when present) starts at zero.
    pub fn new<T: Scalar>(
        init: &mut Init<'_, T>,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        spec: Conv2dSpec,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let w = init.normal(&[out_channels, in_channels, kernel, kernel], (2.0 / fan_in).sqrt());
        let weight = init.add("weight", ParamKind::Trainable, w)?;
        let bias = if bias { Some(init.add("bias", ParamKind::Trainable, Tensor::zeros(&[out_channels]))?) } else { None };
        Ok(Self { weight, bias, spec, in_channels, out_channels, kernel })
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = cx.p(self.weight);
        let b = self.bias.map(|b| cx.p(b));
        Ok(cx.tape.conv2d(x, w, b, self.spec)?)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub ids: BnIds,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, channels: usize) -> Result<Self> {
        Ok(Self {
            ids: BnIds {
                gamma: init.add("gamma", ParamKind::Trainable, Tensor::ones(&[channels]))?,
                beta: init.add("beta", ParamKind::Trainable, Tensor::zeros(&[channels]))?,
                running_mean: init.add("running_mean", ParamKind::Buffer, Tensor::zeros(&[channels]))?,
                running_var: init.add("running_var", ParamKind::Buffer, Tensor::ones(&[channels]))?,
            },
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<'_, T>, x: Var) -> Result<Var> {
        Ok(cx.tape.batch_norm(x, cx.params, &self.ids)?)
    }
}

/// Convolution (no bias) + batch norm + optional ReLU.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub relu: bool,
}

impl ConvBn {
    pub fn new<T: Scalar>(
        init: &mut Init<'_, T>,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        spec: Conv2dSpec,
        relu: bool,
    ) -> Result<Self> {
        let conv = Conv2d::new(&mut init.scope("conv"), in_channels, out_channels, kernel, spec, false)?;
        let bn = BatchNorm2d::new(&mut init.scope("bn"), out_channels)?;
        Ok(Self { conv, bn, relu })
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(cx, x)?;
        let y = self.bn.forward(cx, y)?;
        Ok(if self.relu { cx.tape.relu(y) } else { y })
    }

    pub fn in_channels(&self) -> usize {
        self.conv.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.conv.out_channels
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, in_features: usize, out_features: usize) -> Result<Self> {
        let bound = 1.0 / (in_features as f64).sqrt();
        let w = init.uniform(&[out_features, in_features], bound);
        let b = init.uniform(&[out_features], bound);
        Ok(Self {
            weight: init.add("weight", ParamKind::Trainable, w)?,
            bias: init.add("bias", ParamKind::Trainable, b)?,
            in_features,
            out_features,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<'_, T>, x: Var) -> Result<Var> {
        Ok(cx.tape.linear(x, cx.p(self.weight), cx.p(self.bias))?)
    }
}

pub(crate) fn channels_of<T: Scalar>(tape: &Tape<T>, v: Var) -> usize {
    tape.shape(v).get(1).copied().unwrap_or(0)
}

pub(crate) fn spatial_of<T: Scalar>(tape: &Tape<T>, v: Var) -> (usize, usize) {
    let s = tape.shape(v);
    (s[2], s[3])
}

//! The dense context-aware (DCA) module.
//!
//! A DCA module has two pathways. The contextual pathway pools its input to an
//! `r x r` grid, transforms it with two conv-BN layers and resizes the result
//! `G` back to the spatial pathway's resolution. `sigmoid(G)` is a dense,
//! per-channel attention mask that gates the transformed spatial features:
//!
//! ```text
//! mask        = sigmoid(G)
//! spatial_out = mask * conv_s(F_s) + residual
//! context_out = concat(G, spatial_out)
//! ```
//!
//! `G` is computed once and feeds both the mask and the concatenation. The
//! residual operand is `F_s` itself, or the output of the first `conv_s`
//! layer when that layer changes the channel count.

use dca_tensor::{Conv2dSpec, Scalar, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, DcaError, Result};
use crate::layers::{channels_of, spatial_of, Conv2d, ConvBn, Ctx, Init, Linear};

pub const DEFAULT_SEMANTIC_WIDTH: usize = 256;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DcaConfig {
    pub in_channels_context: usize,
    pub in_channels_spatial: usize,
    /// Working channel width of both pathways.
    pub width: usize,
    /// Side of the pooled context grid.
    pub context_scale: usize,
    pub semantic_supervision: bool,
    pub num_classes: usize,
    /// Channels after the semantic head's 1x1 reduction.
    pub semantic_width: usize,
}

impl DcaConfig {
    pub fn new(in_context: usize, in_spatial: usize, width: usize, context_scale: usize) -> Self {
        Self {
            in_channels_context: in_context,
            in_channels_spatial: in_spatial,
            width,
            context_scale,
            semantic_supervision: false,
            num_classes: 0,
            semantic_width: DEFAULT_SEMANTIC_WIDTH,
        }
    }

    pub fn with_semantic_head(mut self, num_classes: usize, semantic_width: usize) -> Self {
        self.semantic_supervision = true;
        self.num_classes = num_classes;
        self.semantic_width = semantic_width;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.context_scale < 1 {
            return Err(invalid("context scale must be at least 1"));
        }
        if self.width < 1 || self.in_channels_context < 1 || self.in_channels_spatial < 1 {
            return Err(invalid("channel counts must be positive"));
        }
        if self.semantic_supervision && (self.num_classes < 1 || self.semantic_width < 1) {
            return Err(invalid("semantic supervision needs num_classes >= 1 and a positive head width"));
        }
        Ok(())
    }
}

/// Mask nonlinearity. Only `Sigmoid` is a valid model; `Tanh` exists so the
/// check suite can verify that it catches a broken mask range.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MaskFn {
    #[default]
    Sigmoid,
    #[doc(hidden)]
    Tanh,
}

/// Test and inspection hooks for a forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ForwardOptions {
    /// Replace every attention mask with this constant.
    pub mask_override: Option<f64>,
    pub mask_fn: MaskFn,
}

/// The two inputs or outputs of a DCA module.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PathwayPair {
    pub context: Var,
    pub spatial: Var,
}

impl PathwayPair {
    /// Both pathways fed from the same map, as for the first module of a structure.
    pub fn shared(x: Var) -> Self {
        Self { context: x, spatial: x }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DcaOutput {
    pub pair: PathwayPair,
    pub mask: Var,
    pub semantic_logits: Option<Var>,
}

/// Adaptive average pooling of `f` to an `r x r` grid. `r = 1` is global average pooling.
pub fn context_pool<T: Scalar>(tape: &Tape<T>, f: Var, r: usize) -> Result<Var> {
    if r < 1 {
        return Err(invalid("context pool size must be at least 1"));
    }
    Ok(tape.adaptive_avg_pool(f, r)?)
}

pub fn compute_mask<T: Scalar>(cx: &Ctx<'_, T>, g: Var) -> Var {
    if let Some(v) = cx.options.mask_override {
        return cx.tape.constant(Tensor::full(&cx.tape.shape(g), T::lit(v)));
    }
    match cx.options.mask_fn {
        MaskFn::Sigmoid => cx.tape.sigmoid(g),
        MaskFn::Tanh => cx.tape.tanh(g),
    }
}

/// `mask * transformed + residual`.
pub fn update_spatial<T: Scalar>(tape: &Tape<T>, residual: Var, mask: Var, transformed: Var) -> Result<Var> {
    let (rs, ms, ts) = (tape.shape(residual), tape.shape(mask), tape.shape(transformed));
    if rs != ms || rs != ts {
        return Err(invalid(format!(
            "update_spatial shapes differ: residual {rs:?}, mask {ms:?}, transformed {ts:?}"
        )));
    }
    let gated = tape.mul(mask, transformed)?;
    Ok(tape.add(gated, residual)?)
}

/// Channel concatenation `g || spatial`, `g` first.
pub fn update_context<T: Scalar>(tape: &Tape<T>, g: Var, spatial: Var) -> Result<Var> {
    let (gs, ss) = (tape.shape(g), tape.shape(spatial));
    if gs.len() != 4 || ss.len() != 4 || gs[0] != ss[0] || gs[2..] != ss[2..] {
        return Err(invalid(format!("update_context cannot align {gs:?} with {ss:?}")));
    }
    if gs[1] != ss[1] {
        return Err(invalid(format!("update_context expects equal widths, got {} and {}", gs[1], ss[1])));
    }
    Ok(tape.concat_channels(&[g, spatial])?)
}

/// Multi-label presence head on a module's contextual output: 1x1 reduction,
/// ReLU, global average pooling, then one independent logit per class.
#[derive(Clone, Debug)]
pub struct SemanticHead {
    reduce: Conv2d,
    classify: Linear,
}

impl SemanticHead {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, in_channels: usize, width: usize, num_classes: usize) -> Result<Self> {
        Ok(Self {
            reduce: Conv2d::new(&mut init.scope("reduce"), in_channels, width, 1, Conv2dSpec::default(), true)?,
            classify: Linear::new(&mut init.scope("fc"), width, num_classes)?,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.classify.out_features
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<'_, T>, context_out: Var) -> Result<Var> {
        let y = self.reduce.forward(cx, context_out)?;
        let y = cx.tape.relu(y);
        let y = cx.tape.adaptive_avg_pool(y, 1)?;
        let y = cx.tape.flatten(y)?;
        self.classify.forward(cx, y)
    }
}

#[derive(Clone, Debug)]
pub struct DcaModule {
    cfg: DcaConfig,
    context_reduce: ConvBn,
    context_mix: ConvBn,
    spatial_in: ConvBn,
    spatial_out: ConvBn,
    semantic: Option<SemanticHead>,
}

impl DcaModule {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, cfg: DcaConfig) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.width;
        let context_reduce =
            ConvBn::new(&mut init.scope("conv_c.0"), cfg.in_channels_context, w, 1, Conv2dSpec::default(), true)?;
        let context_mix = ConvBn::new(&mut init.scope("conv_c.1"), w, w, 3, Conv2dSpec::same(3, 1), false)?;
        let spatial_in =
            ConvBn::new(&mut init.scope("conv_s.0"), cfg.in_channels_spatial, w, 3, Conv2dSpec::same(3, 1), true)?;
        let spatial_out = ConvBn::new(&mut init.scope("conv_s.1"), w, w, 3, Conv2dSpec::same(3, 1), false)?;
        let semantic = if cfg.semantic_supervision {
            Some(SemanticHead::new(&mut init.scope("semantic"), 2 * w, cfg.semantic_width, cfg.num_classes)?)
        } else {
            None
        };
        Ok(Self { cfg, context_reduce, context_mix, spatial_in, spatial_out, semantic })
    }

    pub fn config(&self) -> &DcaConfig {
        &self.cfg
    }

    pub fn has_semantic_head(&self) -> bool {
        self.semantic.is_some()
    }

    /// `G`: channel reduction (1x1), a 3x3 layer, then bilinear resize to the
    /// spatial pathway's size.
    pub fn context_transform<T: Scalar>(&self, cx: &Ctx<'_, T>, pooled: Var, target_h: usize, target_w: usize) -> Result<Var> {
        let c = channels_of(cx.tape, pooled);
        if c != self.cfg.in_channels_context {
            return Err(invalid(format!(
                "context pathway has {c} channels, module expects {}",
                self.cfg.in_channels_context
            )));
        }
        let g = self.context_reduce.forward(cx, pooled)?;
        let g = self.context_mix.forward(cx, g)?;
        Ok(cx.tape.resize_bilinear(g, target_h, target_w)?)
    }

    /// Two 3x3 conv-BN layers on the spatial pathway. Returns the transformed
    /// map and the residual operand of the spatial update.
    pub fn spatial_transform<T: Scalar>(&self, cx: &Ctx<'_, T>, fs: Var) -> Result<(Var, Var)> {
        let c = channels_of(cx.tape, fs);
        if c != self.cfg.in_channels_spatial {
            return Err(invalid(format!(
                "spatial pathway has {c} channels, module expects {}",
                self.cfg.in_channels_spatial
            )));
        }
        let first = self.spatial_in.forward(cx, fs)?;
        let transformed = self.spatial_out.forward(cx, first)?;
        let residual = if self.cfg.in_channels_spatial == self.cfg.width { fs } else { first };
        Ok((transformed, residual))
    }

    pub fn semantic_head<T: Scalar>(&self, cx: &Ctx<'_, T>, context_out: Var) -> Result<Option<Var>> {
        self.semantic.as_ref().map(|h| h.forward(cx, context_out)).transpose()
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<'_, T>, input: PathwayPair) -> Result<DcaOutput> {
        let (h, w) = spatial_of(cx.tape, input.spatial);
        let (ch, cw) = spatial_of(cx.tape, input.context);
        if (h, w) != (ch, cw) {
            return Err(invalid(format!("pathways misaligned: context {ch}x{cw}, spatial {h}x{w}")));
        }
        let pooled = context_pool(cx.tape, input.context, self.cfg.context_scale)?;
        let g = self.context_transform(cx, pooled, h, w)?;
        let mask = compute_mask(cx, g);
        let (transformed, residual) = self.spatial_transform(cx, input.spatial)?;
        let spatial = update_spatial(cx.tape, residual, mask, transformed)?;
        let context = update_context(cx.tape, g, spatial)?;
        let semantic_logits = self.semantic_head(cx, context)?;
        Ok(DcaOutput { pair: PathwayPair { context, spatial }, mask, semantic_logits })
    }
}

/// Checks that a chain of module configs has consistent channel plumbing:
/// each module's inputs match the previous module's outputs.
pub fn check_chain(configs: &[DcaConfig], first_context: usize, first_spatial: usize) -> Result<()> {
    let (mut ctx, mut sp) = (first_context, first_spatial);
    for (i, cfg) in configs.iter().enumerate() {
        if cfg.in_channels_context != ctx || cfg.in_channels_spatial != sp {
            return Err(DcaError::Plumbing {
                boundary: format!("module {} input", i + 1),
                detail: format!(
                    "expects context {} / spatial {}, receives {ctx} / {sp}",
                    cfg.in_channels_context, cfg.in_channels_spatial
                ),
            });
        }
        ctx = 2 * cfg.width;
        sp = cfg.width;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::{randomize_normalization, random_tensor};
    use crate::oracles::{oracle_dca_forward, oracle_dca_update};
    use dca_tensor::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn module(cfg: DcaConfig, seed: u64) -> (ParamStore<f32>, DcaModule) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = DcaModule::new(&mut Init::new(&mut store, &mut rng).scope("m"), cfg).unwrap();
        (store, m)
    }

    fn zero_weights(store: &mut ParamStore<f32>) {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if store.name(id).ends_with("weight") || store.name(id).ends_with("bias") {
                store.get_mut(id).data_mut().fill(0.0);
            }
        }
    }

    #[test]
    fn pooling_two_by_two_bins() {
        let tape = Tape::<f32>::inference();
        let x = tape.input(Tensor::from_fn(&[1, 1, 4, 4], |i| (i + 1) as f32), false);
        let p = tape.value(context_pool(&tape, x, 2).unwrap());
        assert_eq!(p.shape(), [1, 1, 2, 2]);
        assert_eq!(p.data(), [3.5, 5.5, 11.5, 13.5]);
    }

    #[test]
    fn pooling_to_one_is_channel_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f: Tensor<f32> = random_tensor(&mut rng, &[2, 3, 5, 7]);
        let tape = Tape::inference();
        let p = tape.value(context_pool(&tape, tape.input(f.clone(), false), 1).unwrap());
        for (i, plane) in f.data().chunks(35).enumerate() {
            let mean = plane.iter().sum::<f32>() / 35.0;
            assert!((p.data()[i] - mean).abs() < 1e-6);
        }
        assert!(context_pool(&tape, tape.input(f, false), 0).is_err());
    }

    #[test]
    fn mask_values() {
        let tape = Tape::<f64>::inference();
        let store = ParamStore::new();
        let cx = Ctx::new(&tape, &store);
        let at = |v: f64| tape.value(compute_mask(&cx, tape.input(Tensor::full(&[1, 2, 2, 2], v), false)));
        assert!(at(0.0).data().iter().all(|&m| m == 0.5));
        assert!(at(3f64.ln()).data().iter().all(|&m| (m - 0.75).abs() < 1e-15));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g: Tensor<f64> = random_tensor::<f64>(&mut rng, &[1, 1, 1, 200]).scale(5.0);
        let m = tape.value(compute_mask(&cx, tape.input(g.clone(), false)));
        let mut pairs: Vec<(f64, f64)> = g.data().iter().copied().zip(m.data().iter().copied()).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        assert!(pairs.iter().all(|&(_, v)| v > 0.0 && v < 1.0));
        assert!(pairs.windows(2).all(|w| w[0].1 <= w[1].1));
    }

    #[test]
    fn context_transform_shapes_and_zero_weights() {
        let (mut store, m) = module(DcaConfig::new(1024, 512, 512, 4), 2);
        let tape = Tape::inference();
        let cx = Ctx::new(&tape, &store);
        let pooled = tape.input(Tensor::ones(&[2, 1024, 4, 4]), false);
        assert_eq!(tape.shape(m.context_transform(&cx, pooled, 16, 16).unwrap()), [2, 512, 16, 16]);
        let wrong = tape.input(Tensor::ones(&[2, 1000, 4, 4]), false);
        assert!(m.context_transform(&cx, wrong, 16, 16).is_err());

        zero_weights(&mut store);
        let tape = Tape::inference();
        let cx = Ctx::new(&tape, &store);
        let g = m.context_transform(&cx, tape.input(Tensor::ones(&[1, 1024, 4, 4]), false), 8, 8).unwrap();
        assert!(tape.value(g).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn spatial_transform_shapes_and_zero_weights() {
        let (store, m) = module(DcaConfig::new(2048, 2048, 512, 1), 3);
        let tape = Tape::inference();
        let cx = Ctx::new(&tape, &store);
        let (t, r) = m.spatial_transform(&cx, tape.input(Tensor::ones(&[1, 2048, 16, 16]), false)).unwrap();
        assert_eq!((tape.shape(t), tape.shape(r)), (vec![1, 512, 16, 16], vec![1, 512, 16, 16]));

        let (mut store2, m2) = module(DcaConfig::new(512, 512, 512, 1), 4);
        zero_weights(&mut store2);
        let tape = Tape::inference();
        let cx = Ctx::new(&tape, &store2);
        let (t, r) = m2.spatial_transform(&cx, tape.input(Tensor::ones(&[1, 512, 16, 16]), false)).unwrap();
        assert_eq!(tape.shape(t), [1, 512, 16, 16]);
        assert!(tape.value(t).data().iter().all(|&v| v == 0.0));
        // Equal widths: the residual is the input itself.
        assert!(tape.value(r).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn spatial_update_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let fs: Tensor<f32> = random_tensor(&mut rng, &[1, 4, 5, 5]);
        let ft: Tensor<f32> = random_tensor(&mut rng, &[1, 4, 5, 5]);
        let mask = Tensor::from_fn(&[1, 4, 5, 5], |i| (i as f32 * 0.37).fract());
        let tape = Tape::inference();
        let v = |t: &Tensor<f32>| tape.input(t.clone(), false);

        let zero = tape.value(update_spatial(&tape, v(&fs), v(&Tensor::zeros(&[1, 4, 5, 5])), v(&ft)).unwrap());
        assert_eq!(zero.data(), fs.data());
        let twice = tape.value(update_spatial(&tape, v(&fs), v(&Tensor::ones(&[1, 4, 5, 5])), v(&fs)).unwrap());
        assert!(twice.data().iter().zip(fs.data()).all(|(a, b)| *a == 2.0 * b));
        let got = tape.value(update_spatial(&tape, v(&fs), v(&mask), v(&ft)).unwrap());
        let want = oracle_dca_update(&fs, &mask, &ft).unwrap();
        assert!(got.cast::<f64>().max_abs_diff(&want).unwrap() <= 1e-6);
        assert!(update_spatial(&tape, v(&fs), v(&Tensor::zeros(&[1, 4, 5, 4])), v(&ft)).is_err());
    }

    #[test]
    fn context_update_concatenates_in_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g: Tensor<f32> = random_tensor(&mut rng, &[1, 512, 16, 16]);
        let s: Tensor<f32> = random_tensor(&mut rng, &[1, 512, 16, 16]);
        let tape = Tape::inference();
        let out = tape.value(update_context(&tape, tape.input(g.clone(), false), tape.input(s.clone(), false)).unwrap());
        assert_eq!(out.shape(), [1, 1024, 16, 16]);
        assert_eq!(out.channels(0, 512).unwrap(), g);
        assert_eq!(out.channels(512, 1024).unwrap(), s);
        let bad = tape.input(Tensor::zeros(&[1, 512, 8, 16]), false);
        assert!(update_context(&tape, tape.input(g, false), bad).is_err());
    }

    #[test]
    fn forward_shape_algebra_with_shared_input() {
        let (store, m) = module(DcaConfig::new(6, 6, 4, 2).with_semantic_head(3, 5), 7);
        let tape = Tape::new(true);
        let cx = Ctx::new(&tape, &store);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = tape.input(random_tensor(&mut rng, &[2, 6, 7, 9]), false);
        let out = m.forward(&cx, PathwayPair::shared(x)).unwrap();
        assert_eq!(tape.shape(out.pair.spatial), [2, 4, 7, 9]);
        assert_eq!(tape.shape(out.pair.context), [2, 8, 7, 9]);
        assert_eq!(tape.shape(out.mask), [2, 4, 7, 9]);
        assert_eq!(tape.shape(out.semantic_logits.unwrap()), [2, 3]);
        assert!(tape.value(out.pair.context).all_finite());
    }

    #[test]
    fn forward_matches_oracle_composition() {
        let cfg = DcaConfig::new(8, 8, 8, 2);
        let (mut store, m) = module(cfg.clone(), 8);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        randomize_normalization(&mut store, &mut rng);
        let x: Tensor<f32> = random_tensor(&mut rng, &[1, 8, 6, 6]);
        let tape = Tape::inference();
        let cx = Ctx::new(&tape, &store);
        let out = m.forward(&cx, PathwayPair::shared(tape.input(x.clone(), false))).unwrap();
        let want = oracle_dca_forward(&store, "m", &cfg, &x, &x).unwrap();
        assert!(tape.value(out.pair.context).cast::<f64>().max_abs_diff(&want.context).unwrap() <= 1e-6);
        assert!(tape.value(out.pair.spatial).cast::<f64>().max_abs_diff(&want.spatial).unwrap() <= 1e-6);
    }

    #[test]
    fn semantic_head_shape() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let head = SemanticHead::new(&mut Init::new(&mut store, &mut rng), 1024, 256, 21).unwrap();
        let tape = Tape::inference();
        let cx = Ctx::new(&tape, &store);
        let l = head.forward(&cx, tape.input(Tensor::ones(&[4, 1024, 16, 16]), false)).unwrap();
        assert_eq!(tape.shape(l), [4, 21]);
        assert_eq!(head.num_classes(), 21);
    }

    #[test]
    fn samples_are_independent_in_inference() {
        let (mut store, m) = module(DcaConfig::new(3, 3, 4, 3).with_semantic_head(2, 4), 10);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        randomize_normalization(&mut store, &mut rng);
        let x: Tensor<f32> = random_tensor(&mut rng, &[2, 3, 6, 6]);
        let run = |t: Tensor<f32>| {
            let tape = Tape::inference();
            let cx = Ctx::new(&tape, &store);
            let o = m.forward(&cx, PathwayPair::shared(tape.input(t, false))).unwrap();
            ((*tape.value(o.pair.context)).clone(), (*tape.value(o.semantic_logits.unwrap())).clone())
        };
        let (both, logits) = run(x.clone());
        let (a, la) = run(x.sample(0).unwrap());
        let (b, lb) = run(x.sample(1).unwrap());
        assert!(both.max_abs_diff(&Tensor::stack(&[a, b]).unwrap()).unwrap() <= 1e-6);
        assert!(logits.max_abs_diff(&Tensor::stack(&[la, lb]).unwrap().reshape(&[2, 2]).unwrap()).unwrap() <= 1e-6);
    }

    #[test]
    fn same_seed_same_output() {
        let run = || {
            let (store, m) = module(DcaConfig::new(3, 3, 4, 2), 11);
            let x: Tensor<f32> = random_tensor(&mut ChaCha8Rng::seed_from_u64(11), &[1, 3, 5, 5]);
            let tape = Tape::new(true);
            let cx = Ctx::new(&tape, &store);
            let o = m.forward(&cx, PathwayPair::shared(tape.input(x, false))).unwrap();
            (*tape.value(o.pair.context)).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn broken_chain_names_the_boundary() {
        let good = [DcaConfig::new(64, 64, 16, 2), DcaConfig::new(32, 16, 16, 4)];
        check_chain(&good, 64, 64).unwrap();
        let bad = [DcaConfig::new(64, 64, 16, 2), DcaConfig::new(32, 32, 16, 4)];
        match check_chain(&bad, 64, 64) {
            Err(DcaError::Plumbing { boundary, .. }) => assert_eq!(boundary, "module 2 input"),
            other => panic!("expected a plumbing error, got {other:?}"),
        }
    }
}

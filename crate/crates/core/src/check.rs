//! The verification suite behind `dcanet check`.
//!
//! `fast` runs structural invariants on small random instances. `full` adds
//! the loop-oracle conformance sweeps, double-precision gradient checks and a
//! tiny end-to-end ordering run. Every check is named so a failure points at
//! the broken property.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use dca_tensor::{ParamKind, ParamStore, Scalar, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, BackbonePreset};
use crate::config::ExperimentConfig;
use crate::data::SynthSpec;
use crate::dca::{context_pool, update_spatial, DcaConfig, DcaModule, ForwardOptions, MaskFn, PathwayPair};
use crate::error::{invalid, Result};
use crate::experiment::{run_ordering_experiment, Splits};
use crate::layers::{Ctx, Init};
use crate::metrics::ConfusionMatrix;
use crate::network::{LossWeights, Model, ModelConfig};
use crate::oracles::{
    check_gradients, oracle_context_pool, oracle_dca_forward, oracle_dca_update, GradCheckOptions, GradCheckReport,
};
use crate::structures::{
    Cascade, FinalTap, Pyramid, ScaleSchedule, StructureKind, CASCADE_SCALES, PYRAMID_MODULES_PER_BRANCH,
    PYRAMID_SCALES,
};
use crate::train::{poly_lr, TrainConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Level {
    #[default]
    Fast,
    Full,
}

impl FromStr for Level {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "fast" => Ok(Self::Fast),
            "full" => Ok(Self::Full),
            other => Err(format!("unknown level `{other}` (expected fast or full)")),
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct CheckOptions {
    pub level: Level,
    /// Mask nonlinearity used by the mask checks. Anything but the default
    /// sigmoid is a deliberately injected fault.
    pub mask_fn: MaskFn,
}

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default)]
pub struct CheckReport {
    pub outcomes: Vec<CheckOutcome>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.outcomes.iter().all(|o| o.passed)
    }

    pub fn failures(&self) -> Vec<&'static str> {
        self.outcomes.iter().filter(|o| !o.passed).map(|o| o.name).collect()
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.outcomes.iter().map(|o| o.name.len()).max().unwrap_or(0);
        for o in &self.outcomes {
            let status = if o.passed { "PASS" } else { "FAIL" };
            writeln!(f, "{status}  {:<width$}  {:>6.2}s  {}", o.name, o.seconds, o.detail)?;
        }
        let failed = self.failures().len();
        write!(f, "{} checks, {} failed", self.outcomes.len(), failed)
    }
}

type CheckFn = fn(&CheckOptions) -> Result<String>;

const FAST: &[(&str, CheckFn)] = &[
    ("mask-range", check_mask_range),
    ("residual-identity", check_residual_identity),
    ("cascade-bookkeeping", check_cascade_bookkeeping),
    ("pyramid-bookkeeping", check_pyramid_bookkeeping),
    ("schedule-defaults", check_schedule_defaults),
    ("loss-weight-defaults", check_loss_weights),
    ("semantic-heads", check_semantic_heads),
    ("shape-contracts", check_shapes),
    ("metric-examples", check_metrics),
    ("poly-lr", check_poly_lr),
];

const FULL: &[(&str, CheckFn)] = &[
    ("oracle-context-pool", |_| conformance_detail(pool_conformance(200, 11)?)),
    ("oracle-update-spatial", |_| conformance_detail(update_conformance(200, 12)?)),
    ("oracle-dca-forward", |o| conformance_detail(dca_forward_conformance(200, 13, o.mask_fn)?)),
    ("grad-dca-module", |_| grad_detail(dca_gradient_check(21)?)),
    ("grad-cascade", |_| grad_detail(cascade_gradient_check(22)?)),
    ("ordering-smoke", check_ordering_smoke),
];

/// Largest abs difference a conformance sweep may show.
pub const CONFORMANCE_TOLERANCE: f64 = 1e-6;

pub fn run_checks(opts: &CheckOptions) -> CheckReport {
    let mut list: Vec<(&'static str, CheckFn)> = FAST.to_vec();
    if opts.level == Level::Full {
        list.extend_from_slice(FULL);
    }
    let outcomes = list
        .into_iter()
        .map(|(name, f)| {
            let start = Instant::now();
            let (passed, detail) = match f(opts) {
                Ok(d) => (true, d),
                Err(e) => (false, e.to_string()),
            };
            CheckOutcome { name, passed, detail, seconds: start.elapsed().as_secs_f64() }
        })
        .collect();
    CheckReport { outcomes }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(invalid(msg()))
    }
}

fn conformance_detail(max_diff: f64) -> Result<String> {
    ensure(max_diff <= CONFORMANCE_TOLERANCE, || format!("max abs diff {max_diff:.3e} exceeds {CONFORMANCE_TOLERANCE:e}"))?;
    Ok(format!("max abs diff {max_diff:.3e}"))
}

fn grad_detail(r: GradCheckReport) -> Result<String> {
    let detail = format!("{} coordinates, max rel error {:.3e} at {}", r.checked, r.max_rel_error, r.worst);
    ensure(r.passed(), || format!("{detail} exceeds {:e}", r.tolerance))?;
    Ok(detail)
}

/// Uniform entries in `[-1, 1)`.
pub fn random_tensor<T: Scalar>(rng: &mut impl Rng, shape: &[usize]) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(rng.random_range(-1.0..1.0)))
}

/// Replaces normalization affine parameters and running statistics with
/// random, well-conditioned values so inference-mode normalization is not
/// the identity.
pub fn randomize_normalization<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        // Contractive ranges keep activations near unit scale, where one f32
        // ulp stays well under the conformance tolerance.
        let range = if name.ends_with("running_var") {
            1.0..2.0
        } else if name.ends_with("gamma") {
            0.5..1.0
        } else if name.ends_with("running_mean") || name.ends_with("beta") {
            -0.5..0.5
        } else {
            continue;
        };
        for v in store.get_mut(id).data_mut() {
            *v = T::lit(rng.random_range(range.clone()));
        }
    }
}

fn small_module<T: Scalar>(rng: &mut ChaCha8Rng, cfg: DcaConfig) -> Result<(ParamStore<T>, DcaModule)> {
    let mut store = ParamStore::new();
    let module = DcaModule::new(&mut Init::new(&mut store, rng).scope("m"), cfg)?;
    randomize_normalization(&mut store, rng);
    Ok((store, module))
}

fn check_mask_range(opts: &CheckOptions) -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut seen = 0usize;
    for trial in 0..20 {
        let (c, w, r) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..6));
        let (store, module) = small_module::<f32>(&mut rng, DcaConfig::new(c, c, w, r))?;
        let x: Tensor<f32> = random_tensor(&mut rng, &[2, c, 5, 6]).scale(3.0);
        for training in [false, true] {
            let tape = Tape::new(training);
            let cx = Ctx::new(&tape, &store).with_options(ForwardOptions { mask_fn: opts.mask_fn, ..Default::default() });
            let xv = tape.input(x.clone(), false);
            let mask = tape.value(module.forward(&cx, PathwayPair::shared(xv))?.mask);
            if let Some(bad) = mask.data().iter().find(|&&m| !(m > 0.0 && m < 1.0)) {
                return Err(invalid(format!("mask value {bad} outside (0, 1) in trial {trial}")));
            }
            seen += mask.len();
        }
    }
    Ok(format!("{seen} mask values in (0, 1)"))
}

fn check_residual_identity(_: &CheckOptions) -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (c, w) in [(3, 3), (5, 3)] {
        let (store, module) = small_module::<f32>(&mut rng, DcaConfig::new(c, c, w, 2))?;
        let tape = Tape::inference();
        let cx = Ctx::new(&tape, &store).with_options(ForwardOptions { mask_override: Some(0.0), ..Default::default() });
        let x = tape.input(random_tensor(&mut rng, &[2, c, 6, 6]), false);
        let out = module.forward(&cx, PathwayPair::shared(x))?;
        let (_, residual) = module.spatial_transform(&cx, x)?;
        let (a, b) = (tape.value(out.pair.spatial), tape.value(residual));
        ensure(a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()), || {
            format!("zero mask changed the residual (in {c}, width {w})")
        })?;
    }
    Ok("spatial output equals residual bit for bit".into())
}

fn check_cascade_bookkeeping(_: &CheckOptions) -> Result<String> {
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (cin, w) = (6, 4);
    let cascade = Cascade::new(
        &mut Init::new(&mut store, &mut rng),
        cin,
        w,
        &ScaleSchedule::cascade_default(),
        FinalTap::Context,
        None,
    )?;
    for (i, m) in cascade.modules().iter().enumerate().skip(1) {
        let c = m.config();
        ensure(c.in_channels_context == 2 * w && c.in_channels_spatial == w, || {
            format!("module {} takes {} / {} channels", i + 1, c.in_channels_context, c.in_channels_spatial)
        })?;
    }
    let tape = Tape::new(true);
    let cx = Ctx::new(&tape, &store);
    let x = tape.input(random_tensor(&mut rng, &[2, cin, 8, 8]), false);
    let out = cascade.forward(&cx, x)?;
    ensure(out.masks.len() == 4, || format!("{} masks", out.masks.len()))?;
    ensure(tape.shape(out.features) == [2, w, 8, 8], || format!("output {:?}", tape.shape(out.features)))?;
    Ok(format!("modules 2..4 take context {} / spatial {w}", 2 * w))
}

fn check_pyramid_bookkeeping(_: &CheckOptions) -> Result<String> {
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (cin, w) = (6, 4);
    let pyramid = Pyramid::new(
        &mut Init::new(&mut store, &mut rng),
        cin,
        w,
        &ScaleSchedule::pyramid_default(),
        PYRAMID_MODULES_PER_BRANCH,
        None,
    )?;
    ensure(pyramid.concat_channels() == 4 * w, || format!("concat has {} channels", pyramid.concat_channels()))?;
    let tape = Tape::new(true);
    let cx = Ctx::new(&tape, &store);
    let x = tape.input(random_tensor(&mut rng, &[1, cin, 8, 8]), false);
    let out = pyramid.forward(&cx, x)?;
    ensure(out.masks.len() == 8, || format!("{} masks", out.masks.len()))?;
    ensure(tape.shape(out.features) == [1, w, 8, 8], || format!("output {:?}", tape.shape(out.features)))?;
    // Reference width: 4 x 512 = 2048 concatenated channels. Built with
    // f32 parameters but never run.
    let mut big = ParamStore::<f32>::new();
    let reference = Pyramid::new(
        &mut Init::new(&mut big, &mut rng),
        64,
        512,
        &ScaleSchedule::pyramid_default(),
        PYRAMID_MODULES_PER_BRANCH,
        None,
    )?;
    ensure(reference.concat_channels() == 2048, || format!("reference concat {}", reference.concat_channels()))?;
    Ok(format!("concat 4 x {w} channels, 8 masks; 2048 at width 512"))
}

fn check_schedule_defaults(_: &CheckOptions) -> Result<String> {
    ensure(ScaleSchedule::cascade_default().0 == CASCADE_SCALES && CASCADE_SCALES == [1, 4, 8, 16], || {
        format!("cascade default {:?}", ScaleSchedule::cascade_default().0)
    })?;
    ensure(ScaleSchedule::pyramid_default().0 == PYRAMID_SCALES && PYRAMID_SCALES == [1, 2, 3, 6], || {
        format!("pyramid default {:?}", ScaleSchedule::pyramid_default().0)
    })?;
    ensure(PYRAMID_MODULES_PER_BRANCH == 2, || "pyramid branches need 2 modules".into())?;
    Ok("[1, 4, 8, 16] and [1, 2, 3, 6] x 2".into())
}

fn check_loss_weights(_: &CheckOptions) -> Result<String> {
    let w = LossWeights::default();
    ensure((w.lambda_m, w.lambda_a, w.lambda_s) == (1.0, 0.2, 0.05), || format!("{w:?}"))?;
    Ok("(1.0, 0.2, 0.05)".into())
}

fn tiny_model(kind: StructureKind, semantic: bool) -> Result<Model> {
    let mut cfg = ModelConfig::default();
    cfg.structure.kind = kind;
    cfg.structure.width = 8;
    cfg.structure.semantic_width = 8;
    cfg.structure.semantic_supervision = semantic;
    cfg.aux_width = 8;
    Model::build(&cfg, 5)
}

fn check_semantic_heads(_: &CheckOptions) -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x: Tensor<f32> = random_tensor(&mut rng, &[1, 3, 32, 32]);
    for (kind, heads) in [(StructureKind::Cascade, 1), (StructureKind::Pyramid, 4)] {
        let mut shapes = Vec::new();
        for semantic in [false, true] {
            let model = tiny_model(kind, semantic)?;
            let tape = Tape::new(true);
            let cx = Ctx::new(&tape, &model.params);
            let out = model.net.forward(&cx, tape.input(x.clone(), false))?;
            let want = if semantic { heads } else { 0 };
            ensure(out.semantic_logits.len() == want, || {
                format!("{} with SS={semantic}: {} logit heads", kind.name(), out.semantic_logits.len())
            })?;
            for &l in &out.semantic_logits {
                ensure(tape.shape(l) == [1, 5], || format!("logits {:?}", tape.shape(l)))?;
            }
            let mut s = vec![tape.shape(out.scores)];
            s.extend(out.masks.iter().map(|&m| tape.shape(m)));
            shapes.push(s);
        }
        ensure(shapes[0] == shapes[1], || format!("{}: semantic supervision changed output shapes", kind.name()))?;
    }
    Ok("1 head on the cascade, 4 on the pyramid; shapes unchanged".into())
}

fn check_shapes(_: &CheckOptions) -> Result<String> {
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let backbone = Backbone::new(&mut Init::new(&mut store, &mut rng), &BackbonePreset::Toy.config())?;
    let tape = Tape::inference();
    let cx = Ctx::new(&tape, &store);
    let feats = backbone.forward(&cx, tape.input(random_tensor(&mut rng, &[2, 3, 64, 64]), false))?;
    ensure(tape.shape(feats.main) == [2, 256, 8, 8], || format!("toy backbone gives {:?}", tape.shape(feats.main)))?;
    let model = tiny_model(StructureKind::Cascade, true)?;
    let p = model.probabilities(&random_tensor(&mut rng, &[1, 3, 64, 64]))?;
    ensure(p.shape() == [1, 5, 64, 64], || format!("network gives {:?}", p.shape()))?;
    Ok("toy backbone [2,256,8,8]; scores [1,5,64,64]".into())
}

fn check_metrics(_: &CheckOptions) -> Result<String> {
    let cm = ConfusionMatrix::from_rows(&[vec![3, 1], vec![2, 4]])?;
    let (miou, acc) = (cm.mean_iou()?, cm.pixel_accuracy()?);
    ensure((miou - (0.5 + 4.0 / 7.0) / 2.0).abs() < 1e-12 && (acc - 0.7).abs() < 1e-12, || {
        format!("mIoU {miou}, accuracy {acc}")
    })?;
    Ok(format!("mIoU {miou:.6}, accuracy {acc}"))
}

fn check_poly_lr(_: &CheckOptions) -> Result<String> {
    let cfg = TrainConfig { base_lr: 0.01, power: 0.9, max_iter: 1000, ..TrainConfig::default() };
    let mid = poly_lr(500, &cfg);
    ensure(poly_lr(0, &cfg) == 0.01 && poly_lr(1000, &cfg) == 0.0 && (mid - 0.0053589).abs() < 1e-7, || {
        format!("lr(500) = {mid}")
    })?;
    ensure((1..=1000).all(|i| poly_lr(i, &cfg) < poly_lr(i - 1, &cfg)), || "not strictly decreasing".into())?;
    Ok(format!("lr(500) = {mid:.7}"))
}

fn check_ordering_smoke(_: &CheckOptions) -> Result<String> {
    let mut cfg = ExperimentConfig::default();
    cfg.data.train = SynthSpec { num_images: 6, image_size: 32, seed: 0, ..SynthSpec::default() };
    cfg.data.val = SynthSpec { num_images: 3, image_size: 32, seed: 1, ..SynthSpec::default() };
    cfg.train.max_iter = 3;
    cfg.train.batch_size = 2;
    cfg.model.structure.width = 8;
    cfg.model.structure.semantic_width = 8;
    cfg.model.aux_width = 8;
    let splits = Splits::from_config(&cfg)?;
    let variants = [StructureKind::None, StructureKind::Crs, StructureKind::Cascade, StructureKind::Pyramid];
    let table = run_ordering_experiment(&variants, &cfg, &splits, &[0], None)?;
    ensure(!table.incomplete && table.rows.len() == 4, || format!("incomplete table:\n{table}"))?;
    Ok("4 variants trained and evaluated".into())
}

/// Largest |context_pool - oracle| over `instances` random inputs.
pub fn pool_conformance(instances: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let shape = [rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..10), rng.random_range(1..10)];
        let r = rng.random_range(1..12);
        let f: Tensor<f32> = random_tensor(&mut rng, &shape);
        let tape = Tape::inference();
        let got = tape.value(context_pool(&tape, tape.input(f.clone(), false), r)?);
        worst = worst.max(got.cast::<f64>().max_abs_diff(&oracle_context_pool(&f, r)?)?);
    }
    Ok(worst)
}

/// Largest |update_spatial - oracle| over `instances` random inputs.
pub fn update_conformance(instances: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let shape = [rng.random_range(1..3), rng.random_range(1..5), rng.random_range(1..8), rng.random_range(1..8)];
        let fs: Tensor<f32> = random_tensor(&mut rng, &shape);
        let mask = Tensor::from_fn(&shape, |_| rng.random_range(0.0f32..1.0));
        let ft: Tensor<f32> = random_tensor(&mut rng, &shape);
        let tape = Tape::inference();
        let [a, b, c] = [&fs, &mask, &ft].map(|t| tape.input(t.clone(), false));
        let got = tape.value(update_spatial(&tape, a, b, c)?);
        worst = worst.max(got.cast::<f64>().max_abs_diff(&oracle_dca_update(&fs, &mask, &ft)?)?);
    }
    Ok(worst)
}

/// Largest difference between an inference-mode DCA module and the loop
/// oracle over every output (context, spatial, mask, semantic logits).
pub fn dca_forward_conformance(instances: usize, seed: u64, mask_fn: MaskFn) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for i in 0..instances {
        let (cc, w) = (rng.random_range(1..4), rng.random_range(1..4));
        let cs = if rng.random_bool(0.5) { w } else { rng.random_range(1..4) };
        let mut cfg = DcaConfig::new(cc, cs, w, rng.random_range(1..6));
        if i % 2 == 1 {
            cfg = cfg.with_semantic_head(3, 2);
        }
        let (store, module) = small_module::<f32>(&mut rng, cfg.clone())?;
        let (n, h, wd) = (rng.random_range(1..3), rng.random_range(2..7), rng.random_range(2..7));
        let fc: Tensor<f32> = random_tensor(&mut rng, &[n, cc, h, wd]);
        let fs: Tensor<f32> = random_tensor(&mut rng, &[n, cs, h, wd]);

        let tape = Tape::inference();
        let cx = Ctx::new(&tape, &store).with_options(ForwardOptions { mask_fn, ..Default::default() });
        let pair = PathwayPair { context: tape.input(fc.clone(), false), spatial: tape.input(fs.clone(), false) };
        let out = module.forward(&cx, pair)?;
        let want = oracle_dca_forward(&store, "m", &cfg, &fc, &fs)?;
        let diff = |v, t: &Tensor<f64>| -> Result<f64> { Ok(tape.value(v).cast::<f64>().max_abs_diff(t)?) };
        worst = worst
            .max(diff(out.pair.context, &want.context)?)
            .max(diff(out.pair.spatial, &want.spatial)?)
            .max(diff(out.mask, &want.mask)?);
        match (out.semantic_logits, &want.semantic_logits) {
            (Some(l), Some(t)) => worst = worst.max(diff(l, t)?),
            (None, None) => {}
            _ => return Err(invalid("semantic head present on one side only")),
        }
    }
    Ok(worst)
}

/// Random fixed weights over every output, so the scalar objective depends on
/// each output entry.
fn weighted_outputs(tape: &Tape<f64>, outputs: &[dca_tensor::Var], seed: u64) -> Result<dca_tensor::Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut terms = Vec::with_capacity(outputs.len());
    for &o in outputs {
        let c: Tensor<f64> = random_tensor(&mut rng, &tape.shape(o));
        terms.push((tape.dot_const(o, &c)?, 1.0));
    }
    Ok(tape.weighted_sum(&terms)?)
}

/// Central-difference check of a standalone DCA module on a 1x4x6x6 input
/// with r = 2, semantic head included, over all parameters and inputs.
pub fn dca_gradient_check(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = DcaConfig::new(4, 4, 4, 2).with_semantic_head(3, 3);
    let (store, module) = small_module::<f64>(&mut rng, cfg)?;
    let fc: Tensor<f64> = random_tensor(&mut rng, &[1, 4, 6, 6]);
    let fs: Tensor<f64> = random_tensor(&mut rng, &[1, 4, 6, 6]);
    let objective = |tape: &Tape<f64>, store: &ParamStore<f64>, x: &[dca_tensor::Var]| {
        let cx = Ctx::new(tape, store);
        let out = module.forward(&cx, PathwayPair { context: x[0], spatial: x[1] })?;
        let logits = out.semantic_logits.ok_or_else(|| invalid("semantic head missing"))?;
        weighted_outputs(tape, &[out.pair.context, out.pair.spatial, logits], seed + 1000)
    };
    check_gradients(&store, &[fc, fs], &objective, GradCheckOptions::default())
}

/// Central-difference check through a two-module cascade (scales 1 and 2)
/// on a 1x8x6x6 input, with its projection and semantic head.
pub fn cascade_gradient_check(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let cascade = Cascade::new(
        &mut Init::new(&mut store, &mut rng),
        8,
        3,
        &ScaleSchedule(vec![1, 2]),
        FinalTap::Context,
        Some((3, 3)),
    )?;
    randomize_normalization(&mut store, &mut rng);
    let x: Tensor<f64> = random_tensor(&mut rng, &[1, 8, 6, 6]);
    let objective = |tape: &Tape<f64>, store: &ParamStore<f64>, v: &[dca_tensor::Var]| {
        let cx = Ctx::new(tape, store);
        let out = cascade.forward(&cx, v[0])?;
        let mut outs = vec![out.features];
        outs.extend(out.semantic_logits);
        weighted_outputs(tape, &outs, seed + 1000)
    };
    check_gradients(&store, &[x], &objective, GradCheckOptions::default())
}

/// Counts trainable scalars, for reporting coverage.
pub fn trainable_scalars<T: Scalar>(store: &ParamStore<T>) -> usize {
    store.num_scalars(ParamKind::Trainable)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_suite_passes() {
        let report = run_checks(&CheckOptions::default());
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn tanh_mask_is_caught_by_name() {
        let report = run_checks(&CheckOptions { mask_fn: MaskFn::Tanh, ..CheckOptions::default() });
        assert!(report.failures().contains(&"mask-range"), "{report}");
    }

    #[test]
    fn level_parsing() {
        assert_eq!("full".parse::<Level>(), Ok(Level::Full));
        assert!("slow".parse::<Level>().is_err());
    }
}

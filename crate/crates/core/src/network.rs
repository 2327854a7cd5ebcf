//! Backbone, long-range structure, segmentation head and auxiliary head, plus
//! the composite training loss.

use dca_tensor::kernels::softmax_channels;
use dca_tensor::{Conv2dSpec, ParamStore, Scalar, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, BackbonePreset};
use crate::error::{invalid, DcaError, Result};
use crate::layers::{channels_of, Conv2d, ConvBn, Ctx, Init};
use crate::structures::{Structure, StructureConfig, StructureKind};

pub const IGNORE_INDEX: u8 = 255;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_m: f64,
    pub lambda_a: f64,
    pub lambda_s: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_m: 1.0, lambda_a: 0.2, lambda_s: 0.05 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_m", self.lambda_m), ("lambda_a", self.lambda_a), ("lambda_s", self.lambda_s)] {
            if !v.is_finite() || v < 0.0 {
                return Err(invalid(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

/// `lambda_m * l_m + lambda_a * l_a + lambda_s * sum(l_s)`.
pub fn total_loss(l_m: f64, l_a: f64, l_s: &[f64], w: &LossWeights) -> Result<f64> {
    w.validate()?;
    if l_m < 0.0 || l_a < 0.0 || l_s.iter().any(|&v| v < 0.0) {
        return Err(invalid("component losses must be nonnegative"));
    }
    Ok(w.lambda_m * l_m + w.lambda_a * l_a + w.lambda_s * l_s.iter().sum::<f64>())
}

/// Class-weighted cross entropy averaged over non-ignored pixels. The flag
/// is false when every pixel was ignored (the loss is then 0).
pub fn class_balanced_ce<T: Scalar>(
    tape: &Tape<T>,
    scores: Var,
    labels: &[u8],
    ignore_index: u8,
    class_weights: &[T],
) -> Result<(Var, bool)> {
    let (loss, counted) = tape.cross_entropy(scores, labels, ignore_index, class_weights)?;
    if counted == 0 {
        log::warn!("cross entropy: every pixel carries the ignore label");
    }
    Ok((loss, counted > 0))
}

/// Median-frequency balancing: `median(freq) / freq_k`, clipped to `[0.1, 10]`.
/// Frequencies are pixel fractions over non-ignored pixels; classes that never
/// occur get weight 1.
pub fn median_frequency_weights(counts: &[u64]) -> Vec<f64> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return vec![1.0; counts.len()];
    }
    let mut freqs: Vec<f64> = counts.iter().filter(|&&c| c > 0).map(|&c| c as f64 / total as f64).collect();
    freqs.sort_by(f64::total_cmp);
    let median = match freqs.len() {
        0 => return vec![1.0; counts.len()],
        n if n % 2 == 1 => freqs[n / 2],
        n => 0.5 * (freqs[n / 2 - 1] + freqs[n / 2]),
    };
    counts
        .iter()
        .map(|&c| if c == 0 { 1.0 } else { (median / (c as f64 / total as f64)).clamp(0.1, 10.0) })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackbonePreset,
    pub num_classes: usize,
    pub structure: StructureConfig,
    pub aux_head: bool,
    pub aux_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackbonePreset::Desk,
            num_classes: 5,
            structure: StructureConfig { width: 32, semantic_width: 32, ..StructureConfig::default() },
            aux_head: true,
            aux_width: 64,
        }
    }
}

/// Per-pixel classifier: 1x1 convolution, then bilinear upsampling to the image size.
#[derive(Clone, Debug)]
pub struct SegmentationHead {
    classify: Conv2d,
}

impl SegmentationHead {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, in_channels: usize, num_classes: usize) -> Result<Self> {
        Ok(Self { classify: Conv2d::new(init, in_channels, num_classes, 1, Conv2dSpec::default(), true)? })
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<'_, T>, features: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.classify.forward(cx, features)?;
        Ok(cx.tape.resize_bilinear(s, out_h, out_w)?)
    }
}

/// Deep-supervision classifier on the penultimate backbone stage.
#[derive(Clone, Debug)]
pub struct AuxHead {
    reduce: ConvBn,
    head: SegmentationHead,
}

impl AuxHead {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, in_channels: usize, width: usize, num_classes: usize) -> Result<Self> {
        Ok(Self {
            reduce: ConvBn::new(&mut init.scope("reduce"), in_channels, width, 3, Conv2dSpec::same(3, 1), true)?,
            head: SegmentationHead::new(&mut init.scope("classify"), width, num_classes)?,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<'_, T>, features: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let y = self.reduce.forward(cx, features)?;
        self.head.forward(cx, y, out_h, out_w)
    }
}

#[derive(Clone, Debug)]
pub struct ModelOutput {
    /// `[n, K, H, W]` class scores at input resolution.
    pub scores: Var,
    pub aux_scores: Option<Var>,
    pub masks: Vec<Var>,
    pub semantic_logits: Vec<Var>,
}

/// Loss values of one forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub main: f64,
    pub aux: f64,
    /// Sum over supervised modules.
    pub sem: f64,
}

/// Supervision for one batch.
pub struct Targets<'a, T> {
    /// `n * H * W` labels, row-major per image.
    pub labels: &'a [u8],
    /// `[n, K]` multi-hot class presence.
    pub present: &'a Tensor<T>,
    pub class_weights: &'a [T],
}

#[derive(Clone, Debug)]
pub struct Network {
    cfg: ModelConfig,
    backbone: Backbone,
    structure: Option<Structure>,
    head: SegmentationHead,
    aux: Option<AuxHead>,
}

impl Network {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, cfg: &ModelConfig) -> Result<Self> {
        if cfg.num_classes < 2 {
            return Err(invalid("num_classes must be at least 2"));
        }
        let bcfg = cfg.backbone.config();
        let backbone = Backbone::new(init, &bcfg)?;
        let structure = Structure::build(init, &cfg.structure, bcfg.out_channels(), cfg.num_classes)?;
        let head_in = cfg.structure.out_channels(bcfg.out_channels());
        let head = SegmentationHead::new(&mut init.scope("head"), head_in, cfg.num_classes)?;
        let aux = if cfg.aux_head {
            Some(AuxHead::new(&mut init.scope("aux"), bcfg.aux_channels(), cfg.aux_width, cfg.num_classes)?)
        } else {
            None
        };
        Ok(Self { cfg: cfg.clone(), backbone, structure, head, aux })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn backbone_config(&self) -> &BackboneConfig {
        self.backbone.config()
    }

    pub fn structure(&self) -> Option<&Structure> {
        self.structure.as_ref()
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<'_, T>, images: Var) -> Result<ModelOutput> {
        let shape = cx.tape.shape(images);
        if shape.len() != 4 || shape[1] != 3 {
            return Err(invalid(format!("images must be [n, 3, h, w], got {shape:?}")));
        }
        let (h, w) = (shape[2], shape[3]);
        let feats = self.backbone.forward(cx, images)?;
        let (features, masks, semantic_logits) = match &self.structure {
            Some(s) => {
                let out = s.forward(cx, feats.main)?;
                (out.features, out.masks, out.semantic_logits)
            }
            None => (feats.main, Vec::new(), Vec::new()),
        };
        let got = channels_of(cx.tape, features);
        let want = self.cfg.structure.out_channels(self.backbone.config().out_channels());
        if got != want {
            return Err(DcaError::Plumbing {
                boundary: "structure -> segmentation head".into(),
                detail: format!("head expects {want} channels, structure produced {got}"),
            });
        }
        let scores = self.head.forward(cx, features, h, w)?;
        let aux_scores = self.aux.as_ref().map(|a| a.forward(cx, feats.aux, h, w)).transpose()?;
        Ok(ModelOutput { scores, aux_scores, masks, semantic_logits })
    }

    /// Composite loss on the tape plus its component values.
    pub fn loss<T: Scalar>(
        &self,
        tape: &Tape<T>,
        out: &ModelOutput,
        targets: &Targets<'_, T>,
        weights: &LossWeights,
    ) -> Result<(Var, LossBreakdown)> {
        weights.validate()?;
        let (main, _) = class_balanced_ce(tape, out.scores, targets.labels, IGNORE_INDEX, targets.class_weights)?;
        let mut terms = vec![(main, T::lit(weights.lambda_m))];
        let value = |v: Var| tape.value(v).data()[0].as_f64();
        let mut parts = LossBreakdown { main: value(main), ..LossBreakdown::default() };
        if let Some(a) = out.aux_scores {
            let (aux, _) = class_balanced_ce(tape, a, targets.labels, IGNORE_INDEX, targets.class_weights)?;
            parts.aux = value(aux);
            terms.push((aux, T::lit(weights.lambda_a)));
        }
        for &logits in &out.semantic_logits {
            let s = tape.bce_with_logits(logits, targets.present)?;
            parts.sem += value(s);
            terms.push((s, T::lit(weights.lambda_s)));
        }
        let total = tape.weighted_sum(&terms)?;
        parts.total = value(total);
        Ok((total, parts))
    }
}

/// A network together with its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub net: Network,
    pub params: ParamStore<f32>,
}

impl Model {
    /// Builds the network with parameters drawn from a ChaCha stream seeded by `seed`.
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Network::new(&mut Init::new(&mut params, &mut rng), cfg)?;
        Ok(Self { net, params })
    }

    /// Rebuilds the network for `cfg` and restores every tensor from `ckpt`.
    pub fn from_checkpoint(cfg: &ModelConfig, ckpt: &crate::checkpoint::Checkpoint) -> Result<Self> {
        let mut model = Self::build(cfg, 0)?;
        ckpt.restore_into(&mut model.params)?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        self.net.config()
    }

    /// Inference-mode class probabilities, `[n, K, H, W]`.
    pub fn probabilities(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let tape = Tape::inference();
        let cx = Ctx::new(&tape, &self.params);
        let x = tape.input(images.clone(), false);
        let out = self.net.forward(&cx, x)?;
        Ok(softmax_channels(&tape.value(out.scores))?)
    }

    /// Inference-mode masks of every DCA module.
    pub fn masks(&self, images: &Tensor<f32>) -> Result<Vec<Tensor<f32>>> {
        let tape = Tape::inference();
        let cx = Ctx::new(&tape, &self.params);
        let x = tape.input(images.clone(), false);
        let out = self.net.forward(&cx, x)?;
        Ok(out.masks.iter().map(|&m| (*tape.value(m)).clone()).collect())
    }

    pub fn has_masks(&self) -> bool {
        !matches!(self.config().structure.kind, StructureKind::None | StructureKind::Crs)
    }
}

/// Per-pixel argmax over the class axis of `[n, K, H, W]` scores.
pub fn argmax_labels<T: Scalar>(scores: &Tensor<T>) -> Result<Vec<u8>> {
    let (n, k, h, w) = scores.dims4()?;
    if k > 255 {
        return Err(invalid("more than 255 classes cannot be stored as u8 labels"));
    }
    let d = scores.data();
    let plane = h * w;
    let mut out = vec![0u8; n * plane];
    for b in 0..n {
        for p in 0..plane {
            let mut best = 0;
            for c in 1..k {
                if d[(b * k + c) * plane + p] > d[(b * k + best) * plane + p] {
                    best = c;
                }
            }
            out[b * plane + p] = best as u8;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::random_tensor;

    fn tiny(kind: StructureKind) -> ModelConfig {
        let mut cfg = ModelConfig::default();
        cfg.structure.kind = kind;
        cfg.structure.width = 8;
        cfg.structure.semantic_width = 8;
        cfg.aux_width = 8;
        cfg
    }

    #[test]
    fn backbone_contracts() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bcfg = BackbonePreset::Toy.config();
        assert_eq!(&bcfg.dilations[2..], [2, 4]);
        assert_eq!(&BackbonePreset::Resnet101.config().dilations[2..], [2, 4]);
        let b = Backbone::new(&mut Init::new(&mut store, &mut rng), &bcfg).unwrap();
        let tape = Tape::inference();
        let cx = Ctx::new(&tape, &store);
        let f = b.forward(&cx, tape.input(Tensor::ones(&[2, 3, 64, 64]), false)).unwrap();
        assert_eq!(tape.shape(f.main), [2, 256, 8, 8]);
        assert_eq!(tape.shape(f.aux), [2, 128, 8, 8]);
        // Sides that are not multiples of 8 round up.
        let f = b.forward(&cx, tape.input(Tensor::ones(&[1, 3, 60, 44]), false)).unwrap();
        assert_eq!(tape.shape(f.main), [1, 256, 8, 6]);
        assert_eq!((BackboneConfig::output_side(60), BackboneConfig::output_side(512)), (8, 64));
    }

    #[test]
    fn resnet101_layout() {
        let cfg = BackbonePreset::Resnet101.config();
        assert_eq!((cfg.out_channels(), cfg.aux_channels(), cfg.total_stride()), (2048, 1024, 8));
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = Backbone::new(&mut Init::new(&mut store, &mut rng), &cfg).unwrap();
        let tape = Tape::inference();
        let cx = Ctx::new(&tape, &store);
        let f = b.forward(&cx, tape.input(Tensor::ones(&[1, 3, 32, 32]), false)).unwrap();
        assert_eq!(tape.shape(f.main), [1, 2048, 4, 4]);
    }

    #[test]
    fn bad_backbone_stride_is_rejected() {
        let mut cfg = BackbonePreset::Toy.config();
        cfg.strides = [2, 2, 2, 1];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn head_shapes_constant_upsampling_and_argmax() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let head = SegmentationHead::new(&mut Init::new(&mut store, &mut rng), 512, 5).unwrap();
        let tape = Tape::inference();
        let cx = Ctx::new(&tape, &store);
        let s = head.forward(&cx, tape.input(random_tensor(&mut rng, &[1, 512, 8, 8]), false), 64, 64).unwrap();
        assert_eq!(tape.shape(s), [1, 5, 64, 64]);

        let w = store.id("weight").unwrap();
        store.get_mut(w).data_mut().fill(0.0);
        let bias = store.id("bias").unwrap();
        store.set(bias, Tensor::from_vec(&[5], vec![0.1, -2.0, 3.0, 0.0, 1.0]).unwrap()).unwrap();
        let tape = Tape::inference();
        let cx = Ctx::new(&tape, &store);
        let s = tape.value(head.forward(&cx, tape.input(random_tensor(&mut rng, &[1, 512, 8, 8]), false), 64, 64).unwrap());
        for (c, plane) in s.data().chunks(64 * 64).enumerate() {
            assert!(plane.iter().all(|&v| v == plane[0]), "class {c} plane not constant");
        }
        assert!(argmax_labels(&s).unwrap().iter().all(|&l| l == 2));
    }

    fn ce(scores: Tensor<f64>, labels: &[u8], weights: &[f64]) -> (f64, bool) {
        let tape = Tape::new(true);
        let (l, counted) = class_balanced_ce(&tape, tape.input(scores, false), labels, IGNORE_INDEX, weights).unwrap();
        (tape.value(l).data()[0], counted)
    }

    #[test]
    fn cross_entropy_cases() {
        let one_hot = Tensor::from_vec(&[1, 2, 1, 2], vec![50.0, -50.0, -50.0, 50.0]).unwrap();
        assert!(ce(one_hot, &[0, 1], &[1.0, 1.0]).0 <= 1e-6);
        let (l, _) = ce(Tensor::zeros(&[1, 5, 2, 3]), &[0, 1, 2, 3, 4, 0], &[1.0; 5]);
        assert!((l - 5f64.ln()).abs() < 1e-12);
        let (l, counted) = ce(Tensor::zeros(&[1, 2, 1, 2]), &[IGNORE_INDEX, IGNORE_INDEX], &[1.0, 1.0]);
        assert_eq!((l, counted), (0.0, false));
    }

    #[test]
    fn cross_entropy_matches_pixel_loop() {
        // Two classes, 2x2 map, one ignored pixel, unequal weights.
        let s = [0.3, -1.2, 2.0, 0.5, -0.4, 0.9, 1.1, 0.0];
        let labels = [1u8, 0, IGNORE_INDEX, 1];
        let weights = [0.5, 2.0];
        let (got, _) = ce(Tensor::from_vec(&[1, 2, 2, 2], s.to_vec()).unwrap(), &labels, &weights);
        let mut sum = 0.0;
        let mut n = 0.0;
        for p in 0..4 {
            if labels[p] == IGNORE_INDEX {
                continue;
            }
            let (a, b) = (s[p], s[4 + p]);
            let z = a.exp() + b.exp();
            let picked = if labels[p] == 0 { a } else { b };
            sum += weights[labels[p] as usize] * -(picked.exp() / z).ln();
            n += 1.0;
        }
        assert!((got - sum / n).abs() < 1e-6);
    }

    #[test]
    fn ignored_pixels_do_not_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s: Tensor<f64> = random_tensor(&mut rng, &[1, 3, 2, 2]);
        let a = ce(s.clone(), &[0, IGNORE_INDEX, 2, 1], &[1.0, 0.5, 2.0]).0;
        let b = ce(s, &[0, IGNORE_INDEX, 2, 1], &[1.0, 0.5, 2.0]).0;
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        assert_eq!((w.lambda_m, w.lambda_a, w.lambda_s), (1.0, 0.2, 0.05));
        assert!((total_loss(2.0, 1.0, &[1.5, 2.5], &w).unwrap() - 2.4).abs() < 1e-12);
        let only_main = LossWeights { lambda_a: 0.0, lambda_s: 0.0, ..w };
        assert_eq!(total_loss(1.7, 9.0, &[3.0], &only_main).unwrap(), 1.7);
        let base = total_loss(2.0, 1.0, &[4.0], &LossWeights { lambda_s: 0.0, ..w }).unwrap();
        let once = total_loss(2.0, 1.0, &[4.0], &w).unwrap() - base;
        let twice = total_loss(2.0, 1.0, &[4.0], &LossWeights { lambda_s: 0.1, ..w }).unwrap() - base;
        assert!((twice - 2.0 * once).abs() < 1e-12);
        assert!(total_loss(-1.0, 0.0, &[], &w).is_err());
        assert!(LossWeights { lambda_a: -0.1, ..w }.validate().is_err());
    }

    #[test]
    fn saturated_presence_logits() {
        let tape = Tape::<f64>::new(true);
        let present = Tensor::from_vec(&[1, 4], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let logits = Tensor::from_vec(&[1, 4], vec![20.0, -20.0, 20.0, -20.0]).unwrap();
        let l = tape.bce_with_logits(tape.input(logits, false), &present).unwrap();
        assert!(tape.value(l).data()[0] <= 4.0 * 1e-8);
    }

    #[test]
    fn median_frequency_examples() {
        // Frequencies 0.5, 0.25, 0.25 -> median 0.25.
        assert_eq!(median_frequency_weights(&[50, 25, 25]), vec![0.5, 1.0, 1.0]);
        let w = median_frequency_weights(&[100_000, 10, 10, 0]);
        assert_eq!(w[0], 0.1);
        assert_eq!(w[3], 1.0);
    }

    #[test]
    fn every_parameter_gets_a_gradient() {
        for kind in [StructureKind::Cascade, StructureKind::Pyramid, StructureKind::Crs] {
            let model = Model::build(&tiny(kind), 4).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let tape = Tape::new(true);
            let cx = Ctx::new(&tape, &model.params);
            let out = model.net.forward(&cx, tape.input(random_tensor(&mut rng, &[2, 3, 32, 32]), false)).unwrap();
            let labels: Vec<u8> = (0..2 * 32 * 32).map(|i| ((i / 97) % 5) as u8).collect();
            let present = Tensor::ones(&[2, 5]);
            let targets = Targets { labels: &labels, present: &present, class_weights: &[1.0; 5] };
            let (loss, parts) = model.net.loss(&tape, &out, &targets, &LossWeights::default()).unwrap();
            assert!(parts.main >= 0.0 && parts.aux >= 0.0 && parts.sem >= 0.0);
            let grads = tape.backward(loss).unwrap().params();
            for id in model.params.trainable() {
                let g = grads.get(&id).unwrap_or_else(|| panic!("{kind:?}: no gradient for {}", model.params.name(id)));
                assert!(g.all_finite());
                assert!(g.data().iter().any(|&v| v != 0.0), "{kind:?}: zero gradient for {}", model.params.name(id));
            }
        }
    }

    #[test]
    fn baseline_is_backbone_then_head() {
        let model = Model::build(&tiny(StructureKind::None), 5).unwrap();
        assert!(model.net.structure().is_none() && !model.has_masks());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Tensor<f32> = random_tensor(&mut rng, &[1, 3, 32, 32]);
        let tape = Tape::inference();
        let cx = Ctx::new(&tape, &model.params);
        let xv = tape.input(x, false);
        let out = model.net.forward(&cx, xv).unwrap();
        assert!(out.masks.is_empty() && out.semantic_logits.is_empty());
        let feats = model.net.backbone.forward(&cx, xv).unwrap();
        let direct = model.net.head.forward(&cx, feats.main, 32, 32).unwrap();
        assert_eq!(*tape.value(out.scores), *tape.value(direct));
    }

    #[test]
    fn variants_build_and_validate_classes() {
        for kind in [StructureKind::None, StructureKind::Crs, StructureKind::Cascade, StructureKind::Pyramid] {
            let model = Model::build(&tiny(kind), 6).unwrap();
            let p = model.probabilities(&Tensor::zeros(&[1, 3, 16, 16])).unwrap();
            assert_eq!(p.shape(), [1, 5, 16, 16]);
            let sum: f32 = (0..5).map(|c| p.data()[c * 256]).sum();
            assert!((sum - 1.0).abs() < 1e-5);
        }
        assert!(Model::build(&ModelConfig { num_classes: 1, ..ModelConfig::default() }, 0).is_err());
    }
}

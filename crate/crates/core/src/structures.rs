//! Long-range compositions of DCA modules: a cascade with growing context
//! grids, a four-branch pyramid, and the plain cascaded-residual (CRS)
//! structure used as an ablation baseline.

use dca_tensor::{Conv2dSpec, Scalar, Var};
use serde::{Deserialize, Serialize};

use crate::dca::{check_chain, DcaConfig, DcaModule, PathwayPair, DEFAULT_SEMANTIC_WIDTH};
use crate::error::{invalid, DcaError, Result};
use crate::layers::{ConvBn, Ctx, Init};

pub const CASCADE_SCALES: [usize; 4] = [1, 4, 8, 16];
pub const PYRAMID_SCALES: [usize; 4] = [1, 2, 3, 6];
pub const PYRAMID_MODULES_PER_BRANCH: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StructureKind {
    /// Backbone straight into the segmentation layer.
    None,
    Crs,
    Cascade,
    Pyramid,
}

impl StructureKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Crs => "crs",
            Self::Cascade => "cascade",
            Self::Pyramid => "pyramid",
        }
    }
}

impl std::str::FromStr for StructureKind {
    type Err = DcaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "baseline" => Ok(Self::None),
            "crs" => Ok(Self::Crs),
            "cascade" => Ok(Self::Cascade),
            "pyramid" => Ok(Self::Pyramid),
            other => Err(invalid(format!("unknown structure `{other}`"))),
        }
    }
}

/// Which cascade output feeds the final 1x1 projection.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinalTap {
    Spatial,
    #[default]
    Context,
}

/// Context grid sizes, one per module position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScaleSchedule(pub Vec<usize>);

impl ScaleSchedule {
    pub fn cascade_default() -> Self {
        Self(CASCADE_SCALES.to_vec())
    }

    pub fn pyramid_default() -> Self {
        Self(PYRAMID_SCALES.to_vec())
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.is_empty() {
            return Err(invalid("scale schedule is empty"));
        }
        if let Some(bad) = self.0.iter().find(|&&r| r < 1) {
            return Err(invalid(format!("scale schedule entry {bad} is below 1")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StructureConfig {
    pub kind: StructureKind,
    pub width: usize,
    /// Cascade module scales, or one scale per pyramid branch. Empty means the
    /// structure's default.
    pub schedule: Vec<usize>,
    pub modules_per_branch: usize,
    pub final_tap: FinalTap,
    pub semantic_supervision: bool,
    pub semantic_width: usize,
    /// Residual blocks in the CRS baseline; 0 means "same as the cascade length".
    pub crs_depth: usize,
}

impl Default for StructureConfig {
    fn default() -> Self {
        Self {
            kind: StructureKind::Cascade,
            width: 512,
            schedule: Vec::new(),
            modules_per_branch: PYRAMID_MODULES_PER_BRANCH,
            final_tap: FinalTap::Context,
            semantic_supervision: true,
            semantic_width: DEFAULT_SEMANTIC_WIDTH,
            crs_depth: 0,
        }
    }
}

impl StructureConfig {
    pub fn schedule(&self) -> ScaleSchedule {
        if !self.schedule.is_empty() {
            return ScaleSchedule(self.schedule.clone());
        }
        match self.kind {
            StructureKind::Pyramid => ScaleSchedule::pyramid_default(),
            _ => ScaleSchedule::cascade_default(),
        }
    }

    pub fn crs_depth(&self) -> usize {
        if self.crs_depth > 0 {
            self.crs_depth
        } else {
            self.schedule().len()
        }
    }

    /// Output channels of the structure for a given input width.
    pub fn out_channels(&self, in_channels: usize) -> usize {
        match self.kind {
            StructureKind::None => in_channels,
            _ => self.width,
        }
    }
}

/// Final features plus per-module artifacts.
#[derive(Clone, Debug)]
pub struct StructureOutput {
    pub features: Var,
    pub masks: Vec<Var>,
    pub semantic_logits: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Cascade {
    modules: Vec<DcaModule>,
    project: ConvBn,
    tap: FinalTap,
}

impl Cascade {
    /// Semantic supervision, when enabled, sits on the last module only.
    pub fn new<T: Scalar>(
        init: &mut Init<'_, T>,
        in_channels: usize,
        width: usize,
        schedule: &ScaleSchedule,
        tap: FinalTap,
        semantic: Option<(usize, usize)>,
    ) -> Result<Self> {
        schedule.validate()?;
        let n = schedule.len();
        let configs: Vec<DcaConfig> = schedule
            .0
            .iter()
            .enumerate()
            .map(|(i, &r)| {
                let (c, s) = if i == 0 { (in_channels, in_channels) } else { (2 * width, width) };
                let cfg = DcaConfig::new(c, s, width, r);
                match semantic {
                    Some((k, sw)) if i + 1 == n => cfg.with_semantic_head(k, sw),
                    _ => cfg,
                }
            })
            .collect();
        check_chain(&configs, in_channels, in_channels)?;
        let modules = configs
            .into_iter()
            .enumerate()
            .map(|(i, cfg)| DcaModule::new(&mut init.scope(&format!("dca{}", i + 1)), cfg))
            .collect::<Result<Vec<_>>>()?;
        let tap_channels = match tap {
            FinalTap::Context => 2 * width,
            FinalTap::Spatial => width,
        };
        let project = ConvBn::new(&mut init.scope("project"), tap_channels, width, 1, Conv2dSpec::default(), true)?;
        Ok(Self { modules, project, tap })
    }

    pub fn modules(&self) -> &[DcaModule] {
        &self.modules
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<'_, T>, x: Var) -> Result<StructureOutput> {
        let mut pair = PathwayPair::shared(x);
        let mut masks = Vec::with_capacity(self.modules.len());
        let mut semantic_logits = Vec::new();
        for m in &self.modules {
            let out = m.forward(cx, pair)?;
            pair = out.pair;
            masks.push(out.mask);
            semantic_logits.extend(out.semantic_logits);
        }
        let tapped = match self.tap {
            FinalTap::Context => pair.context,
            FinalTap::Spatial => pair.spatial,
        };
        let features = self.project.forward(cx, tapped)?;
        Ok(StructureOutput { features, masks, semantic_logits })
    }
}

#[derive(Clone, Debug)]
pub struct Pyramid {
    reduce: ConvBn,
    branches: Vec<Vec<DcaModule>>,
    project: ConvBn,
    width: usize,
}

impl Pyramid {
    /// A shared 3x3 reduction feeds every branch; each branch cascades
    /// `modules_per_branch` modules at one scale. Semantic supervision sits on
    /// the last module of each branch.
    pub fn new<T: Scalar>(
        init: &mut Init<'_, T>,
        in_channels: usize,
        width: usize,
        branch_scales: &ScaleSchedule,
        modules_per_branch: usize,
        semantic: Option<(usize, usize)>,
    ) -> Result<Self> {
        if branch_scales.is_empty() {
            return Err(invalid("pyramid needs at least one branch"));
        }
        branch_scales.validate()?;
        if modules_per_branch < 1 {
            return Err(invalid("pyramid branches need at least one module"));
        }
        let reduce = ConvBn::new(&mut init.scope("reduce"), in_channels, width, 3, Conv2dSpec::same(3, 1), true)?;
        let mut branches = Vec::with_capacity(branch_scales.len());
        for (b, &r) in branch_scales.0.iter().enumerate() {
            let configs: Vec<DcaConfig> = (0..modules_per_branch)
                .map(|i| {
                    let c = if i == 0 { width } else { 2 * width };
                    let cfg = DcaConfig::new(c, width, width, r);
                    match semantic {
                        Some((k, sw)) if i + 1 == modules_per_branch => cfg.with_semantic_head(k, sw),
                        _ => cfg,
                    }
                })
                .collect();
            check_chain(&configs, width, width)?;
            let mut scope = init.scope(&format!("branch{}", b + 1));
            let modules = configs
                .into_iter()
                .enumerate()
                .map(|(i, cfg)| DcaModule::new(&mut scope.scope(&format!("dca{}", i + 1)), cfg))
                .collect::<Result<Vec<_>>>()?;
            branches.push(modules);
        }
        let project = ConvBn::new(
            &mut init.scope("project"),
            width * branch_scales.len(),
            width,
            1,
            Conv2dSpec::default(),
            true,
        )?;
        Ok(Self { reduce, branches, project, width })
    }

    pub fn branches(&self) -> &[Vec<DcaModule>] {
        &self.branches
    }

    pub fn concat_channels(&self) -> usize {
        self.width * self.branches.len()
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<'_, T>, x: Var) -> Result<StructureOutput> {
        let order: Vec<usize> = (0..self.branches.len()).collect();
        self.forward_in_order(cx, x, &order)
    }

    /// Evaluates branches in `order`; outputs are always assembled in branch
    /// index order, so the result does not depend on `order`.
    pub fn forward_in_order<T: Scalar>(&self, cx: &Ctx<'_, T>, x: Var, order: &[usize]) -> Result<StructureOutput> {
        let mut sorted = order.to_vec();
        sorted.sort_unstable();
        if sorted != (0..self.branches.len()).collect::<Vec<_>>() {
            return Err(invalid(format!("branch order {order:?} is not a permutation")));
        }
        let reduced = self.reduce.forward(cx, x)?;
        let mut results: Vec<Option<(Var, Vec<Var>, Vec<Var>)>> = vec![None; self.branches.len()];
        for &b in order {
            let mut pair = PathwayPair::shared(reduced);
            let mut masks = Vec::new();
            let mut sem = Vec::new();
            for m in &self.branches[b] {
                let out = m.forward(cx, pair)?;
                pair = out.pair;
                masks.push(out.mask);
                sem.extend(out.semantic_logits);
            }
            results[b] = Some((pair.spatial, masks, sem));
        }
        let mut spatial = Vec::new();
        let mut masks = Vec::new();
        let mut semantic_logits = Vec::new();
        for (s, m, l) in results.into_iter().flatten() {
            spatial.push(s);
            masks.extend(m);
            semantic_logits.extend(l);
        }
        let concat = cx.tape.concat_channels(&spatial)?;
        let features = self.project.forward(cx, concat)?;
        Ok(StructureOutput { features, masks, semantic_logits })
    }
}

/// conv-BN-ReLU, conv-BN, plus identity; no activation after the sum.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    first: ConvBn,
    second: ConvBn,
}

impl ResidualBlock {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, width: usize) -> Result<Self> {
        Ok(Self {
            first: ConvBn::new(&mut init.scope("0"), width, width, 3, Conv2dSpec::same(3, 1), true)?,
            second: ConvBn::new(&mut init.scope("1"), width, width, 3, Conv2dSpec::same(3, 1), false)?,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.first.forward(cx, x)?;
        let y = self.second.forward(cx, y)?;
        Ok(cx.tape.add(y, x)?)
    }
}

/// Cascaded residual structure: a 3x3 reduction to `width` followed by
/// `depth` plain residual blocks.
#[derive(Clone, Debug)]
pub struct CrsBaseline {
    reduce: ConvBn,
    blocks: Vec<ResidualBlock>,
}

impl CrsBaseline {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, in_channels: usize, width: usize, depth: usize) -> Result<Self> {
        if depth < 1 {
            return Err(invalid("CRS depth must be at least 1"));
        }
        let reduce = ConvBn::new(&mut init.scope("reduce"), in_channels, width, 3, Conv2dSpec::same(3, 1), true)?;
        let blocks = (0..depth)
            .map(|i| ResidualBlock::new(&mut init.scope(&format!("block{}", i + 1)), width))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { reduce, blocks })
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<'_, T>, x: Var) -> Result<StructureOutput> {
        let mut y = self.reduce.forward(cx, x)?;
        for b in &self.blocks {
            y = b.forward(cx, y)?;
        }
        Ok(StructureOutput { features: y, masks: Vec::new(), semantic_logits: Vec::new() })
    }
}

#[derive(Clone, Debug)]
pub enum Structure {
    Crs(CrsBaseline),
    Cascade(Cascade),
    Pyramid(Pyramid),
}

impl Structure {
    /// `None` for [`StructureKind::None`].
    pub fn build<T: Scalar>(
        init: &mut Init<'_, T>,
        cfg: &StructureConfig,
        in_channels: usize,
        num_classes: usize,
    ) -> Result<Option<Self>> {
        if cfg.kind != StructureKind::None && cfg.width < 1 {
            return Err(invalid("structure width must be positive"));
        }
        let semantic = cfg.semantic_supervision.then_some((num_classes, cfg.semantic_width));
        let mut scope = init.scope("structure");
        Ok(match cfg.kind {
            StructureKind::None => None,
            StructureKind::Crs => Some(Self::Crs(CrsBaseline::new(&mut scope, in_channels, cfg.width, cfg.crs_depth())?)),
            StructureKind::Cascade => Some(Self::Cascade(Cascade::new(
                &mut scope,
                in_channels,
                cfg.width,
                &cfg.schedule(),
                cfg.final_tap,
                semantic,
            )?)),
            StructureKind::Pyramid => Some(Self::Pyramid(Pyramid::new(
                &mut scope,
                in_channels,
                cfg.width,
                &cfg.schedule(),
                cfg.modules_per_branch,
                semantic,
            )?)),
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<'_, T>, x: Var) -> Result<StructureOutput> {
        match self {
            Self::Crs(s) => s.forward(cx, x),
            Self::Cascade(s) => s.forward(cx, x),
            Self::Pyramid(s) => s.forward(cx, x),
        }
    }

    /// All DCA modules in evaluation order (branch-major for the pyramid).
    pub fn dca_modules(&self) -> Vec<&DcaModule> {
        match self {
            Self::Crs(_) => Vec::new(),
            Self::Cascade(c) => c.modules().iter().collect(),
            Self::Pyramid(p) => p.branches().iter().flatten().collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::{cascade_gradient_check, random_tensor, randomize_normalization};
    use crate::dca::ForwardOptions;
    use dca_tensor::{ParamStore, Tape, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fixture(seed: u64) -> (ParamStore<f32>, ChaCha8Rng) {
        (ParamStore::new(), ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn default_schedules() {
        assert_eq!(ScaleSchedule::cascade_default().0, [1, 4, 8, 16]);
        assert_eq!(ScaleSchedule::pyramid_default().0, [1, 2, 3, 6]);
        assert!(CASCADE_SCALES.windows(2).all(|w| w[0] < w[1]));
        assert!(ScaleSchedule(vec![1, 0]).validate().is_err());
        let cfg = StructureConfig { kind: StructureKind::Pyramid, ..StructureConfig::default() };
        assert_eq!(cfg.schedule().0, PYRAMID_SCALES);
    }

    #[test]
    fn cascade_reference_shapes() {
        let (mut store, mut rng) = fixture(1);
        let c = Cascade::new(&mut Init::new(&mut store, &mut rng), 2048, 512, &ScaleSchedule::cascade_default(), FinalTap::Context, None)
            .unwrap();
        assert_eq!(c.modules()[0].config().in_channels_context, 2048);
        for m in &c.modules()[1..] {
            assert_eq!((m.config().in_channels_context, m.config().in_channels_spatial), (1024, 512));
        }
        let tape = Tape::inference();
        let cx = Ctx::new(&tape, &store);
        let out = c.forward(&cx, tape.input(Tensor::ones(&[2, 2048, 16, 16]), false)).unwrap();
        assert_eq!(tape.shape(out.features), [2, 512, 16, 16]);
        assert_eq!(out.masks.len(), 4);
    }

    #[test]
    fn single_module_cascade_is_module_plus_projection() {
        let (mut store, mut rng) = fixture(2);
        let c = Cascade::new(&mut Init::new(&mut store, &mut rng), 5, 4, &ScaleSchedule(vec![2]), FinalTap::Context, None).unwrap();
        randomize_normalization(&mut store, &mut rng);
        let x: Tensor<f32> = random_tensor(&mut rng, &[1, 5, 6, 6]);
        let tape = Tape::inference();
        let cx = Ctx::new(&tape, &store);
        let xv = tape.input(x, false);
        let whole = tape.value(c.forward(&cx, xv).unwrap().features);
        let by_hand = c.modules[0].forward(&cx, PathwayPair::shared(xv)).unwrap();
        let by_hand = tape.value(c.project.forward(&cx, by_hand.pair.context).unwrap());
        assert_eq!(*whole, *by_hand);
    }

    #[test]
    fn spatial_tap_uses_width_channels() {
        let (mut store, mut rng) = fixture(3);
        let c = Cascade::new(&mut Init::new(&mut store, &mut rng), 5, 4, &ScaleSchedule(vec![1, 2]), FinalTap::Spatial, Some((3, 2)))
            .unwrap();
        let tape = Tape::new(true);
        let cx = Ctx::new(&tape, &store);
        let out = c.forward(&cx, tape.input(Tensor::ones(&[1, 5, 4, 4]), false)).unwrap();
        assert_eq!(tape.shape(out.features), [1, 4, 4, 4]);
        assert_eq!(out.semantic_logits.len(), 1);
    }

    #[test]
    fn pyramid_reference_shapes() {
        let (mut store, mut rng) = fixture(4);
        let p = Pyramid::new(&mut Init::new(&mut store, &mut rng), 2048, 512, &ScaleSchedule::pyramid_default(), 2, Some((21, 256)))
            .unwrap();
        assert_eq!(p.concat_channels(), 2048);
        assert_eq!(p.branches().len(), 4);
        assert!(p.branches().iter().all(|b| b[1].config().in_channels_context == 1024));
        let tape = Tape::inference();
        let cx = Ctx::new(&tape, &store);
        let out = p.forward(&cx, tape.input(Tensor::ones(&[2, 2048, 16, 16]), false)).unwrap();
        assert_eq!(tape.shape(out.features), [2, 512, 16, 16]);
        assert_eq!(out.masks.len(), 8);
        assert_eq!(out.semantic_logits.len(), 4);
    }

    #[test]
    fn degenerate_pyramid_passes_reduced_input() {
        let (mut store, mut rng) = fixture(5);
        let p = Pyramid::new(&mut Init::new(&mut store, &mut rng), 3, 4, &ScaleSchedule(vec![2]), 1, None).unwrap();
        randomize_normalization(&mut store, &mut rng);
        let ids: Vec<_> = store.ids().filter(|&id| store.name(id).starts_with("branch")).collect();
        for id in ids {
            if store.name(id).ends_with("weight") || store.name(id).ends_with("bias") {
                store.get_mut(id).data_mut().fill(0.0);
            }
        }
        let tape = Tape::inference();
        let cx = Ctx::new(&tape, &store).with_options(ForwardOptions { mask_override: Some(0.0), ..Default::default() });
        let x = tape.input(random_tensor(&mut rng, &[1, 3, 6, 6]), false);
        let got = tape.value(p.forward(&cx, x).unwrap().features);
        let reduced = p.reduce.forward(&cx, x).unwrap();
        let want = tape.value(p.project.forward(&cx, reduced).unwrap());
        assert_eq!(*got, *want);
    }

    #[test]
    fn branch_order_does_not_matter() {
        let (mut store, mut rng) = fixture(6);
        let p = Pyramid::new(&mut Init::new(&mut store, &mut rng), 3, 4, &ScaleSchedule::pyramid_default(), 2, Some((3, 2))).unwrap();
        randomize_normalization(&mut store, &mut rng);
        let x: Tensor<f32> = random_tensor(&mut rng, &[2, 3, 6, 6]);
        let run = |order: &[usize]| {
            let tape = Tape::inference();
            let cx = Ctx::new(&tape, &store);
            let out = p.forward_in_order(&cx, tape.input(x.clone(), false), order).unwrap();
            (*tape.value(out.features)).clone()
        };
        let base = run(&[0, 1, 2, 3]);
        for order in [[3, 2, 1, 0], [1, 3, 0, 2]] {
            assert!(run(&order).max_abs_diff(&base).unwrap() <= 1e-6);
        }
        let tape = Tape::<f32>::inference();
        let cx = Ctx::new(&tape, &store);
        assert!(p.forward_in_order(&cx, tape.input(x.clone(), false), &[0, 0, 1, 2]).is_err());
    }

    #[test]
    fn invalid_structures_are_rejected() {
        let (mut store, mut rng) = fixture(7);
        let mut init = Init::new(&mut store, &mut rng);
        assert!(Pyramid::new(&mut init, 3, 4, &ScaleSchedule(vec![]), 2, None).is_err());
        assert!(Pyramid::new(&mut init, 3, 4, &ScaleSchedule(vec![1]), 0, None).is_err());
        assert!(Cascade::new(&mut init, 3, 4, &ScaleSchedule(vec![1, 0]), FinalTap::Context, None).is_err());
        assert!(CrsBaseline::new(&mut init, 3, 4, 0).is_err());
    }

    #[test]
    fn crs_reference_shape_and_zero_blocks() {
        let (mut store, mut rng) = fixture(8);
        let crs = CrsBaseline::new(&mut Init::new(&mut store, &mut rng), 2048, 512, 4).unwrap();
        let tape = Tape::inference();
        let cx = Ctx::new(&tape, &store);
        let out = crs.forward(&cx, tape.input(Tensor::ones(&[2, 2048, 16, 16]), false)).unwrap();
        assert_eq!(tape.shape(out.features), [2, 512, 16, 16]);
        assert!(out.masks.is_empty());

        let (mut store, mut rng) = fixture(9);
        let crs = CrsBaseline::new(&mut Init::new(&mut store, &mut rng), 3, 4, 4).unwrap();
        let ids: Vec<_> = store.ids().filter(|&id| store.name(id).starts_with("block")).collect();
        for id in ids {
            if store.name(id).ends_with("weight") {
                store.get_mut(id).data_mut().fill(0.0);
            }
        }
        let tape = Tape::inference();
        let cx = Ctx::new(&tape, &store);
        let x = tape.input(random_tensor(&mut rng, &[1, 3, 5, 5]), false);
        let reduced = tape.value(crs.reduce.forward(&cx, x).unwrap());
        assert_eq!(*tape.value(crs.forward(&cx, x).unwrap().features), *reduced);
    }

    #[test]
    fn build_dispatches_on_kind() {
        for (kind, masks) in [(StructureKind::None, None), (StructureKind::Crs, Some(0)), (StructureKind::Cascade, Some(4)), (StructureKind::Pyramid, Some(8))] {
            let (mut store, mut rng) = fixture(10);
            let cfg = StructureConfig { kind, width: 4, semantic_width: 4, ..StructureConfig::default() };
            let s = Structure::build(&mut Init::new(&mut store, &mut rng), &cfg, 6, 3).unwrap();
            assert_eq!(s.as_ref().map(|s| s.dca_modules().len()), masks, "{kind:?}");
        }
        assert_eq!("pyramid".parse::<StructureKind>().unwrap(), StructureKind::Pyramid);
        assert!("resnet".parse::<StructureKind>().is_err());
    }

    #[test]
    fn toy_cascade_gradients() {
        let r = cascade_gradient_check(1).unwrap();
        assert!(r.passed(), "max rel error {} at {}", r.max_rel_error, r.worst);
    }
}

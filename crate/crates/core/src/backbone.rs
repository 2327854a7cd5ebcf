//! Dilated residual backbones with output stride 8.
//!
//! The last two stages keep their stride at 1 and dilate their 3x3
//! convolutions by 2 and 4 instead. Every strided layer maps a side of length
//! `h` to `ceil(h / 2)`, so the final map is `ceil(H / 8)` on each side for
//! any input size.

use dca_tensor::{Conv2dSpec, Scalar, Var};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::layers::{ConvBn, Ctx, Init};

pub const OUTPUT_STRIDE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Basic,
    Bottleneck,
}

impl BlockKind {
    pub fn expansion(self) -> usize {
        match self {
            Self::Basic => 1,
            Self::Bottleneck => 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stem {
    /// 3x3 stride-2 convolution.
    Small,
    /// 7x7 stride-2 convolution and 3x3 stride-2 max pooling.
    Large,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub block: BlockKind,
    pub stem: Stem,
    pub stem_channels: usize,
    /// Inner width of each stage; the stage outputs `width * expansion` channels.
    pub stage_widths: [usize; 4],
    pub blocks: [usize; 4],
    pub strides: [usize; 4],
    pub dilations: [usize; 4],
}

/// Named backbone sizes used by experiment configs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackbonePreset {
    /// Four basic-block stages at 32/64/128/256 channels.
    Toy,
    /// Half-width toy backbone for quick experiments.
    #[default]
    Desk,
    /// ResNet-101 layout: bottleneck stages [3, 4, 23, 3], 2048 output channels.
    Resnet101,
}

impl BackbonePreset {
    pub fn config(self) -> BackboneConfig {
        match self {
            Self::Toy => BackboneConfig {
                block: BlockKind::Basic,
                stem: Stem::Small,
                stem_channels: 32,
                stage_widths: [32, 64, 128, 256],
                blocks: [1, 1, 1, 1],
                strides: [2, 2, 1, 1],
                dilations: [1, 1, 2, 4],
            },
            Self::Desk => BackboneConfig {
                block: BlockKind::Basic,
                stem: Stem::Small,
                stem_channels: 16,
                stage_widths: [16, 32, 64, 128],
                blocks: [1, 1, 1, 1],
                strides: [2, 2, 1, 1],
                dilations: [1, 1, 2, 4],
            },
            Self::Resnet101 => BackboneConfig {
                block: BlockKind::Bottleneck,
                stem: Stem::Large,
                stem_channels: 64,
                stage_widths: [64, 128, 256, 512],
                blocks: [3, 4, 23, 3],
                strides: [1, 2, 1, 1],
                dilations: [1, 1, 2, 4],
            },
        }
    }
}

impl BackboneConfig {
    pub fn stage_channels(&self, stage: usize) -> usize {
        self.stage_widths[stage] * self.block.expansion()
    }

    pub fn out_channels(&self) -> usize {
        self.stage_channels(3)
    }

    /// Channels of the penultimate stage, which feeds the auxiliary head.
    pub fn aux_channels(&self) -> usize {
        self.stage_channels(2)
    }

    pub fn total_stride(&self) -> usize {
        let stem = match self.stem {
            Stem::Small => 2,
            Stem::Large => 4,
        };
        stem * self.strides.iter().product::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_stride() != OUTPUT_STRIDE {
            return Err(invalid(format!("backbone output stride is {}, expected {OUTPUT_STRIDE}", self.total_stride())));
        }
        if self.blocks.contains(&0) || self.stage_widths.contains(&0) || self.stem_channels == 0 {
            return Err(invalid("backbone stages need at least one block and positive widths"));
        }
        if self.strides.iter().chain(&self.dilations).any(|&v| v == 0) {
            return Err(invalid("backbone strides and dilations must be positive"));
        }
        Ok(())
    }

    /// Spatial size of the final map for an input side of `side`.
    pub fn output_side(side: usize) -> usize {
        side.div_ceil(OUTPUT_STRIDE)
    }
}

#[derive(Clone, Debug)]
struct Block {
    convs: Vec<ConvBn>,
    shortcut: Option<ConvBn>,
}

impl Block {
    fn new<T: Scalar>(
        init: &mut Init<'_, T>,
        kind: BlockKind,
        in_channels: usize,
        width: usize,
        stride: usize,
        dilation: usize,
    ) -> Result<Self> {
        let out = width * kind.expansion();
        let dilated = Conv2dSpec { stride, padding: dilation, dilation };
        let convs = match kind {
            BlockKind::Basic => vec![
                ConvBn::new(&mut init.scope("conv1"), in_channels, width, 3, dilated, true)?,
                ConvBn::new(&mut init.scope("conv2"), width, width, 3, Conv2dSpec::same(3, dilation), false)?,
            ],
            BlockKind::Bottleneck => vec![
                ConvBn::new(&mut init.scope("conv1"), in_channels, width, 1, Conv2dSpec::default(), true)?,
                ConvBn::new(&mut init.scope("conv2"), width, width, 3, dilated, true)?,
                ConvBn::new(&mut init.scope("conv3"), width, out, 1, Conv2dSpec::default(), false)?,
            ],
        };
        let shortcut = if stride != 1 || in_channels != out {
            let spec = Conv2dSpec { stride, padding: 0, dilation: 1 };
            Some(ConvBn::new(&mut init.scope("downsample"), in_channels, out, 1, spec, false)?)
        } else {
            None
        };
        Ok(Self { convs, shortcut })
    }

    fn forward<T: Scalar>(&self, cx: &Ctx<'_, T>, x: Var) -> Result<Var> {
        let mut y = x;
        for c in &self.convs {
            y = c.forward(cx, y)?;
        }
        let skip = match &self.shortcut {
            Some(s) => s.forward(cx, x)?,
            None => x,
        };
        Ok(cx.tape.relu(cx.tape.add(y, skip)?))
    }
}

#[derive(Clone, Debug)]
pub struct BackboneFeatures {
    /// Penultimate-stage output.
    pub aux: Var,
    pub main: Var,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    cfg: BackboneConfig,
    stem: ConvBn,
    stages: Vec<Vec<Block>>,
}

impl Backbone {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let mut scope = init.scope("backbone");
        let stem = match cfg.stem {
            Stem::Small => ConvBn::new(&mut scope.scope("stem"), 3, cfg.stem_channels, 3, Conv2dSpec { stride: 2, padding: 1, dilation: 1 }, true)?,
            Stem::Large => ConvBn::new(&mut scope.scope("stem"), 3, cfg.stem_channels, 7, Conv2dSpec { stride: 2, padding: 3, dilation: 1 }, true)?,
        };
        let mut in_c = cfg.stem_channels;
        let mut stages = Vec::with_capacity(4);
        for s in 0..4 {
            let mut blocks = Vec::with_capacity(cfg.blocks[s]);
            for b in 0..cfg.blocks[s] {
                let stride = if b == 0 { cfg.strides[s] } else { 1 };
                let mut bs = scope.scope(&format!("layer{}.{b}", s + 1));
                blocks.push(Block::new(&mut bs, cfg.block, in_c, cfg.stage_widths[s], stride, cfg.dilations[s])?);
                in_c = cfg.stage_channels(s);
            }
            stages.push(blocks);
        }
        Ok(Self { cfg: cfg.clone(), stem, stages })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<'_, T>, images: Var) -> Result<BackboneFeatures> {
        let mut x = self.stem.forward(cx, images)?;
        if self.cfg.stem == Stem::Large {
            x = cx.tape.max_pool(x, 3, 2, 1)?;
        }
        let mut aux = x;
        for (s, blocks) in self.stages.iter().enumerate() {
            for b in blocks {
                x = b.forward(cx, x)?;
            }
            if s == 2 {
                aux = x;
            }
        }
        Ok(BackboneFeatures { aux, main: x })
    }
}

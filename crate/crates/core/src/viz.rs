//! Attention-mask export: one grayscale PNG per DCA module.
//!
//! Each mask is averaged over channels, bilinearly upsampled to the input
//! image size and mapped from (0, 1) to 0..=255. Cascade files are named
//! `mask_cascade_dca{i}.png`; pyramid files `mask_pyramid_b{b}_dca{i}.png`.

use std::fs;
use std::path::{Path, PathBuf};

use dca_tensor::kernels::resize_bilinear;
use dca_tensor::Tensor;

use crate::data::{write_image, write_labels, write_png};
use crate::error::{invalid, Result};
use crate::network::{argmax_labels, Model};
use crate::structures::StructureKind;
use crate::train::normalize;

pub const PREDICTION_FILE: &str = "prediction.png";
pub const INPUT_FILE: &str = "input.png";

/// File stem for mask `index` (0-based, in forward order) of a structure.
pub fn mask_name(kind: StructureKind, modules_per_branch: usize, index: usize) -> String {
    match kind {
        StructureKind::Pyramid => {
            format!("mask_pyramid_b{}_dca{}", index / modules_per_branch + 1, index % modules_per_branch + 1)
        }
        other => format!("mask_{}_dca{}", other.name(), index + 1),
    }
}

/// Maps values in [0, 1] to bytes, clamping anything outside.
pub fn to_gray(values: &[f32]) -> Vec<u8> {
    values.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

/// Channel mean of a `[1, C, h, w]` mask, resized to `out` -> `[1, 1, H, W]`.
pub fn mask_plane(mask: &Tensor<f32>, out: (usize, usize)) -> Result<Tensor<f32>> {
    let (n, c, h, w) = mask.dims4()?;
    if n != 1 {
        return Err(invalid(format!("expected one mask, got a batch of {n}")));
    }
    let mut mean = vec![0f32; h * w];
    for ch in mask.data().chunks(h * w).take(c) {
        for (m, &v) in mean.iter_mut().zip(ch) {
            *m += v / c as f32;
        }
    }
    Ok(resize_bilinear(&Tensor::from_vec(&[1, 1, h, w], mean)?, out.0, out.1)?)
}

#[derive(Clone, Debug, Default)]
pub struct VizOptions {
    /// Also write every channel of every mask.
    pub per_channel: bool,
}

#[derive(Clone, Debug)]
pub struct VizOutput {
    pub masks: Vec<PathBuf>,
    pub prediction: PathBuf,
}

/// Writes the masks of every DCA module for one `[3, H, W]` image, the input
/// itself and the predicted label map.
pub fn export_masks(model: &Model, image: &Tensor<f32>, out_dir: &Path, opts: &VizOptions) -> Result<VizOutput> {
    if !model.has_masks() {
        return Err(invalid("no masks in baseline"));
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    fs::create_dir_all(out_dir)?;
    let x = normalize(image);
    let cfg = &model.config().structure;
    let mut paths = Vec::new();
    for (i, m) in model.masks(&x)?.iter().enumerate() {
        let stem = mask_name(cfg.kind, cfg.modules_per_branch, i);
        let plane = mask_plane(m, (h, w))?;
        let path = out_dir.join(format!("{stem}.png"));
        write_png(&path, w, h, png::ColorType::Grayscale, &to_gray(plane.data()))?;
        paths.push(path);
        if opts.per_channel {
            let (_, c, mh, mw) = m.dims4()?;
            for ch in 0..c {
                let one = Tensor::from_vec(&[1, 1, mh, mw], m.data()[ch * mh * mw..(ch + 1) * mh * mw].to_vec())?;
                let up = resize_bilinear(&one, h, w)?;
                write_png(&out_dir.join(format!("{stem}_c{ch}.png")), w, h, png::ColorType::Grayscale, &to_gray(up.data()))?;
            }
        }
    }
    write_image(&out_dir.join(INPUT_FILE), image)?;
    let labels = argmax_labels(&model.probabilities(&x)?)?;
    let prediction = out_dir.join(PREDICTION_FILE);
    write_labels(&prediction, w, h, &labels)?;
    Ok(VizOutput { masks: paths, prediction })
}
